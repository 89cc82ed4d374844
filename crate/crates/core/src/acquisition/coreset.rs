use std::collections::BTreeMap;

use super::{check_k, Pick};
use crate::Result;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Greedy k-center: repeatedly take the unlabeled sample farthest from the
/// labeled set plus everything picked so far. The score is that min-distance
/// at the time of picking.
pub fn acquire_coreset(
    labeled: &BTreeMap<usize, Vec<f64>>,
    unlabeled: &BTreeMap<usize, Vec<f64>>,
    k: usize,
) -> Result<Vec<Pick>> {
    check_k(k, unlabeled.len())?;
    let ids: Vec<usize> = unlabeled.keys().copied().collect();
    let points: Vec<&Vec<f64>> = unlabeled.values().collect();
    let mut min_dist: Vec<f64> = points
        .iter()
        .map(|p| {
            labeled
                .values()
                .map(|l| dist(p, l))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut taken = vec![false; ids.len()];
    let mut picks = Vec::with_capacity(k);
    for _ in 0..k {
        // ids are ascending, so strict `>` keeps the lowest id on ties
        let mut best: Option<usize> = None;
        for i in 0..ids.len() {
            if !taken[i] && best.is_none_or(|b| min_dist[i] > min_dist[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        taken[b] = true;
        picks.push(Pick {
            id: ids[b],
            score: Some(min_dist[b]),
        });
        let center = points[b];
        for (i, p) in points.iter().enumerate() {
            if !taken[i] {
                min_dist[i] = min_dist[i].min(dist(p, center));
            }
        }
    }
    Ok(picks)
}
