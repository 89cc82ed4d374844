use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_k, Pick};
use crate::tracker::ScoreRow;
use crate::{Error, Result};

pub const MAX_LLOYD_ITERS: usize = 100;
pub const LLOYD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiverseMode {
    /// k-means++ seeding followed by Lloyd iterations.
    #[default]
    FullLloyd,
    /// Use the k-means++ seeds directly as centroids.
    SeedingOnly,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// k-means++ seeding: first seed uniform, then each next seed drawn with
/// probability proportional to its squared distance to the closest seed.
/// When every remaining point coincides with a seed, the next seed is the
/// lowest unused index.
pub fn kmeans_pp_seeds<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    check_k(k, points.len())?;
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut seeds = vec![rng.random_range(0..points.len())];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[seeds[0]])).collect();
    while seeds.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            Err(_) => (0..points.len())
                .find(|i| !seeds.contains(i))
                .ok_or_else(|| Error::Internal("ran out of seed candidates".into()))?,
        };
        seeds.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }
    Ok(seeds)
}

/// Lloyd iterations until the largest centroid shift drops below
/// [`LLOYD_TOL`], assignments stop changing, or [`MAX_LLOYD_ITERS`] passes.
/// Empty clusters keep their previous centroid.
pub fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let dim = centroids.first().map_or(0, Vec::len);
    let mut assignment: Vec<usize> = vec![usize::MAX; points.len()];
    for _ in 0..MAX_LLOYD_ITERS {
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        let unchanged = next == assignment;
        assignment = next;
        if unchanged {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, c) in points.iter().zip(&assignment) {
            counts[*c] += 1;
            for (s, v) in sums[*c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for ((centroid, sum), count) in centroids.iter_mut().zip(sums).zip(counts) {
            if count == 0 {
                continue;
            }
            let updated: Vec<f64> = sum.into_iter().map(|s| s / count as f64).collect();
            shift = shift.max(sq_dist(centroid, &updated).sqrt());
            *centroid = updated;
        }
        if shift < LLOYD_TOL {
            break;
        }
    }
    centroids
}

/// Diverse acquisition over `score * embedding` vectors.
///
/// After clustering, each centroid claims its nearest sample; duplicates are
/// dropped and the shortfall is filled by cycling over the centroids in order,
/// each taking its nearest still-unused sample.
pub fn acquire_diverse<R: Rng + ?Sized>(
    scores: &[ScoreRow],
    embeddings: &BTreeMap<usize, Vec<f64>>,
    k: usize,
    mode: DiverseMode,
    rng: &mut R,
) -> Result<Vec<Pick>> {
    if k == 0 {
        return Err(Error::input("K must be >= 1"));
    }
    check_k(k, scores.len())?;
    let mut ids = Vec::with_capacity(scores.len());
    let mut points = Vec::with_capacity(scores.len());
    for row in scores {
        let emb = embeddings
            .get(&row.sample_id)
            .ok_or_else(|| Error::input(format!("no embedding for sample {}", row.sample_id)))?;
        ids.push(row.sample_id);
        points.push(emb.iter().map(|v| row.score * v).collect::<Vec<f64>>());
    }

    let seeds = kmeans_pp_seeds(&points, k, rng)?;
    let mut centroids: Vec<Vec<f64>> = seeds.iter().map(|i| points[*i].clone()).collect();
    if mode == DiverseMode::FullLloyd {
        centroids = lloyd(&points, centroids);
    }

    // per-centroid candidate order: nearest first, ties to lower id
    let ranked: Vec<Vec<usize>> = centroids
        .iter()
        .map(|c| {
            let mut order: Vec<usize> = (0..points.len()).collect();
            order.sort_by(|a, b| {
                sq_dist(&points[*a], c)
                    .total_cmp(&sq_dist(&points[*b], c))
                    .then(ids[*a].cmp(&ids[*b]))
            });
            order
        })
        .collect();

    let mut used = BTreeSet::new();
    let mut picks = Vec::with_capacity(k);
    for order in &ranked {
        if used.insert(order[0]) {
            picks.push(order[0]);
        }
    }
    let mut cursors = vec![0usize; ranked.len()];
    while picks.len() < k {
        for (c, order) in ranked.iter().enumerate() {
            if picks.len() == k {
                break;
            }
            while cursors[c] < order.len() && used.contains(&order[cursors[c]]) {
                cursors[c] += 1;
            }
            if let Some(idx) = order.get(cursors[c]) {
                used.insert(*idx);
                picks.push(*idx);
            }
        }
    }
    Ok(picks
        .into_iter()
        .map(|i| Pick {
            id: ids[i],
            score: Some(scores[i].score),
        })
        .collect())
}
