//! Post-hoc diagnostics over logged training runs.

use std::collections::BTreeMap;

use crate::{Error, Result};

/// What one snapshot recorded about one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotEntry {
    pub label: usize,
    pub uncertainty: f64,
    pub max_prob: f64,
}

/// Per-sample predictions captured at fixed training steps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SnapshotSeries {
    steps: Vec<usize>,
    samples: BTreeMap<usize, Vec<SnapshotEntry>>,
}

impl SnapshotSeries {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one snapshot. Every snapshot must cover the same ids.
    pub fn push(&mut self, step: usize, entries: impl IntoIterator<Item = (usize, SnapshotEntry)>) -> Result<()> {
        let mut count = 0;
        for (id, entry) in entries {
            let series = self.samples.entry(id).or_default();
            if series.len() != self.steps.len() {
                return Err(Error::input(format!("sample {id} missing from earlier snapshots")));
            }
            series.push(entry);
            count += 1;
        }
        if count != self.samples.len() {
            return Err(Error::input("snapshot does not cover every tracked sample"));
        }
        self.steps.push(step);
        Ok(())
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn samples(&self) -> &BTreeMap<usize, Vec<SnapshotEntry>> {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Uncertainty of every sample at snapshot `index`, in id order.
    pub fn uncertainties_at(&self, index: usize) -> Vec<f64> {
        self.samples.values().map(|s| s[index].uncertainty).collect()
    }
}

/// Number of adjacent label changes.
pub fn temporal_instability(labels: &[usize]) -> Result<usize> {
    if labels.is_empty() {
        return Err(Error::input("temporal instability needs at least one label"));
    }
    Ok(labels.windows(2).filter(|w| w[0] != w[1]).count())
}

/// Fractional ranks starting at 1; tied values share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for idx in &order[i..=j] {
            ranks[*idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average-rank ties. `Ok(None)` when either
/// input has no rank variance.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::input(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::input("spearman needs at least two pairs"));
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

/// Spearman correlation of uncertainty between each pair of consecutive
/// snapshots: `(from_step, to_step, rho)`.
pub fn consecutive_spearman(series: &SnapshotSeries) -> Vec<(usize, usize, Option<f64>)> {
    let steps = series.steps();
    (1..steps.len())
        .map(|i| {
            let rho = if series.len() >= 2 {
                spearman(&series.uncertainties_at(i - 1), &series.uncertainties_at(i))
                    .ok()
                    .flatten()
            } else {
                None
            };
            (steps[i - 1], steps[i], rho)
        })
        .collect()
}

/// Per-sample temporal instability and time-averaged uncertainty.
pub fn per_sample_instability(series: &SnapshotSeries) -> BTreeMap<usize, (usize, f64)> {
    series
        .samples()
        .iter()
        .filter(|(_, s)| !s.is_empty())
        .map(|(id, s)| {
            let labels: Vec<usize> = s.iter().map(|e| e.label).collect();
            let ti = temporal_instability(&labels).unwrap_or(0);
            let mean_u = s.iter().map(|e| e.uncertainty).sum::<f64>() / s.len() as f64;
            (*id, (ti, mean_u))
        })
        .collect()
}

/// Spearman correlation between TI and time-averaged uncertainty across the
/// pool.
pub fn ti_uncertainty_correlation(series: &SnapshotSeries) -> Option<f64> {
    let per = per_sample_instability(series);
    if per.len() < 2 {
        return None;
    }
    let ti: Vec<f64> = per.values().map(|(t, _)| *t as f64).collect();
    let u: Vec<f64> = per.values().map(|(_, u)| *u).collect();
    spearman(&ti, &u).ok().flatten()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiGroup {
    pub ti: usize,
    pub count: usize,
    pub mean_uncertainty: f64,
    /// Population standard deviation.
    pub std_uncertainty: f64,
}

/// Groups samples by TI and summarizes their time-averaged uncertainty.
pub fn ti_uncertainty_profile(series: &SnapshotSeries) -> Vec<TiGroup> {
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (ti, u) in per_sample_instability(series).into_values() {
        groups.entry(ti).or_default().push(u);
    }
    groups
        .into_iter()
        .map(|(ti, us)| {
            let n = us.len() as f64;
            let mean = us.iter().sum::<f64>() / n;
            let var = us.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / n;
            TiGroup {
                ti,
                count: us.len(),
                mean_uncertainty: mean,
                std_uncertainty: var.sqrt(),
            }
        })
        .collect()
}

/// How many snapshots saw each sample's max probability above `tau`.
pub fn pseudo_label_counts(series: &SnapshotSeries, tau: f64) -> BTreeMap<usize, usize> {
    series
        .samples()
        .iter()
        .map(|(id, s)| (*id, s.iter().filter(|e| e.max_prob > tau).count()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoRatio {
    pub top_n: usize,
    pub pseudo_labeled: usize,
    pub ratio: f64,
    /// Mean raw pseudo-label count over the top set.
    pub mean_count: f64,
}

/// Fraction of pseudo-labeled samples (max probability above `tau` in at
/// least one snapshot) among the top `ceil(top_frac * n)` samples by score,
/// where `n` is the number of scored samples in the series. Score ties go to
/// the lower id.
pub fn pseudo_labeled_ratio(
    series: &SnapshotSeries,
    scores: &BTreeMap<usize, f64>,
    top_frac: f64,
    tau: f64,
) -> Result<PseudoRatio> {
    if !(top_frac > 0.0 && top_frac <= 1.0) {
        return Err(Error::input(format!("top_frac must be in (0, 1], got {top_frac}")));
    }
    let counts = pseudo_label_counts(series, tau);
    let mut ranked: Vec<(usize, f64)> = scores
        .iter()
        .filter(|(id, _)| counts.contains_key(id))
        .map(|(id, s)| (*id, *s))
        .collect();
    if ranked.is_empty() {
        return Err(Error::input("no scored samples in the series"));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let top_n = ((top_frac * ranked.len() as f64).ceil() as usize).clamp(1, ranked.len());
    let top = &ranked[..top_n];
    let pseudo_labeled = top.iter().filter(|(id, _)| counts[id] >= 1).count();
    let mean_count = top.iter().map(|(id, _)| counts[id] as f64).sum::<f64>() / top_n as f64;
    Ok(PseudoRatio {
        top_n,
        pseudo_labeled,
        ratio: pseudo_labeled as f64 / top_n as f64,
        mean_count,
    })
}

/// `counts[i][j]` = number of settings where strategy `i` strictly beat
/// strategy `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseMatrix {
    pub strategies: Vec<String>,
    pub settings: usize,
    pub counts: Vec<Vec<usize>>,
}

impl PairwiseMatrix {
    /// Mean of each column: how often the others beat this strategy. Lower is
    /// better.
    pub fn column_means(&self) -> Vec<f64> {
        let n = self.strategies.len();
        (0..n)
            .map(|j| (0..n).map(|i| self.counts[i][j] as f64).sum::<f64>() / n as f64)
            .collect()
    }

    pub fn index_of(&self, strategy: &str) -> Option<usize> {
        self.strategies.iter().position(|s| s == strategy)
    }
}

pub fn pairwise_matrix(results: &BTreeMap<String, BTreeMap<String, f64>>) -> Result<PairwiseMatrix> {
    let strategies: Vec<String> = results.keys().cloned().collect();
    let settings: Vec<&String> = results
        .values()
        .next()
        .map(|m| m.keys().collect())
        .unwrap_or_default();
    for (name, m) in results {
        if m.len() != settings.len() || !settings.iter().all(|s| m.contains_key(*s)) {
            return Err(Error::input(format!("strategy `{name}` was evaluated on different settings")));
        }
    }
    let n = strategies.len();
    let mut counts = vec![vec![0; n]; n];
    for setting in &settings {
        let acc: Vec<f64> = strategies.iter().map(|s| results[s][*setting]).collect();
        for i in 0..n {
            for j in 0..n {
                if acc[i] > acc[j] {
                    counts[i][j] += 1;
                }
            }
        }
    }
    Ok(PairwiseMatrix {
        strategies,
        settings: settings.len(),
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(label: usize, u: f64, p: f64) -> SnapshotEntry {
        SnapshotEntry {
            label,
            uncertainty: u,
            max_prob: p,
        }
    }

    #[test]
    fn ti_examples() {
        assert_eq!(temporal_instability(&[1, 1, 1, 1]).unwrap(), 0);
        assert_eq!(temporal_instability(&[0, 1, 0, 1]).unwrap(), 3);
        assert_eq!(temporal_instability(&[1, 1, 2, 2, 1]).unwrap(), 2);
        assert_eq!(temporal_instability(&[4]).unwrap(), 0);
        assert!(temporal_instability(&[]).is_err());
    }

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &a).unwrap().unwrap() - 1.0).abs() < 1e-12);
        let rev = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&a, &rev).unwrap().unwrap() + 1.0).abs() < 1e-12);
        let b = [1.0, 3.0, 2.0, 4.0];
        assert!((spearman(&a, &b).unwrap().unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(spearman(&a, &[2.0; 4]).unwrap(), None);
        assert!(spearman(&a, &b[..3]).is_err());
        assert!(spearman(&a[..1], &b[..1]).is_err());
    }

    #[test]
    fn spearman_ties_use_average_ranks() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
        // Pearson on ranks [1, 2.5, 2.5, 4] vs [1, 2, 3, 4]
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap().unwrap();
        assert!((r - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-12);
    }

    fn constant_series(n: usize, snaps: usize) -> SnapshotSeries {
        let mut s = SnapshotSeries::new();
        for t in 0..snaps {
            s.push(t * 10, (0..n).map(|id| (id, entry(id % 2, 0.1, 0.99)))).unwrap();
        }
        s
    }

    #[test]
    fn constant_labels_form_one_group() {
        let profile = ti_uncertainty_profile(&constant_series(6, 4));
        assert_eq!(profile.len(), 1);
        assert_eq!(profile[0].ti, 0);
        assert_eq!(profile[0].count, 6);
    }

    #[test]
    fn unstable_samples_are_more_uncertain() {
        // TI = id % 4 by construction; uncertainty grows with instability
        let mut s = SnapshotSeries::new();
        let snaps = 6;
        for t in 0..snaps {
            let entries = (0..12).map(|id| {
                let ti = id % 4;
                let label = t.min(ti) % 2;
                let u = if ti == 0 { 0.01 } else { 0.2 * ti as f64 };
                (id, entry(label, u, 0.5))
            });
            s.push(t, entries).unwrap();
        }
        let profile = ti_uncertainty_profile(&s);
        assert_eq!(profile.iter().map(|g| g.count).sum::<usize>(), 12);
        for w in profile.windows(2) {
            assert!(w[1].ti > w[0].ti);
            assert!(w[1].mean_uncertainty > w[0].mean_uncertainty);
        }
        assert!(ti_uncertainty_correlation(&s).unwrap() > 0.9);
    }

    #[test]
    fn snapshot_push_requires_full_coverage() {
        let mut s = constant_series(3, 1);
        assert!(s.push(5, [(0, entry(0, 0.0, 1.0))]).is_err());
    }

    #[test]
    fn pseudo_ratio_examples() {
        let mut s = SnapshotSeries::new();
        let flags = [true, true, false, true, false, false, true, false, false, false];
        s.push(0, (0..10).map(|id| (id, entry(0, 0.0, if flags[id] { 0.99 } else { 0.6 })))).unwrap();
        // scores rank ids 0..5 on top
        let scores: BTreeMap<usize, f64> = (0..10).map(|id| (id, 10.0 - id as f64)).collect();
        let r = pseudo_labeled_ratio(&s, &scores, 0.5, 0.95).unwrap();
        assert_eq!(r.top_n, 5);
        assert!((r.ratio - 0.6).abs() < 1e-12);

        let none = pseudo_labeled_ratio(&s, &scores, 0.3, 0.999).unwrap();
        assert_eq!(none.ratio, 0.0);
        let all = pseudo_labeled_ratio(&s, &scores, 0.7, 0.5).unwrap();
        assert_eq!(all.ratio, 1.0);
        assert!(pseudo_labeled_ratio(&s, &scores, 0.0, 0.95).is_err());
    }

    fn results(rows: &[(&str, &[f64])]) -> BTreeMap<String, BTreeMap<String, f64>> {
        rows.iter()
            .map(|(name, accs)| {
                let m = accs.iter().enumerate().map(|(i, a)| (format!("s{i}"), *a)).collect();
                (name.to_string(), m)
            })
            .collect()
    }

    #[test]
    fn pairwise_examples() {
        let m = pairwise_matrix(&results(&[("a", &[0.9]), ("b", &[0.8]), ("c", &[0.7])])).unwrap();
        assert_eq!(m.counts, vec![vec![0, 1, 1], vec![0, 0, 1], vec![0, 0, 0]]);
        let means = m.column_means();
        assert_eq!(means, vec![0.0, 1.0 / 3.0, 2.0 / 3.0]);

        let tied = pairwise_matrix(&results(&[("a", &[0.5, 0.6]), ("b", &[0.5, 0.6])])).unwrap();
        assert!(tied.counts.iter().flatten().all(|c| *c == 0));

        let mut bad = results(&[("a", &[0.5]), ("b", &[0.5])]);
        bad.get_mut("b").unwrap().insert("extra".into(), 0.1);
        assert!(pairwise_matrix(&bad).is_err());
    }

    proptest! {
        #[test]
        fn ti_is_additive_over_segments(labels in prop::collection::vec(0usize..3, 2..30), cut in 1usize..29) {
            let cut = cut.min(labels.len() - 1);
            let whole = temporal_instability(&labels).unwrap();
            let left = temporal_instability(&labels[..=cut]).unwrap();
            let right = temporal_instability(&labels[cut..]).unwrap();
            prop_assert_eq!(whole, left + right);
            prop_assert!(whole < labels.len());
        }

        #[test]
        fn spearman_bounded_and_rank_invariant(
            pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..40)
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            if let Some(r) = spearman(&a, &b).unwrap() {
                prop_assert!((-1.0..=1.0).contains(&r));
                let ea: Vec<f64> = a.iter().map(|v| v.exp()).collect();
                let cb: Vec<f64> = b.iter().map(|v| v * v * v + 2.0).collect();
                let r2 = spearman(&ea, &cb).unwrap().unwrap();
                prop_assert!((r - r2).abs() < 1e-9);
            }
        }

        #[test]
        fn pairwise_counts_are_complementary(
            accs in prop::collection::vec(prop::collection::vec(0u8..5, 6), 2..5)
        ) {
            let rows: Vec<(String, Vec<f64>)> = accs
                .iter()
                .enumerate()
                .map(|(i, a)| (format!("m{i}"), a.iter().map(|v| *v as f64 / 4.0).collect()))
                .collect();
            let input: BTreeMap<String, BTreeMap<String, f64>> = rows
                .iter()
                .map(|(n, a)| (n.clone(), a.iter().enumerate().map(|(i, v)| (i.to_string(), *v)).collect()))
                .collect();
            let m = pairwise_matrix(&input).unwrap();
            for i in 0..rows.len() {
                for j in 0..rows.len() {
                    let ties = (0..6).filter(|s| rows[i].1[*s] == rows[j].1[*s]).count();
                    prop_assert_eq!(m.counts[i][j] + m.counts[j][i] + ties, 6);
                }
            }
        }
    }
}
