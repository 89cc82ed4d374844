//! Strategies that pick `K` unlabeled samples for labeling.
//!
//! Every strategy returns exactly `K` distinct ids from the unlabeled pool,
//! in selection order. Score ties always go to the lower sample id.

mod coreset;
mod diverse;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::nn::{argmax, ModelParams};
use crate::tracker::{uncertainty, ScoreRow};
use crate::{Error, Result};

pub use coreset::acquire_coreset;
pub use diverse::{acquire_diverse, kmeans_pp_seeds, lloyd, DiverseMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Random,
    Entropy,
    Margin,
    /// Point-in-time pseudo-EL2N from a fresh forward pass.
    SnapshotEl2n,
    Coreset,
    /// Top-K of the tracker's UCB product score.
    Ours,
    /// k-means++ over score-weighted embeddings.
    OursDiv,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Random,
        Strategy::Entropy,
        Strategy::Margin,
        Strategy::SnapshotEl2n,
        Strategy::Coreset,
        Strategy::Ours,
        Strategy::OursDiv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::Margin => "margin",
            Strategy::SnapshotEl2n => "snapshot-el2n",
            Strategy::Coreset => "coreset",
            Strategy::Ours => "ours",
            Strategy::OursDiv => "ours-div",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy `{s}`")))
    }
}

/// One selected sample and the score that ranked it, if the strategy has one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pick {
    pub id: usize,
    pub score: Option<f64>,
}

pub fn ids(picks: &[Pick]) -> Vec<usize> {
    picks.iter().map(|p| p.id).collect()
}

fn check_k(k: usize, pool: usize) -> Result<()> {
    if k > pool {
        return Err(Error::input(format!("cannot pick {k} samples from a pool of {pool}")));
    }
    Ok(())
}

/// The `k` highest scores, ties to the lower id.
pub fn top_k(scores: impl IntoIterator<Item = (usize, f64)>, k: usize) -> Result<Vec<Pick>> {
    let mut all: Vec<(usize, f64)> = scores.into_iter().collect();
    check_k(k, all.len())?;
    let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, order);
        all.truncate(k);
    }
    all.sort_unstable_by(order);
    Ok(all
        .into_iter()
        .take(k)
        .map(|(id, s)| Pick { id, score: Some(s) })
        .collect())
}

/// Top-K by the tracker's final score. Performs no inference.
pub fn acquire_topk_score(snapshot: &[ScoreRow], k: usize) -> Result<Vec<Pick>> {
    if let Some(row) = snapshot.iter().find(|r| r.uncertainty.count == 0) {
        return Err(Error::Acquisition(format!(
            "sample {} never appeared in training; tracker coverage is broken",
            row.sample_id
        )));
    }
    top_k(snapshot.iter().map(|r| (r.sample_id, r.score)), k)
}

/// Uniform sample without replacement.
pub fn acquire_random<R: Rng + ?Sized>(unlabeled: &[usize], k: usize, rng: &mut R) -> Result<Vec<Pick>> {
    check_k(k, unlabeled.len())?;
    Ok(rand::seq::index::sample(rng, unlabeled.len(), k)
        .into_iter()
        .map(|i| Pick {
            id: unlabeled[i],
            score: None,
        })
        .collect())
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// `p_(1) - p_(2)`, the gap between the two largest probabilities.
pub fn margin(probs: &[f64]) -> f64 {
    let top = argmax(probs);
    let second = probs
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != top)
        .map(|(_, p)| *p)
        .fold(0.0, f64::max);
    probs[top] - second
}

fn fresh_scores(
    model: &ModelParams,
    dataset: &Dataset,
    unlabeled: &[usize],
    score: impl Fn(&[f64]) -> f64,
) -> Result<Vec<(usize, f64)>> {
    unlabeled
        .iter()
        .map(|id| Ok((*id, score(&model.predict(dataset.x(*id))?))))
        .collect()
}

pub fn acquire_entropy(model: &ModelParams, dataset: &Dataset, unlabeled: &[usize], k: usize) -> Result<Vec<Pick>> {
    check_k(k, unlabeled.len())?;
    top_k(fresh_scores(model, dataset, unlabeled, entropy)?, k)
}

/// Smallest margins first. The reported score is the margin itself.
pub fn acquire_margin(model: &ModelParams, dataset: &Dataset, unlabeled: &[usize], k: usize) -> Result<Vec<Pick>> {
    check_k(k, unlabeled.len())?;
    let picks = top_k(fresh_scores(model, dataset, unlabeled, |p| -margin(p))?, k)?;
    Ok(picks
        .into_iter()
        .map(|p| Pick {
            id: p.id,
            score: p.score.map(|s| -s),
        })
        .collect())
}

pub fn acquire_snapshot_el2n(
    model: &ModelParams,
    dataset: &Dataset,
    unlabeled: &[usize],
    k: usize,
) -> Result<Vec<Pick>> {
    check_k(k, unlabeled.len())?;
    top_k(fresh_scores(model, dataset, unlabeled, uncertainty)?, k)
}

/// Penultimate-layer embeddings of raw inputs.
pub fn embeddings(model: &ModelParams, dataset: &Dataset, ids: &[usize]) -> Result<BTreeMap<usize, Vec<f64>>> {
    ids.iter()
        .map(|id| Ok((*id, model.forward(dataset.x(*id))?.embedding)))
        .collect()
}

/// Everything a strategy might need for one acquisition.
pub struct AcquisitionRequest<'a, R: Rng + ?Sized> {
    pub strategy: Strategy,
    pub k: usize,
    pub scores: &'a [ScoreRow],
    pub model: &'a ModelParams,
    pub dataset: &'a Dataset,
    pub labeled: &'a [usize],
    pub unlabeled: &'a [usize],
    pub diverse_mode: DiverseMode,
    pub rng: &'a mut R,
}

pub fn acquire<R: Rng + ?Sized>(req: AcquisitionRequest<'_, R>) -> Result<Vec<Pick>> {
    check_k(req.k, req.unlabeled.len())?;
    match req.strategy {
        Strategy::Random => acquire_random(req.unlabeled, req.k, req.rng),
        Strategy::Entropy => acquire_entropy(req.model, req.dataset, req.unlabeled, req.k),
        Strategy::Margin => acquire_margin(req.model, req.dataset, req.unlabeled, req.k),
        Strategy::SnapshotEl2n => acquire_snapshot_el2n(req.model, req.dataset, req.unlabeled, req.k),
        Strategy::Ours => acquire_topk_score(req.scores, req.k),
        Strategy::Coreset => {
            let lab = embeddings(req.model, req.dataset, req.labeled)?;
            let unl = embeddings(req.model, req.dataset, req.unlabeled)?;
            acquire_coreset(&lab, &unl, req.k)
        }
        Strategy::OursDiv => {
            let emb = embeddings(req.model, req.dataset, req.unlabeled)?;
            acquire_diverse(req.scores, &emb, req.k, req.diverse_mode, req.rng)
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tracker::EmaState;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn row(id: usize, score: f64) -> ScoreRow {
        let s = EmaState { mean: score, var: 0.0, count: 1 };
        ScoreRow {
            sample_id: id,
            uncertainty: s,
            inconsistency: EmaState { mean: 1.0, var: 0.0, count: 1 },
            u_ucb: score,
            i_ucb: 1.0,
            score,
        }
    }

    #[test]
    fn topk_examples() {
        let rows = [row(0, 0.9), row(1, 0.5), row(2, 0.7)];
        assert_eq!(ids(&acquire_topk_score(&rows, 2).unwrap()), vec![0, 2]);
        assert_eq!(ids(&acquire_topk_score(&rows, 3).unwrap()).len(), 3);
        let flat: Vec<ScoreRow> = (0..6).rev().map(|i| row(i, 0.4)).collect();
        assert_eq!(ids(&acquire_topk_score(&flat, 3).unwrap()), vec![0, 1, 2]);
        assert!(acquire_topk_score(&rows, 4).is_err());
    }

    #[test]
    fn topk_rejects_unvisited_samples() {
        let mut rows = vec![row(0, 0.9), row(1, 0.5)];
        rows[1].uncertainty.count = 0;
        assert!(matches!(acquire_topk_score(&rows, 1), Err(Error::Acquisition(_))));
    }

    #[test]
    fn entropy_and_margin_values() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
        assert!((entropy(&[0.5, 0.25, 0.25]) - 1.5 * 2f64.ln()).abs() < 1e-12);
        assert!((entropy(&[0.5, 0.25, 0.25]) - 1.039_72).abs() < 1e-5);
        assert_eq!(margin(&[0.0, 1.0]), 1.0);
        assert_eq!(margin(&[0.4, 0.4, 0.2]), 0.0);
        assert!((margin(&[0.6, 0.3, 0.1]) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn random_examples() {
        let pool: Vec<usize> = (10..20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut all = ids(&acquire_random(&pool, 10, &mut rng).unwrap());
        all.sort();
        assert_eq!(all, pool);
        let a = acquire_random(&pool, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = acquire_random(&pool, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(acquire_random(&pool, 11, &mut rng).is_err());
    }

    #[test]
    fn random_is_uniform() {
        // binomial(10000, 0.1): sd = 30, allow 3 sd
        let pool: Vec<usize> = (0..10).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut freq = [0usize; 10];
        for _ in 0..10_000 {
            freq[acquire_random(&pool, 1, &mut rng).unwrap()[0].id] += 1;
        }
        for f in freq {
            assert!((f as f64 - 1000.0).abs() <= 90.0, "{freq:?}");
        }
    }

    proptest! {
        #[test]
        fn topk_invariant_under_monotone_transform(
            scores in prop::collection::vec(-5.0f64..5.0, 1..40),
            k in 1usize..40,
        ) {
            let k = k.min(scores.len());
            let raw: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
            let warped: Vec<(usize, f64)> = raw.iter().map(|(i, s)| (*i, s.exp() * 3.0 + 1.0)).collect();
            let a = ids(&top_k(raw, k).unwrap());
            let b = ids(&top_k(warped, k).unwrap());
            prop_assert_eq!(&a, &b);
            let mut uniq = a.clone();
            uniq.sort();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), k);
        }
    }
}
