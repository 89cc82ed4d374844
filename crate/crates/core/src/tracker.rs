//! Streaming per-sample acquisition statistics.
//!
//! For every unlabeled sample the store keeps an exponential moving average
//! and an exponential moving variance of two signals, both computed from the
//! predictions emitted during training:
//!
//! ```text
//! mean_t = a * v_t + (1 - a) * mean_{t-1}
//! var_t  = a * (v_t - mean_t)^2 + (1 - a) * var_{t-1}
//! ucb_t  = mean_t + c * sqrt(var_t)
//! ```
//!
//! starting from `mean_0 = var_0 = 0` with no bias correction. `t` counts the
//! sample's own appearances in unlabeled batches. The acquisition score is
//! `ucb_uncertainty * ucb_inconsistency`.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::nn::argmax;
use crate::ssl::PredictionEvent;
use crate::{Error, Result};

/// Probability floor applied before taking logarithms.
pub const KL_EPS: f64 = 1e-12;

/// Pseudo-EL2N: `|| p - onehot(argmax p) ||_2`.
pub fn uncertainty(probs: &[f64]) -> f64 {
    let top = argmax(probs);
    probs
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let d = if j == top { p - 1.0 } else { *p };
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(a, b)| {
            let a = a.max(KL_EPS);
            let b = b.max(KL_EPS);
            a * (a / b).ln()
        })
        .sum()
}

/// Symmetric KL divergence between the weak-view and strong-view predictions.
pub fn inconsistency(probs_weak: &[f64], probs_strong: &[f64]) -> f64 {
    0.5 * (kl(probs_weak, probs_strong) + kl(probs_strong, probs_weak))
}

pub fn final_score(u_ucb: f64, i_ucb: f64) -> f64 {
    u_ucb * i_ucb
}

/// Which mean the variance recurrence measures deviations from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    /// `(v_t - mean_t)^2`, using the freshly updated mean.
    #[default]
    PostUpdate,
    /// `(v_t - mean_{t-1})^2`, kept for ablations.
    PreUpdate,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EmaState {
    pub mean: f64,
    pub var: f64,
    pub count: u64,
}

impl EmaState {
    pub fn update(self, value: f64, alpha: f64, mode: VarianceMode) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Tracker {
                sample: None,
                message: format!("non-finite value {value}"),
            });
        }
        let mean = alpha * value + (1.0 - alpha) * self.mean;
        let reference = match mode {
            VarianceMode::PostUpdate => mean,
            VarianceMode::PreUpdate => self.mean,
        };
        let dev = value - reference;
        let var = alpha * dev * dev + (1.0 - alpha) * self.var;
        Ok(Self {
            mean,
            var,
            count: self.count + 1,
        })
    }

    /// `mean + c * sqrt(max(var, 0))`.
    pub fn ucb(&self, c: f64) -> f64 {
        self.mean + c * self.var.max(0.0).sqrt()
    }
}

/// Free-function form of [`EmaState::update`] with the default variance mode.
pub fn ema_update(state: EmaState, value: f64, alpha: f64) -> Result<EmaState> {
    state.update(value, alpha, VarianceMode::PostUpdate)
}

pub fn ucb(state: &EmaState, c: f64) -> f64 {
    state.ucb(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerParams {
    /// EMA rate.
    pub alpha: f64,
    /// UCB confidence for uncertainty.
    pub c_u: f64,
    /// UCB confidence for inconsistency.
    pub c_i: f64,
    pub variance_mode: VarianceMode,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            c_u: 0.5,
            c_i: 2.0,
            variance_mode: VarianceMode::PostUpdate,
        }
    }
}

impl TrackerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if !(self.c_u >= 0.0 && self.c_i >= 0.0 && self.c_u.is_finite() && self.c_i.is_finite()) {
            return Err(Error::config("UCB confidences must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SampleState {
    pub uncertainty: EmaState,
    pub inconsistency: EmaState,
}

/// One row of a score snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRow {
    pub sample_id: usize,
    pub uncertainty: EmaState,
    pub inconsistency: EmaState,
    pub u_ucb: f64,
    pub i_ucb: f64,
    pub score: f64,
}

/// Per-sample tracker for the current unlabeled pool.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerStore {
    params: TrackerParams,
    states: BTreeMap<usize, SampleState>,
}

impl TrackerStore {
    pub fn new(params: TrackerParams, ids: impl IntoIterator<Item = usize>) -> Self {
        Self {
            params,
            states: ids.into_iter().map(|id| (id, SampleState::default())).collect(),
        }
    }

    pub fn params(&self) -> &TrackerParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&SampleState> {
        self.states.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.states.keys().copied()
    }

    /// Drops acquired samples.
    pub fn remove(&mut self, ids: &[usize]) {
        for id in ids {
            self.states.remove(id);
        }
    }

    /// Zeroes every state, keeping the id set.
    pub fn reset(&mut self) {
        for s in self.states.values_mut() {
            *s = SampleState::default();
        }
    }

    pub fn ingest(&mut self, event: &PredictionEvent) -> Result<()> {
        let params = self.params;
        let state = self.states.get_mut(&event.sample_id).ok_or_else(|| Error::Tracker {
            sample: Some(event.sample_id),
            message: "sample is not tracked".into(),
        })?;
        let with_id = |e: Error| match e {
            Error::Tracker { message, .. } => Error::Tracker {
                sample: Some(event.sample_id),
                message,
            },
            other => other,
        };
        let u = uncertainty(&event.probs_weak);
        let i = inconsistency(&event.probs_weak, &event.probs_strong);
        let next_u = state
            .uncertainty
            .update(u, params.alpha, params.variance_mode)
            .map_err(with_id)?;
        let next_i = state
            .inconsistency
            .update(i, params.alpha, params.variance_mode)
            .map_err(with_id)?;
        state.uncertainty = next_u;
        state.inconsistency = next_i;
        Ok(())
    }

    pub fn row(&self, id: usize) -> Option<ScoreRow> {
        self.states.get(&id).map(|s| {
            let u_ucb = s.uncertainty.ucb(self.params.c_u);
            let i_ucb = s.inconsistency.ucb(self.params.c_i);
            ScoreRow {
                sample_id: id,
                uncertainty: s.uncertainty,
                inconsistency: s.inconsistency,
                u_ucb,
                i_ucb,
                score: final_score(u_ucb, i_ucb),
            }
        })
    }

    /// Score rows for every tracked sample, in id order.
    pub fn snapshot(&self) -> Vec<ScoreRow> {
        self.states.keys().filter_map(|id| self.row(*id)).collect()
    }
}

pub const SCORE_HEADER: [&str; 8] = [
    "sample_id", "u_mean", "u_var", "u_ucb", "i_mean", "i_var", "i_ucb", "score",
];

/// Writes `sample_id,u_mean,u_var,u_ucb,i_mean,i_var,i_ucb,score`.
pub fn write_scores<W: Write>(rows: &[ScoreRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SCORE_HEADER)?;
    for r in rows {
        out.write_record([
            r.sample_id.to_string(),
            r.uncertainty.mean.to_string(),
            r.uncertainty.var.to_string(),
            r.u_ucb.to_string(),
            r.inconsistency.mean.to_string(),
            r.inconsistency.var.to_string(),
            r.i_ucb.to_string(),
            r.score.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Reads score rows written by [`write_scores`]. Counts are not stored in the
/// file and come back as zero.
pub fn read_scores<R: std::io::Read>(r: R) -> Result<Vec<ScoreRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::input("short score row"))?
                .parse::<f64>()
                .map_err(|e| Error::input(format!("bad score value: {e}")))
        };
        let sample_id = rec
            .get(0)
            .ok_or_else(|| Error::input("short score row"))?
            .parse::<usize>()
            .map_err(|e| Error::input(format!("bad sample id: {e}")))?;
        rows.push(ScoreRow {
            sample_id,
            uncertainty: EmaState { mean: f(1)?, var: f(2)?, count: 0 },
            u_ucb: f(3)?,
            inconsistency: EmaState { mean: f(4)?, var: f(5)?, count: 0 },
            i_ucb: f(6)?,
            score: f(7)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn event(id: usize, w: &[f64], s: &[f64]) -> PredictionEvent {
        PredictionEvent {
            sample_id: id,
            step: 0,
            t: 1,
            probs_weak: w.to_vec(),
            probs_strong: s.to_vec(),
        }
    }

    #[test]
    fn uncertainty_values() {
        assert_eq!(uncertainty(&[0.0, 1.0, 0.0]), 0.0);
        assert!((uncertainty(&[0.5, 0.5]) - 0.707_106_78).abs() < 1e-8);
        for k in 2..8 {
            let p = vec![1.0 / k as f64; k];
            assert!((uncertainty(&p) - (1.0 - 1.0 / k as f64).sqrt()).abs() < 1e-12);
        }
        assert!((uncertainty(&[0.8, 0.2]) - 0.282_842_71).abs() < 1e-8);
    }

    #[test]
    fn inconsistency_values() {
        assert_eq!(inconsistency(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        let p = [0.9, 0.1];
        let q = [0.1, 0.9];
        assert!((inconsistency(&p, &q) - 0.8 * 9f64.ln()).abs() < 1e-12);
        assert!((inconsistency(&p, &q) - 1.757_78).abs() < 1e-5);
        let a = [0.2, 0.5, 0.3];
        let b = [0.6, 0.1, 0.3];
        assert_eq!(inconsistency(&a, &b), inconsistency(&b, &a));
        // zero probabilities are floored, not NaN
        assert!(inconsistency(&[1.0, 0.0], &[0.0, 1.0]).is_finite());
    }

    #[test]
    fn ema_examples() {
        let s = ema_update(EmaState::default(), 0.37, 1.0).unwrap();
        assert_eq!((s.mean, s.var, s.count), (0.37, 0.0, 1));

        let mut s = EmaState::default();
        for _ in 0..3 {
            s = ema_update(s, 1.0, 0.8).unwrap();
        }
        assert!((s.mean - 0.992).abs() < 1e-12);

        let s1 = ema_update(EmaState::default(), 1.0, 0.8).unwrap();
        assert!((s1.mean - 0.8).abs() < 1e-12);
        assert!((s1.var - 0.032).abs() < 1e-12);
        let s2 = ema_update(s1, 0.0, 0.8).unwrap();
        assert!((s2.mean - 0.16).abs() < 1e-12);
        assert!((s2.var - 0.026_88).abs() < 1e-12);
    }

    #[test]
    fn pre_update_variance_mode() {
        let s = EmaState::default()
            .update(1.0, 0.8, VarianceMode::PreUpdate)
            .unwrap();
        // deviation from the old mean 0
        assert!((s.var - 0.8).abs() < 1e-12);
    }

    #[test]
    fn non_finite_values_rejected() {
        assert!(ema_update(EmaState::default(), f64::NAN, 0.8).is_err());
        let mut store = TrackerStore::new(TrackerParams::default(), [4]);
        let err = store.ingest(&event(4, &[f64::NAN, 0.5], &[0.5, 0.5])).unwrap_err();
        assert!(matches!(err, Error::Tracker { sample: Some(4), .. }), "{err}");
    }

    #[test]
    fn ucb_examples() {
        let s = EmaState { mean: 0.5, var: 0.04, count: 3 };
        assert_eq!(ucb(&s, 0.0), 0.5);
        assert!((ucb(&s, 0.5) - 0.6).abs() < 1e-12);
        let flat = EmaState { mean: 0.3, var: 0.0, count: 1 };
        assert_eq!(ucb(&flat, 7.0), 0.3);
        let negative = EmaState { mean: 0.3, var: -1e-18, count: 1 };
        assert_eq!(ucb(&negative, 2.0), 0.3);
    }

    #[test]
    fn final_score_examples() {
        assert!((final_score(0.6, 0.5) - 0.3).abs() < 1e-12);
        assert_eq!(final_score(0.0, 123.0), 0.0);
        assert!((final_score(0.707_106_78, 1.757_78) - 1.242_93).abs() < 1e-5);
    }

    #[test]
    fn ingest_updates_and_counts() {
        let mut store = TrackerStore::new(TrackerParams::default(), [1, 2]);
        for _ in 0..5 {
            store.ingest(&event(1, &[1.0, 0.0], &[1.0, 0.0])).unwrap();
        }
        let s = store.get(1).unwrap();
        assert_eq!(s.uncertainty.count, 5);
        assert_eq!(s.uncertainty.mean, 0.0);
        assert_eq!(s.inconsistency.mean, 0.0);
        assert_eq!(store.get(2).unwrap().uncertainty.count, 0);
        assert!(matches!(
            store.ingest(&event(9, &[1.0, 0.0], &[1.0, 0.0])),
            Err(Error::Tracker { sample: Some(9), .. })
        ));
    }

    #[test]
    fn zero_values_decay_the_mean() {
        let mut store = TrackerStore::new(TrackerParams::default(), [0]);
        store.ingest(&event(0, &[0.5, 0.5], &[0.9, 0.1])).unwrap();
        let m1 = store.get(0).unwrap().uncertainty.mean;
        store.ingest(&event(0, &[1.0, 0.0], &[1.0, 0.0])).unwrap();
        let m2 = store.get(0).unwrap().uncertainty.mean;
        assert!(m2 < m1 && m2 > 0.0);
    }

    #[test]
    fn snapshot_csv_round_trip() {
        let mut store = TrackerStore::new(TrackerParams::default(), [3, 1]);
        store.ingest(&event(1, &[0.6, 0.4], &[0.3, 0.7])).unwrap();
        store.ingest(&event(3, &[0.9, 0.1], &[0.8, 0.2])).unwrap();
        let rows = store.snapshot();
        assert_eq!(rows.iter().map(|r| r.sample_id).collect::<Vec<_>>(), vec![1, 3]);
        let mut buf = Vec::new();
        write_scores(&rows, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf)
            .starts_with("sample_id,u_mean,u_var,u_ucb,i_mean,i_var,i_ucb,score\n"));
        let back = read_scores(buf.as_slice()).unwrap();
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.score, b.score);
            assert_eq!(a.uncertainty.var, b.uncertainty.var);
        }
    }

    fn distribution(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..1.0, k).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn ucb_dominates_mean(values in prop::collection::vec(0.0f64..3.0, 1..40), c in 0.0f64..5.0) {
            let mut s = EmaState::default();
            for v in values {
                s = ema_update(s, v, 0.8).unwrap();
                prop_assert!(s.var >= 0.0);
                prop_assert!(ucb(&s, c) >= s.mean);
            }
        }

        #[test]
        fn uncertainty_bounded(p in (2usize..6).prop_flat_map(distribution)) {
            let u = uncertainty(&p);
            prop_assert!((0.0..2f64.sqrt()).contains(&u));
        }

        #[test]
        fn inconsistency_nonnegative(p in distribution(3), q in distribution(3)) {
            prop_assert!(inconsistency(&p, &q) >= 0.0);
            prop_assert!(inconsistency(&p, &p).abs() < 1e-15);
        }

        #[test]
        fn larger_value_raises_mean(
            values in prop::collection::vec(0.0f64..1.0, 0..20),
            bump in 1e-6f64..1.0,
            alpha in 0.01f64..=1.0,
        ) {
            let mut s = EmaState::default();
            for v in values {
                s = ema_update(s, v, alpha).unwrap();
            }
            let next = ema_update(s, s.mean + bump, alpha).unwrap();
            prop_assert!(next.mean > s.mean);
        }
    }
}
