//! FixMatch-style training for one active-learning round.
//!
//! Each step draws `B` labeled and `mu * B` unlabeled samples. The loss is
//!
//! ```text
//! (1/B)    * sum_labeled   CE(y, p(weak(x)))
//! + (l_u / (mu B)) * sum_unlabeled 1[max p(weak(x)) > tau] * CE(argmax p(weak(x)), p(strong(x)))
//! ```
//!
//! Every unlabeled sample in the batch yields one [`PredictionEvent`] that is
//! fed to the tracker before the gradient step, so scores describe the model
//! that produced the training signal.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{SnapshotEntry, SnapshotSeries};
use crate::data::{AugmentConfig, Dataset, SamplePools};
use crate::nn::{argmax, Gradients, ModelParams, Sgd};
use crate::tracker::{uncertainty, TrackerStore};
use crate::{Error, Result};

/// How each round's starting weights are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Every round restarts from the same fixed random weights.
    #[default]
    RandInit,
    /// Every round continues from the previous round's trained weights.
    ConInit,
}

/// Which input a snapshot evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnapshotView {
    /// A fresh weak augmentation, the view pseudo-labels are taken from.
    #[default]
    Weak,
    /// The clean input.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub steps_per_round: usize,
    /// Labeled batch size `B`.
    pub batch_size: usize,
    /// Unlabeled batch is `unlabeled_ratio * batch_size`.
    pub unlabeled_ratio: usize,
    /// Pseudo-label confidence threshold (strict `>`).
    pub threshold: f64,
    pub lambda_u: f64,
    pub lr: f64,
    pub momentum: f64,
    pub init: InitMode,
    pub snapshot_interval: usize,
    pub snapshot_view: SnapshotView,
    /// Weak-augment labeled inputs for the supervised loss.
    pub augment_labeled: bool,
    /// Skip the unlabeled branch entirely (no events, no unlabeled draws).
    pub supervised_only: bool,
    pub augment: AugmentConfig,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            steps_per_round: 2000,
            batch_size: 16,
            unlabeled_ratio: 4,
            threshold: 0.95,
            lambda_u: 1.0,
            lr: 0.03,
            momentum: 0.0,
            init: InitMode::RandInit,
            snapshot_interval: 200,
            snapshot_view: SnapshotView::Weak,
            augment_labeled: true,
            supervised_only: false,
            augment: AugmentConfig::default(),
        }
    }
}

impl SslConfig {
    pub fn unlabeled_batch(&self) -> usize {
        self.unlabeled_ratio * self.batch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_round == 0 || self.batch_size == 0 || self.unlabeled_ratio == 0 {
            return Err(Error::config("steps, batch size and unlabeled ratio must be >= 1"));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::config(format!("threshold must be in (0, 1], got {}", self.threshold)));
        }
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return Err(Error::config("lambda_u must be finite and >= 0"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be > 0"));
        }
        if self.snapshot_interval == 0 {
            return Err(Error::config("snapshot_interval must be >= 1"));
        }
        self.augment.validate()
    }
}

/// Predictions for one unlabeled sample at one appearance in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionEvent {
    pub sample_id: usize,
    /// Global training step within the round.
    pub step: usize,
    /// The sample's own appearance count, starting at 1.
    pub t: u64,
    pub probs_weak: Vec<f64>,
    pub probs_strong: Vec<f64>,
}

/// `Some(argmax)` when `max(probs) > tau`.
pub fn pseudo_label(probs_weak: &[f64], tau: f64) -> Option<usize> {
    let top = argmax(probs_weak);
    (probs_weak[top] > tau).then_some(top)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoundMetrics {
    pub test_accuracy: f64,
    pub mean_supervised_loss: f64,
    /// Mean of the normalized unsupervised term per step.
    pub mean_unsupervised_loss: f64,
    /// Fraction of unlabeled appearances whose pseudo-label passed the
    /// threshold.
    pub mask_rate: f64,
    pub steps: usize,
    pub events: usize,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub params: ModelParams,
    pub metrics: RoundMetrics,
    pub snapshots: SnapshotSeries,
}

/// Endless epoch-shuffled iterator over a fixed id list.
struct EpochSampler {
    ids: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(ids: Vec<usize>, rng: ChaCha8Rng) -> Self {
        let pos = ids.len();
        Self { ids, pos, rng }
    }

    fn next_id(&mut self) -> usize {
        if self.pos == self.ids.len() {
            self.ids.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.ids[self.pos - 1]
    }
}

fn one_hot(k: usize, class: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[class] = 1.0;
    v
}

/// Fraction of `ids` whose argmax prediction on the raw input matches the
/// label.
pub fn accuracy(params: &ModelParams, dataset: &Dataset, ids: impl IntoIterator<Item = usize>) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for id in ids {
        let probs = params.predict(dataset.x(id))?;
        hit += usize::from(argmax(&probs) == dataset.y(id));
        total += 1;
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

fn snapshot<R: Rng + ?Sized>(
    params: &ModelParams,
    dataset: &Dataset,
    ids: &[usize],
    cfg: &SslConfig,
    rng: &mut R,
) -> Result<Vec<(usize, SnapshotEntry)>> {
    ids.iter()
        .map(|id| {
            let probs = match cfg.snapshot_view {
                SnapshotView::Weak => params.predict(&cfg.augment.weak(dataset.x(*id), rng))?,
                SnapshotView::Raw => params.predict(dataset.x(*id))?,
            };
            let label = argmax(&probs);
            Ok((
                *id,
                SnapshotEntry {
                    label,
                    uncertainty: uncertainty(&probs),
                    max_prob: probs[label],
                },
            ))
        })
        .collect()
}

/// Runs one round of training starting from `params`.
///
/// Labeled and unlabeled sampling use two sub-streams split off `rng`, so a
/// supervised-only run consumes exactly the labeled stream of the full run.
/// Every event is ingested by `tracker` and, when given, appended to
/// `event_log`.
pub fn train_round<R: Rng + ?Sized>(
    params: &ModelParams,
    pools: &SamplePools,
    dataset: &Dataset,
    cfg: &SslConfig,
    tracker: &mut TrackerStore,
    rng: &mut R,
    mut event_log: Option<&mut Vec<PredictionEvent>>,
) -> Result<RoundOutcome> {
    cfg.validate()?;
    let labeled: Vec<usize> = pools.labeled().iter().copied().collect();
    let unlabeled: Vec<usize> = pools.unlabeled().iter().copied().collect();
    if labeled.is_empty() {
        return Err(Error::config("labeled set is empty"));
    }
    if params.input_dim() != dataset.dim() || params.num_classes() != dataset.classes() {
        return Err(Error::config("model shape does not match the dataset"));
    }
    let ub = cfg.unlabeled_batch();
    if !cfg.supervised_only {
        if unlabeled.len() < ub {
            return Err(Error::config(format!(
                "unlabeled pool ({}) is smaller than the unlabeled batch ({ub})",
                unlabeled.len()
            )));
        }
        if cfg.steps_per_round * ub < unlabeled.len() {
            return Err(Error::config(format!(
                "{} steps x {ub} unlabeled per step cannot visit all {} unlabeled samples",
                cfg.steps_per_round,
                unlabeled.len()
            )));
        }
    }

    let labeled_seed = rng.next_u64();
    let unlabeled_seed = rng.next_u64();
    let mut snap_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let mut lab_rng = ChaCha8Rng::seed_from_u64(labeled_seed);
    let mut unl_rng = ChaCha8Rng::seed_from_u64(unlabeled_seed);
    let mut lab_sampler = EpochSampler::new(labeled.clone(), ChaCha8Rng::seed_from_u64(lab_rng.next_u64()));
    let mut unl_sampler = EpochSampler::new(unlabeled.clone(), ChaCha8Rng::seed_from_u64(unl_rng.next_u64()));

    let k = dataset.classes();
    let b = cfg.batch_size;
    let mut model = params.clone();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut appearances: BTreeMap<usize, u64> = BTreeMap::new();
    let mut snapshots = SnapshotSeries::new();
    let (mut sup_total, mut unsup_total) = (0.0, 0.0);
    let (mut masked, mut seen) = (0usize, 0usize);
    let sup_weight = 1.0 / b as f64;
    let unsup_weight = cfg.lambda_u / ub as f64;

    for step in 0..cfg.steps_per_round {
        let mut grads = Gradients::zeros_like(&model);

        let mut sup_loss = 0.0;
        for _ in 0..b {
            let id = lab_sampler.next_id();
            let x = if cfg.augment_labeled {
                cfg.augment.weak(dataset.x(id), &mut lab_rng)
            } else {
                dataset.x(id).to_vec()
            };
            let trace = model.trace(&x)?;
            sup_loss += grads.accumulate(&model, &trace, &one_hot(k, dataset.y(id)), sup_weight) * sup_weight;
        }

        let mut unsup_loss = 0.0;
        if !cfg.supervised_only {
            for _ in 0..ub {
                let id = unl_sampler.next_id();
                let xw = cfg.augment.weak(dataset.x(id), &mut unl_rng);
                let xs = cfg.augment.strong(dataset.x(id), &mut unl_rng);
                let probs_weak = model.predict(&xw)?;
                let strong = model.trace(&xs)?;
                let t = appearances.entry(id).or_insert(0);
                *t += 1;
                let event = PredictionEvent {
                    sample_id: id,
                    step,
                    t: *t,
                    probs_weak,
                    probs_strong: strong.probs().to_vec(),
                };
                tracker.ingest(&event)?;
                seen += 1;
                if let Some(class) = pseudo_label(&event.probs_weak, cfg.threshold) {
                    masked += 1;
                    if cfg.lambda_u > 0.0 {
                        unsup_loss += grads.accumulate(&model, &strong, &one_hot(k, class), unsup_weight) * unsup_weight;
                    }
                }
                if let Some(log) = event_log.as_deref_mut() {
                    log.push(event);
                }
            }
        }

        let loss = sup_loss + unsup_loss;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("non-finite loss {loss}"),
            });
        }
        sup_total += sup_loss;
        unsup_total += unsup_loss;
        opt.step(&mut model, &grads).map_err(|e| Error::Training {
            step,
            message: e.to_string(),
        })?;

        if (step + 1) % cfg.snapshot_interval == 0 && !unlabeled.is_empty() {
            snapshots.push(step + 1, snapshot(&model, dataset, &unlabeled, cfg, &mut snap_rng)?)?;
        }
    }

    let steps = cfg.steps_per_round as f64;
    let metrics = RoundMetrics {
        test_accuracy: accuracy(&model, dataset, pools.test().iter().copied())?,
        mean_supervised_loss: sup_total / steps,
        mean_unsupervised_loss: unsup_total / steps,
        mask_rate: if seen == 0 { 0.0 } else { masked as f64 / seen as f64 },
        steps: cfg.steps_per_round,
        events: seen,
    };
    Ok(RoundOutcome {
        params: model,
        metrics,
        snapshots,
    })
}

/// Writes `round,step,sample_id,probs_w...,probs_s...`.
pub fn write_events<W: Write>(round: usize, events: &[PredictionEvent], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let k = events.first().map_or(0, |e| e.probs_weak.len());
    let mut header = vec!["round".to_string(), "step".into(), "sample_id".into()];
    header.extend((0..k).map(|j| format!("pw{j}")));
    header.extend((0..k).map(|j| format!("ps{j}")));
    out.write_record(&header)?;
    for e in events {
        let mut row = vec![round.to_string(), e.step.to_string(), e.sample_id.to_string()];
        row.extend(e.probs_weak.iter().chain(&e.probs_strong).map(|v| v.to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads an event log. Appearance counts are reconstructed from file order.
pub fn read_events<R: std::io::Read>(r: R) -> Result<Vec<(usize, PredictionEvent)>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut counts: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 5 || (rec.len() - 3) % 2 != 0 {
            return Err(Error::input("malformed event row"));
        }
        let int = |i: usize| rec[i].parse::<usize>().map_err(|e| Error::input(format!("bad integer: {e}")));
        let (round, step, sample_id) = (int(0)?, int(1)?, int(2)?);
        let probs = (3..rec.len())
            .map(|i| rec[i].parse::<f64>().map_err(|e| Error::input(format!("bad probability: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let k = probs.len() / 2;
        let t = counts.entry((round, sample_id)).or_insert(0);
        *t += 1;
        out.push((
            round,
            PredictionEvent {
                sample_id,
                step,
                t: *t,
                probs_weak: probs[..k].to_vec(),
                probs_strong: probs[k..].to_vec(),
            },
        ));
    }
    Ok(out)
}
