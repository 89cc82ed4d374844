//! Multi-round, multi-seed, multi-strategy orchestration.
//!
//! For every `(seed, strategy)` pair the loop is: train a round on the current
//! pools, evaluate on the test set, acquire `K` samples, move them to the
//! labeled set. Random streams come from [`crate::rng`]:
//!
//! | stream                              | shared across strategies |
//! |-------------------------------------|--------------------------|
//! | `dataset`, `split`, `init`          | yes                      |
//! | `train/<round>`                     | yes                      |
//! | `acquire/<strategy>/<round>`        | no                       |
//!
//! so every strategy sees the same data, initial weights and round-0 model.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acquisition::{self, AcquisitionRequest, DiverseMode, Pick, Strategy};
use crate::analysis::SnapshotSeries;
use crate::data::{generate, split_pools, Dataset, GeneratorSpec, SamplePools};
use crate::nn::{forward_passes, ModelParams};
use crate::rng::{derive_seed, stream};
use crate::ssl::{train_round, InitMode, PredictionEvent, RoundMetrics, SslConfig};
use crate::tracker::{ScoreRow, TrackerParams, TrackerStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: GeneratorSpec,
    pub n_init: usize,
    /// Samples acquired per round (`K`).
    pub k_per_round: usize,
    pub rounds: usize,
    pub n_test: usize,
    pub stratified_init: bool,
    pub hidden_layers: Vec<usize>,
    pub ssl: SslConfig,
    pub tracker: TrackerParams,
    /// Keep tracker state across rounds instead of resetting it.
    pub carry_tracker: bool,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub diverse_mode: DiverseMode,
    /// Top fraction used by the pseudo-label ratio diagnostic.
    pub pseudo_top_frac: f64,
    /// Dump every prediction event to CSV.
    pub event_log: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: GeneratorSpec::default(),
            n_init: 20,
            k_per_round: 20,
            rounds: 5,
            n_test: 500,
            stratified_init: true,
            hidden_layers: vec![64, 64],
            ssl: SslConfig::default(),
            tracker: TrackerParams::default(),
            carry_tracker: false,
            strategies: Strategy::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
            diverse_mode: DiverseMode::FullLloyd,
            pseudo_top_frac: 0.1,
            event_log: false,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.ssl.validate()?;
        self.tracker.validate()?;
        if self.rounds == 0 || self.k_per_round == 0 {
            return Err(Error::config("rounds and k_per_round must be >= 1"));
        }
        if self.n_test >= self.dataset.size {
            return Err(Error::config("test set consumes the whole dataset"));
        }
        let pool = self.dataset.size - self.n_test;
        if self.n_init + self.rounds * self.k_per_round > pool {
            return Err(Error::config(format!(
                "n_init + rounds * K = {} exceeds the pool of {pool}",
                self.n_init + self.rounds * self.k_per_round
            )));
        }
        if self.n_init < self.dataset.classes {
            return Err(Error::config("n_init must cover every class"));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::config("hidden layer widths must be >= 1"));
        }
        if self.strategies.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("need at least one strategy and one seed"));
        }
        let mut s = self.strategies.clone();
        s.sort();
        s.dedup();
        if s.len() != self.strategies.len() {
            return Err(Error::config("strategies must be distinct"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::config("seeds must be distinct"));
        }
        if !(self.pseudo_top_frac > 0.0 && self.pseudo_top_frac <= 1.0) {
            return Err(Error::config("pseudo_top_frac must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub test_accuracy: f64,
    pub acquired: Vec<usize>,
    pub metrics: RoundMetrics,
    pub acquisition_seconds: f64,
    pub acquisition_forward_passes: u64,
    pub labeled_after: usize,
    pub unlabeled_after: usize,
}

/// Everything one round produced.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub report: RoundReport,
    pub picks: Vec<Pick>,
    /// Tracker scores at acquisition time.
    pub scores: Vec<ScoreRow>,
    pub snapshots: SnapshotSeries,
    pub events: Vec<PredictionEvent>,
    /// Model trained this round.
    pub params: ModelParams,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub seed: u64,
    pub strategy: Strategy,
    pub rounds: Vec<RoundRecord>,
    /// Set when the run stopped early; completed rounds are kept.
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub runs: Vec<RunRecord>,
}

impl ExperimentResult {
    pub fn reports(&self) -> impl Iterator<Item = &RoundReport> {
        self.runs.iter().flat_map(|r| r.rounds.iter().map(|rr| &rr.report))
    }

    pub fn run(&self, seed: u64, strategy: Strategy) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.seed == seed && r.strategy == strategy)
    }
}

/// Data, pools and initial weights shared by every strategy of one seed.
#[derive(Debug, Clone)]
pub struct SeedSetup {
    pub seed: u64,
    pub dataset: Dataset,
    pub pools: SamplePools,
    pub init_params: ModelParams,
}

impl SeedSetup {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let dataset = generate(&cfg.dataset, derive_seed(seed, &["dataset"]))?.standardized();
        let pools = split_pools(
            &dataset,
            cfg.n_init,
            cfg.n_test,
            derive_seed(seed, &["split"]),
            cfg.stratified_init,
        )?;
        let init_params = ModelParams::init(
            dataset.dim(),
            &cfg.hidden_layers,
            dataset.classes(),
            &mut stream(seed, &["init"]),
        )?;
        Ok(Self {
            seed,
            dataset,
            pools,
            init_params,
        })
    }
}

/// Runs all rounds for one strategy. A failing round ends the run; rounds
/// completed before it are returned along with the error message.
pub fn run_strategy(cfg: &ExperimentConfig, setup: &SeedSetup, strategy: Strategy) -> RunRecord {
    let mut record = RunRecord {
        seed: setup.seed,
        strategy,
        rounds: Vec::with_capacity(cfg.rounds),
        error: None,
    };
    let mut pools = setup.pools.clone();
    let mut current = setup.init_params.clone();
    let mut tracker = TrackerStore::new(cfg.tracker, pools.unlabeled().iter().copied());
    for round in 0..cfg.rounds {
        match run_round(cfg, setup, strategy, round, &mut pools, &current, &mut tracker) {
            Ok(rec) => {
                if cfg.ssl.init == InitMode::ConInit {
                    current = rec.params.clone();
                }
                record.rounds.push(rec);
            }
            Err(e) => {
                log::warn!("seed {} {strategy} round {round}: {e}", setup.seed);
                record.error = Some(format!("round {round}: {e}"));
                break;
            }
        }
    }
    record
}

fn run_round(
    cfg: &ExperimentConfig,
    setup: &SeedSetup,
    strategy: Strategy,
    round: usize,
    pools: &mut SamplePools,
    start: &ModelParams,
    tracker: &mut TrackerStore,
) -> Result<RoundRecord> {
    let round_key = round.to_string();
    if !cfg.carry_tracker {
        *tracker = TrackerStore::new(cfg.tracker, pools.unlabeled().iter().copied());
    }
    let mut events = Vec::new();
    let outcome = train_round(
        start,
        pools,
        &setup.dataset,
        &cfg.ssl,
        tracker,
        &mut stream(setup.seed, &["train", &round_key]),
        cfg.event_log.then_some(&mut events),
    )?;
    let scores = tracker.snapshot();
    let labeled: Vec<usize> = pools.labeled().iter().copied().collect();
    let unlabeled: Vec<usize> = pools.unlabeled().iter().copied().collect();

    let mut acq_rng = stream(setup.seed, &["acquire", strategy.name(), &round_key]);
    let passes_before = forward_passes();
    let started = Instant::now();
    let picks = acquisition::acquire(AcquisitionRequest {
        strategy,
        k: cfg.k_per_round,
        scores: &scores,
        model: &outcome.params,
        dataset: &setup.dataset,
        labeled: &labeled,
        unlabeled: &unlabeled,
        diverse_mode: cfg.diverse_mode,
        rng: &mut acq_rng,
    })?;
    let acquisition_seconds = started.elapsed().as_secs_f64();
    let acquisition_forward_passes = forward_passes() - passes_before;

    let acquired = acquisition::ids(&picks);
    pools.acquire(&acquired)?;
    tracker.remove(&acquired);

    Ok(RoundRecord {
        report: RoundReport {
            round,
            strategy,
            seed: setup.seed,
            test_accuracy: outcome.metrics.test_accuracy,
            acquired,
            metrics: outcome.metrics,
            acquisition_seconds,
            acquisition_forward_passes,
            labeled_after: pools.labeled().len(),
            unlabeled_after: pools.unlabeled().len(),
        },
        picks,
        scores,
        snapshots: outcome.snapshots,
        events,
        params: outcome.params,
    })
}

/// Runs every `(seed, strategy)` pair in config order. Configuration errors
/// abort before any work; training failures are recorded per run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut runs = Vec::with_capacity(cfg.seeds.len() * cfg.strategies.len());
    for &seed in &cfg.seeds {
        let setup = SeedSetup::new(cfg, seed)?;
        for &strategy in &cfg.strategies {
            let started = Instant::now();
            let run = run_strategy(cfg, &setup, strategy);
            log::info!(
                "seed {seed} {strategy}: {} rounds, final accuracy {:.4} ({:.1}s)",
                run.rounds.len(),
                run.rounds.last().map_or(f64::NAN, |r| r.report.test_accuracy),
                started.elapsed().as_secs_f64()
            );
            runs.push(run);
        }
    }
    Ok(ExperimentResult {
        config: cfg.clone(),
        runs,
    })
}
