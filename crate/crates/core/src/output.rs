//! On-disk artifacts of an experiment.
//!
//! Layout of an output directory:
//!
//! ```text
//! manifest.json                 config, version, seeds, and a `volatile` block
//! rounds.csv                    one row per (seed, strategy, round)
//! ti_profile.csv                TI groups of the pool per round
//! ti_correlation.csv            Spearman(TI, mean uncertainty) per round
//! spearman_series.csv           consecutive-snapshot uncertainty correlation
//! pseudo_ratio.csv              pseudo-labeled ratio in top sets
//! pairwise_matrix.csv           strategy-vs-strategy win counts
//! seed_<s>/<strategy>/acquisitions.csv
//! seed_<s>/<strategy>/snapshots.csv
//! seed_<s>/<strategy>/scores_round_<r>.csv
//! seed_<s>/<strategy>/events_round_<r>.csv      (only with event_log)
//! ```
//!
//! Everything except the manifest's `volatile` block (timestamps and
//! wall-clock timings) is a pure function of the config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::acquisition::Strategy;
use crate::analysis::{
    consecutive_spearman, pairwise_matrix, pseudo_labeled_ratio, ti_uncertainty_correlation,
    ti_uncertainty_profile, PairwiseMatrix, PseudoRatio, SnapshotEntry, SnapshotSeries, TiGroup,
};
use crate::experiment::{ExperimentConfig, ExperimentResult};
use crate::ssl::write_events;
use crate::tracker::{read_scores, write_scores, ScoreRow};
use crate::{Error, Result};

pub const ROUNDS_HEADER: [&str; 11] = [
    "round",
    "strategy",
    "seed",
    "accuracy",
    "supervised_loss",
    "unsupervised_loss",
    "mask_rate",
    "labeled",
    "unlabeled",
    "acquired",
    "acquisition_forward_passes",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunStatus {
    pub seed: u64,
    pub strategy: Strategy,
    pub rounds_completed: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timing {
    pub seed: u64,
    pub strategy: Strategy,
    pub round: usize,
    pub acquisition_seconds: f64,
}

/// Run-dependent fields excluded from reproducibility comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Volatile {
    pub created_unix_secs: u64,
    pub acquisition_timings: Vec<Timing>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
    pub runs: Vec<RunStatus>,
    pub volatile: Volatile,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Parses either a bare config or a manifest (whose `config` is reused).
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    if let Ok(manifest) = serde_json::from_str::<Manifest>(&text) {
        manifest.config.validate()?;
        return Ok(manifest.config);
    }
    ExperimentConfig::from_json(&text)
}

/// The logged inputs the analysis needs for one round.
#[derive(Debug, Clone)]
pub struct RoundLogs {
    pub round: usize,
    pub accuracy: f64,
    pub snapshots: SnapshotSeries,
    pub scores: Vec<ScoreRow>,
}

#[derive(Debug, Clone)]
pub struct RunLogs {
    pub seed: u64,
    pub strategy: Strategy,
    pub rounds: Vec<RoundLogs>,
}

impl RunLogs {
    pub fn from_result(result: &ExperimentResult) -> Vec<RunLogs> {
        result
            .runs
            .iter()
            .map(|run| RunLogs {
                seed: run.seed,
                strategy: run.strategy,
                rounds: run
                    .rounds
                    .iter()
                    .map(|r| RoundLogs {
                        round: r.report.round,
                        accuracy: r.report.test_accuracy,
                        snapshots: r.snapshots.clone(),
                        scores: r.scores.clone(),
                    })
                    .collect(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ranking {
    Inconsistency,
    Uncertainty,
}

impl Ranking {
    pub fn name(self) -> &'static str {
        match self {
            Ranking::Inconsistency => "inconsistency",
            Ranking::Uncertainty => "uncertainty",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalysisTables {
    pub ti_profile: Vec<(u64, Strategy, usize, TiGroup)>,
    pub ti_correlation: Vec<(u64, Strategy, usize, Option<f64>)>,
    pub spearman_series: Vec<(u64, Strategy, usize, usize, usize, Option<f64>)>,
    pub pseudo_ratio: Vec<(u64, Strategy, usize, Ranking, f64, PseudoRatio)>,
    /// `None` when some run did not finish every round.
    pub pairwise: Option<PairwiseMatrix>,
}

/// Computes every diagnostic table. Pseudo-label ratios rank the pool by the
/// UCB of each signal.
pub fn build_analysis(runs: &[RunLogs], cfg: &ExperimentConfig) -> Result<AnalysisTables> {
    let tau = cfg.ssl.threshold;
    let mut tables = AnalysisTables {
        ti_profile: Vec::new(),
        ti_correlation: Vec::new(),
        spearman_series: Vec::new(),
        pseudo_ratio: Vec::new(),
        pairwise: None,
    };
    for run in runs {
        for r in &run.rounds {
            for g in ti_uncertainty_profile(&r.snapshots) {
                tables.ti_profile.push((run.seed, run.strategy, r.round, g));
            }
            tables
                .ti_correlation
                .push((run.seed, run.strategy, r.round, ti_uncertainty_correlation(&r.snapshots)));
            for (from, to, rho) in consecutive_spearman(&r.snapshots) {
                tables.spearman_series.push((run.seed, run.strategy, r.round, from, to, rho));
            }
            if r.snapshots.is_empty() || r.scores.is_empty() {
                continue;
            }
            for ranking in [Ranking::Inconsistency, Ranking::Uncertainty] {
                let scores: BTreeMap<usize, f64> = r
                    .scores
                    .iter()
                    .map(|s| {
                        let v = match ranking {
                            Ranking::Inconsistency => s.i_ucb,
                            Ranking::Uncertainty => s.u_ucb,
                        };
                        (s.sample_id, v)
                    })
                    .collect();
                let ratio = pseudo_labeled_ratio(&r.snapshots, &scores, cfg.pseudo_top_frac, tau)?;
                tables
                    .pseudo_ratio
                    .push((run.seed, run.strategy, r.round, ranking, cfg.pseudo_top_frac, ratio));
            }
        }
    }

    let complete = runs.iter().all(|r| r.rounds.len() == cfg.rounds);
    if complete && !runs.is_empty() {
        let mut results: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for run in runs {
            let setting = format!("{}/seed{}", cfg.dataset.kind.name(), run.seed);
            let acc = run.rounds.last().map_or(0.0, |r| r.accuracy);
            results.entry(run.strategy.name().to_string()).or_default().insert(setting, acc);
        }
        tables.pairwise = Some(pairwise_matrix(&results)?);
    }
    Ok(tables)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

pub fn write_analysis(tables: &AnalysisTables, dir: &Path) -> Result<()> {
    let mut w = writer(&dir.join("ti_profile.csv"))?;
    w.write_record(["seed", "strategy", "round", "ti", "count", "mean_uncertainty", "std_uncertainty"])?;
    for (seed, st, round, g) in &tables.ti_profile {
        w.write_record([
            seed.to_string(),
            st.to_string(),
            round.to_string(),
            g.ti.to_string(),
            g.count.to_string(),
            g.mean_uncertainty.to_string(),
            g.std_uncertainty.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = writer(&dir.join("ti_correlation.csv"))?;
    w.write_record(["seed", "strategy", "round", "spearman"])?;
    for (seed, st, round, rho) in &tables.ti_correlation {
        w.write_record([seed.to_string(), st.to_string(), round.to_string(), opt(*rho)])?;
    }
    w.flush()?;

    let mut w = writer(&dir.join("spearman_series.csv"))?;
    w.write_record(["seed", "strategy", "round", "from_step", "to_step", "spearman"])?;
    for (seed, st, round, from, to, rho) in &tables.spearman_series {
        w.write_record([
            seed.to_string(),
            st.to_string(),
            round.to_string(),
            from.to_string(),
            to.to_string(),
            opt(*rho),
        ])?;
    }
    w.flush()?;

    let mut w = writer(&dir.join("pseudo_ratio.csv"))?;
    w.write_record([
        "seed",
        "strategy",
        "round",
        "ranking",
        "top_frac",
        "top_n",
        "pseudo_labeled",
        "ratio",
        "mean_count",
    ])?;
    for (seed, st, round, ranking, frac, r) in &tables.pseudo_ratio {
        w.write_record([
            seed.to_string(),
            st.to_string(),
            round.to_string(),
            ranking.name().to_string(),
            frac.to_string(),
            r.top_n.to_string(),
            r.pseudo_labeled.to_string(),
            r.ratio.to_string(),
            r.mean_count.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = writer(&dir.join("pairwise_matrix.csv"))?;
    if let Some(m) = &tables.pairwise {
        let mut header = vec!["strategy".to_string()];
        header.extend(m.strategies.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in m.strategies.iter().zip(&m.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        let mut rec = vec!["column_mean".to_string()];
        rec.extend(m.column_means().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    } else {
        w.write_record(["strategy"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn run_dir(out: &Path, seed: u64, strategy: Strategy) -> PathBuf {
    out.join(format!("seed_{seed}")).join(strategy.name())
}

fn write_snapshots(path: &Path, rounds: &[(usize, &SnapshotSeries)]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["round", "step", "sample_id", "label", "uncertainty", "max_prob"])?;
    for (round, series) in rounds {
        for (idx, step) in series.steps().iter().enumerate() {
            for (id, entries) in series.samples() {
                let e = entries[idx];
                w.write_record([
                    round.to_string(),
                    step.to_string(),
                    id.to_string(),
                    e.label.to_string(),
                    e.uncertainty.to_string(),
                    e.max_prob.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_snapshots(path: &Path) -> Result<BTreeMap<usize, SnapshotSeries>> {
    let mut rdr = csv::Reader::from_path(path)?;
    // round -> step -> rows
    let mut grouped: BTreeMap<usize, BTreeMap<usize, Vec<(usize, SnapshotEntry)>>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let int = |i: usize| -> Result<usize> {
            rec.get(i)
                .ok_or_else(|| Error::input("short snapshot row"))?
                .parse()
                .map_err(|e| Error::input(format!("bad snapshot integer: {e}")))
        };
        let real = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::input("short snapshot row"))?
                .parse()
                .map_err(|e| Error::input(format!("bad snapshot value: {e}")))
        };
        grouped.entry(int(0)?).or_default().entry(int(1)?).or_default().push((
            int(2)?,
            SnapshotEntry {
                label: int(3)?,
                uncertainty: real(4)?,
                max_prob: real(5)?,
            },
        ));
    }
    let mut out = BTreeMap::new();
    for (round, steps) in grouped {
        let mut series = SnapshotSeries::new();
        for (step, rows) in steps {
            series.push(step, rows)?;
        }
        out.insert(round, series);
    }
    Ok(out)
}

/// Writes every artifact of `result` into `out`.
pub fn emit(result: &ExperimentResult, tables: &AnalysisTables, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;

    let mut w = writer(&out.join("rounds.csv"))?;
    w.write_record(ROUNDS_HEADER)?;
    for r in result.reports() {
        w.write_record([
            r.round.to_string(),
            r.strategy.to_string(),
            r.seed.to_string(),
            r.test_accuracy.to_string(),
            r.metrics.mean_supervised_loss.to_string(),
            r.metrics.mean_unsupervised_loss.to_string(),
            r.metrics.mask_rate.to_string(),
            r.labeled_after.to_string(),
            r.unlabeled_after.to_string(),
            r.acquired.len().to_string(),
            r.acquisition_forward_passes.to_string(),
        ])?;
    }
    w.flush()?;

    for run in &result.runs {
        let dir = run_dir(out, run.seed, run.strategy);
        fs::create_dir_all(&dir)?;
        let mut w = writer(&dir.join("acquisitions.csv"))?;
        w.write_record(["round", "strategy", "rank", "sample_id", "score"])?;
        for rec in &run.rounds {
            for (rank, pick) in rec.picks.iter().enumerate() {
                w.write_record([
                    rec.report.round.to_string(),
                    run.strategy.to_string(),
                    rank.to_string(),
                    pick.id.to_string(),
                    opt(pick.score),
                ])?;
            }
        }
        w.flush()?;

        let series: Vec<(usize, &SnapshotSeries)> =
            run.rounds.iter().map(|r| (r.report.round, &r.snapshots)).collect();
        write_snapshots(&dir.join("snapshots.csv"), &series)?;

        for rec in &run.rounds {
            let round = rec.report.round;
            write_scores(&rec.scores, fs::File::create(dir.join(format!("scores_round_{round}.csv")))?)?;
            if result.config.event_log {
                write_events(
                    round,
                    &rec.events,
                    fs::File::create(dir.join(format!("events_round_{round}.csv")))?,
                )?;
            }
        }
    }

    write_analysis(tables, out)?;

    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: result.config.seeds.clone(),
        config: result.config.clone(),
        runs: result
            .runs
            .iter()
            .map(|r| RunStatus {
                seed: r.seed,
                strategy: r.strategy,
                rounds_completed: r.rounds.len(),
                error: r.error.clone(),
            })
            .collect(),
        volatile: Volatile {
            created_unix_secs: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or_default(),
            acquisition_timings: result
                .reports()
                .map(|r| Timing {
                    seed: r.seed,
                    strategy: r.strategy,
                    round: r.round,
                    acquisition_seconds: r.acquisition_seconds,
                })
                .collect(),
        },
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Reloads the logs of an output directory for re-analysis.
pub fn load_logs(dir: &Path) -> Result<(ExperimentConfig, Vec<RunLogs>)> {
    let manifest = Manifest::load(&dir.join("manifest.json"))?;
    let mut accuracy: BTreeMap<(u64, String, usize), f64> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(dir.join("rounds.csv"))?;
    for rec in rdr.records() {
        let rec = rec?;
        let parse_err = |e: String| Error::input(format!("rounds.csv: {e}"));
        let round: usize = rec[0].parse().map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?;
        let seed: u64 = rec[2].parse().map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?;
        let acc: f64 = rec[3].parse().map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?;
        accuracy.insert((seed, rec[1].to_string(), round), acc);
    }

    let mut runs = Vec::new();
    for status in &manifest.runs {
        let rdir = run_dir(dir, status.seed, status.strategy);
        let mut series = read_snapshots(&rdir.join("snapshots.csv"))?;
        let mut rounds = Vec::new();
        for round in 0..status.rounds_completed {
            let scores = read_scores(fs::File::open(rdir.join(format!("scores_round_{round}.csv")))?)?;
            let acc = accuracy
                .get(&(status.seed, status.strategy.name().to_string(), round))
                .copied()
                .ok_or_else(|| Error::input(format!("rounds.csv lacks {} seed {} round {round}", status.strategy, status.seed)))?;
            rounds.push(RoundLogs {
                round,
                accuracy: acc,
                snapshots: series.remove(&round).unwrap_or_default(),
                scores,
            });
        }
        runs.push(RunLogs {
            seed: status.seed,
            strategy: status.strategy,
            rounds,
        });
    }
    Ok((manifest.config, runs))
}
