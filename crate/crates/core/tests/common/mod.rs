#![allow(dead_code)]

use assl::acquisition::Strategy;
use assl::data::{GeneratorKind, GeneratorSpec};
use assl::experiment::ExperimentConfig;

/// A sweep small enough to run in well under a second.
pub fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        dataset: GeneratorSpec {
            kind: GeneratorKind::TwoMoons,
            size: 300,
            classes: 2,
            noise: 0.2,
            centers: None,
        },
        n_init: 10,
        k_per_round: 5,
        rounds: 2,
        n_test: 50,
        hidden_layers: vec![8],
        strategies: vec![Strategy::Ours, Strategy::Random, Strategy::OursDiv],
        seeds: vec![3],
        event_log: true,
        ..ExperimentConfig::default()
    };
    cfg.ssl.steps_per_round = 60;
    cfg.ssl.snapshot_interval = 10;
    cfg
}
