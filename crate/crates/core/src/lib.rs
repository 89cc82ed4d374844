//! Active semi-supervised learning on desk-scale synthetic data.
//!
//! Every active-learning round trains a small feed-forward classifier with a
//! FixMatch-style objective over the labeled set plus the whole unlabeled
//! pool. While training, each unlabeled sample's weak/strong predictions are
//! streamed into a [`tracker::TrackerStore`] that keeps exponential moving
//! averages and variances of two per-sample signals:
//!
//! - uncertainty: the L2 distance between the weak-view prediction and the
//!   one-hot vector of its own argmax;
//! - inconsistency: the symmetric KL divergence between the weak-view and
//!   strong-view predictions.
//!
//! Each signal is turned into an upper confidence bound (`mean + c * sqrt(var)`)
//! and the acquisition score is their product, so selecting the next batch
//! needs no extra inference over the pool.
//!
//! Module map:
//!
//! - [`nn`]: dense ReLU network, analytic backprop, SGD, finite-difference check
//! - [`data`]: synthetic generators, weak/strong augmentation, pool bookkeeping
//! - [`ssl`]: one round of FixMatch-style training emitting prediction events
//! - [`tracker`]: streaming EMA/EMV/UCB statistics and final scores
//! - [`acquisition`]: the score-based strategies and baselines
//! - [`analysis`]: temporal instability, rank correlation, pairwise matrices
//! - [`experiment`] / [`output`]: multi-round orchestration and artifacts

pub mod acquisition;
pub mod analysis;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod nn;
pub mod output;
pub mod rng;
pub mod ssl;
pub mod tracker;

pub use error::{Error, Result};
