//! Capability salience vectors and downstream scaling laws.
//!
//! Several language models are scored on a shared validation text. Their
//! per-token losses are moved into one target tokenization ([`lossmap`]),
//! weighted by a learned per-token salience ([`salience`]), and normalized per
//! character into a capability score. A sigmoid law ([`lawfit`]) maps that
//! score to benchmark accuracy. [`optimizer`] alternates between fitting the
//! law and training the salience scorer; [`baselines`] provides the
//! unweighted and answer-only comparisons; [`synth`] generates model families
//! with a known ground truth.
//!
//! Runnable walkthroughs live in `examples/`; the `csvscale` binary wires the
//! same pipeline to files.

pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod lawfit;
pub mod lossmap;
pub mod numeric;
pub mod optimizer;
pub mod report;
pub mod salience;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
