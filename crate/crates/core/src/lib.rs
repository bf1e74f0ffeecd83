//! Gradient short-circuit OOD detection on a classifier head.
//!
//! For a feature vector `F` the head produces logits `y`. The engine takes the
//! gradient of the winning logit with respect to `F`, suppresses the handful of
//! coordinates that dominate it, and scores the result. In-distribution inputs
//! spread their evidence over many coordinates and barely move; out-of-
//! distribution inputs that lean on a few spiking coordinates lose most of
//! their confidence.

pub mod approx;
pub mod error;
pub mod head;
pub mod io;
pub mod metrics;
pub mod numcore;
mod parallel;
pub mod pipeline;
pub mod scoring;
pub mod shortcircuit;
pub mod synth;

pub use error::{GscError, Result};
pub use head::{Activation, FlopReport, HeadModel, Layer};
pub use io::{load_dataset, save_dataset, Dataset, FeatureSet, Manifest};
pub use metrics::ScoredSet;
pub use numcore::{Matrix, Vector};
pub use parallel::THREADS_ENV;
pub use pipeline::{run_pipeline, EvalReport, RunConfig};
pub use scoring::{Label, ScoreKind, Threshold, Verdict};
pub use shortcircuit::{
    MaskBudget, MaskSet, ModificationRule, SelectionKind, SelectionStrategy, ShortCircuitPlan,
};
pub use synth::{generate, SynthConfig, SynthDataset};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/head.md")]
    mod head {}
    #[doc = include_str!("../../../book/src/short-circuit.md")]
    mod short_circuit {}
    #[doc = include_str!("../../../book/src/first-order.md")]
    mod first_order {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
