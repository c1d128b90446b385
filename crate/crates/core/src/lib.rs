//! Structured inference networks for layered multi-label prediction.
//!
//! Labels are organized in concept layers (coarse to fine) connected by a
//! signed relation graph. Models refine per-layer visual activations by
//! passing messages between layers: a logistic baseline with no messages, a
//! top-down network, a bidirectional network (BINN) and the structured
//! variant (SINN) whose weights are masked by the graph and split into
//! rectified positive and negative channels.
//!
//! The crate covers graph parsing, the forward passes, exact gradients,
//! SGD training, partial-observation inference, evaluation metrics, a
//! dataset format with a synthetic generator, and a checkpoint format.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod observation;
pub mod training;

pub use data::{Dataset, Sample, SynthSpec};
pub use error::{Error, Result};
pub use graph::{LabelGraph, MaskSet};
pub use metrics::{EvalConfig, EvalResult};
pub use model::{ModelParams, ObservationSet, Variant};
pub use observation::{ObservationConfig, ObservationMode};
pub use training::{TrainConfig, TrainLog};

/// Per-layer probabilities for one feature vector, optionally conditioned on
/// observed layers.
pub fn predict(p: &ModelParams, masks: &MaskSet, feature: &[f64], obs: &ObservationSet, cfg: &ObservationConfig) -> Result<Vec<Vec<f64>>> {
    let inj = observation::inject(obs, &p.sizes, cfg)?;
    Ok(model::forward(p, masks, feature, &inj)?.prob)
}

/// Runs [`predict`] over every sample. `observe` picks, per sample, which
/// layers to reveal (return an empty set for plain prediction).
pub fn predict_dataset<F>(p: &ModelParams, masks: &MaskSet, ds: &Dataset, cfg: &ObservationConfig, observe: F) -> Result<Vec<Vec<Vec<f64>>>>
where
    F: Fn(&Sample) -> ObservationSet + Sync,
{
    use rayon::prelude::*;
    ds.samples.par_iter().map(|s| predict(p, masks, &s.feature, &observe(s), cfg)).collect()
}

/// Observation set revealing the true targets of the given layers.
pub fn reveal(sample: &Sample, layers: &[usize]) -> ObservationSet {
    layers.iter().fold(ObservationSet::new(), |o, &t| o.observe(t, sample.targets[t].clone()))
}
