//! Turning observed binary labels into activations and feeding them into
//! inference.
//!
//! A label `y` is first pulled away from {0, 1} by `eps`, giving `g`. Two
//! conversions are offered: [`ObservationMode::InverseComplement`] evaluates
//! `ln(1 / (1 - g))`, which is large for `y = 1` but close to zero for
//! `y = 0`; [`ObservationMode::TrueLogit`] evaluates `ln(g / (1 - g))`, the
//! exact inverse of the sigmoid, which is symmetric around zero.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Injection, ObservationSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ObservationMode {
    #[default]
    InverseComplement,
    TrueLogit,
}

impl FromStr for ObservationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse" | "inverse_complement" => Ok(Self::InverseComplement),
            "logit" | "true_logit" => Ok(Self::TrueLogit),
            other => Err(Error::Config(format!("unknown observation mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationConfig {
    pub epsilon: f64,
    pub mode: ObservationMode,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self { epsilon: 0.001, mode: ObservationMode::InverseComplement }
    }
}

impl ObservationConfig {
    pub fn with_mode(mode: ObservationMode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!("epsilon must lie in (0, 0.5), got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Activation standing in for an observed label `y` (0 or 1).
pub fn observed_activation(y: f64, cfg: &ObservationConfig) -> Result<f64> {
    cfg.validate()?;
    let g = if y == 0.0 {
        y + cfg.epsilon
    } else if y == 1.0 {
        y - cfg.epsilon
    } else {
        return Err(Error::Data(format!("observed label must be 0 or 1, got {y}")));
    };
    Ok(match cfg.mode {
        ObservationMode::InverseComplement => (1.0 / (1.0 - g)).ln(),
        ObservationMode::TrueLogit => (g / (1.0 - g)).ln(),
    })
}

/// Converts an observation set into per-layer message replacements.
///
/// Observed layers send the converted activations to their neighbours
/// instead of their own computed ones, and report the observation itself as
/// their prediction.
pub fn inject(obs: &ObservationSet, sizes: &[usize], cfg: &ObservationConfig) -> Result<Injection> {
    let mut inj = Injection { sources: vec![None; sizes.len()], display: vec![None; sizes.len()] };
    for (&t, targets) in &obs.layers {
        let n = *sizes.get(t).ok_or_else(|| Error::Data(format!("observation for layer {t}, model has {}", sizes.len())))?;
        if targets.len() != n {
            return Err(Error::Shape(format!("observation for layer {t} has {} labels, expected {n}", targets.len())));
        }
        let acts = targets.iter().map(|&y| observed_activation(y, cfg)).collect::<Result<Vec<_>>>()?;
        inj.sources[t] = Some(acts);
        inj.display[t] = Some(targets.clone());
    }
    Ok(inj)
}
