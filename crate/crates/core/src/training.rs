//! Cross-entropy loss, hand-written backpropagation, and SGD with momentum,
//! weight decay and global-norm clipping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::graph::MaskSet;
use crate::model::{forward, Channel, Dir, DirStep, ForwardTrace, Injection, ModelParams, ObservationSet, ParamId, Tensors, Variant};
use crate::numerics::{clip_global_norm, matvec_t, sigmoid_scalar, softplus, Matrix};
use crate::observation::{inject, ObservationConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub clip_threshold: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Multiplier applied to the learning rate every `lr_step` epochs.
    pub lr_decay: f64,
    /// Epochs between decays; `None` means `max(1, epochs / 3)`.
    pub lr_step: Option<usize>,
    pub seed: u64,
    /// Layers whose true targets may be injected as observations while
    /// training, so the model learns to use observed evidence.
    pub reveal_layers: Vec<usize>,
    /// Per-sample, per-epoch probability of revealing `reveal_layers`.
    pub reveal_prob: f64,
    pub observation: ObservationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 50,
            clip_threshold: 25.0,
            weight_decay: 0.0005,
            epochs: 30,
            lr_decay: 0.1,
            lr_step: None,
            seed: 0,
            reveal_layers: Vec::new(),
            reveal_prob: 0.0,
            observation: ObservationConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Learning rate used when fine-tuning a backbone jointly; kept as a
    /// preset for callers that want the smaller step.
    pub const FINE_TUNE_LR: f64 = 0.0001;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be non-negative, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.clip_threshold.is_nan() || self.clip_threshold <= 0.0 {
            return bad(format!("clip threshold must be positive, got {}", self.clip_threshold));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.lr_decay.is_nan() || self.lr_decay <= 0.0 {
            return bad(format!("lr decay factor must be positive, got {}", self.lr_decay));
        }
        if self.lr_step == Some(0) {
            return bad("lr step must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.reveal_prob) {
            return bad(format!("reveal probability must be in [0, 1], got {}", self.reveal_prob));
        }
        self.observation.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let step = self.lr_step.unwrap_or((self.epochs / 3).max(1));
        self.learning_rate * self.lr_decay.powi((epoch / step) as i32)
    }
}

/// One gradient tensor per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub tensors: Tensors,
}

impl GradientSet {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Self { tensors: p.tensors.iter().map(|(id, m)| (*id, Matrix::zeros(m.rows(), m.cols()))).collect() }
    }

    fn at(&mut self, id: ParamId) -> &mut Matrix {
        self.tensors.get_mut(&id).expect("gradient layout matches params")
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (id, g) in self.tensors.iter_mut() {
            g.add_scaled(&other.tensors[id], 1.0);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for g in self.tensors.values_mut() {
            g.scale(alpha);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors.values().map(Matrix::sum_sq).sum::<f64>().sqrt()
    }

    pub fn apply_masks(&mut self, masks: &MaskSet) {
        for (id, g) in self.tensors.iter_mut() {
            if let Some(m) = id.mask(masks) {
                g.apply_mask(m);
            }
        }
    }
}

fn check_targets(trace: &ForwardTrace, targets: &[Vec<f64>]) -> Result<()> {
    if targets.len() != trace.a.len() {
        return Err(Error::Shape(format!("{} target layers for {} model layers", targets.len(), trace.a.len())));
    }
    for (t, (y, a)) in targets.iter().zip(&trace.a).enumerate() {
        if y.len() != a.len() {
            return Err(Error::Shape(format!("layer {t}: {} targets for {} labels", y.len(), a.len())));
        }
        if let Some(v) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("layer {t}: target {v} is not binary")));
        }
    }
    Ok(())
}

/// Summed binary cross-entropy of one sample over every label of every layer.
pub fn loss(trace: &ForwardTrace, targets: &[Vec<f64>]) -> Result<f64> {
    check_targets(trace, targets)?;
    Ok(trace
        .a
        .iter()
        .zip(targets)
        .flat_map(|(a, y)| a.iter().zip(y))
        .map(|(&a, &y)| if y == 1.0 { softplus(-a) } else { softplus(a) })
        .sum())
}

/// Exact gradient of [`loss`] with respect to every parameter tensor.
pub fn backward(p: &ModelParams, masks: &MaskSet, trace: &ForwardTrace, targets: &[Vec<f64>]) -> Result<GradientSet> {
    if trace.variant != p.variant {
        return Err(Error::Config(format!("trace from a {} model given to a {} model", trace.variant, p.variant)));
    }
    if trace.feature.len() != p.feature_dim {
        return Err(Error::Shape("trace is missing its input feature".into()));
    }
    check_targets(trace, targets)?;

    let delta: Vec<Vec<f64>> =
        trace.a.iter().zip(targets).map(|(a, y)| a.iter().zip(y).map(|(&a, &y)| sigmoid_scalar(a) - y).collect()).collect();

    let mut g = GradientSet::zeros_like(p);
    let mut gx: Vec<Vec<f64>> = p.sizes.iter().map(|&n| vec![0.0; n]).collect();
    let sinn = (p.variant == Variant::Sinn).then_some(masks);

    match p.variant {
        Variant::Logistic => gx.clone_from(&delta),
        Variant::TopDown => back_recursion(p, sinn, trace, &trace.down, Dir::Down, delta.clone(), &mut g, &mut gx)?,
        Variant::Binn | Variant::Sinn => {
            let mut g_down = Vec::with_capacity(delta.len());
            let mut g_up = Vec::with_capacity(delta.len());
            for (t, d) in delta.iter().enumerate() {
                let u_down = p.get(ParamId::Agg { dir: Dir::Down, t })?;
                let u_up = p.get(ParamId::Agg { dir: Dir::Up, t })?;
                g_down.push(matvec_t(u_down, d)?);
                g_up.push(matvec_t(u_up, d)?);
                g.at(ParamId::Agg { dir: Dir::Down, t }).add_outer(d, &trace.down[t].act);
                g.at(ParamId::Agg { dir: Dir::Up, t }).add_outer(d, &trace.up[t].act);
                g.at(ParamId::Bias(t)).add_scaled(&Matrix::column(d.clone()), 1.0);
            }
            back_recursion(p, sinn, trace, &trace.down, Dir::Down, g_down, &mut g, &mut gx)?;
            back_recursion(p, sinn, trace, &trace.up, Dir::Up, g_up, &mut g, &mut gx)?;
        }
    }

    for (t, gxt) in gx.iter().enumerate() {
        g.at(ParamId::VisW(t)).add_outer(gxt, &trace.feature);
        g.at(ParamId::VisB(t)).add_scaled(&Matrix::column(gxt.clone()), 1.0);
    }
    if let Some(m) = sinn {
        g.apply_masks(m);
    }
    Ok(g)
}

/// Reverses one directional recursion. `g_act[t]` starts as the gradient
/// arriving from the aggregation and picks up the message gradient from the
/// layer `t` fed before `t` itself is processed.
#[allow(clippy::too_many_arguments)]
fn back_recursion(
    p: &ModelParams,
    masks: Option<&MaskSet>,
    trace: &ForwardTrace,
    steps: &[DirStep],
    dir: Dir,
    mut g_act: Vec<Vec<f64>>,
    g: &mut GradientSet,
    gx: &mut [Vec<f64>],
) -> Result<()> {
    let t_count = steps.len();
    let order: Vec<usize> = match dir {
        Dir::Down => (0..t_count).rev().collect(),
        Dir::Up => (0..t_count).collect(),
    };
    for t in order {
        let ga = std::mem::take(&mut g_act[t]);
        let step = &steps[t];
        let x = &trace.x[t];
        g.at(ParamId::DirBias { dir, t }).add_scaled(&Matrix::column(ga.clone()), 1.0);
        let src = dir.source(t, t_count);

        let mut route = |ch: Channel, inter: bool, g_pre: &[f64], g: &mut GradientSet| -> Result<()> {
            if inter {
                let (Some(s), Some(inc)) = (src, step.incoming.as_deref()) else {
                    return Ok(());
                };
                let id = ParamId::Inter { dir, ch, t };
                g.at(id).add_outer(g_pre, inc);
                if trace.observed.get(s).copied().unwrap_or(false) {
                    // an injected observation is a constant
                    return Ok(());
                }
                let back = matvec_t(p.get(id)?, g_pre)?;
                for (a, b) in g_act[s].iter_mut().zip(back) {
                    *a += b;
                }
            } else {
                let id = ParamId::Intra { dir, ch, t };
                g.at(id).add_outer(g_pre, x);
                let back = matvec_t(p.get(id)?, g_pre)?;
                for (a, b) in gx[t].iter_mut().zip(back) {
                    *a += b;
                }
            }
            Ok(())
        };

        match (&step.terms, masks) {
            (Some(terms), Some(_)) => {
                for (ch, inter, pre) in terms.iter() {
                    let sign = if ch == Channel::Pos { 1.0 } else { -1.0 };
                    let g_pre: Vec<f64> = ga.iter().zip(pre).map(|(&gv, &z)| if z > 0.0 { sign * gv } else { 0.0 }).collect();
                    route(ch, inter, &g_pre, g)?;
                }
            }
            (None, None) => {
                route(Channel::Dense, true, &ga, g)?;
                route(Channel::Dense, false, &ga, g)?;
            }
            _ => return Err(Error::Config("trace does not match the model variant".into())),
        }
    }
    Ok(())
}

/// Forward, loss and gradient for one sample.
pub fn sample_gradient(p: &ModelParams, masks: &MaskSet, sample: &Sample) -> Result<(f64, GradientSet)> {
    sample_gradient_with(p, masks, sample, &Injection::none())
}

/// As [`sample_gradient`], with observations injected into the forward pass.
/// The loss still covers every layer's own activations.
pub fn sample_gradient_with(p: &ModelParams, masks: &MaskSet, sample: &Sample, inj: &Injection) -> Result<(f64, GradientSet)> {
    let trace = forward(p, masks, &sample.feature, inj)?;
    let l = loss(&trace, &sample.targets)?;
    let g = backward(p, masks, &trace, &sample.targets)?;
    Ok((l, g))
}

/// Mean loss and mean gradient over a batch. Per-sample work runs in
/// parallel; the reduction is a fixed-order sum.
pub fn batch_gradient(p: &ModelParams, masks: &MaskSet, batch: &[&Sample]) -> Result<(f64, GradientSet)> {
    let none = Injection::none();
    let pairs: Vec<(&Sample, &Injection)> = batch.iter().map(|&s| (s, &none)).collect();
    batch_gradient_with(p, masks, &pairs)
}

pub fn batch_gradient_with(p: &ModelParams, masks: &MaskSet, batch: &[(&Sample, &Injection)]) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let parts: Vec<(f64, GradientSet)> = batch.par_iter().map(|(s, inj)| sample_gradient_with(p, masks, s, inj)).collect::<Result<_>>()?;
    let mut total = GradientSet::zeros_like(p);
    let mut loss_sum = 0.0;
    for (l, g) in &parts {
        loss_sum += l;
        total.add_assign(g);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((loss_sum / n, total))
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    pub tensors: Tensors,
}

impl Velocity {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Self { tensors: GradientSet::zeros_like(p).tensors }
    }
}

/// Applies one update and returns the clipping factor that was used.
///
/// Order: mask (SINN), add `weight_decay * w` to weight gradients, clip the
/// global norm, then `v = momentum * v - lr * g` and `w = w + v`.
pub fn sgd_step(p: &mut ModelParams, velocity: &mut Velocity, mut grads: GradientSet, cfg: &TrainConfig, masks: &MaskSet) -> Result<f64> {
    let sinn = p.variant == Variant::Sinn;
    if sinn {
        grads.apply_masks(masks);
    }
    for (id, gm) in grads.tensors.iter_mut() {
        let w = p.get(*id)?;
        if gm.shape() != w.shape() {
            return Err(Error::Shape(format!("gradient for {id} is {:?}, parameter {:?}", gm.shape(), w.shape())));
        }
        if id.is_weight() && cfg.weight_decay != 0.0 {
            gm.add_scaled(w, cfg.weight_decay);
        }
    }
    let scale = clip_global_norm(grads.tensors.values_mut(), cfg.clip_threshold);
    for (id, gm) in &grads.tensors {
        let v = velocity.tensors.get_mut(id).ok_or_else(|| Error::Shape(format!("no velocity for {id}")))?;
        for (vv, &gv) in v.as_mut_slice().iter_mut().zip(gm.as_slice()) {
            *vv = cfg.momentum * *vv - cfg.learning_rate * gv;
        }
        let mask = if sinn { id.mask(masks) } else { None };
        if let Some(m) = mask {
            v.apply_mask(m);
        }
        let w = p.get_mut(*id)?;
        w.add_scaled(v, 1.0);
        if let Some(m) = mask {
            w.apply_mask(m);
        }
    }
    Ok(scale)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<std::collections::BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    /// Line-delimited JSON, one record per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs.iter().map(|e| serde_json::to_string(e).expect("record serializes") + "\n").collect()
    }
}

/// Mini-batch SGD over `samples` for `cfg.epochs` epochs.
pub fn fit(samples: &[Sample], p: &mut ModelParams, masks: &MaskSet, cfg: &TrainConfig) -> Result<TrainLog> {
    fit_with(samples, p, masks, cfg, |_, _| None)
}

/// As [`fit`], calling `snapshot` after every epoch; whatever it returns is
/// stored in that epoch's record.
pub fn fit_with<F>(samples: &[Sample], p: &mut ModelParams, masks: &MaskSet, cfg: &TrainConfig, mut snapshot: F) -> Result<TrainLog>
where
    F: FnMut(usize, &ModelParams) -> Option<std::collections::BTreeMap<String, f64>>,
{
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    for s in samples {
        if s.feature.len() != p.feature_dim {
            return Err(Error::Shape(format!("sample `{}` has {} features, model expects {}", s.id, s.feature.len(), p.feature_dim)));
        }
    }
    if let Some(&t) = cfg.reveal_layers.iter().find(|&&t| t >= p.num_layers()) {
        return Err(Error::Config(format!("cannot reveal layer {t} of a {}-layer model", p.num_layers())));
    }
    let revealing = cfg.reveal_prob > 0.0 && !cfg.reveal_layers.is_empty();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut velocity = Velocity::zeros_like(p);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let step_cfg = TrainConfig { learning_rate: cfg.lr_at(epoch), ..cfg.clone() };
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut injections = Vec::with_capacity(chunk.len());
            for &i in chunk {
                injections.push(if revealing && rng.gen_bool(cfg.reveal_prob) {
                    let obs = cfg.reveal_layers.iter().fold(ObservationSet::new(), |o, &t| o.observe(t, samples[i].targets[t].clone()));
                    inject(&obs, &p.sizes, &cfg.observation)?
                } else {
                    Injection::none()
                });
            }
            let batch: Vec<(&Sample, &Injection)> = chunk.iter().map(|&i| &samples[i]).zip(&injections).collect();
            let (l, g) = batch_gradient_with(p, masks, &batch)?;
            loss_sum += l * batch.len() as f64;
            sgd_step(p, &mut velocity, g, &step_cfg, masks)?;
        }
        let mean_loss = loss_sum / samples.len() as f64;
        if !mean_loss.is_finite() || p.tensors.values().any(|m| !m.is_finite()) {
            return Err(Error::Numeric(format!("training diverged in epoch {}", epoch + 1)));
        }
        let metrics = snapshot(epoch, p);
        log.epochs.push(EpochRecord {
            epoch: epoch + 1,
            mean_loss,
            lr: step_cfg.learning_rate,
            wall_secs: start.elapsed().as_secs_f64(),
            metrics,
        });
    }
    Ok(log)
}
