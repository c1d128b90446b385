//! Parameters and forward passes for the four model variants.
//!
//! Every variant starts from per-layer visual activations `x_t = W_t f + c_t`.
//! The logistic baseline stops there. The top-down network runs one
//! recursion from the coarsest layer down. BINN runs a top-down and a
//! bottom-up recursion and mixes them with dense aggregation matrices. SINN
//! does the same but splits every inter/intra block into a positive and a
//! negative channel, each masked by the label graph and passed through a ReLU
//! before being added or subtracted.
//!
//! Recursion boundaries drop the inter-layer term: the coarsest layer gets no
//! top-down message and the finest layer no bottom-up message.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{LabelGraph, MaskSet};
use crate::numerics::{affine, masked_matvec, matvec, relu_scalar, sigmoid, Mask, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Logistic,
    TopDown,
    Binn,
    Sinn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Logistic, Variant::TopDown, Variant::Binn, Variant::Sinn];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Logistic => "logistic",
            Variant::TopDown => "topdown",
            Variant::Binn => "binn",
            Variant::Sinn => "sinn",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dir {
    Down,
    Up,
}

impl Dir {
    /// Layer whose activation feeds layer `t` in this direction.
    pub fn source(self, t: usize, layers: usize) -> Option<usize> {
        match self {
            Dir::Down => t.checked_sub(1),
            Dir::Up => (t + 1 < layers).then_some(t + 1),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Dir::Down => "down",
            Dir::Up => "up",
        }
    }
}

/// Dense block (top-down/BINN) or one signed half of a SINN block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Channel {
    Dense,
    Pos,
    Neg,
}

impl Channel {
    fn as_str(self) -> &'static str {
        match self {
            Channel::Dense => "dense",
            Channel::Pos => "pos",
            Channel::Neg => "neg",
        }
    }
}

/// Name of one learnable tensor. `t` is always the layer that receives the
/// product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    /// Visual projection `n_t x d`.
    VisW(usize),
    /// Visual bias `n_t`.
    VisB(usize),
    /// Inter-layer `V`, `n_t x n_source`.
    Inter { dir: Dir, ch: Channel, t: usize },
    /// Intra-layer `H`, `n_t x n_t`.
    Intra { dir: Dir, ch: Channel, t: usize },
    /// Directional bias.
    DirBias { dir: Dir, t: usize },
    /// Aggregation `U`, `n_t x n_t`.
    Agg { dir: Dir, t: usize },
    /// Aggregation bias.
    Bias(usize),
}

impl ParamId {
    /// Weight decay applies to these; biases are exempt.
    pub fn is_weight(&self) -> bool {
        matches!(self, ParamId::VisW(_) | ParamId::Inter { .. } | ParamId::Intra { .. } | ParamId::Agg { .. })
    }

    pub fn layer(&self) -> usize {
        match *self {
            ParamId::VisW(t) | ParamId::VisB(t) | ParamId::Bias(t) => t,
            ParamId::Inter { t, .. } | ParamId::Intra { t, .. } | ParamId::DirBias { t, .. } | ParamId::Agg { t, .. } => t,
        }
    }

    /// Mask gating this tensor, if any. Only signed SINN blocks are masked.
    pub fn mask<'m>(&self, masks: &'m MaskSet) -> Option<&'m Mask> {
        let pick = |ch: Channel, sm: &'m crate::graph::SignedMask| match ch {
            Channel::Pos => Some(&sm.pos),
            Channel::Neg => Some(&sm.neg),
            Channel::Dense => None,
        };
        match *self {
            ParamId::Inter { dir, ch, t } => {
                let side = match dir {
                    Dir::Down => masks.down.get(t)?,
                    Dir::Up => masks.up.get(t)?,
                };
                pick(ch, side.as_ref()?)
            }
            ParamId::Intra { ch, t, .. } => pick(ch, masks.intra.get(t)?),
            _ => None,
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ParamId::VisW(t) => write!(f, "vis_w.{t}"),
            ParamId::VisB(t) => write!(f, "vis_b.{t}"),
            ParamId::Inter { dir, ch, t } => write!(f, "inter.{}.{}.{t}", dir.as_str(), ch.as_str()),
            ParamId::Intra { dir, ch, t } => write!(f, "intra.{}.{}.{t}", dir.as_str(), ch.as_str()),
            ParamId::DirBias { dir, t } => write!(f, "dir_b.{}.{t}", dir.as_str()),
            ParamId::Agg { dir, t } => write!(f, "agg.{}.{t}", dir.as_str()),
            ParamId::Bias(t) => write!(f, "bias.{t}"),
        }
    }
}

impl FromStr for ParamId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("unknown tensor name `{s}`"));
        let parts: Vec<&str> = s.split('.').collect();
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        let dir = |p: &str| match p {
            "down" => Ok(Dir::Down),
            "up" => Ok(Dir::Up),
            _ => Err(bad()),
        };
        let ch = |p: &str| match p {
            "dense" => Ok(Channel::Dense),
            "pos" => Ok(Channel::Pos),
            "neg" => Ok(Channel::Neg),
            _ => Err(bad()),
        };
        Ok(match parts.as_slice() {
            ["vis_w", t] => ParamId::VisW(num(t)?),
            ["vis_b", t] => ParamId::VisB(num(t)?),
            ["bias", t] => ParamId::Bias(num(t)?),
            ["inter", d, c, t] => ParamId::Inter { dir: dir(d)?, ch: ch(c)?, t: num(t)? },
            ["intra", d, c, t] => ParamId::Intra { dir: dir(d)?, ch: ch(c)?, t: num(t)? },
            ["dir_b", d, t] => ParamId::DirBias { dir: dir(d)?, t: num(t)? },
            ["agg", d, t] => ParamId::Agg { dir: dir(d)?, t: num(t)? },
            _ => return Err(bad()),
        })
    }
}

/// Ordered map from tensor name to storage; used for parameters, gradients
/// and optimizer velocity alike.
pub type Tensors = BTreeMap<ParamId, Matrix>;

/// Tensor names and shapes for a variant over the given layer sizes.
pub fn layout(variant: Variant, sizes: &[usize], feature_dim: usize) -> Vec<(ParamId, usize, usize)> {
    let t_count = sizes.len();
    let mut out = Vec::new();
    for (t, &n) in sizes.iter().enumerate() {
        out.push((ParamId::VisW(t), n, feature_dim));
        out.push((ParamId::VisB(t), n, 1));
    }
    let (dirs, channels): (&[Dir], &[Channel]) = match variant {
        Variant::Logistic => return out,
        Variant::TopDown => (&[Dir::Down], &[Channel::Dense]),
        Variant::Binn => (&[Dir::Down, Dir::Up], &[Channel::Dense]),
        Variant::Sinn => (&[Dir::Down, Dir::Up], &[Channel::Pos, Channel::Neg]),
    };
    for (t, &n) in sizes.iter().enumerate() {
        for &dir in dirs {
            for &ch in channels {
                if let Some(s) = dir.source(t, t_count) {
                    out.push((ParamId::Inter { dir, ch, t }, n, sizes[s]));
                }
                out.push((ParamId::Intra { dir, ch, t }, n, n));
            }
            out.push((ParamId::DirBias { dir, t }, n, 1));
        }
        if variant != Variant::TopDown {
            out.push((ParamId::Agg { dir: Dir::Down, t }, n, n));
            out.push((ParamId::Agg { dir: Dir::Up, t }, n, n));
            out.push((ParamId::Bias(t), n, 1));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub variant: Variant,
    pub feature_dim: usize,
    pub sizes: Vec<usize>,
    /// Hash of the label graph the parameters were built for.
    pub graph_hash: String,
    pub tensors: Tensors,
}

impl ModelParams {
    /// All-zero parameters with the variant's layout.
    pub fn zeros(variant: Variant, sizes: &[usize], feature_dim: usize, graph_hash: impl Into<String>) -> Self {
        let tensors = layout(variant, sizes, feature_dim).into_iter().map(|(id, r, c)| (id, Matrix::zeros(r, c))).collect();
        Self { variant, feature_dim, sizes: sizes.to_vec(), graph_hash: graph_hash.into(), tensors }
    }

    /// Glorot-uniform weights, zero biases, masked entries zeroed.
    pub fn init(graph: &LabelGraph, masks: &MaskSet, feature_dim: usize, variant: Variant, seed: u64) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::Config("feature dimension must be at least 1".into()));
        }
        let mut p = Self::zeros(variant, &graph.sizes(), feature_dim, graph.hash());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (id, m) in p.tensors.iter_mut() {
            if !id.is_weight() {
                continue;
            }
            let s = (6.0 / (m.rows() + m.cols()) as f64).sqrt();
            for v in m.as_mut_slice() {
                *v = rng.gen_range(-s..=s);
            }
        }
        if variant == Variant::Sinn {
            p.apply_masks(masks)?;
        }
        Ok(p)
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len()
    }

    pub fn get(&self, id: ParamId) -> Result<&Matrix> {
        self.tensors.get(&id).ok_or_else(|| Error::Shape(format!("{} model has no tensor {id}", self.variant)))
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Matrix> {
        let variant = self.variant;
        self.tensors.get_mut(&id).ok_or_else(|| Error::Shape(format!("{variant} model has no tensor {id}")))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|m| m.as_slice().len()).sum()
    }

    fn check_masks(&self, masks: &MaskSet) -> Result<()> {
        if masks.num_layers() != self.num_layers() {
            return Err(Error::Shape(format!("mask set has {} layers, model has {}", masks.num_layers(), self.num_layers())));
        }
        for (id, m) in &self.tensors {
            if let Some(mask) = id.mask(masks) {
                if mask.shape() != m.shape() {
                    return Err(Error::Shape(format!("mask for {id} is {:?}, tensor {:?}", mask.shape(), m.shape())));
                }
            }
        }
        Ok(())
    }

    /// Zeroes every SINN entry whose mask bit is false.
    pub fn apply_masks(&mut self, masks: &MaskSet) -> Result<()> {
        self.check_masks(masks)?;
        for (id, m) in self.tensors.iter_mut() {
            if let Some(mask) = id.mask(masks) {
                m.apply_mask(mask);
            }
        }
        Ok(())
    }

    /// Fails if a masked-out SINN entry holds anything other than 0.0.
    pub fn check_masked_zero(&self, masks: &MaskSet) -> Result<()> {
        self.check_masks(masks)?;
        for (id, m) in &self.tensors {
            if let Some(mask) = id.mask(masks) {
                let bad = m.as_slice().iter().zip(mask.as_slice()).any(|(&v, &keep)| !keep && v != 0.0);
                if bad {
                    return Err(Error::Shape(format!("masked-out entry of {id} is nonzero")));
                }
            }
        }
        Ok(())
    }

    fn check_inputs(&self, xs: &[Vec<f64>]) -> Result<()> {
        if xs.len() != self.num_layers() {
            return Err(Error::Shape(format!("{} activation layers for a {}-layer model", xs.len(), self.num_layers())));
        }
        for (t, (x, &n)) in xs.iter().zip(&self.sizes).enumerate() {
            if x.len() != n {
                return Err(Error::Shape(format!("layer {t}: activation length {} != {n}", x.len())));
            }
        }
        Ok(())
    }
}

/// Observed layers for partial-observation inference: layer index to its
/// full binary target vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationSet {
    pub layers: BTreeMap<usize, Vec<f64>>,
}

impl ObservationSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(mut self, layer: usize, targets: Vec<f64>) -> Self {
        self.layers.insert(layer, targets);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Activation vectors substituted for a layer's outgoing messages, indexed by
/// layer. Built by [`crate::observation::inject`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Injection {
    pub sources: Vec<Option<Vec<f64>>>,
    /// Probabilities reported for observed layers.
    pub display: Vec<Option<Vec<f64>>>,
}

impl Injection {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.iter().all(Option::is_none)
    }

    fn source(&self, t: usize) -> Option<&[f64]> {
        self.sources.get(t).and_then(|s| s.as_deref())
    }
}

/// Pre-ReLU products of one SINN directional step.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedTerms {
    pub inter_pos: Option<Vec<f64>>,
    pub inter_neg: Option<Vec<f64>>,
    pub intra_pos: Vec<f64>,
    pub intra_neg: Vec<f64>,
}

impl SignedTerms {
    pub fn iter(&self) -> impl Iterator<Item = (Channel, bool, &[f64])> {
        [
            self.inter_pos.as_deref().map(|v| (Channel::Pos, true, v)),
            Some((Channel::Pos, false, self.intra_pos.as_slice())),
            self.inter_neg.as_deref().map(|v| (Channel::Neg, true, v)),
            Some((Channel::Neg, false, self.intra_neg.as_slice())),
        ]
        .into_iter()
        .flatten()
    }
}

/// One layer of a directional recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct DirStep {
    pub act: Vec<f64>,
    /// Vector this layer received from its neighbor (after injection).
    pub incoming: Option<Vec<f64>>,
    pub terms: Option<SignedTerms>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub variant: Variant,
    pub feature: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    /// Top-down recursion; empty for the logistic baseline.
    pub down: Vec<DirStep>,
    /// Bottom-up recursion; empty unless BINN/SINN.
    pub up: Vec<DirStep>,
    pub a: Vec<Vec<f64>>,
    pub prob: Vec<Vec<f64>>,
    /// Layers whose outgoing messages were replaced by an observation.
    pub observed: Vec<bool>,
}

impl ForwardTrace {
    pub fn is_injected(&self) -> bool {
        self.observed.iter().any(|&o| o)
    }
}

/// Per-layer `x_t = W_t f + c_t`.
pub fn visual_activations(p: &ModelParams, feature: &[f64]) -> Result<Vec<Vec<f64>>> {
    if feature.len() != p.feature_dim {
        return Err(Error::Shape(format!("feature length {} != model dimension {}", feature.len(), p.feature_dim)));
    }
    (0..p.num_layers()).map(|t| affine(p.get(ParamId::VisW(t))?, feature, p.get(ParamId::VisB(t))?.as_slice())).collect()
}

fn add_into(acc: &mut [f64], v: &[f64], sign: f64) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += sign * b;
    }
}

fn dense_step(p: &ModelParams, dir: Dir, t: usize, x: &[f64], incoming: Option<&[f64]>) -> Result<DirStep> {
    let mut act = p.get(ParamId::DirBias { dir, t })?.as_slice().to_vec();
    if let Some(src) = incoming {
        add_into(&mut act, &matvec(p.get(ParamId::Inter { dir, ch: Channel::Dense, t })?, src)?, 1.0);
    }
    add_into(&mut act, &matvec(p.get(ParamId::Intra { dir, ch: Channel::Dense, t })?, x)?, 1.0);
    Ok(DirStep { act, incoming: incoming.map(<[f64]>::to_vec), terms: None })
}

fn signed_step(p: &ModelParams, masks: &MaskSet, dir: Dir, t: usize, x: &[f64], incoming: Option<&[f64]>) -> Result<DirStep> {
    let product = |id: ParamId, v: &[f64]| -> Result<Vec<f64>> {
        let mask = id.mask(masks).ok_or_else(|| Error::Shape(format!("no mask for {id}")))?;
        masked_matvec(p.get(id)?, mask, v)
    };
    let inter = |ch| incoming.map(|src| product(ParamId::Inter { dir, ch, t }, src)).transpose();
    let terms = SignedTerms {
        inter_pos: inter(Channel::Pos)?,
        inter_neg: inter(Channel::Neg)?,
        intra_pos: product(ParamId::Intra { dir, ch: Channel::Pos, t }, x)?,
        intra_neg: product(ParamId::Intra { dir, ch: Channel::Neg, t }, x)?,
    };
    // positive rectified terms summed, then negative ones, then the bias
    let n = x.len();
    let mut pos = vec![0.0; n];
    let mut neg = vec![0.0; n];
    for (ch, _, pre) in terms.iter() {
        let acc = if ch == Channel::Pos { &mut pos } else { &mut neg };
        for (a, &z) in acc.iter_mut().zip(pre) {
            *a += relu_scalar(z);
        }
    }
    let bias = p.get(ParamId::DirBias { dir, t })?.as_slice();
    let act = (0..n).map(|i| pos[i] - neg[i] + bias[i]).collect();
    Ok(DirStep { act, incoming: incoming.map(<[f64]>::to_vec), terms: Some(terms) })
}

fn recursion(p: &ModelParams, masks: Option<&MaskSet>, xs: &[Vec<f64>], dir: Dir, inj: &Injection) -> Result<Vec<DirStep>> {
    let t_count = xs.len();
    let order: Vec<usize> = match dir {
        Dir::Down => (0..t_count).collect(),
        Dir::Up => (0..t_count).rev().collect(),
    };
    let mut steps: Vec<Option<DirStep>> = vec![None; t_count];
    for t in order {
        let incoming = dir
            .source(t, t_count)
            .map(|s| inj.source(s).unwrap_or_else(|| &steps[s].as_ref().expect("source computed first").act).to_vec());
        let step = match masks {
            Some(m) => signed_step(p, m, dir, t, &xs[t], incoming.as_deref())?,
            None => dense_step(p, dir, t, &xs[t], incoming.as_deref())?,
        };
        steps[t] = Some(step);
    }
    Ok(steps.into_iter().map(|s| s.expect("all layers visited")).collect())
}

fn aggregate(p: &ModelParams, down: &[DirStep], up: &[DirStep]) -> Result<Vec<Vec<f64>>> {
    (0..down.len())
        .map(|t| {
            let mut a = p.get(ParamId::Bias(t))?.as_slice().to_vec();
            add_into(&mut a, &matvec(p.get(ParamId::Agg { dir: Dir::Down, t })?, &down[t].act)?, 1.0);
            add_into(&mut a, &matvec(p.get(ParamId::Agg { dir: Dir::Up, t })?, &up[t].act)?, 1.0);
            Ok(a)
        })
        .collect()
}

fn finish(variant: Variant, xs: Vec<Vec<f64>>, down: Vec<DirStep>, up: Vec<DirStep>, a: Vec<Vec<f64>>, inj: &Injection) -> ForwardTrace {
    let prob = a
        .iter()
        .enumerate()
        .map(|(t, at)| match inj.display.get(t).and_then(Option::as_ref) {
            Some(shown) => shown.clone(),
            None => sigmoid(at),
        })
        .collect();
    let observed = (0..a.len()).map(|t| inj.source(t).is_some()).collect();
    ForwardTrace { variant, feature: Vec::new(), x: xs, down, up, a, prob, observed }
}

fn expect_variant(p: &ModelParams, v: Variant) -> Result<()> {
    if p.variant != v {
        return Err(Error::Config(format!("expected a {v} model, got {}", p.variant)));
    }
    Ok(())
}

pub fn forward_logistic(p: &ModelParams, xs: Vec<Vec<f64>>, inj: &Injection) -> Result<ForwardTrace> {
    expect_variant(p, Variant::Logistic)?;
    p.check_inputs(&xs)?;
    let a = xs.clone();
    Ok(finish(Variant::Logistic, xs, Vec::new(), Vec::new(), a, inj))
}

/// `a_t = V_t a_{t-1} + H_t x_t + b_t`.
pub fn forward_topdown(p: &ModelParams, xs: Vec<Vec<f64>>, inj: &Injection) -> Result<ForwardTrace> {
    expect_variant(p, Variant::TopDown)?;
    p.check_inputs(&xs)?;
    let down = recursion(p, None, &xs, Dir::Down, inj)?;
    let a = down.iter().map(|s| s.act.clone()).collect();
    Ok(finish(Variant::TopDown, xs, down, Vec::new(), a, inj))
}

pub fn forward_binn(p: &ModelParams, xs: Vec<Vec<f64>>, inj: &Injection) -> Result<ForwardTrace> {
    expect_variant(p, Variant::Binn)?;
    p.check_inputs(&xs)?;
    let down = recursion(p, None, &xs, Dir::Down, inj)?;
    let up = recursion(p, None, &xs, Dir::Up, inj)?;
    let a = aggregate(p, &down, &up)?;
    Ok(finish(Variant::Binn, xs, down, up, a, inj))
}

pub fn forward_sinn(p: &ModelParams, masks: &MaskSet, xs: Vec<Vec<f64>>, inj: &Injection) -> Result<ForwardTrace> {
    expect_variant(p, Variant::Sinn)?;
    p.check_inputs(&xs)?;
    p.check_masked_zero(masks)?;
    let down = recursion(p, Some(masks), &xs, Dir::Down, inj)?;
    let up = recursion(p, Some(masks), &xs, Dir::Up, inj)?;
    let a = aggregate(p, &down, &up)?;
    Ok(finish(Variant::Sinn, xs, down, up, a, inj))
}

/// Visual activations followed by the variant's message passing.
pub fn forward(p: &ModelParams, masks: &MaskSet, feature: &[f64], inj: &Injection) -> Result<ForwardTrace> {
    let xs = visual_activations(p, feature)?;
    let mut trace = match p.variant {
        Variant::Logistic => forward_logistic(p, xs, inj)?,
        Variant::TopDown => forward_topdown(p, xs, inj)?,
        Variant::Binn => forward_binn(p, xs, inj)?,
        Variant::Sinn => forward_sinn(p, masks, xs, inj)?,
    };
    trace.feature = feature.to_vec();
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LabelGraph;

    const TOY: &str = "layer scene: indoor, outdoor\nlayer place: office, beach, forest\n\
                       pos scene.indoor place.office\nneg scene.indoor place.beach\n";

    fn chain(sizes: &[usize]) -> LabelGraph {
        let mut text = String::new();
        for (t, &n) in sizes.iter().enumerate() {
            let labels: Vec<String> = (0..n).map(|i| format!("l{i}")).collect();
            text.push_str(&format!("layer L{t}: {}\n", labels.join(", ")));
        }
        LabelGraph::parse(&text).unwrap()
    }

    fn set(p: &mut ModelParams, id: ParamId, rows: &[&[f64]]) {
        *p.get_mut(id).unwrap() = Matrix::from_rows(rows).unwrap();
    }

    #[test]
    fn layout_shapes() {
        let lay = layout(Variant::Sinn, &[2, 3], 4);
        let find = |id| lay.iter().find(|(i, _, _)| *i == id).map(|&(_, r, c)| (r, c));
        assert_eq!(find(ParamId::VisW(1)), Some((3, 4)));
        assert_eq!(find(ParamId::Inter { dir: Dir::Down, ch: Channel::Pos, t: 1 }), Some((3, 2)));
        assert_eq!(find(ParamId::Inter { dir: Dir::Up, ch: Channel::Neg, t: 0 }), Some((2, 3)));
        assert_eq!(find(ParamId::Inter { dir: Dir::Down, ch: Channel::Pos, t: 0 }), None);
        assert_eq!(find(ParamId::Inter { dir: Dir::Up, ch: Channel::Pos, t: 1 }), None);
        assert_eq!(layout(Variant::Logistic, &[2, 3], 4).len(), 4);
        assert!(layout(Variant::TopDown, &[2, 3], 4).iter().all(|(id, _, _)| !matches!(id, ParamId::Agg { .. })));
    }

    #[test]
    fn param_names_round_trip() {
        for (id, _, _) in layout(Variant::Sinn, &[2, 3, 4], 5).into_iter().chain(layout(Variant::Binn, &[1, 1], 1)) {
            assert_eq!(id.to_string().parse::<ParamId>().unwrap(), id);
        }
        assert!("inter.sideways.pos.1".parse::<ParamId>().is_err());
    }

    #[test]
    fn init_is_deterministic_and_masked() {
        let g = LabelGraph::parse(TOY).unwrap();
        let m = g.compile_masks();
        let a = ModelParams::init(&g, &m, 4, Variant::Sinn, 7).unwrap();
        let b = ModelParams::init(&g, &m, 4, Variant::Sinn, 7).unwrap();
        assert_eq!(a, b);
        a.check_masked_zero(&m).unwrap();
        let c = ModelParams::init(&g, &m, 4, Variant::Sinn, 8).unwrap();
        assert_ne!(a, c);
        for (id, t) in &a.tensors {
            if !id.is_weight() {
                assert!(t.as_slice().iter().all(|&v| v == 0.0), "{id}");
            } else {
                let s = (6.0 / (t.rows() + t.cols()) as f64).sqrt();
                assert!(t.as_slice().iter().all(|v| v.abs() <= s));
            }
        }
        assert!(ModelParams::init(&g, &m, 0, Variant::Sinn, 7).is_err());
    }

    #[test]
    fn visual_activation_examples() {
        let g = chain(&[2]);
        let mut p = ModelParams::zeros(Variant::Logistic, &g.sizes(), 2, g.hash());
        set(&mut p, ParamId::VisB(0), &[&[1.5], &[-2.0]]);
        assert_eq!(visual_activations(&p, &[9.0, 9.0]).unwrap(), vec![vec![1.5, -2.0]]);

        *p.get_mut(ParamId::VisW(0)).unwrap() = Matrix::identity(2);
        *p.get_mut(ParamId::VisB(0)).unwrap() = Matrix::zeros(2, 1);
        assert_eq!(visual_activations(&p, &[0.3, -0.7]).unwrap(), vec![vec![0.3, -0.7]]);
        assert!(visual_activations(&p, &[0.3]).is_err());
    }

    #[test]
    fn topdown_scalar_chain() {
        let g = chain(&[1, 1]);
        let mut p = ModelParams::zeros(Variant::TopDown, &g.sizes(), 1, g.hash());
        for t in 0..2 {
            set(&mut p, ParamId::Intra { dir: Dir::Down, ch: Channel::Dense, t }, &[&[1.0]]);
            set(&mut p, ParamId::DirBias { dir: Dir::Down, t }, &[&[0.1]]);
        }
        set(&mut p, ParamId::Inter { dir: Dir::Down, ch: Channel::Dense, t: 1 }, &[&[2.0]]);
        let tr = forward_topdown(&p, vec![vec![0.5], vec![0.3]], &Injection::none()).unwrap();
        assert!((tr.a[0][0] - 0.6).abs() < 1e-15);
        assert!((tr.a[1][0] - 1.6).abs() < 1e-15);
    }

    #[test]
    fn topdown_identity_and_single_layer() {
        let g = chain(&[2, 3]);
        let mut p = ModelParams::zeros(Variant::TopDown, &g.sizes(), 1, g.hash());
        for t in 0..2 {
            *p.get_mut(ParamId::Intra { dir: Dir::Down, ch: Channel::Dense, t }).unwrap() = Matrix::identity(g.sizes()[t]);
        }
        let xs = vec![vec![0.2, -1.0], vec![3.0, 0.0, -0.5]];
        let tr = forward_topdown(&p, xs.clone(), &Injection::none()).unwrap();
        assert_eq!(tr.a, xs);

        let g1 = chain(&[2]);
        let mut p1 = ModelParams::zeros(Variant::TopDown, &g1.sizes(), 1, g1.hash());
        set(&mut p1, ParamId::Intra { dir: Dir::Down, ch: Channel::Dense, t: 0 }, &[&[2.0, 0.0], &[1.0, 1.0]]);
        set(&mut p1, ParamId::DirBias { dir: Dir::Down, t: 0 }, &[&[0.5], &[0.0]]);
        let tr = forward_topdown(&p1, vec![vec![1.0, 2.0]], &Injection::none()).unwrap();
        assert_eq!(tr.a, vec![vec![2.5, 3.0]]);
    }

    #[test]
    fn binn_examples() {
        let g = chain(&[2, 3]);
        let mut p = ModelParams::zeros(Variant::Binn, &g.sizes(), 1, g.hash());
        for t in 0..2 {
            let n = g.sizes()[t];
            for dir in [Dir::Down, Dir::Up] {
                *p.get_mut(ParamId::Intra { dir, ch: Channel::Dense, t }).unwrap() = Matrix::identity(n);
                *p.get_mut(ParamId::Agg { dir, t }).unwrap() = Matrix::identity(n);
            }
        }
        let xs = vec![vec![0.2, -1.0], vec![3.0, 0.0, -0.5]];
        let tr = forward_binn(&p, xs.clone(), &Injection::none()).unwrap();
        let doubled: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().map(|v| 2.0 * v).collect()).collect();
        assert_eq!(tr.a, doubled);
    }

    #[test]
    fn binn_scalar_chain() {
        // n = (1, 1); evaluate the two recursions and the mix by hand.
        let g = chain(&[1, 1]);
        let mut p = ModelParams::zeros(Variant::Binn, &g.sizes(), 1, g.hash());
        let s = |p: &mut ModelParams, id, v: f64| set(p, id, &[&[v]]);
        s(&mut p, ParamId::Intra { dir: Dir::Down, ch: Channel::Dense, t: 0 }, 1.0);
        s(&mut p, ParamId::Intra { dir: Dir::Down, ch: Channel::Dense, t: 1 }, 2.0);
        s(&mut p, ParamId::Inter { dir: Dir::Down, ch: Channel::Dense, t: 1 }, 0.5);
        s(&mut p, ParamId::DirBias { dir: Dir::Down, t: 1 }, 0.25);
        s(&mut p, ParamId::Intra { dir: Dir::Up, ch: Channel::Dense, t: 0 }, -1.0);
        s(&mut p, ParamId::Intra { dir: Dir::Up, ch: Channel::Dense, t: 1 }, 3.0);
        s(&mut p, ParamId::Inter { dir: Dir::Up, ch: Channel::Dense, t: 0 }, 2.0);
        s(&mut p, ParamId::DirBias { dir: Dir::Up, t: 0 }, 1.0);
        for t in 0..2 {
            s(&mut p, ParamId::Agg { dir: Dir::Down, t }, 1.0);
            s(&mut p, ParamId::Agg { dir: Dir::Up, t }, 0.5);
            s(&mut p, ParamId::Bias(t), -0.5);
        }
        let tr = forward_binn(&p, vec![vec![1.0], vec![2.0]], &Injection::none()).unwrap();
        // down: a0 = 1, a1 = 0.5*1 + 2*2 + 0.25 = 4.75
        // up:   a1 = 3*2 = 6, a0 = 2*6 - 1*1 + 1 = 12
        // mix:  a0 = 1 + 6 - 0.5 = 6.5, a1 = 4.75 + 3 - 0.5 = 7.25
        assert_eq!(tr.down[1].act, vec![4.75]);
        assert_eq!(tr.up[0].act, vec![12.0]);
        assert_eq!(tr.a, vec![vec![6.5], vec![7.25]]);
    }

    fn scalar_sinn() -> (LabelGraph, MaskSet) {
        let g = LabelGraph::parse("option no_self_gate\nlayer a: x\nlayer b: y\npos a.x b.y\n").unwrap();
        let mut m = g.compile_masks();
        // open the negative inter channel too, so both signs are exercised
        m.down[1].as_mut().unwrap().neg = Mask::trues(1, 1);
        (g, m)
    }

    #[test]
    fn sinn_scalar_terms() {
        let (g, m) = scalar_sinn();
        let mut p = ModelParams::zeros(Variant::Sinn, &g.sizes(), 1, g.hash());
        set(&mut p, ParamId::Inter { dir: Dir::Down, ch: Channel::Pos, t: 1 }, &[&[2.0]]);
        set(&mut p, ParamId::Inter { dir: Dir::Down, ch: Channel::Neg, t: 1 }, &[&[3.0]]);
        set(&mut p, ParamId::DirBias { dir: Dir::Down, t: 0 }, &[&[1.0]]);
        let tr = forward_sinn(&p, &m, vec![vec![0.0], vec![0.0]], &Injection::none()).unwrap();
        assert_eq!(tr.down[0].act, vec![1.0]);
        assert_eq!(tr.down[1].act, vec![-1.0]);

        set(&mut p, ParamId::DirBias { dir: Dir::Down, t: 0 }, &[&[-1.0]]);
        set(&mut p, ParamId::Inter { dir: Dir::Down, ch: Channel::Neg, t: 1 }, &[&[0.0]]);
        let tr = forward_sinn(&p, &m, vec![vec![0.0], vec![0.0]], &Injection::none()).unwrap();
        let terms = tr.down[1].terms.as_ref().unwrap();
        assert_eq!(terms.inter_pos.as_deref(), Some(&[-2.0][..]));
        assert_eq!(tr.down[1].act, vec![0.0]);
    }

    #[test]
    fn sinn_self_gate_only_doubles_rectified_input() {
        let g = chain(&[2, 3]);
        let m = g.compile_masks();
        let mut p = ModelParams::zeros(Variant::Sinn, &g.sizes(), 1, g.hash());
        for t in 0..2 {
            let n = g.sizes()[t];
            for dir in [Dir::Down, Dir::Up] {
                *p.get_mut(ParamId::Intra { dir, ch: Channel::Pos, t }).unwrap() = Matrix::identity(n);
                *p.get_mut(ParamId::Agg { dir, t }).unwrap() = Matrix::identity(n);
            }
        }
        let xs = vec![vec![0.2, -1.0], vec![3.0, 0.0, -0.5]];
        let tr = forward_sinn(&p, &m, xs.clone(), &Injection::none()).unwrap();
        for (a, x) in tr.a.iter().zip(&xs) {
            let want: Vec<f64> = x.iter().map(|&v| 2.0 * relu_scalar(v)).collect();
            assert_eq!(a, &want);
        }
    }

    #[test]
    fn sinn_rejects_unmasked_weights() {
        let g = LabelGraph::parse(TOY).unwrap();
        let m = g.compile_masks();
        let mut p = ModelParams::zeros(Variant::Sinn, &g.sizes(), 2, g.hash());
        // forest <- indoor has no edge
        p.get_mut(ParamId::Inter { dir: Dir::Down, ch: Channel::Pos, t: 1 }).unwrap().set(2, 0, 0.5);
        let xs = vec![vec![0.0; 2], vec![0.0; 3]];
        assert!(forward_sinn(&p, &m, xs, &Injection::none()).is_err());
    }

    #[test]
    fn zero_activations_give_half() {
        let g = LabelGraph::parse(TOY).unwrap();
        let m = g.compile_masks();
        for v in Variant::ALL {
            let p = ModelParams::zeros(v, &g.sizes(), 3, g.hash());
            let tr = forward(&p, &m, &[1.0, -2.0, 0.5], &Injection::none()).unwrap();
            assert!(tr.prob.iter().flatten().all(|&q| q == 0.5), "{v}");
        }
    }

    #[test]
    fn variant_mismatch_is_an_error() {
        let g = chain(&[1, 1]);
        let p = ModelParams::zeros(Variant::Binn, &g.sizes(), 1, g.hash());
        assert!(forward_topdown(&p, vec![vec![0.0], vec![0.0]], &Injection::none()).is_err());
        assert!(forward_binn(&p, vec![vec![0.0]], &Injection::none()).is_err());
    }
}
