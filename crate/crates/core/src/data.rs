//! Samples, the dataset file format, train/test splits and a synthetic
//! generator for layered labels.
//!
//! Dataset files are line-delimited JSON. The first line is a header:
//!
//! ```text
//! {"format":"sinn-data-1","graph_hash":"<hex>","dim":2,"exclusive":["scene"]}
//! ```
//!
//! Every following line is one sample. `labels` maps each layer name to the
//! labels that are positive in it; every layer must be present, an empty list
//! meaning all-negative:
//!
//! ```text
//! {"id":"s0","feature":[0.5,-1.0],"labels":{"place":["office"],"scene":["indoor"]}}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConceptLayer, LabelGraph, LabelRef, RelationEdge, Sign};

pub const DATA_FORMAT: &str = "sinn-data-1";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub feature: Vec<f64>,
    /// One binary vector per layer.
    pub targets: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graph: LabelGraph,
    pub feature_dim: usize,
    pub samples: Vec<Sample>,
    /// Layers whose samples carry exactly one positive label.
    pub exclusive: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    graph_hash: String,
    dim: usize,
    exclusive: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    feature: Vec<f64>,
    labels: BTreeMap<String, Vec<String>>,
}

impl Dataset {
    pub fn new(graph: LabelGraph, feature_dim: usize, samples: Vec<Sample>, exclusive: Vec<bool>) -> Result<Self> {
        let ds = Self { graph, feature_dim, samples, exclusive };
        ds.check()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same graph and settings, different samples.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Self { graph: self.graph.clone(), feature_dim: self.feature_dim, samples, exclusive: self.exclusive.clone() }
    }

    fn check(&self) -> Result<()> {
        let sizes = self.graph.sizes();
        if self.exclusive.len() != sizes.len() {
            return Err(Error::Data("exclusivity flags do not match layer count".into()));
        }
        let mut ids = HashSet::new();
        for (i, s) in self.samples.iter().enumerate() {
            let rec = |msg: String| Error::Record { record: i + 1, msg };
            if !ids.insert(s.id.as_str()) {
                return Err(rec(format!("duplicate id `{}`", s.id)));
            }
            if s.feature.len() != self.feature_dim {
                return Err(rec(format!("feature has {} values, expected {}", s.feature.len(), self.feature_dim)));
            }
            if s.feature.iter().any(|v| !v.is_finite()) {
                return Err(rec("non-finite feature value".into()));
            }
            if s.targets.len() != sizes.len() {
                return Err(rec(format!("{} target layers, graph has {}", s.targets.len(), sizes.len())));
            }
            for (t, (y, &n)) in s.targets.iter().zip(&sizes).enumerate() {
                let name = &self.graph.layers[t].name;
                if y.len() != n {
                    return Err(rec(format!("layer `{name}` has {} targets, expected {n}", y.len())));
                }
                if y.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(rec(format!("layer `{name}` has a non-binary target")));
                }
                if self.exclusive[t] && y.iter().filter(|&&v| v == 1.0).count() != 1 {
                    return Err(rec(format!("exclusive layer `{name}` needs exactly one positive label")));
                }
            }
        }
        Ok(())
    }

    /// Index of the positive label in an exclusive layer.
    pub fn class_of(&self, sample: &Sample, layer: usize) -> Option<usize> {
        sample.targets.get(layer)?.iter().position(|&v| v == 1.0)
    }

    /// Finest exclusive layer, used for stratification.
    pub fn stratify_layer(&self) -> Option<usize> {
        self.exclusive.iter().rposition(|&e| e)
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            format: DATA_FORMAT.into(),
            graph_hash: self.graph.hash(),
            dim: self.feature_dim,
            exclusive: self.graph.layers.iter().zip(&self.exclusive).filter(|(_, &e)| e).map(|(l, _)| l.name.clone()).collect(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for s in &self.samples {
            let labels = self
                .graph
                .layers
                .iter()
                .zip(&s.targets)
                .map(|(layer, y)| {
                    let pos = layer.labels.iter().zip(y).filter(|(_, &v)| v == 1.0).map(|(l, _)| l.clone()).collect();
                    (layer.name.clone(), pos)
                })
                .collect();
            let rec = Record { id: s.id.clone(), feature: s.feature.clone(), labels };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses a dataset file against `graph`. Record numbers in errors count
    /// samples from 1; the header is record 0.
    pub fn from_jsonl(text: &str, graph: &LabelGraph) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header_line = lines.next().ok_or_else(|| Error::Data("empty dataset file".into()))?;
        let header: Header = serde_json::from_str(header_line).map_err(|e| Error::Record { record: 0, msg: format!("bad header: {e}") })?;
        if header.format != DATA_FORMAT {
            return Err(Error::Record { record: 0, msg: format!("unsupported format `{}`", header.format) });
        }
        if header.graph_hash != graph.hash() {
            return Err(Error::Data("dataset was written for a different label graph".into()));
        }
        let mut exclusive = vec![false; graph.num_layers()];
        for name in &header.exclusive {
            let t = graph.layer_index(name).ok_or_else(|| Error::Record { record: 0, msg: format!("unknown exclusive layer `{name}`") })?;
            exclusive[t] = true;
        }

        let mut samples = Vec::new();
        for (i, line) in lines.enumerate() {
            let record = i + 1;
            let err = |msg: String| Error::Record { record, msg };
            let rec: Record = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            for name in rec.labels.keys() {
                if graph.layer_index(name).is_none() {
                    return Err(err(format!("unknown layer `{name}`")));
                }
            }
            let mut targets = Vec::with_capacity(graph.num_layers());
            for layer in &graph.layers {
                let pos = rec.labels.get(&layer.name).ok_or_else(|| err(format!("missing targets for layer `{}`", layer.name)))?;
                let mut y = vec![0.0; layer.len()];
                for l in pos {
                    let j = layer.label_index(l).ok_or_else(|| err(format!("unknown label `{}.{l}`", layer.name)))?;
                    y[j] = 1.0;
                }
                targets.push(y);
            }
            samples.push(Sample { id: rec.id, feature: rec.feature, targets });
        }
        Self::new(graph.clone(), header.dim, samples, exclusive)
    }

    pub fn load(path: impl AsRef<Path>, graph: &LabelGraph) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?, graph)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

/// Deterministic train/test partition, stratified by the finest exclusive
/// layer when there is one. Samples keep their original relative order.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let n = ds.len();
    let total = (train_fraction * n as f64).round() as usize;
    if total == 0 || total == n {
        return Err(Error::Data(format!("fraction {train_fraction} of {n} samples leaves one side empty")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let groups: Vec<Vec<usize>> = match ds.stratify_layer() {
        Some(layer) => {
            let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, s) in ds.samples.iter().enumerate() {
                by_class.entry(ds.class_of(s, layer).unwrap_or(usize::MAX)).or_default().push(i);
            }
            by_class.into_values().collect()
        }
        None => vec![(0..n).collect()],
    };
    let quotas = allocate(&groups.iter().map(Vec::len).collect::<Vec<_>>(), train_fraction, total);

    let mut in_train = vec![false; n];
    for (mut g, k) in groups.into_iter().zip(quotas) {
        g.shuffle(&mut rng);
        for &i in &g[..k] {
            in_train[i] = true;
        }
    }
    let (train, test): (Vec<_>, Vec<_>) = ds.samples.iter().cloned().zip(&in_train).partition(|(_, &t)| t);
    Ok((ds.with_samples(train.into_iter().map(|(s, _)| s).collect()), ds.with_samples(test.into_iter().map(|(s, _)| s).collect())))
}

/// Per-group train counts summing to `total` (when feasible), keeping at
/// least one sample on each side of every group that has two or more.
fn allocate(counts: &[usize], frac: f64, total: usize) -> Vec<usize> {
    let bounds: Vec<(usize, usize)> = counts.iter().map(|&c| if c >= 2 { (1, c - 1) } else { (0, c) }).collect();
    let mut k: Vec<usize> = counts.iter().zip(&bounds).map(|(&c, &(lo, hi))| ((frac * c as f64).floor() as usize).clamp(lo, hi)).collect();
    let remainder = |i: usize, k: &[usize]| frac * counts[i] as f64 - k[i] as f64;
    loop {
        let sum: usize = k.iter().sum();
        if sum == total {
            break;
        }
        let pick = if sum < total {
            (0..k.len()).filter(|&i| k[i] < bounds[i].1).max_by(|&a, &b| remainder(a, &k).total_cmp(&remainder(b, &k)).then(b.cmp(&a)))
        } else {
            (0..k.len()).filter(|&i| k[i] > bounds[i].0).min_by(|&a, &b| remainder(a, &k).total_cmp(&remainder(b, &k)).then(a.cmp(&b)))
        };
        match pick {
            Some(i) if sum < total => k[i] += 1,
            Some(i) => k[i] -= 1,
            None => break,
        }
    }
    k
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub samples_per_class: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Probability of flipping each label of a non-exclusive layer.
    pub flip_prob: f64,
    pub seed: u64,
    /// Exclusive layers; inferred from the graph when `None`.
    pub exclusive: Option<Vec<bool>>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { samples_per_class: 20, feature_dim: 32, noise_sigma: 0.3, flip_prob: 0.0, seed: 0, exclusive: None }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be non-negative, got {}", self.noise_sigma)));
        }
        if !(0.0..0.5).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip probability must be in [0, 0.5), got {}", self.flip_prob)));
        }
        if self.feature_dim == 0 || self.samples_per_class == 0 {
            return Err(Error::Config("feature dimension and samples per class must be positive".into()));
        }
        Ok(())
    }
}

/// The finest layer is exclusive; a coarser layer is exclusive when every
/// label of the layer below has exactly one positive edge into it.
pub fn infer_exclusive(graph: &LabelGraph) -> Vec<bool> {
    let t_count = graph.num_layers();
    let edges = graph.edge_map();
    (0..t_count)
        .map(|t| {
            if t + 1 == t_count {
                return true;
            }
            (0..graph.layers[t + 1].len()).all(|k| {
                let child = LabelRef::new(t + 1, k);
                (0..graph.layers[t].len()).filter(|&j| edges.get(&(LabelRef::new(t, j), child)) == Some(&Sign::Positive)).count() == 1
            })
        })
        .collect()
}

/// Consistent layered targets for the finest-layer class `leaf`.
///
/// A coarser label is positive when it has a positive edge to a positive
/// label of the next finer layer and no negative edge to one. Within a
/// layer, a label negatively related to an earlier positive label is cleared.
pub fn leaf_targets(graph: &LabelGraph, leaf: usize) -> Vec<Vec<bool>> {
    let t_count = graph.num_layers();
    let edges = graph.edge_map();
    let sign = |a: LabelRef, b: LabelRef| {
        let key = if a <= b { (a, b) } else { (b, a) };
        edges.get(&key).copied()
    };
    let mut pos: Vec<Vec<bool>> = graph.layers.iter().map(|l| vec![false; l.len()]).collect();
    pos[t_count - 1][leaf] = true;
    for t in (0..t_count.saturating_sub(1)).rev() {
        for j in 0..graph.layers[t].len() {
            let me = LabelRef::new(t, j);
            let finer = (0..graph.layers[t + 1].len()).filter(|&k| pos[t + 1][k]).map(|k| LabelRef::new(t + 1, k));
            let (mut plus, mut minus) = (false, false);
            for other in finer {
                match sign(me, other) {
                    Some(Sign::Positive) => plus = true,
                    Some(Sign::Negative) => minus = true,
                    None => {}
                }
            }
            pos[t][j] = plus && !minus;
        }
        for j in 0..graph.layers[t].len() {
            if pos[t][j] && (0..j).any(|k| pos[t][k] && sign(LabelRef::new(t, k), LabelRef::new(t, j)) == Some(Sign::Negative)) {
                pos[t][j] = false;
            }
        }
    }
    pos
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Draws a dataset whose targets follow the graph.
///
/// Every label gets a random unit direction. A finest-layer class's
/// prototype is the normalized sum of the directions of all labels positive
/// in its target pattern, so classes sharing ancestors share feature
/// structure. Samples are the prototype plus isotropic Gaussian noise.
pub fn generate_synthetic(graph: &LabelGraph, spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let diags = graph.validate();
    if let Some(d) = diags.first() {
        return Err(Error::Graph(d.to_string()));
    }
    let t_count = graph.num_layers();
    let exclusive = match &spec.exclusive {
        Some(e) if e.len() == t_count => e.clone(),
        Some(_) => return Err(Error::Config("exclusivity flags do not match layer count".into())),
        None => infer_exclusive(graph),
    };
    let leaves = graph.layers[t_count - 1].len();
    let patterns: Vec<Vec<Vec<bool>>> = (0..leaves).map(|c| leaf_targets(graph, c)).collect();
    for (c, pat) in patterns.iter().enumerate() {
        for t in 0..t_count {
            let count = pat[t].iter().filter(|&&b| b).count();
            if exclusive[t] && count != 1 {
                let leaf = &graph.layers[t_count - 1].labels[c];
                let layer = &graph.layers[t].name;
                let why = if count == 0 { "no positive path" } else { "more than one positive label" };
                return Err(Error::Graph(format!("class `{leaf}` has {why} in exclusive layer `{layer}`")));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.feature_dim;
    let directions: Vec<Vec<Vec<f64>>> = graph.layers.iter().map(|l| (0..l.len()).map(|_| unit_vector(&mut rng, d)).collect()).collect();
    let prototypes: Vec<Vec<f64>> = patterns
        .iter()
        .map(|pat| {
            let mut v = vec![0.0; d];
            for (t, layer) in pat.iter().enumerate() {
                for (j, _) in layer.iter().enumerate().filter(|(_, &b)| b) {
                    for (a, b) in v.iter_mut().zip(&directions[t][j]) {
                        *a += b;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut samples = Vec::with_capacity(leaves * spec.samples_per_class);
    for (c, pat) in patterns.iter().enumerate() {
        for k in 0..spec.samples_per_class {
            let feature = prototypes[c].iter().map(|&p| p + noise.sample(&mut rng)).collect();
            let targets = pat
                .iter()
                .zip(&exclusive)
                .map(|(layer, &excl)| {
                    layer
                        .iter()
                        .map(|&b| {
                            let flip = !excl && spec.flip_prob > 0.0 && rng.gen_bool(spec.flip_prob);
                            if b != flip {
                                1.0
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect();
            samples.push(Sample { id: format!("c{c}_{k}"), feature, targets });
        }
    }
    Dataset::new(graph.clone(), d, samples, exclusive)
}

/// Balanced taxonomy over the given layer sizes. Label `j` of layer `t`
/// hangs under label `j * n_{t-1} / n_t` of layer `t - 1` with a positive
/// edge. With `negatives`, the mutual exclusions of a tree taxonomy are
/// declared too: a negative edge to every other label of the parent layer
/// and between every pair of labels within a layer.
pub fn hierarchy_graph(sizes: &[usize], negatives: bool) -> Result<LabelGraph> {
    let layers: Vec<ConceptLayer> =
        sizes.iter().enumerate().map(|(t, &n)| ConceptLayer::new(format!("level{t}"), (0..n).map(|j| format!("c{t}_{j}")))).collect();
    let mut edges = Vec::new();
    for t in 1..sizes.len() {
        for j in 0..sizes[t] {
            let parent = j * sizes[t - 1] / sizes[t];
            for k in 0..sizes[t - 1] {
                let sign = if k == parent { Sign::Positive } else { Sign::Negative };
                if sign == Sign::Positive || negatives {
                    edges.push(RelationEdge::new(LabelRef::new(t - 1, k), LabelRef::new(t, j), sign));
                }
            }
        }
    }
    if negatives {
        for (t, &n) in sizes.iter().enumerate() {
            for j in 0..n {
                for k in j + 1..n {
                    edges.push(RelationEdge::new(LabelRef::new(t, j), LabelRef::new(t, k), Sign::Negative));
                }
            }
        }
    }
    LabelGraph::checked(layers, edges, true)
}
