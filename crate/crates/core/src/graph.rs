//! Layered label-relation graphs and their compiled connectivity masks.
//!
//! A graph is an ordered list of concept layers (coarsest first) plus signed
//! edges. Inter-layer edges may only join adjacent layers. Every edge is a
//! symmetric correlation, so one declaration gates both the top-down and the
//! bottom-up weight entry.
//!
//! Text format, one directive per line, `#` starts a comment:
//!
//! ```text
//! option no_self_gate
//! layer scene: indoor, outdoor
//! layer place: office, beach, forest
//! pos scene.indoor place.office
//! neg scene.indoor place.beach
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Mask;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptLayer {
    pub name: String,
    pub labels: Vec<String>,
}

impl ConceptLayer {
    pub fn new(name: impl Into<String>, labels: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self { name: name.into(), labels: labels.into_iter().map(Into::into).collect() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    fn keyword(self) -> &'static str {
        match self {
            Sign::Positive => "pos",
            Sign::Negative => "neg",
        }
    }
}

/// `(layer index, label index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelRef {
    pub layer: usize,
    pub label: usize,
}

impl LabelRef {
    pub fn new(layer: usize, label: usize) -> Self {
        Self { layer, label }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationEdge {
    pub from: LabelRef,
    pub to: LabelRef,
    pub sign: Sign,
}

impl RelationEdge {
    pub fn new(from: LabelRef, to: LabelRef, sign: Sign) -> Self {
        Self { from, to, sign }
    }

    pub fn is_intra(&self) -> bool {
        self.from.layer == self.to.layer
    }

    /// Endpoint pair with the smaller reference first; edges are undirected.
    pub fn key(&self) -> (LabelRef, LabelRef) {
        if self.from <= self.to {
            (self.from, self.to)
        } else {
            (self.to, self.from)
        }
    }

    fn canonical(self) -> Self {
        let (from, to) = self.key();
        Self { from, to, sign: self.sign }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGraph {
    pub layers: Vec<ConceptLayer>,
    pub edges: Vec<RelationEdge>,
    /// Open the diagonal of every intra-layer positive mask.
    pub self_gate: bool,
}

impl LabelGraph {
    /// Assembles a graph without checking it; see [`LabelGraph::validate`].
    pub fn new(layers: Vec<ConceptLayer>, edges: Vec<RelationEdge>) -> Self {
        Self { layers, edges, self_gate: true }
    }

    /// Assembles and validates, failing on the first diagnostic.
    pub fn checked(layers: Vec<ConceptLayer>, edges: Vec<RelationEdge>, self_gate: bool) -> Result<Self> {
        let mut g = Self { layers, edges, self_gate };
        g.normalize();
        let diags = g.validate();
        if let Some(d) = diags.first() {
            return Err(Error::Graph(d.to_string()));
        }
        Ok(g)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.layers.iter().map(ConceptLayer::len).collect()
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn resolve(&self, layer: &str, label: &str) -> Option<LabelRef> {
        let li = self.layer_index(layer)?;
        let lj = self.layers[li].label_index(label)?;
        Some(LabelRef::new(li, lj))
    }

    pub fn label_name(&self, r: LabelRef) -> String {
        format!("{}.{}", self.layers[r.layer].name, self.layers[r.layer].labels[r.label])
    }

    /// Orients every edge canonically and drops exact duplicates.
    pub fn normalize(&mut self) {
        let mut seen = HashSet::new();
        self.edges = self.edges.iter().map(|e| e.canonical()).filter(|e| seen.insert(*e)).collect();
        self.edges.sort();
    }

    /// One diagnostic per invariant violation; empty means the graph is usable.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        if self.layers.is_empty() {
            out.push(Diagnostic::NoLayers);
        }
        let mut layer_names = HashSet::new();
        for layer in &self.layers {
            if !layer_names.insert(layer.name.as_str()) {
                out.push(Diagnostic::DuplicateLayer(layer.name.clone()));
            }
            if layer.labels.is_empty() {
                out.push(Diagnostic::EmptyLayer(layer.name.clone()));
            }
            let mut seen = HashSet::new();
            for l in &layer.labels {
                if !seen.insert(l.as_str()) {
                    out.push(Diagnostic::DuplicateLabel { layer: layer.name.clone(), label: l.clone() });
                }
            }
        }

        let valid = |r: LabelRef| r.layer < self.layers.len() && r.label < self.layers[r.layer].len();
        let mut signs: HashMap<(LabelRef, LabelRef), Sign> = HashMap::new();
        let mut conflicted = HashSet::new();
        for e in &self.edges {
            if !valid(e.from) || !valid(e.to) {
                out.push(Diagnostic::DanglingEdge(*e));
                continue;
            }
            let edge = self.describe(e);
            if e.from == e.to {
                out.push(Diagnostic::SelfEdge(edge));
                continue;
            }
            if e.from.layer.abs_diff(e.to.layer) > 1 {
                out.push(Diagnostic::NonAdjacent(edge));
                continue;
            }
            match signs.get(&e.key()) {
                Some(&s) if s != e.sign => {
                    if conflicted.insert(e.key()) {
                        out.push(Diagnostic::ConflictingSign(edge));
                    }
                }
                Some(_) => {}
                None => {
                    signs.insert(e.key(), e.sign);
                }
            }
        }
        out
    }

    fn describe(&self, e: &RelationEdge) -> String {
        format!("{} {} {}", e.sign.keyword(), self.label_name(e.from), self.label_name(e.to))
    }

    /// Builds the boolean masks gating structured weights.
    ///
    /// Call only on a graph whose [`validate`](Self::validate) is empty.
    pub fn compile_masks(&self) -> MaskSet {
        let sizes = self.sizes();
        let t_count = sizes.len();
        let mut down: Vec<Option<SignedMask>> = (0..t_count).map(|t| (t > 0).then(|| SignedMask::empty(sizes[t], sizes[t - 1]))).collect();
        let mut up: Vec<Option<SignedMask>> =
            (0..t_count).map(|t| (t + 1 < t_count).then(|| SignedMask::empty(sizes[t], sizes[t + 1]))).collect();
        let mut intra: Vec<SignedMask> = sizes.iter().map(|&n| SignedMask::empty(n, n)).collect();

        if self.self_gate {
            for (m, &n) in intra.iter_mut().zip(&sizes) {
                for i in 0..n {
                    m.pos.set(i, i, true);
                }
            }
        }

        for e in &self.edges {
            let (a, b) = e.key();
            if a.layer == b.layer {
                let m = intra[a.layer].by_sign_mut(e.sign);
                m.set(a.label, b.label, true);
                m.set(b.label, a.label, true);
            } else {
                // a is the coarser endpoint (smaller layer index)
                let (hi, lo) = (a, b);
                if let Some(m) = down[lo.layer].as_mut() {
                    m.by_sign_mut(e.sign).set(lo.label, hi.label, true);
                }
                if let Some(m) = up[hi.layer].as_mut() {
                    m.by_sign_mut(e.sign).set(hi.label, lo.label, true);
                }
            }
        }
        MaskSet { down, up, intra }
    }

    /// Canonical text: option line, layers, sorted positive edges, sorted
    /// negative edges.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if !self.self_gate {
            out.push_str("option no_self_gate\n");
        }
        for l in &self.layers {
            out.push_str(&format!("layer {}: {}\n", l.name, l.labels.join(", ")));
        }
        for sign in [Sign::Positive, Sign::Negative] {
            let mut lines: Vec<String> = self
                .edges
                .iter()
                .filter(|e| e.sign == sign)
                .map(|e| {
                    let (a, b) = e.key();
                    format!("{} {} {}", sign.keyword(), self.label_name(a), self.label_name(b))
                })
                .collect();
            lines.sort();
            lines.dedup();
            for l in lines {
                out.push_str(&l);
                out.push('\n');
            }
        }
        out
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        let mut g = self.clone();
        g.normalize();
        format!("{:x}", Sha256::digest(g.to_text().as_bytes()))
    }

    /// Parses the line-oriented graph format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut layers: Vec<ConceptLayer> = Vec::new();
        let mut raw_edges: Vec<(usize, Sign, String, String)> = Vec::new();
        let mut self_gate = true;

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |msg: String| Error::Syntax { line: line_no, msg };
            let (kw, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim();
            match kw {
                "layer" => {
                    let (name, labels) = rest.split_once(':').ok_or_else(|| syntax("expected `layer <name>: <label>, ...`".into()))?;
                    let name = name.trim();
                    check_name(name, true).map_err(|m| syntax(format!("layer name: {m}")))?;
                    if layers.iter().any(|l| l.name == name) {
                        return Err(syntax(format!("duplicate layer `{name}`")));
                    }
                    let mut labels_out = Vec::new();
                    for l in labels.split(',') {
                        let l = l.trim();
                        check_name(l, false).map_err(|m| syntax(format!("label: {m}")))?;
                        if labels_out.iter().any(|x: &String| x == l) {
                            return Err(syntax(format!("duplicate label `{l}` in layer `{name}`")));
                        }
                        labels_out.push(l.to_string());
                    }
                    layers.push(ConceptLayer { name: name.to_string(), labels: labels_out });
                }
                "pos" | "neg" => {
                    let sign = if kw == "pos" { Sign::Positive } else { Sign::Negative };
                    let parts: Vec<&str> = rest.split_whitespace().collect();
                    if parts.len() != 2 {
                        return Err(syntax(format!("expected `{kw} <layer>.<label> <layer>.<label>`")));
                    }
                    raw_edges.push((line_no, sign, parts[0].to_string(), parts[1].to_string()));
                }
                "option" => match rest {
                    "no_self_gate" => self_gate = false,
                    other => return Err(syntax(format!("unknown option `{other}`"))),
                },
                other => return Err(syntax(format!("unknown directive `{other}`"))),
            }
        }
        if layers.is_empty() {
            return Err(Error::Graph("no layers declared".into()));
        }

        let graph = LabelGraph { layers, edges: Vec::new(), self_gate };
        let resolve = |line: usize, s: &str| -> Result<LabelRef> {
            let (layer, label) =
                s.split_once('.').ok_or_else(|| Error::Syntax { line, msg: format!("expected `<layer>.<label>`, got `{s}`") })?;
            graph.resolve(layer, label).ok_or_else(|| Error::Syntax { line, msg: format!("unknown label `{s}`") })
        };

        let mut edges = Vec::with_capacity(raw_edges.len());
        let mut signs: HashMap<(LabelRef, LabelRef), (Sign, usize)> = HashMap::new();
        for (line, sign, a, b) in raw_edges {
            let e = RelationEdge::new(resolve(line, &a)?, resolve(line, &b)?, sign);
            if e.from == e.to {
                return Err(Error::Syntax { line, msg: format!("self edge on `{a}`") });
            }
            if e.from.layer.abs_diff(e.to.layer) > 1 {
                return Err(Error::Syntax { line, msg: format!("edge `{a}` - `{b}` joins non-adjacent layers") });
            }
            if let Some(&(prev, prev_line)) = signs.get(&e.key()) {
                if prev != sign {
                    return Err(Error::Syntax {
                        line,
                        msg: format!("conflicting sign for `{a}` - `{b}` (first declared on line {prev_line})"),
                    });
                }
            } else {
                signs.insert(e.key(), (sign, line));
            }
            edges.push(e);
        }
        let mut graph = LabelGraph { edges, ..graph };
        graph.normalize();
        Ok(graph)
    }

    /// Edges grouped by canonical endpoint pair, for lookups by callers such
    /// as the synthetic generator.
    pub fn edge_map(&self) -> BTreeMap<(LabelRef, LabelRef), Sign> {
        self.edges.iter().map(|e| (e.key(), e.sign)).collect()
    }
}

impl std::str::FromStr for LabelGraph {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

fn check_name(s: &str, is_layer: bool) -> Result<(), String> {
    if s.is_empty() {
        return Err("empty name".into());
    }
    let bad = |c: char| c.is_whitespace() || c == ',' || c == '#' || (is_layer && (c == '.' || c == ':'));
    if let Some(c) = s.chars().find(|&c| bad(c)) {
        return Err(format!("`{s}` contains forbidden character {c:?}"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    NoLayers,
    EmptyLayer(String),
    DuplicateLayer(String),
    DuplicateLabel { layer: String, label: String },
    DanglingEdge(RelationEdge),
    SelfEdge(String),
    NonAdjacent(String),
    ConflictingSign(String),
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::NoLayers => write!(f, "graph has no layers"),
            Diagnostic::EmptyLayer(l) => write!(f, "layer `{l}` has no labels"),
            Diagnostic::DuplicateLayer(l) => write!(f, "duplicate layer `{l}`"),
            Diagnostic::DuplicateLabel { layer, label } => {
                write!(f, "duplicate label `{label}` in layer `{layer}`")
            }
            Diagnostic::DanglingEdge(e) => {
                write!(f, "edge references missing label ({}:{}) - ({}:{})", e.from.layer, e.from.label, e.to.layer, e.to.label)
            }
            Diagnostic::SelfEdge(e) => write!(f, "self edge `{e}`"),
            Diagnostic::NonAdjacent(e) => write!(f, "edge `{e}` joins non-adjacent layers"),
            Diagnostic::ConflictingSign(e) => write!(f, "conflicting sign on `{e}`"),
        }
    }
}

/// Positive and negative masks of one weight block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedMask {
    pub pos: Mask,
    pub neg: Mask,
}

impl SignedMask {
    fn empty(rows: usize, cols: usize) -> Self {
        Self { pos: Mask::falses(rows, cols), neg: Mask::falses(rows, cols) }
    }

    pub fn by_sign(&self, s: Sign) -> &Mask {
        match s {
            Sign::Positive => &self.pos,
            Sign::Negative => &self.neg,
        }
    }

    fn by_sign_mut(&mut self, s: Sign) -> &mut Mask {
        match s {
            Sign::Positive => &mut self.pos,
            Sign::Negative => &mut self.neg,
        }
    }
}

/// Masks indexed by the receiving layer `t`.
///
/// `down[t]` gates the message from layer `t-1` into `t` (shape
/// `n_t x n_{t-1}`, absent for `t = 0`); `up[t]` gates the message from
/// `t+1` into `t` (absent for the finest layer); `intra[t]` gates `H_t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub down: Vec<Option<SignedMask>>,
    pub up: Vec<Option<SignedMask>>,
    pub intra: Vec<SignedMask>,
}

impl MaskSet {
    pub fn num_layers(&self) -> usize {
        self.intra.len()
    }
}
