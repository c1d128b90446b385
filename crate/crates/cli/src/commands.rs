use std::collections::BTreeMap;
use std::path::Path;

use serde_json::json;
use sinn_core::data::{generate_synthetic, split};
use sinn_core::metrics::{evaluate, EvalConfig, EvalResult};
use sinn_core::training::fit;
use sinn_core::{
    checkpoint, predict_dataset, reveal, Dataset, LabelGraph, ModelParams, ObservationConfig, SynthSpec, TrainConfig, Variant,
};
use thiserror::Error;

use crate::{observe, CompareCmd, EvalArgs, EvalCmd, ObsArgs, PredictCmd, SynthArgs, TrainArgs, TrainCmd};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    File { path: String, source: sinn_core::Error },
    #[error(transparent)]
    Core(#[from] sinn_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        let core = match self {
            CliError::Usage(_) => return 1,
            CliError::File { source, .. } => source,
            CliError::Core(e) => e,
        };
        match core {
            sinn_core::Error::Config(_) => 1,
            sinn_core::Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

macro_rules! emit {
    ($out:expr, $($arg:tt)*) => {{
        use std::fmt::Write as _;
        let _ = writeln!($out, $($arg)*);
    }};
}

fn at(path: &Path) -> impl Fn(sinn_core::Error) -> CliError + '_ {
    move |source| CliError::File { path: path.display().to_string(), source }
}

fn load_graph(path: &Path) -> Result<LabelGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| at(path)(e.into()))?;
    LabelGraph::parse(&text).map_err(at(path))
}

fn load_data(path: &Path, graph: &LabelGraph) -> Result<Dataset> {
    Dataset::load(path, graph).map_err(at(path))
}

fn load_model(path: &Path, graph: &LabelGraph, ds: &Dataset) -> Result<ModelParams> {
    let p = checkpoint::load(path).map_err(at(path))?;
    if p.graph_hash != graph.hash() {
        return Err(at(path)(sinn_core::Error::Data("checkpoint was trained on a different label graph".into())));
    }
    if p.feature_dim != ds.feature_dim {
        return Err(at(path)(sinn_core::Error::Shape(format!(
            "checkpoint expects {} features, dataset has {}",
            p.feature_dim, ds.feature_dim
        ))));
    }
    Ok(p)
}

fn layer_indices(graph: &LabelGraph, names: &[String]) -> Result<Vec<usize>> {
    names.iter().map(|n| graph.layer_index(n).ok_or_else(|| CliError::Usage(format!("unknown layer `{n}`")))).collect()
}

fn obs_config(a: &ObsArgs) -> Result<ObservationConfig> {
    let cfg = ObservationConfig { epsilon: a.epsilon, mode: a.obs_mode };
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(a: &TrainArgs, obs: &ObsArgs, graph: &LabelGraph) -> Result<TrainConfig> {
    Ok(TrainConfig {
        learning_rate: a.lr,
        momentum: a.momentum,
        batch_size: a.batch,
        clip_threshold: a.clip,
        weight_decay: a.wd,
        epochs: a.epochs,
        lr_decay: a.lr_decay,
        lr_step: a.lr_step,
        seed: a.seed,
        reveal_layers: layer_indices(graph, &a.reveal)?,
        reveal_prob: a.reveal_prob,
        observation: obs_config(obs)?,
    })
}

fn train_model(train: &Dataset, variant: Variant, cfg: &TrainConfig) -> Result<(ModelParams, sinn_core::TrainLog)> {
    let masks = train.graph.compile_masks();
    let mut p = ModelParams::init(&train.graph, &masks, train.feature_dim, variant, cfg.seed)?;
    let log = fit(&train.samples, &mut p, &masks, cfg)?;
    Ok((p, log))
}

fn score(p: &ModelParams, ds: &Dataset, a: &EvalArgs, obs: &ObservationConfig) -> Result<EvalResult> {
    let layers = layer_indices(&ds.graph, &a.observe)?;
    let masks = ds.graph.compile_masks();
    let probs = predict_dataset(p, &masks, ds, obs, |s| reveal(s, &layers))?;
    Ok(evaluate(&probs, ds, &EvalConfig { threshold: a.threshold, top_n: a.topn })?)
}

pub fn synth(a: &SynthArgs) -> Result<String> {
    let mut out = String::new();
    let graph = load_graph(&a.graph)?;
    let spec = SynthSpec {
        samples_per_class: a.per_class,
        feature_dim: a.dim,
        noise_sigma: a.sigma,
        flip_prob: a.flip,
        seed: a.seed,
        exclusive: None,
    };
    let ds = generate_synthetic(&graph, &spec)?;
    ds.save(&a.out).map_err(at(&a.out))?;
    emit!(out, "wrote {} samples ({} features) to {}", ds.len(), ds.feature_dim, a.out.display());
    Ok(out)
}

pub fn train(a: &TrainCmd) -> Result<String> {
    let mut out = String::new();
    let graph = load_graph(&a.graph)?;
    let ds = load_data(&a.data, &graph)?;
    let cfg = train_config(&a.train, &a.obs, &graph)?;
    let ds = match a.train_frac {
        Some(frac) => split(&ds, frac, a.train.seed)?.0,
        None => ds,
    };
    let (p, log) = train_model(&ds, a.variant, &cfg)?;
    checkpoint::save(&p, &a.ckpt).map_err(at(&a.ckpt))?;
    if let Some(path) = &a.log {
        std::fs::write(path, log.to_jsonl()).map_err(|e| at(path)(e.into()))?;
    }
    match log.losses().last() {
        Some(l) => emit!(out, "{} on {} samples, {} epochs, final loss {l:.6}", a.variant, ds.len(), cfg.epochs),
        None => emit!(out, "{} initialized without training", a.variant),
    }
    emit!(out, "checkpoint: {}", a.ckpt.display());
    Ok(out)
}

/// Train on the train part of each seeded split and score the test part.
fn run_splits(ds: &Dataset, variant: Variant, k: usize, frac: f64, a: &TrainArgs, obs: &ObsArgs, ev: &EvalArgs) -> Result<Vec<EvalResult>> {
    let base = train_config(a, obs, &ds.graph)?;
    let obs_cfg = obs_config(obs)?;
    (0..k as u64)
        .map(|i| {
            let (tr, te) = split(ds, frac, a.seed + i)?;
            let cfg = TrainConfig { seed: a.seed + i, ..base.clone() };
            let (p, _) = train_model(&tr, variant, &cfg)?;
            score(&p, &te, ev, &obs_cfg)
        })
        .collect()
}

fn mean_std(results: &[EvalResult]) -> Vec<(String, f64, f64)> {
    let n = results.len() as f64;
    let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let keys: Vec<String> = results[0].to_pairs().into_iter().map(|(k, _)| k).collect();
    for r in results {
        for (k, v) in r.to_pairs() {
            cols.entry(k).or_default().push(v);
        }
    }
    keys.into_iter()
        .map(|k| {
            let v = &cols[&k];
            let mean = v.iter().sum::<f64>() / n;
            // sample standard deviation; a single run has none
            let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            (k, mean, var.sqrt())
        })
        .collect()
}

const COLUMNS: [(&str, &str); 8] = [
    ("mAP_L", "map_l"),
    ("mAP_I", "map_i"),
    ("MC Acc", "mc_acc"),
    ("IoU", "iou_acc"),
    ("Prec_L", "prec_l"),
    ("Rec_L", "rec_l"),
    ("Prec_I", "prec_i"),
    ("Rec_I", "rec_i"),
];

/// Key of column `col` for `scope` ("" means all layers together).
fn key(col: &str, scope: &str) -> Option<String> {
    match (col, scope) {
        ("mc_acc", "") => None,
        ("mc_acc", s) => Some(format!("mc_acc.{s}")),
        (c, "") => Some(c.to_string()),
        (c, s) => Some(format!("{c}.{s}")),
    }
}

fn table_header() -> String {
    let mut h = format!("{:<14}", "");
    for (name, _) in COLUMNS {
        h.push_str(&format!(" {name:>13}"));
    }
    h
}

fn scopes(graph: &LabelGraph) -> Vec<(String, String)> {
    std::iter::once(("all layers".to_string(), String::new()))
        .chain(graph.layers.iter().map(|l| (format!("layer {}", l.name), l.name.clone())))
        .collect()
}

fn print_split_table(out: &mut String, graph: &LabelGraph, results: &[EvalResult]) {
    let rows: Vec<BTreeMap<String, f64>> = results.iter().map(|r| r.to_pairs().into_iter().collect()).collect();
    let summary: BTreeMap<String, (f64, f64)> = mean_std(results).into_iter().map(|(k, m, s)| (k, (m, s))).collect();
    for (title, scope) in scopes(graph) {
        emit!(out, "{title}");
        emit!(out, "{}", table_header());
        for (i, row) in rows.iter().enumerate() {
            let mut line = format!("{:<14}", format!("split {}", i + 1));
            for (_, col) in COLUMNS {
                let cell = key(col, &scope).and_then(|k| row.get(&k)).map_or("-".into(), |v| format!("{:.2}", 100.0 * v));
                line.push_str(&format!(" {cell:>13}"));
            }
            emit!(out, "{line}");
        }
        let mut line = format!("{:<14}", "mean ± std");
        for (_, col) in COLUMNS {
            let cell =
                key(col, &scope).and_then(|k| summary.get(&k)).map_or("-".into(), |(m, s)| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s));
            line.push_str(&format!(" {cell:>13}"));
        }
        emit!(out, "{line}\n");
    }
}

fn print_summary_record(out: &mut String, results: &[EvalResult]) {
    emit!(out, "# mean");
    for (k, m, _) in mean_std(results) {
        emit!(out, "{k}={m}");
    }
    emit!(out, "# std");
    for (k, _, s) in mean_std(results) {
        emit!(out, "{k}={s}");
    }
}

pub fn eval(a: &EvalCmd) -> Result<String> {
    let mut out = String::new();
    let graph = load_graph(&a.graph)?;
    let ds = load_data(&a.data, &graph)?;
    let obs = obs_config(&a.obs)?;
    let results = match (&a.ckpt, a.splits) {
        (Some(path), 0) => vec![score(&load_model(path, &graph, &ds)?, &ds, &a.eval, &obs)?],
        (Some(path), k) => {
            let p = load_model(path, &graph, &ds)?;
            (0..k as u64).map(|i| score(&p, &split(&ds, a.train_frac, a.train.seed + i)?.1, &a.eval, &obs)).collect::<Result<_>>()?
        }
        (None, 0) => return Err(CliError::Usage("eval needs --ckpt or --splits".into())),
        (None, k) => run_splits(&ds, a.variant, k, a.train_frac, &a.train, &a.obs, &a.eval)?,
    };
    if results.len() == 1 {
        if a.eval.machine {
            out.push_str(&results[0].to_record());
        } else {
            out.push_str(&results[0].to_string());
        }
        return Ok(out);
    }
    if a.eval.machine {
        for (i, r) in results.iter().enumerate() {
            emit!(out, "# split {}", i + 1);
            out.push_str(&r.to_record());
        }
        print_summary_record(&mut out, &results);
    } else {
        print_split_table(&mut out, &graph, &results);
    }
    Ok(out)
}

pub fn compare(a: &CompareCmd) -> Result<String> {
    let mut out = String::new();
    if a.splits == 0 {
        return Err(CliError::Usage("compare needs at least one split".into()));
    }
    let graph = load_graph(&a.graph)?;
    let ds = load_data(&a.data, &graph)?;
    let mut rows = Vec::new();
    for &v in &a.variants {
        let results = run_splits(&ds, v, a.splits, a.train_frac, &a.train, &a.obs, &a.eval)?;
        rows.push((v, mean_std(&results)));
    }
    if a.eval.machine {
        for (v, summary) in &rows {
            emit!(out, "# {v} mean");
            for (k, m, _) in summary {
                emit!(out, "{k}={m}");
            }
            emit!(out, "# {v} std");
            for (k, _, s) in summary {
                emit!(out, "{k}={s}");
            }
        }
        return Ok(out);
    }
    emit!(out, "mean ± std over {} splits", a.splits);
    for (title, scope) in scopes(&graph) {
        emit!(out, "{title}");
        emit!(out, "{}", table_header());
        for (v, summary) in &rows {
            let summary: BTreeMap<&str, (f64, f64)> = summary.iter().map(|(k, m, s)| (k.as_str(), (*m, *s))).collect();
            let mut line = format!("{:<14}", v.as_str());
            for (_, col) in COLUMNS {
                let cell = key(col, &scope)
                    .and_then(|k| summary.get(k.as_str()).copied())
                    .map_or("-".into(), |(m, s)| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s));
                line.push_str(&format!(" {cell:>13}"));
            }
            emit!(out, "{line}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// One layer of a prediction, labels in rank order.
struct Ranked<'a> {
    layer: &'a str,
    observed: bool,
    labels: Vec<(&'a str, f64)>,
}

pub fn predict(a: &PredictCmd) -> Result<String> {
    let mut out = String::new();
    let graph = load_graph(&a.graph)?;
    let ds = load_data(&a.data, &graph)?;
    let p = load_model(&a.ckpt, &graph, &ds)?;
    let cfg = obs_config(&a.obs)?;
    let observed = match &a.observe {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| at(path)(e.into()))?;
            let obs = observe::parse(&text, &graph).map_err(at(path))?;
            if let Some(id) = obs.keys().find(|id| !ds.samples.iter().any(|s| &s.id == *id)) {
                return Err(at(path)(sinn_core::Error::Data(format!("observation for unknown sample `{id}`"))));
            }
            obs
        }
        None => BTreeMap::new(),
    };
    let masks = graph.compile_masks();
    let probs = predict_dataset(&p, &masks, &ds, &cfg, |s| observed.get(&s.id).cloned().unwrap_or_default())?;
    for (s, layers) in ds.samples.iter().zip(&probs) {
        let seen = observed.get(&s.id);
        let ranked: Vec<Ranked> = graph
            .layers
            .iter()
            .zip(layers)
            .enumerate()
            .map(|(t, (layer, q))| {
                let mut order: Vec<usize> = sinn_core::metrics::ranking(q);
                if a.topn > 0 {
                    order.truncate(a.topn);
                }
                let labels = order.into_iter().map(|j| (layer.labels[j].as_str(), q[j])).collect();
                Ranked { layer: &layer.name, observed: seen.is_some_and(|o| o.layers.contains_key(&t)), labels }
            })
            .collect();
        if a.machine {
            let layers: Vec<_> = ranked
                .iter()
                .map(|Ranked { layer: name, observed: obs, labels }| {
                    json!({
                        "layer": name,
                        "observed": obs,
                        "labels": labels.iter().map(|(l, q)| json!({"label": l, "prob": q})).collect::<Vec<_>>(),
                    })
                })
                .collect();
            emit!(out, "{}", json!({"id": s.id, "layers": layers}));
        } else {
            emit!(out, "{}", s.id);
            for Ranked { layer: name, observed: obs, labels } in &ranked {
                let tag = if *obs { " (observed)" } else { "" };
                let list: Vec<String> = labels.iter().map(|(l, q)| format!("{l} {q:.3}")).collect();
                emit!(out, "  {name}{tag}: {}", list.join(", "));
            }
        }
    }
    Ok(out)
}
