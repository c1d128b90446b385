//! Ranking and set metrics for layered multi-label predictions.
//!
//! All rankings sort by descending score and break ties by ascending index,
//! so results do not depend on sort stability or platform.

use std::collections::BTreeMap;
use std::fmt;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Indices ordered by descending score, ties by ascending index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Mean of precision-at-rank over the relevant items. `None` when nothing is
/// relevant; such queries are left out of mAP means.
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), relevant.len(), "scores and relevance differ in length");
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if relevant[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

fn check_matrix(scores: &[Vec<f64>], targets: &[Vec<bool>]) -> Result<usize> {
    if scores.len() != targets.len() {
        return Err(Error::Shape(format!("{} score rows, {} target rows", scores.len(), targets.len())));
    }
    let cols = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != cols) || targets.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("score and target rows must all have the same length".into()));
    }
    Ok(cols)
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>, what: &str) -> Result<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return Err(Error::Data(format!("{what}: no query has a positive item")));
    }
    Ok(sum / n as f64)
}

/// Mean AP over label columns, each ranking the images.
pub fn map_per_label(scores: &[Vec<f64>], targets: &[Vec<bool>]) -> Result<f64> {
    let cols = check_matrix(scores, targets)?;
    mean_defined(
        (0..cols).map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let y: Vec<bool> = targets.iter().map(|r| r[c]).collect();
            average_precision(&s, &y)
        }),
        "mAP per label",
    )
}

/// Mean AP over image rows, each ranking the labels.
pub fn map_per_image(scores: &[Vec<f64>], targets: &[Vec<bool>]) -> Result<f64> {
    check_matrix(scores, targets)?;
    mean_defined(scores.iter().zip(targets).map(|(s, y)| average_precision(s, y)), "mAP per image")
}

/// Mean over classes of the fraction of that class's images whose argmax
/// (lowest index on ties) is the class. Classes without images are skipped.
pub fn mc_acc(scores: &[Vec<f64>], classes: &[usize]) -> Result<f64> {
    if scores.len() != classes.len() {
        return Err(Error::Shape("one class per image required".into()));
    }
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (s, &c) in scores.iter().zip(classes) {
        let pred = ranking(s).first().copied();
        let e = per.entry(c).or_default();
        e.1 += 1;
        if pred == Some(c) {
            e.0 += 1;
        }
    }
    if per.is_empty() {
        return Err(Error::Data("no images".into()));
    }
    Ok(per.values().map(|&(ok, n)| ok as f64 / n as f64).sum::<f64>() / per.len() as f64)
}

/// Mean per-image Jaccard index between predicted and true label sets; two
/// empty sets count as a perfect match.
pub fn iou_acc(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<f64> {
    if pred.len() != truth.len() || pred.iter().zip(truth).any(|(p, t)| p.len() != t.len()) {
        return Err(Error::Shape("prediction and truth sets differ in shape".into()));
    }
    if pred.is_empty() {
        return Err(Error::Data("no images".into()));
    }
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let inter = p.iter().zip(t).filter(|(&a, &b)| a && b).count();
            let union = p.iter().zip(t).filter(|(&a, &b)| a || b).count();
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Labels whose probability reaches `threshold`.
pub fn threshold_sets(probs: &[Vec<f64>], threshold: f64) -> Vec<Vec<bool>> {
    probs.iter().map(|r| r.iter().map(|&p| p >= threshold).collect()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecRec {
    pub prec_l: f64,
    pub rec_l: f64,
    pub prec_i: f64,
    pub rec_i: f64,
}

/// Precision and recall when every image is assigned its top `n` labels.
///
/// Per-image values are averaged over images (recall only over images with
/// at least one true label). Per-label values pool the assignments by label
/// and average over labels whose denominator is nonzero.
pub fn prec_rec_at_n(scores: &[Vec<f64>], targets: &[Vec<bool>], n: usize) -> Result<PrecRec> {
    let cols = check_matrix(scores, targets)?;
    if n == 0 || n > cols {
        return Err(Error::Config(format!("n = {n} must be between 1 and the label count {cols}")));
    }
    let mut assigned = vec![0usize; cols];
    let mut hits = vec![0usize; cols];
    let mut relevant = vec![0usize; cols];
    let (mut p_sum, mut r_sum, mut r_n) = (0.0, 0.0, 0usize);
    for (s, y) in scores.iter().zip(targets) {
        let top = &ranking(s)[..n];
        let tp = top.iter().filter(|&&j| y[j]).count();
        let g = y.iter().filter(|&&b| b).count();
        p_sum += tp as f64 / n as f64;
        if g > 0 {
            r_sum += tp as f64 / g as f64;
            r_n += 1;
        }
        for &j in top {
            assigned[j] += 1;
            if y[j] {
                hits[j] += 1;
            }
        }
        for (j, &b) in y.iter().enumerate() {
            if b {
                relevant[j] += 1;
            }
        }
    }
    let images = scores.len().max(1) as f64;
    let ratio = |num: &[usize], den: &[usize]| {
        let (s, k) = num.iter().zip(den).filter(|(_, &d)| d > 0).fold((0.0, 0usize), |(s, k), (&a, &d)| (s + a as f64 / d as f64, k + 1));
        if k == 0 {
            0.0
        } else {
            s / k as f64
        }
    };
    Ok(PrecRec {
        prec_l: ratio(&hits, &assigned),
        rec_l: ratio(&hits, &relevant),
        prec_i: p_sum / images,
        rec_i: if r_n == 0 { 0.0 } else { r_sum / r_n as f64 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub threshold: f64,
    pub top_n: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 0.5, top_n: 3 }
    }
}

/// Metric values for one label scope (all labels, or a single layer).
#[derive(Debug, Clone, PartialEq)]
pub struct ScopeEval {
    pub map_l: f64,
    pub map_i: f64,
    pub iou_acc: f64,
    pub prec_rec: PrecRec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Over the concatenation of all layers' labels.
    pub overall: ScopeEval,
    /// MC accuracy for exclusive layers, keyed by layer name.
    pub mc_acc: BTreeMap<String, f64>,
    /// Same metrics restricted to each layer (`top_n` capped at its size).
    pub per_layer: Vec<(String, ScopeEval)>,
}

fn scope(scores: &[Vec<f64>], targets: &[Vec<bool>], cfg: &EvalConfig) -> Result<ScopeEval> {
    let cols = scores.first().map_or(0, Vec::len);
    Ok(ScopeEval {
        map_l: map_per_label(scores, targets)?,
        map_i: map_per_image(scores, targets)?,
        iou_acc: iou_acc(&threshold_sets(scores, cfg.threshold), targets)?,
        prec_rec: prec_rec_at_n(scores, targets, cfg.top_n.min(cols))?,
    })
}

/// Evaluates per-sample, per-layer probabilities against a dataset.
pub fn evaluate(probs: &[Vec<Vec<f64>>], ds: &Dataset, cfg: &EvalConfig) -> Result<EvalResult> {
    if probs.len() != ds.len() {
        return Err(Error::Shape(format!("{} predictions for {} samples", probs.len(), ds.len())));
    }
    let flat = |rows: &mut dyn Iterator<Item = &Vec<Vec<f64>>>| -> Vec<Vec<f64>> {
        rows.map(|layers| layers.iter().flatten().copied().collect()).collect()
    };
    let truth: Vec<Vec<Vec<f64>>> = ds.samples.iter().map(|s| s.targets.clone()).collect();
    let as_bool = |m: Vec<Vec<f64>>| -> Vec<Vec<bool>> { m.into_iter().map(|r| r.into_iter().map(|v| v == 1.0).collect()).collect() };

    let overall = scope(&flat(&mut probs.iter()), &as_bool(flat(&mut truth.iter())), cfg)?;
    let mut per_layer = Vec::new();
    let mut mc = BTreeMap::new();
    for (t, layer) in ds.graph.layers.iter().enumerate() {
        let s: Vec<Vec<f64>> = probs.iter().map(|p| p[t].clone()).collect();
        let y: Vec<Vec<bool>> = as_bool(truth.iter().map(|p| p[t].clone()).collect());
        per_layer.push((layer.name.clone(), scope(&s, &y, cfg)?));
        if ds.exclusive[t] {
            let classes: Vec<usize> = ds.samples.iter().map(|smp| ds.class_of(smp, t).expect("exclusive layer")).collect();
            mc.insert(layer.name.clone(), mc_acc(&s, &classes)?);
        }
    }
    Ok(EvalResult { overall, mc_acc: mc, per_layer })
}

impl EvalResult {
    pub fn layer(&self, name: &str) -> Option<&ScopeEval> {
        self.per_layer.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    /// Flat `key=value` pairs in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        let push_scope = |out: &mut Vec<(String, f64)>, s: &ScopeEval, suffix: &str| {
            for (k, v) in [
                ("map_l", s.map_l),
                ("map_i", s.map_i),
                ("iou_acc", s.iou_acc),
                ("prec_l", s.prec_rec.prec_l),
                ("rec_l", s.prec_rec.rec_l),
                ("prec_i", s.prec_rec.prec_i),
                ("rec_i", s.prec_rec.rec_i),
            ] {
                out.push((format!("{k}{suffix}"), v));
            }
        };
        push_scope(&mut out, &self.overall, "");
        for (layer, v) in &self.mc_acc {
            out.push((format!("mc_acc.{layer}"), *v));
        }
        for (layer, s) in &self.per_layer {
            push_scope(&mut out, s, &format!(".{layer}"));
        }
        out
    }

    /// Machine-readable record, one `key=value` per line.
    pub fn to_record(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Inverse of [`to_record`](Self::to_record). Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse_record(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<String, f64> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Syntax { line: i + 1, msg: "expected key=value".into() })?;
            let v: f64 = v.trim().parse().map_err(|_| Error::Syntax { line: i + 1, msg: format!("bad number `{v}`") })?;
            kv.insert(k.trim().to_string(), v);
        }
        let take_scope = |kv: &BTreeMap<String, f64>, suffix: &str| -> Result<ScopeEval> {
            let get = |k: &str| {
                let key = format!("{k}{suffix}");
                kv.get(&key).copied().ok_or_else(|| Error::Data(format!("record lacks `{key}`")))
            };
            Ok(ScopeEval {
                map_l: get("map_l")?,
                map_i: get("map_i")?,
                iou_acc: get("iou_acc")?,
                prec_rec: PrecRec { prec_l: get("prec_l")?, rec_l: get("rec_l")?, prec_i: get("prec_i")?, rec_i: get("rec_i")? },
            })
        };
        let overall = take_scope(&kv, "")?;
        let mc_acc = kv.iter().filter_map(|(k, v)| k.strip_prefix("mc_acc.").map(|l| (l.to_string(), *v))).collect();
        // per-layer names in first-seen order of their map_l keys
        let mut per_layer = Vec::new();
        for line in text.lines() {
            if let Some(layer) = line.trim().strip_prefix("map_l.").and_then(|r| r.split_once('=')).map(|(l, _)| l.trim()) {
                per_layer.push((layer.to_string(), take_scope(&kv, &format!(".{layer}"))?));
            }
        }
        Ok(Self { overall, mc_acc, per_layer })
    }
}

impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: f64| format!("{:6.2}", 100.0 * v);
        writeln!(
            f,
            "{:<12} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "scope", "mAP_L", "mAP_I", "MC Acc", "IoU", "Prec_L", "Rec_L", "Prec_I", "Rec_I"
        )?;
        let row = |f: &mut fmt::Formatter<'_>, name: &str, s: &ScopeEval, mc: Option<f64>| {
            writeln!(
                f,
                "{:<12} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
                name,
                pct(s.map_l),
                pct(s.map_i),
                mc.map_or("-".to_string(), pct),
                pct(s.iou_acc),
                pct(s.prec_rec.prec_l),
                pct(s.prec_rec.rec_l),
                pct(s.prec_rec.prec_i),
                pct(s.prec_rec.rec_i)
            )
        };
        row(f, "all", &self.overall, None)?;
        for (name, s) in &self.per_layer {
            row(f, name, s, self.mc_acc.get(name).copied())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.2, 0.8], &b(&[1, 0, 1])), Some(1.0));
        let ap = average_precision(&[0.9, 0.8, 0.2], &b(&[0, 1, 1])).unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((ap - 0.58333).abs() < 1e-5);
        assert_eq!(average_precision(&[0.1, 0.5, 0.3], &b(&[1, 1, 1])), Some(1.0));
        assert_eq!(average_precision(&[0.1, 0.5], &b(&[0, 0])), None);
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(ranking(&[0.5, 0.5, 0.7, 0.5]), vec![2, 0, 1, 3]);
        // relevant item at index 1 ranks second among equal scores
        assert_eq!(average_precision(&[0.5, 0.5], &b(&[0, 1])), Some(0.5));
    }

    #[test]
    fn map_examples() {
        let perfect = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let t = vec![b(&[1, 0]), b(&[0, 1])];
        assert_eq!(map_per_label(&perfect, &t).unwrap(), 1.0);
        assert_eq!(map_per_image(&perfect, &t).unwrap(), 1.0);
        let s = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        assert_eq!(map_per_label(&s, &t).unwrap(), 1.0);
        assert_eq!(map_per_image(&s, &t).unwrap(), 1.0);
        let anti = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(map_per_label(&anti, &t).unwrap(), 0.5);
        assert_eq!(map_per_image(&anti, &t).unwrap(), 0.5);
    }

    #[test]
    fn map_skips_empty_queries() {
        let s = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let t = vec![b(&[1, 0]), b(&[1, 0])];
        // column 1 has no positives and is ignored
        assert_eq!(map_per_label(&s, &t).unwrap(), 1.0);
        let none = vec![b(&[0, 0]), b(&[0, 0])];
        assert!(map_per_label(&s, &none).is_err());
        assert!(map_per_image(&s, &none).is_err());
        assert!(map_per_label(&s, &[b(&[1, 0])]).is_err());
    }

    #[test]
    fn mc_acc_examples() {
        // class 0: two images both right; class 1: one image wrong
        let s = vec![vec![0.9, 0.1], vec![0.6, 0.4], vec![0.7, 0.3]];
        assert_eq!(mc_acc(&s, &[0, 0, 1]).unwrap(), 0.5);
        assert_eq!(mc_acc(&s[..2], &[0, 0]).unwrap(), 1.0);
        let uniform = vec![vec![0.5; 3]; 3];
        // argmax ties go to class 0: class 0 right, classes 1 and 2 wrong
        assert!((mc_acc(&uniform, &[0, 1, 2]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_examples() {
        // labels a, b, c
        assert!((iou_acc(&[b(&[1, 1, 0])], &[b(&[0, 1, 1])]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou_acc(&[b(&[1, 0, 1])], &[b(&[1, 0, 1])]).unwrap(), 1.0);
        assert_eq!(iou_acc(&[b(&[0, 0, 0])], &[b(&[0, 0, 0])]).unwrap(), 1.0);
        assert_eq!(threshold_sets(&[vec![0.5, 0.49]], 0.5), vec![b(&[1, 0])]);
    }

    #[test]
    fn prec_rec_examples() {
        // labels a b c d e; G = {a, b}, top-3 = {a, c, d}
        let s = vec![vec![0.9, 0.1, 0.8, 0.7, 0.0]];
        let y = vec![b(&[1, 1, 0, 0, 0])];
        let pr = prec_rec_at_n(&s, &y, 3).unwrap();
        assert!((pr.prec_i - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(pr.rec_i, 0.5);
        // label a: assigned once, hit once; c, d assigned, missed; b relevant, missed
        assert!((pr.prec_l - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(pr.rec_l, 0.5);

        let y = vec![b(&[1, 0, 1, 1, 0])];
        let pr = prec_rec_at_n(&s, &y, 3).unwrap();
        assert_eq!((pr.prec_i, pr.rec_i), (1.0, 1.0));

        assert!(prec_rec_at_n(&s, &y, 0).is_err());
        assert!(prec_rec_at_n(&s, &y, 6).is_err());
    }

    #[test]
    fn single_label_precision_is_capped() {
        let s = vec![vec![0.1, 0.9, 0.3, 0.2], vec![0.5, 0.4, 0.3, 0.2]];
        let y = vec![b(&[0, 1, 0, 0]), b(&[1, 0, 0, 0])];
        let pr = prec_rec_at_n(&s, &y, 3).unwrap();
        assert!(pr.prec_i <= 1.0 / 3.0 + 1e-15);
    }

    #[test]
    fn record_round_trip() {
        let s =
            ScopeEval { map_l: 0.5, map_i: 0.25, iou_acc: 0.125, prec_rec: PrecRec { prec_l: 0.1, rec_l: 0.2, prec_i: 0.3, rec_i: 0.4 } };
        let r = EvalResult {
            overall: s.clone(),
            mc_acc: [("fine".to_string(), 0.75)].into_iter().collect(),
            per_layer: vec![("coarse".into(), s.clone()), ("fine".into(), s)],
        };
        let text = r.to_record();
        assert!(text.starts_with("map_l=0.5\nmap_i=0.25\n"));
        assert!(text.contains("mc_acc.fine=0.75\n"));
        assert_eq!(EvalResult::parse_record(&format!("# split 1\n{text}")).unwrap(), r);
        assert!(EvalResult::parse_record("map_l=0.5\n").is_err());
    }

    /// Precision at every rank, computed without the running-count shortcut.
    fn brute_ap(scores: &[f64], rel: &[bool]) -> Option<f64> {
        let n = scores.len();
        let total = rel.iter().filter(|&&r| r).count();
        if total == 0 {
            return None;
        }
        // position of item i = number of items that beat it
        let pos = |i: usize| (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
        let mut terms: Vec<(usize, f64)> = (0..n)
            .filter(|&i| rel[i])
            .map(|i| {
                let k = pos(i) + 1;
                let rel_at_or_above = (0..n).filter(|&j| rel[j] && pos(j) < k).count();
                (k, rel_at_or_above as f64 / k as f64)
            })
            .collect();
        // accumulate in rank order so the float sum is comparable bit for bit
        terms.sort_by_key(|t| t.0);
        Some(terms.iter().map(|t| t.1).sum::<f64>() / total as f64)
    }

    proptest! {
        #[test]
        fn map_is_invariant_to_monotone_transforms(
            rows in proptest::collection::vec(proptest::collection::vec((-5.0f64..5.0, any::<bool>()), 4), 2..8)
        ) {
            let s: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.0).collect()).collect();
            let mut y: Vec<Vec<bool>> = rows.iter().map(|r| r.iter().map(|p| p.1).collect()).collect();
            y[0][0] = true;
            let lin: Vec<Vec<f64>> = s.iter().map(|r| r.iter().map(|v| 2.0 * v + 1.0).collect()).collect();
            let sig: Vec<Vec<f64>> = s.iter().map(|r| crate::numerics::sigmoid(r)).collect();
            let base = (map_per_label(&s, &y).unwrap(), map_per_image(&s, &y).unwrap());
            prop_assert_eq!(base, (map_per_label(&lin, &y).unwrap(), map_per_image(&lin, &y).unwrap()));
            prop_assert_eq!(base, (map_per_label(&sig, &y).unwrap(), map_per_image(&sig, &y).unwrap()));
            prop_assert!((0.0..=1.0).contains(&base.0) && (0.0..=1.0).contains(&base.1));
        }

        #[test]
        fn ap_matches_brute_force(
            items in proptest::collection::vec((0u8..6, any::<bool>()), 1..=12)
        ) {
            let s: Vec<f64> = items.iter().map(|p| p.0 as f64 / 5.0).collect();
            let r: Vec<bool> = items.iter().map(|p| p.1).collect();
            prop_assert_eq!(average_precision(&s, &r), brute_ap(&s, &r));
        }

        #[test]
        fn full_top_n_recalls_everything(
            rows in proptest::collection::vec(proptest::collection::vec((0.0f64..1.0, any::<bool>()), 5), 1..6)
        ) {
            let s: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.0).collect()).collect();
            let y: Vec<Vec<bool>> = rows.iter().map(|r| r.iter().map(|p| p.1).collect()).collect();
            let pr = prec_rec_at_n(&s, &y, 5).unwrap();
            if y.iter().any(|r| r.iter().any(|&b| b)) {
                prop_assert_eq!(pr.rec_i, 1.0);
            }
            for v in [pr.prec_l, pr.rec_l, pr.prec_i, pr.rec_i] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
