//! Observation files for `predict --observe`.
//!
//! One JSON object per line, e.g.
//! `{"id": "s17", "layer": "scene", "positive": ["outdoor"]}`.
//! Every label of the named layer that is not listed is observed negative.

use std::collections::BTreeMap;

use serde::Deserialize;
use sinn_core::{Error, LabelGraph, ObservationSet, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ObsRecord {
    id: String,
    layer: String,
    positive: Vec<String>,
}

/// Observation sets keyed by sample id.
pub fn parse(text: &str, graph: &LabelGraph) -> Result<BTreeMap<String, ObservationSet>> {
    let mut out: BTreeMap<String, ObservationSet> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let record = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Record { record, msg };
        let rec: ObsRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let t = graph.layer_index(&rec.layer).ok_or_else(|| err(format!("unknown layer `{}`", rec.layer)))?;
        let layer = &graph.layers[t];
        let mut y = vec![0.0; layer.len()];
        for label in &rec.positive {
            let j = layer.label_index(label).ok_or_else(|| err(format!("unknown label `{}.{label}`", layer.name)))?;
            y[j] = 1.0;
        }
        let set = out.entry(rec.id.clone()).or_default();
        if set.layers.contains_key(&t) {
            return Err(err(format!("layer `{}` observed twice for `{}`", layer.name, rec.id)));
        }
        set.layers.insert(t, y);
    }
    Ok(out)
}
