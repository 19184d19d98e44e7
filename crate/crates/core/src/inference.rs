//! TNR threshold calibration from ID validation data and the
//! granularity-adaptive inference stopping procedure.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::data::Dataset;
use crate::hierarchy::{Hierarchy, NodeId};
use crate::model::{forward, predict_leaf, ModelError, ModelParams, NodeDistributions};
use crate::scoring::node_path_probability;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("ROC input has no {0} pairs")]
    OneClass(&'static str),
    #[error("no calibration pairs at any node")]
    NoPairs,
    #[error("tnr target {0} outside (0, 1)")]
    BadTnr(f64),
    #[error("threshold table does not match the hierarchy (node {0:?})")]
    TableMismatch(String),
    #[error("malformed threshold table line {line}: {text:?}")]
    BadTableLine { line: usize, text: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Node-wise or single global thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMode {
    NodeWise,
    PathWise,
}

impl ThresholdMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ThresholdMode::NodeWise => "node_wise",
            ThresholdMode::PathWise => "path_wise",
        }
    }

    pub fn parse(s: &str) -> Option<ThresholdMode> {
        match s {
            "node_wise" | "node" => Some(ThresholdMode::NodeWise),
            "path_wise" | "path" => Some(ThresholdMode::PathWise),
            _ => None,
        }
    }
}

/// Calibrated stopping thresholds over path-probability scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    pub mode: ThresholdMode,
    pub tnr_target: f64,
    /// Per internal node; nodes without calibration pairs fall back to the
    /// global threshold.
    pub node_thresholds: BTreeMap<NodeId, f64>,
    /// Pooled threshold over all pairs; the only threshold in path-wise mode.
    pub global_threshold: f64,
    /// Internal nodes that had no calibration pairs of their own.
    pub uncovered: Vec<NodeId>,
}

impl ThresholdTable {
    /// Threshold applied when testing the step into a child of `parent`.
    pub fn threshold_at(&self, parent: NodeId) -> f64 {
        match self.mode {
            ThresholdMode::PathWise => self.global_threshold,
            ThresholdMode::NodeWise => self
                .node_thresholds
                .get(&parent)
                .copied()
                .unwrap_or(self.global_threshold),
        }
    }
}

/// One point of an ROC curve; `threshold` is the score cutoff that produces
/// this `(fpr, tpr)` when samples scoring `>= threshold` are called positive.
#[derive(Debug, Clone, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// Standard pooled one-vs-rest ROC over `(score, is_positive)` pairs.
/// Thresholds descend; ties move together; the curve spans (0,0) to (1,1).
pub fn node_micro_roc(scores: &[(f64, bool)]) -> Result<Vec<RocPoint>, CalibrationError> {
    let pos = scores.iter().filter(|(_, p)| *p).count();
    let neg = scores.len() - pos;
    if pos == 0 {
        return Err(CalibrationError::OneClass("positive"));
    }
    if neg == 0 {
        return Err(CalibrationError::OneClass("negative"));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("scores must be comparable"));

    let mut curve = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        // Consume the whole tie group at this score.
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
        });
    }
    Ok(curve)
}

/// Trapezoidal area under an ROC curve.
pub fn roc_auc(curve: &[RocPoint]) -> f64 {
    let mut auc = 0.0;
    for w in curve.windows(2) {
        auc += (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0;
    }
    auc
}

/// Smallest threshold whose TNR (fraction of negatives strictly below it,
/// ties pass) reaches `tnr_target`; clamped to the unit interval since scores
/// are probabilities. Returns 0 when the target is not positive.
fn tnr_threshold(negatives: &[f64], tnr_target: f64) -> f64 {
    if tnr_target <= 0.0 || negatives.is_empty() {
        return 0.0;
    }
    let mut neg = negatives.to_vec();
    neg.sort_by(|a, b| a.partial_cmp(b).expect("scores must be comparable"));
    let n = neg.len();
    // Need at least ceil(target * n) negatives strictly below the threshold.
    let k = (tnr_target * n as f64).ceil() as usize;
    let k = k.clamp(1, n);
    // Just above the k-th smallest negative rejects exactly the first k.
    let t = next_up(neg[k - 1]);
    t.min(1.0)
}

fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    let bits = if x == 0.0 { 1 } else if x > 0.0 { x.to_bits() + 1 } else { x.to_bits() - 1 };
    f64::from_bits(bits)
}

/// Calibration pairs at one internal node: for each validation sample whose
/// label path passes through the node and each child, the path probability
/// through that child, positive iff the child is on the label path.
fn node_pairs(
    params: &ModelParams,
    h: &Hierarchy,
    id_val: &Dataset,
) -> Result<BTreeMap<NodeId, Vec<(f64, bool)>>, CalibrationError> {
    let mut pairs: BTreeMap<NodeId, Vec<(f64, bool)>> =
        h.internals().into_iter().map(|n| (n, Vec::new())).collect();
    for s in &id_val.samples {
        let nd = forward(params, h, &s.features)?;
        let path = h
            .path_from_root(s.label)
            .map_err(|_| CalibrationError::TableMismatch(format!("label {}", s.label)))?;
        for w in path.windows(2) {
            let (n, on_child) = (w[0], w[1]);
            let reach = node_path_probability(&nd, h, n)?;
            let p = nd.get(n)?;
            let bucket = pairs.get_mut(&n).expect("internal node bucket");
            for (j, &c) in h.children(n).iter().enumerate() {
                bucket.push((reach * p[j], c == on_child));
            }
        }
    }
    Ok(pairs)
}

/// Builds a TNR threshold table from ID validation data.
pub fn calibrate(
    params: &ModelParams,
    h: &Hierarchy,
    id_val: &Dataset,
    tnr_target: f64,
    mode: ThresholdMode,
) -> Result<ThresholdTable, CalibrationError> {
    if !(0.0 < tnr_target && tnr_target < 1.0) {
        return Err(CalibrationError::BadTnr(tnr_target));
    }
    let pairs = node_pairs(params, h, id_val)?;
    let mut node_thresholds = BTreeMap::new();
    let mut uncovered = Vec::new();
    let mut pooled_negs: Vec<f64> = Vec::new();
    for (&n, ps) in &pairs {
        let negs: Vec<f64> = ps.iter().filter(|(_, p)| !p).map(|(s, _)| *s).collect();
        pooled_negs.extend_from_slice(&negs);
        if negs.is_empty() {
            uncovered.push(n);
        } else {
            node_thresholds.insert(n, tnr_threshold(&negs, tnr_target));
        }
    }
    if pooled_negs.is_empty() {
        return Err(CalibrationError::NoPairs);
    }
    let global_threshold = tnr_threshold(&pooled_negs, tnr_target);
    Ok(ThresholdTable {
        mode,
        tnr_target,
        node_thresholds,
        global_threshold,
        uncovered,
    })
}

/// Walks the predicted path from the root and stops at the first node whose
/// path probability falls below its threshold, returning that node's parent
/// (the root when the very first step fails). Returns the predicted leaf
/// when every step passes.
pub fn hierarchical_infer_nd(
    nd: &NodeDistributions,
    h: &Hierarchy,
    table: &ThresholdTable,
) -> Result<NodeId, CalibrationError> {
    let leaf = predict_leaf(nd, h)?;
    let path = h
        .path_from_root(leaf)
        .map_err(|_| CalibrationError::TableMismatch(format!("leaf {leaf}")))?;
    for w in path.windows(2) {
        let (parent, child) = (w[0], w[1]);
        let score = node_path_probability(nd, h, child)?;
        if score < table.threshold_at(parent) {
            return Ok(parent);
        }
    }
    Ok(leaf)
}

/// Forward pass plus thresholded inference for one input.
pub fn hierarchical_infer(
    params: &ModelParams,
    h: &Hierarchy,
    x: &[f64],
    table: &ThresholdTable,
) -> Result<NodeId, CalibrationError> {
    let nd = forward(params, h, x)?;
    hierarchical_infer_nd(&nd, h, table)
}

/// Threshold table CSV: `node_name,threshold,tnr_target,mode,score_kind`;
/// the pooled threshold uses node name `*`.
pub fn table_to_csv(table: &ThresholdTable, h: &Hierarchy) -> String {
    let mut out = String::from("node_name,threshold,tnr_target,mode,score_kind\n");
    out.push_str(&format!(
        "*,{},{},{},path_probability\n",
        table.global_threshold,
        table.tnr_target,
        table.mode.as_str()
    ));
    if table.mode == ThresholdMode::NodeWise {
        for (&n, &t) in &table.node_thresholds {
            out.push_str(&format!(
                "{},{},{},{},path_probability\n",
                h.name(n),
                t,
                table.tnr_target,
                table.mode.as_str()
            ));
        }
    }
    out
}

pub fn table_from_csv(text: &str, h: &Hierarchy) -> Result<ThresholdTable, CalibrationError> {
    let mut mode = ThresholdMode::PathWise;
    let mut tnr_target = 0.0;
    let mut global_threshold = None;
    let mut node_thresholds = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(CalibrationError::BadTableLine {
                line: lineno + 1,
                text: line.to_string(),
            });
        }
        let t: f64 = fields[1].parse().map_err(|_| CalibrationError::BadTableLine {
            line: lineno + 1,
            text: line.to_string(),
        })?;
        tnr_target = fields[2].parse().map_err(|_| CalibrationError::BadTableLine {
            line: lineno + 1,
            text: line.to_string(),
        })?;
        mode = ThresholdMode::parse(fields[3]).ok_or(CalibrationError::BadTableLine {
            line: lineno + 1,
            text: line.to_string(),
        })?;
        if fields[0] == "*" {
            global_threshold = Some(t);
        } else {
            let n = h
                .id_of(fields[0])
                .ok_or_else(|| CalibrationError::TableMismatch(fields[0].to_string()))?;
            node_thresholds.insert(n, t);
        }
    }
    let global_threshold = global_threshold.ok_or(CalibrationError::NoPairs)?;
    let uncovered = h
        .internals()
        .into_iter()
        .filter(|n| !node_thresholds.contains_key(n))
        .collect();
    Ok(ThresholdTable {
        mode,
        tnr_target,
        node_thresholds,
        global_threshold,
        uncovered,
    })
}
