//! OOD scoring on prediction paths: path probability, mean/min path-wise
//! entropy, and the flat MSP baseline.

use crate::hierarchy::{Hierarchy, NodeId};
use crate::model::{flat_forward, forward, predict_leaf, ModelError, ModelParams, NodeDistributions};

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &v in p {
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    h
}

/// Per-node statistics along a prediction path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathNodeScore {
    pub node: NodeId,
    /// Probability of reaching this node from the root.
    pub path_probability: f64,
    /// Entropy of the node's child distribution.
    pub entropy: f64,
}

/// OOD scores for one sample. Higher `path_probability` and lower entropies
/// mean more in-distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct PathScore {
    pub predicted_leaf: NodeId,
    pub path_probability: f64,
    pub h_mean: f64,
    pub h_min: f64,
    /// One entry per internal node on the root-to-leaf path, root first.
    pub per_node: Vec<PathNodeScore>,
}

/// Product of conditional probabilities along the root-to-`n` path; 1 for the
/// root (empty product).
pub fn node_path_probability(
    nd: &NodeDistributions,
    h: &Hierarchy,
    n: NodeId,
) -> Result<f64, ModelError> {
    let path = h
        .path_from_root(n)
        .map_err(|_| ModelError::MissingHead(n))?;
    let mut prob = 1.0;
    for w in path.windows(2) {
        let p = nd.get(w[0])?;
        let j = h
            .children(w[0])
            .iter()
            .position(|&c| c == w[1])
            .expect("path child must be among parent's children");
        prob *= p[j];
    }
    Ok(prob)
}

/// Scores the already-computed distributions of one sample.
pub fn score_distributions(
    nd: &NodeDistributions,
    h: &Hierarchy,
) -> Result<PathScore, ModelError> {
    let leaf = predict_leaf(nd, h)?;
    // The internal nodes whose child choice lies on the path are exactly the
    // strict ancestors of the predicted leaf.
    let anc = h.ancestors(leaf).map_err(|_| ModelError::MissingHead(leaf))?;
    let mut per_node = Vec::with_capacity(anc.len());
    let mut reach = 1.0;
    let mut h_sum = 0.0;
    let mut h_min = f64::INFINITY;
    for (i, &n) in anc.iter().enumerate() {
        let p = nd.get(n)?;
        let e = entropy(p);
        per_node.push(PathNodeScore {
            node: n,
            path_probability: reach,
            entropy: e,
        });
        h_sum += e;
        if e < h_min {
            h_min = e;
        }
        let next = if i + 1 < anc.len() { anc[i + 1] } else { leaf };
        let j = h
            .children(n)
            .iter()
            .position(|&c| c == next)
            .expect("ancestor chain is a path");
        reach *= p[j];
    }
    Ok(PathScore {
        predicted_leaf: leaf,
        path_probability: reach,
        h_mean: h_sum / anc.len() as f64,
        h_min,
        per_node,
    })
}

/// Full forward pass plus path scoring for one input vector.
pub fn score_sample(
    params: &ModelParams,
    h: &Hierarchy,
    x: &[f64],
) -> Result<PathScore, ModelError> {
    let nd = forward(params, h, x)?;
    score_distributions(&nd, h)
}

/// Maximum softmax probability of the flat baseline head.
pub fn msp_score(params: &ModelParams, x: &[f64]) -> Result<f64, ModelError> {
    let p = flat_forward(params, x)?;
    Ok(p.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}
