//! Hierarchical softmax head: a shared fully-connected trunk, one affine
//! softmax classifier per internal node, and an optional flat baseline head.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{Hierarchy, NodeId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input has dimension {found}, model expects {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("input contains a non-finite value")]
    NonFiniteInput,
    #[error("no head for internal node {0}")]
    MissingHead(NodeId),
    #[error("model has no flat head")]
    NoFlatHead,
    #[error("checkpoint references unknown node {0:?}")]
    UnknownCheckpointNode(String),
    #[error("checkpoint version {0} not supported")]
    BadVersion(u32),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Dense affine layer, row-major weights (`out x in`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Layer {
        Layer {
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Layer {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut l = Layer::zeros(in_dim, out_dim);
        for w in l.weights.iter_mut() {
            *w = rng.random_range(-bound..bound);
        }
        for b in l.bias.iter_mut() {
            *b = rng.random_range(-bound..bound);
        }
        l
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (o, row) in out.iter_mut().zip(self.weights.chunks(self.in_dim)) {
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            *o += acc;
        }
        out
    }
}

/// Model configuration knobs not derivable from the hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Number of fully-connected trunk layers (0..=3); 0 feeds the raw input
    /// to the heads.
    pub trunk_layers: usize,
    /// Hidden width; `None` picks `max(64, 2 * |leaves|)`.
    pub hidden_dim: Option<usize>,
    pub with_flat_head: bool,
    pub seed: u64,
}

/// Shared trunk plus per-internal-node affine heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub input_dim: usize,
    pub trunk: Vec<Layer>,
    /// Keyed by internal node id; each head's output dimension is the node's
    /// child count.
    pub heads: BTreeMap<NodeId, Layer>,
    pub flat_head: Option<Layer>,
}

impl ModelParams {
    pub fn init(h: &Hierarchy, cfg: &ModelConfig) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let hidden = cfg.hidden_dim.unwrap_or_else(|| 64.max(2 * h.num_leaves()));
        let mut trunk = Vec::with_capacity(cfg.trunk_layers);
        let mut feat_dim = cfg.input_dim;
        for _ in 0..cfg.trunk_layers {
            trunk.push(Layer::init(feat_dim, hidden, &mut rng));
            feat_dim = hidden;
        }
        let mut heads = BTreeMap::new();
        for n in h.internals() {
            heads.insert(n, Layer::init(feat_dim, h.children(n).len(), &mut rng));
        }
        let flat_head = if cfg.with_flat_head {
            Some(Layer::init(feat_dim, h.num_leaves(), &mut rng))
        } else {
            None
        };
        ModelParams {
            input_dim: cfg.input_dim,
            trunk,
            heads,
            flat_head,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk.last().map(|l| l.out_dim).unwrap_or(self.input_dim)
    }

    /// Trunk forward pass; returns the penultimate feature vector.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.input_dim {
            return Err(ModelError::DimMismatch {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteInput);
        }
        let mut h = x.to_vec();
        for layer in &self.trunk {
            h = layer.apply(&h);
            for v in h.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Ok(h)
    }
}

/// Per-internal-node child probability vectors for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDistributions {
    pub dists: BTreeMap<NodeId, Vec<f64>>,
}

impl NodeDistributions {
    pub fn get(&self, n: NodeId) -> Result<&Vec<f64>, ModelError> {
        self.dists.get(&n).ok_or(ModelError::MissingHead(n))
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax child distribution at every internal node.
pub fn forward(
    params: &ModelParams,
    h: &Hierarchy,
    x: &[f64],
) -> Result<NodeDistributions, ModelError> {
    let feat = params.features(x)?;
    let mut dists = BTreeMap::new();
    for n in h.internals() {
        let head = params.heads.get(&n).ok_or(ModelError::MissingHead(n))?;
        dists.insert(n, softmax(&head.apply(&feat)));
    }
    Ok(NodeDistributions { dists })
}

/// Leaf posterior as the product of on-path child probabilities; returns
/// `(leaf id, probability)` pairs in ascending leaf id order.
pub fn leaf_posteriors(
    nd: &NodeDistributions,
    h: &Hierarchy,
) -> Result<Vec<(NodeId, f64)>, ModelError> {
    let mut reach = vec![0.0f64; h.len()];
    reach[h.root()] = 1.0;
    let mut out = Vec::with_capacity(h.num_leaves());
    for n in 0..h.len() {
        if h.is_internal(n) {
            let p = nd.get(n)?;
            for (j, &c) in h.children(n).iter().enumerate() {
                reach[c] = reach[n] * p[j];
            }
        } else {
            out.push((n, reach[n]));
        }
    }
    Ok(out)
}

/// Argmax leaf over the path-product posterior; ties break toward the lowest
/// node id.
pub fn predict_leaf(nd: &NodeDistributions, h: &Hierarchy) -> Result<NodeId, ModelError> {
    let post = leaf_posteriors(nd, h)?;
    let mut best = post[0];
    for &(n, p) in &post[1..] {
        if p > best.1 {
            best = (n, p);
        }
    }
    Ok(best.0)
}

/// Flat softmax over all leaves from the shared trunk; probabilities in
/// ascending leaf id order.
pub fn flat_forward(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    let head = params.flat_head.as_ref().ok_or(ModelError::NoFlatHead)?;
    let feat = params.features(x)?;
    Ok(softmax(&head.apply(&feat)))
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    input_dim: usize,
    trunk: Vec<Layer>,
    /// Heads keyed by node name so checkpoints survive id reassignment.
    heads: BTreeMap<String, Layer>,
    flat_head: Option<Layer>,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Serializes the parameters as a versioned JSON checkpoint. Floats use
/// shortest round-trip formatting so save/load is bit-exact.
pub fn save_checkpoint(params: &ModelParams, h: &Hierarchy) -> String {
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        input_dim: params.input_dim,
        trunk: params.trunk.clone(),
        heads: params
            .heads
            .iter()
            .map(|(&n, l)| (h.name(n).to_string(), l.clone()))
            .collect(),
        flat_head: params.flat_head.clone(),
    };
    serde_json::to_string_pretty(&ck).expect("checkpoint serialization cannot fail")
}

pub fn load_checkpoint(text: &str, h: &Hierarchy) -> Result<ModelParams, ModelError> {
    let ck: Checkpoint =
        serde_json::from_str(text).map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(ModelError::BadVersion(ck.version));
    }
    let mut heads = BTreeMap::new();
    for (name, layer) in ck.heads {
        let n = h
            .id_of(&name)
            .ok_or_else(|| ModelError::UnknownCheckpointNode(name.clone()))?;
        heads.insert(n, layer);
    }
    Ok(ModelParams {
        input_dim: ck.input_dim,
        trunk: ck.trunk,
        heads,
        flat_head: ck.flat_head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_hierarchy;

    fn zero_model(h: &Hierarchy, input_dim: usize) -> ModelParams {
        let mut heads = BTreeMap::new();
        for n in h.internals() {
            heads.insert(n, Layer::zeros(input_dim, h.children(n).len()));
        }
        ModelParams {
            input_dim,
            trunk: Vec::new(),
            heads,
            flat_head: Some(Layer::zeros(input_dim, h.num_leaves())),
        }
    }

    #[test]
    fn zero_params_give_uniform_distributions() {
        let h = generate_synthetic_hierarchy(&[3, 4]).unwrap();
        let m = zero_model(&h, 2);
        let nd = forward(&m, &h, &[0.3, -0.7]).unwrap();
        for n in h.internals() {
            let p = nd.get(n).unwrap();
            let s = h.children(n).len() as f64;
            for &v in p {
                assert!((v - 1.0 / s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_arithmetic() {
        let p = softmax(&[3f64.ln(), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = softmax(&[0.4, -1.2, 2.0]);
        let b = softmax(&[0.4 + 7.5, -1.2 + 7.5, 2.0 + 7.5]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn leaf_posteriors_product() {
        // 0 -> {1, 2}, 1 -> {3, 4}; 2 is a leaf.
        let h = Hierarchy::parse("r\t-\na\tr\nb\tr\nx\ta\ny\ta").unwrap();
        let mut dists = BTreeMap::new();
        dists.insert(0, vec![0.6, 0.4]);
        dists.insert(1, vec![0.5, 0.5]);
        let nd = NodeDistributions { dists };
        let post = leaf_posteriors(&nd, &h).unwrap();
        let by_id: BTreeMap<NodeId, f64> = post.into_iter().collect();
        assert!((by_id[&3] - 0.3).abs() < 1e-12);
        assert!((by_id[&4] - 0.3).abs() < 1e-12);
        assert!((by_id[&2] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn one_hot_path_concentrates_mass() {
        let h = Hierarchy::parse("r\t-\na\tr\nb\tr\nx\ta\ny\ta").unwrap();
        let mut dists = BTreeMap::new();
        dists.insert(0, vec![1.0, 0.0]);
        dists.insert(1, vec![0.0, 1.0]);
        let nd = NodeDistributions { dists };
        let post: BTreeMap<NodeId, f64> = leaf_posteriors(&nd, &h).unwrap().into_iter().collect();
        assert_eq!(post[&4], 1.0);
        assert_eq!(post[&3], 0.0);
        assert_eq!(post[&2], 0.0);
    }

    #[test]
    fn uniform_tree_gives_uniform_leaves() {
        let h = generate_synthetic_hierarchy(&[3, 4]).unwrap();
        let m = zero_model(&h, 2);
        let nd = forward(&m, &h, &[1.0, 1.0]).unwrap();
        let post = leaf_posteriors(&nd, &h).unwrap();
        for (_, p) in post {
            assert!((p - 1.0 / 12.0).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_leaf_tie_breaks_low_id() {
        let h = Hierarchy::parse("r\t-\na\tr\nb\tr\nx\ta\ny\ta").unwrap();
        let mut dists = BTreeMap::new();
        dists.insert(0, vec![0.6, 0.4]);
        dists.insert(1, vec![0.5, 0.5]);
        let nd = NodeDistributions { dists };
        // Posteriors: leaf 2 -> 0.4, leaves 3 and 4 -> 0.3 each.
        assert_eq!(predict_leaf(&nd, &h).unwrap(), 2);
        let mut dists = BTreeMap::new();
        dists.insert(0, vec![0.8, 0.2]);
        dists.insert(1, vec![0.5, 0.5]);
        let nd = NodeDistributions { dists };
        // Exact tie between 3 and 4.
        assert_eq!(predict_leaf(&nd, &h).unwrap(), 3);
    }

    #[test]
    fn flat_forward_cases() {
        let h = generate_synthetic_hierarchy(&[3, 4]).unwrap();
        let m = zero_model(&h, 2);
        let p = flat_forward(&m, &[0.0, 0.0]).unwrap();
        for &v in &p {
            assert!((v - 1.0 / 12.0).abs() < 1e-12);
        }
        let mut no_flat = m.clone();
        no_flat.flat_head = None;
        assert!(matches!(
            flat_forward(&no_flat, &[0.0, 0.0]),
            Err(ModelError::NoFlatHead)
        ));
    }

    #[test]
    fn input_validation() {
        let h = generate_synthetic_hierarchy(&[2]).unwrap();
        let m = zero_model(&h, 2);
        assert!(matches!(
            forward(&m, &h, &[1.0]),
            Err(ModelError::DimMismatch { .. })
        ));
        assert!(matches!(
            forward(&m, &h, &[1.0, f64::NAN]),
            Err(ModelError::NonFiniteInput)
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let h = generate_synthetic_hierarchy(&[3, 3]).unwrap();
        let m = ModelParams::init(
            &h,
            &ModelConfig {
                input_dim: 7,
                trunk_layers: 2,
                hidden_dim: Some(11),
                with_flat_head: true,
                seed: 5,
            },
        );
        let text = save_checkpoint(&m, &h);
        let back = load_checkpoint(&text, &h).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn init_is_seeded() {
        let h = generate_synthetic_hierarchy(&[3, 3]).unwrap();
        let cfg = ModelConfig {
            input_dim: 4,
            trunk_layers: 1,
            hidden_dim: None,
            with_flat_head: false,
            seed: 9,
        };
        assert_eq!(ModelParams::init(&h, &cfg), ModelParams::init(&h, &cfg));
    }
}
