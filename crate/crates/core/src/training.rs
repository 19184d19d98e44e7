//! Weighted multi-objective loss, analytic gradients, and a seeded SGD
//! trainer with momentum, weight decay, and milestone learning-rate decay.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Dataset;
use crate::hierarchy::{Hierarchy, NodeId};
use crate::model::{forward, predict_leaf, softmax, Layer, ModelError, ModelParams, NodeDistributions};

/// Floor applied to probabilities inside logarithms.
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("label {0} is not a leaf")]
    NotALeaf(NodeId),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Loss weights: `alpha` scales the on-path cross-entropy, `beta` the
/// off-path uniformity term, `node_weights` the per-node scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub node_weights: BTreeMap<NodeId, f64>,
}

impl LossConfig {
    pub fn new(h: &Hierarchy, alpha: f64, beta: f64) -> LossConfig {
        LossConfig {
            alpha,
            beta,
            node_weights: node_weights(h),
        }
    }
}

/// W_n = (leaves having n as ancestor-or-equal) / |leaves|; 1.0 at the root,
/// decreasing toward the leaves.
pub fn node_weights(h: &Hierarchy) -> BTreeMap<NodeId, f64> {
    let counts = h.leaf_counts_below();
    let n_leaves = h.num_leaves() as f64;
    h.internals()
        .into_iter()
        .map(|n| (n, counts[n] as f64 / n_leaves))
        .collect()
}

fn on_path_targets(h: &Hierarchy, y: NodeId) -> Result<Vec<(NodeId, usize)>, TrainError> {
    if !h.is_leaf(y) {
        return Err(TrainError::NotALeaf(y));
    }
    let path = h.path_from_root(y).map_err(|_| TrainError::NotALeaf(y))?;
    let mut out = Vec::with_capacity(path.len() - 1);
    for w in path.windows(2) {
        let (n, c) = (w[0], w[1]);
        let j = h
            .children(n)
            .iter()
            .position(|&x| x == c)
            .expect("path child must be among parent's children");
        out.push((n, j));
    }
    Ok(out)
}

/// On-path node-weighted cross-entropy for one sample (Eq. form:
/// sum over path nodes of `W_n * -ln p_{n, next}`).
pub fn soft_loss(
    nd: &NodeDistributions,
    y: NodeId,
    cfg: &LossConfig,
    h: &Hierarchy,
) -> Result<f64, TrainError> {
    let mut loss = 0.0;
    for (n, j) in on_path_targets(h, y)? {
        let p = nd.get(n)?;
        let w = cfg.node_weights.get(&n).copied().unwrap_or(1.0);
        loss -= w * p[j].max(PROB_FLOOR).ln();
    }
    Ok(loss)
}

/// Off-path uniformity term for one sample: cross-entropy from the uniform
/// distribution to each internal node distribution not on the label path.
pub fn other_loss(nd: &NodeDistributions, y: NodeId, h: &Hierarchy) -> Result<f64, TrainError> {
    if !h.is_leaf(y) {
        return Err(TrainError::NotALeaf(y));
    }
    let on_path: std::collections::HashSet<NodeId> =
        h.path_from_root(y).map_err(|_| TrainError::NotALeaf(y))?.into_iter().collect();
    let mut loss = 0.0;
    for n in h.internals() {
        if on_path.contains(&n) {
            continue;
        }
        let p = nd.get(n)?;
        let s = p.len() as f64;
        for &pj in p {
            loss -= pj.max(PROB_FLOOR).ln() / s;
        }
    }
    Ok(loss)
}

/// `alpha * soft_loss + beta * other_loss` for one sample.
pub fn total_loss(
    nd: &NodeDistributions,
    y: NodeId,
    cfg: &LossConfig,
    h: &Hierarchy,
) -> Result<f64, TrainError> {
    Ok(cfg.alpha * soft_loss(nd, y, cfg, h)? + cfg.beta * other_loss(nd, y, h)?)
}

/// Mean total loss over a batch.
pub fn batch_total_loss(
    params: &ModelParams,
    h: &Hierarchy,
    batch: &[crate::data::Sample],
    cfg: &LossConfig,
) -> Result<f64, TrainError> {
    let mut acc = 0.0;
    for s in batch {
        let nd = forward(params, h, &s.features)?;
        acc += total_loss(&nd, s.label, cfg, h)?;
    }
    Ok(acc / batch.len() as f64)
}

/// Which parameters an objective trains (and regularizes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Hierarchical heads + trunk under the multi-objective loss.
    Hierarchical,
    /// Flat baseline head + trunk under plain cross-entropy.
    Flat,
}

struct TrunkCache {
    /// Post-activation output of each trunk layer.
    activations: Vec<Vec<f64>>,
}

fn trunk_forward(params: &ModelParams, x: &[f64]) -> Result<TrunkCache, ModelError> {
    if x.len() != params.input_dim {
        return Err(ModelError::DimMismatch {
            expected: params.input_dim,
            found: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteInput);
    }
    let mut activations = Vec::with_capacity(params.trunk.len() + 1);
    activations.push(x.to_vec());
    for layer in &params.trunk {
        let mut a = layer.apply(activations.last().unwrap());
        for v in a.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        activations.push(a);
    }
    Ok(TrunkCache { activations })
}

fn accumulate_head(grad: &mut Layer, dz: &[f64], feat: &[f64], dfeat: &mut [f64], head: &Layer) {
    for (j, &g) in dz.iter().enumerate() {
        let row = &head.weights[j * head.in_dim..(j + 1) * head.in_dim];
        let grow = &mut grad.weights[j * head.in_dim..(j + 1) * head.in_dim];
        for i in 0..head.in_dim {
            grow[i] += g * feat[i];
            dfeat[i] += g * row[i];
        }
        grad.bias[j] += g;
    }
}

fn trunk_backward(
    params: &ModelParams,
    cache: &TrunkCache,
    mut dfeat: Vec<f64>,
    grads: &mut ModelParams,
) {
    for (l, layer) in params.trunk.iter().enumerate().rev() {
        // ReLU mask: the stored activation is already rectified, so a zero
        // output kills the gradient.
        let out = &cache.activations[l + 1];
        for (d, &o) in dfeat.iter_mut().zip(out) {
            if o <= 0.0 {
                *d = 0.0;
            }
        }
        let input = &cache.activations[l];
        let glayer = &mut grads.trunk[l];
        let mut dinput = vec![0.0; layer.in_dim];
        for (j, &g) in dfeat.iter().enumerate() {
            let row = &layer.weights[j * layer.in_dim..(j + 1) * layer.in_dim];
            let grow = &mut glayer.weights[j * layer.in_dim..(j + 1) * layer.in_dim];
            for i in 0..layer.in_dim {
                grow[i] += g * input[i];
                dinput[i] += g * row[i];
            }
            glayer.bias[j] += g;
        }
        dfeat = dinput;
    }
}

fn zeros_like(params: &ModelParams, objective: Objective) -> ModelParams {
    ModelParams {
        input_dim: params.input_dim,
        trunk: params
            .trunk
            .iter()
            .map(|l| Layer::zeros(l.in_dim, l.out_dim))
            .collect(),
        heads: match objective {
            Objective::Hierarchical => params
                .heads
                .iter()
                .map(|(&n, l)| (n, Layer::zeros(l.in_dim, l.out_dim)))
                .collect(),
            Objective::Flat => BTreeMap::new(),
        },
        flat_head: match objective {
            Objective::Hierarchical => None,
            Objective::Flat => params
                .flat_head
                .as_ref()
                .map(|l| Layer::zeros(l.in_dim, l.out_dim)),
        },
    }
}

/// Exact analytic gradients of the batch-mean hierarchical loss with respect
/// to the trunk and head parameters, plus `weight_decay * theta`.
pub fn backward(
    params: &ModelParams,
    h: &Hierarchy,
    batch: &[crate::data::Sample],
    cfg: &LossConfig,
    weight_decay: f64,
) -> Result<ModelParams, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let mut grads = zeros_like(params, Objective::Hierarchical);
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        let cache = trunk_forward(params, &s.features)?;
        let feat = cache.activations.last().unwrap().clone();
        let on_path: BTreeMap<NodeId, usize> = on_path_targets(h, s.label)?.into_iter().collect();
        let mut dfeat = vec![0.0; feat.len()];
        for n in h.internals() {
            let head = params.heads.get(&n).ok_or(ModelError::MissingHead(n))?;
            let p = softmax(&head.apply(&feat));
            let dz: Vec<f64> = match on_path.get(&n) {
                Some(&t) => {
                    // d(-W ln p_t)/dz_j = W (p_j - [j == t])
                    let w = cfg.node_weights.get(&n).copied().unwrap_or(1.0);
                    p.iter()
                        .enumerate()
                        .map(|(j, &pj)| cfg.alpha * scale * w * (pj - if j == t { 1.0 } else { 0.0 }))
                        .collect()
                }
                None => {
                    // d(H[U, p])/dz_j = p_j - 1/s
                    let u = 1.0 / p.len() as f64;
                    p.iter().map(|&pj| cfg.beta * scale * (pj - u)).collect()
                }
            };
            let g = grads.heads.get_mut(&n).unwrap();
            accumulate_head(g, &dz, &feat, &mut dfeat, head);
        }
        trunk_backward(params, &cache, dfeat, &mut grads);
    }
    if weight_decay != 0.0 {
        apply_weight_decay(&mut grads, params, weight_decay);
    }
    Ok(grads)
}

/// Analytic gradients of the batch-mean flat cross-entropy (plus weight
/// decay) for the flat baseline head and trunk.
pub fn flat_backward(
    params: &ModelParams,
    h: &Hierarchy,
    batch: &[crate::data::Sample],
    weight_decay: f64,
) -> Result<ModelParams, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let head = params.flat_head.as_ref().ok_or(ModelError::NoFlatHead)?;
    let leaves = h.leaves();
    let leaf_index: BTreeMap<NodeId, usize> =
        leaves.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut grads = zeros_like(params, Objective::Flat);
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        let cache = trunk_forward(params, &s.features)?;
        let feat = cache.activations.last().unwrap().clone();
        let p = softmax(&head.apply(&feat));
        let t = *leaf_index.get(&s.label).ok_or(TrainError::NotALeaf(s.label))?;
        let dz: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(j, &pj)| scale * (pj - if j == t { 1.0 } else { 0.0 }))
            .collect();
        let mut dfeat = vec![0.0; feat.len()];
        let g = grads.flat_head.as_mut().unwrap();
        accumulate_head(g, &dz, &feat, &mut dfeat, head);
        trunk_backward(params, &cache, dfeat, &mut grads);
    }
    if weight_decay != 0.0 {
        apply_weight_decay(&mut grads, params, weight_decay);
    }
    Ok(grads)
}

fn apply_weight_decay(grads: &mut ModelParams, params: &ModelParams, wd: f64) {
    for (g, p) in grads.trunk.iter_mut().zip(&params.trunk) {
        for (gv, pv) in g.weights.iter_mut().zip(&p.weights) {
            *gv += wd * pv;
        }
        for (gv, pv) in g.bias.iter_mut().zip(&p.bias) {
            *gv += wd * pv;
        }
    }
    for (n, g) in grads.heads.iter_mut() {
        let p = &params.heads[n];
        for (gv, pv) in g.weights.iter_mut().zip(&p.weights) {
            *gv += wd * pv;
        }
        for (gv, pv) in g.bias.iter_mut().zip(&p.bias) {
            *gv += wd * pv;
        }
    }
    if let (Some(g), Some(p)) = (grads.flat_head.as_mut(), params.flat_head.as_ref()) {
        for (gv, pv) in g.weights.iter_mut().zip(&p.weights) {
            *gv += wd * pv;
        }
        for (gv, pv) in g.bias.iter_mut().zip(&p.bias) {
            *gv += wd * pv;
        }
    }
}

/// SGD schedule parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_milestones: Vec<usize>,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale default: 30 epochs with the reference lr/momentum/decay
    /// constants and milestones at 10 and 20.
    pub fn desk_default(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_factor: 0.1,
            lr_milestones: vec![10, 20],
            seed,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::BadConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(TrainError::BadConfig("rates must be nonnegative".into()));
        }
        if !self.lr_milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(TrainError::BadConfig("milestones must be sorted ascending".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// Renders the training log as CSV (`epoch,lr,train_loss,val_accuracy`).
pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_accuracy\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            e.epoch, e.lr, e.train_loss, e.val_accuracy
        ));
    }
    out
}

fn sgd_step(params: &mut ModelParams, grads: &ModelParams, vel: &mut ModelParams, lr: f64, momentum: f64) {
    let step_layer = |p: &mut Layer, g: &Layer, v: &mut Layer| {
        for ((pv, gv), vv) in p.weights.iter_mut().zip(&g.weights).zip(v.weights.iter_mut()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
        for ((pv, gv), vv) in p.bias.iter_mut().zip(&g.bias).zip(v.bias.iter_mut()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    };
    for (l, (g, v)) in params.trunk.iter_mut().zip(grads.trunk.iter().zip(vel.trunk.iter_mut())) {
        step_layer(l, g, v);
    }
    for (n, g) in &grads.heads {
        if let (Some(p), Some(v)) = (params.heads.get_mut(n), vel.heads.get_mut(n)) {
            step_layer(p, g, v);
        }
    }
    if let (Some(p), Some(g), Some(v)) = (
        params.flat_head.as_mut(),
        grads.flat_head.as_ref(),
        vel.flat_head.as_mut(),
    ) {
        step_layer(p, g, v);
    }
}

fn accuracy(params: &ModelParams, h: &Hierarchy, ds: &Dataset, objective: Objective) -> Result<f64, TrainError> {
    if ds.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    let leaves = h.leaves();
    for s in &ds.samples {
        let pred = match objective {
            Objective::Hierarchical => {
                let nd = forward(params, h, &s.features)?;
                predict_leaf(&nd, h)?
            }
            Objective::Flat => {
                let p = crate::model::flat_forward(params, &s.features)?;
                let mut best = 0;
                for (i, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = i;
                    }
                }
                leaves[best]
            }
        };
        if pred == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Seeded minibatch SGD with momentum, weight decay, and milestone lr decay.
/// Same inputs and seed produce bit-identical parameters.
pub fn train_sgd(
    params0: &ModelParams,
    h: &Hierarchy,
    train: &Dataset,
    val: Option<&Dataset>,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    objective: Objective,
) -> Result<(ModelParams, Vec<EpochLog>), TrainError> {
    tcfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let mut params = params0.clone();
    let mut vel = zeros_like(&params, objective);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut lr = tcfg.learning_rate;
    let mut log = Vec::with_capacity(tcfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..tcfg.epochs {
        if tcfg.lr_milestones.contains(&epoch) {
            lr *= tcfg.lr_decay_factor;
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<crate::data::Sample> =
                chunk.iter().map(|&i| train.samples[i].clone()).collect();
            let (grads, loss) = match objective {
                Objective::Hierarchical => {
                    let g = backward(&params, h, &batch, lcfg, tcfg.weight_decay)?;
                    let l = batch_total_loss(&params, h, &batch, lcfg)?;
                    (g, l)
                }
                Objective::Flat => {
                    let g = flat_backward(&params, h, &batch, tcfg.weight_decay)?;
                    let l = flat_batch_loss(&params, h, &batch)?;
                    (g, l)
                }
            };
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, loss });
            }
            sgd_step(&mut params, &grads, &mut vel, lr, tcfg.momentum);
            epoch_loss += loss;
            batches += 1;
        }
        let val_acc = match val {
            Some(v) => accuracy(&params, h, v, objective)?,
            None => f64::NAN,
        };
        log.push(EpochLog {
            epoch,
            lr,
            train_loss: epoch_loss / batches as f64,
            val_accuracy: val_acc,
        });
    }
    Ok((params, log))
}

/// Mean flat cross-entropy over a batch.
pub fn flat_batch_loss(
    params: &ModelParams,
    h: &Hierarchy,
    batch: &[crate::data::Sample],
) -> Result<f64, TrainError> {
    let leaves = h.leaves();
    let leaf_index: BTreeMap<NodeId, usize> =
        leaves.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut acc = 0.0;
    for s in batch {
        let p = crate::model::flat_forward(params, &s.features)?;
        let t = *leaf_index.get(&s.label).ok_or(TrainError::NotALeaf(s.label))?;
        acc -= p[t].max(PROB_FLOOR).ln();
    }
    Ok(acc / batch.len() as f64)
}
