//! End-to-end synthetic benchmark: hierarchy generation, holdout splits,
//! Gaussian diffusion features, training of hierarchical and flat baselines,
//! OOD scoring by granularity, TNR sweeps, per-node micro-ROC, and a
//! deterministic CSV report.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::data::{
    generate_synthetic_features, generate_synthetic_hierarchy, partition, select_holdout_subtrees,
    Band, DataError, Dataset, DatasetSplits, Sample, SplitSpec,
};
use crate::evaluation::{
    confusion_to_csv, granularity_report, hierarchical_outcomes, sweep_to_csv, tnr_sweep,
    EvalError, GranularityAuroc, OodPool, Outcomes, ScoreDirection, SweepPoint,
};
use crate::hierarchy::{Granularity, Hierarchy, HierarchyError, HoldoutRoot, NodeId};
use crate::inference::{
    calibrate, hierarchical_infer_nd, node_micro_roc, roc_auc, CalibrationError, ThresholdMode,
};
use crate::model::{forward, ModelConfig, ModelError, ModelParams};
use crate::scoring::{msp_score, node_path_probability, score_distributions};
use crate::training::{train_sgd, LossConfig, Objective, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no usable holdout selection after {0} attempts")]
    HoldoutExhausted(usize),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Benchmark knobs; `default_with_seed` is the standard configuration used by
/// the `bench` CLI subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub master_seed: u64,
    pub num_seeds: usize,
    pub branching: Vec<usize>,
    pub dim: usize,
    pub level_scales: Vec<f64>,
    pub noise_scale: f64,
    pub per_leaf: usize,
    /// Bernoulli probability of holding out each depth-1 subtree (coarse).
    pub coarse_prob: f64,
    /// Bernoulli probability of holding out each leaf (fine).
    pub fine_prob: f64,
    pub alpha: f64,
    /// The two hierarchical ablations trained per seed.
    pub betas: [f64; 2],
    pub trunk_layers: usize,
    pub train: TrainConfig,
    pub tnr_grid: Vec<f64>,
    /// TNR used for the confusion matrices and the micro-ROC filter.
    pub report_tnr: f64,
}

impl BenchConfig {
    pub fn default_with_seed(master_seed: u64) -> BenchConfig {
        BenchConfig {
            master_seed,
            num_seeds: 3,
            branching: vec![3, 3, 3, 3],
            dim: 32,
            level_scales: vec![4.0, 2.0, 1.0, 0.5],
            noise_scale: 0.5,
            per_leaf: 20,
            coarse_prob: 0.25,
            fine_prob: 0.25,
            alpha: 1.0,
            betas: [0.2, 0.0],
            trunk_layers: 1,
            train: TrainConfig::desk_default(0),
            tnr_grid: vec![0.5, 0.8, 0.9, 0.95, 0.99],
            report_tnr: 0.95,
        }
    }
}

/// Per-node micro-ROC before and after the path-probability filter. A node
/// is `recovered` when thresholding removed one class entirely (nothing left
/// to misrank) or improved its micro-AUROC.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroRocNode {
    pub node_name: String,
    pub unthresholded: f64,
    pub thresholded: Option<f64>,
    pub recovered: bool,
}

/// All artifacts of one seed of the benchmark.
#[derive(Debug, Clone)]
pub struct SeedReport {
    pub seed_index: usize,
    pub data_seed: u64,
    /// `(model, metric)` -> AUROC by granularity. Models are `hsc_b<beta>`
    /// and `flat`; metrics `path_probability`, `h_mean`, `h_min`, `msp`.
    pub auroc: BTreeMap<(String, String), GranularityAuroc>,
    /// Sweep of the primary hierarchical model (the larger beta).
    pub sweep: Vec<SweepPoint>,
    pub micro: Vec<MicroRocNode>,
    pub id_outcomes: Outcomes,
    pub ood_outcomes: Outcomes,
    /// Primary trained model and its evaluation context, for reuse by
    /// downstream property checks.
    pub id_hierarchy: Hierarchy,
    pub primary_params: ModelParams,
    pub id_val: Dataset,
    pub id_test: Dataset,
    pub ood_pools: Vec<OodPool>,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub seeds: Vec<SeedReport>,
}

fn sub_seed(master: u64, k: usize) -> u64 {
    master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(k as u64)
}

/// Per-dimension standardization fitted on ID training data and applied to
/// every pool, so OOD inputs are scored in the model's native units.
struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    fn fit(ds: &Dataset) -> Standardizer {
        let n = ds.len().max(1) as f64;
        let mut mean = vec![0.0; ds.dim];
        for s in &ds.samples {
            for (m, v) in mean.iter_mut().zip(&s.features) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; ds.dim];
        for s in &ds.samples {
            for ((v, m), x) in var.iter_mut().zip(&mean).zip(&s.features) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt().max(1e-8)).collect();
        Standardizer { mean, std }
    }

    fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn apply_dataset(&self, ds: &Dataset) -> Dataset {
        Dataset {
            dim: ds.dim,
            samples: ds
                .samples
                .iter()
                .map(|s| Sample {
                    features: self.apply_vec(&s.features),
                    label: s.label,
                })
                .collect(),
        }
    }
}

/// Retries holdout selection with bumped seeds until both a fine and a
/// coarse pool exist and at least two ID leaves survive.
fn pick_holdouts(
    full: &Hierarchy,
    cfg: &BenchConfig,
    data_seed: u64,
) -> Result<Vec<HoldoutRoot>, BenchError> {
    let leaf_depth = cfg.branching.len();
    const MAX_ATTEMPTS: usize = 64;
    for attempt in 0..MAX_ATTEMPTS {
        let spec = SplitSpec {
            bands: vec![
                Band {
                    granularity: Granularity::Coarse,
                    depth_min: 1,
                    depth_max: 1,
                    prob: cfg.coarse_prob,
                },
                Band {
                    granularity: Granularity::Fine,
                    depth_min: leaf_depth,
                    depth_max: leaf_depth,
                    prob: cfg.fine_prob,
                },
            ],
            seed: data_seed.wrapping_add(attempt as u64 * 104_729),
        };
        let sel = match select_holdout_subtrees(full, &spec) {
            Ok(sel) => sel,
            Err(DataError::SelectionEmptiesTree) => continue,
            Err(e) => return Err(e.into()),
        };
        let has_fine = sel.iter().any(|(_, g)| *g == Granularity::Fine);
        let has_coarse = sel.iter().any(|(_, g)| *g == Granularity::Coarse);
        // Keep at least one full coarse subtree in-distribution.
        let coarse_count = sel.iter().filter(|(_, g)| *g == Granularity::Coarse).count();
        if !has_fine || !has_coarse || coarse_count + 1 >= full.children(full.root()).len() {
            continue;
        }
        let roots: Vec<HoldoutRoot> = sel
            .into_iter()
            .map(|(name, granularity)| HoldoutRoot { name, granularity })
            .collect();
        if full.holdout_split(&roots).is_ok() {
            return Ok(roots);
        }
    }
    Err(BenchError::HoldoutExhausted(MAX_ATTEMPTS))
}

struct SeedData {
    id_h: Hierarchy,
    splits: DatasetSplits,
    ood_pools: Vec<OodPool>,
}

/// Generates one seed's hierarchy, holdouts, and standardized feature pools.
fn build_seed_data(cfg: &BenchConfig, data_seed: u64) -> Result<SeedData, BenchError> {
    let full = generate_synthetic_hierarchy(&cfg.branching)?;
    let roots = pick_holdouts(&full, cfg, data_seed)?;
    let (id_h, gt_map) = full.holdout_split(&roots)?;

    let ds = generate_synthetic_features(
        &full,
        cfg.dim,
        &cfg.level_scales,
        cfg.noise_scale,
        cfg.per_leaf,
        data_seed,
    )?;

    // Relabel ID samples into the pruned hierarchy; route held-out leaves
    // into per-granularity OOD pools with their mapped ground truth.
    let mut id_ds = Dataset::new(cfg.dim);
    let mut pools: BTreeMap<Granularity, (Vec<Vec<f64>>, Vec<NodeId>)> = BTreeMap::new();
    for s in &ds.samples {
        let name = full.name(s.label);
        if let Some(id) = id_h.id_of(name) {
            id_ds.samples.push(Sample {
                features: s.features.clone(),
                label: id,
            });
        } else {
            let gt = gt_map.mapping[name];
            let g = gt_map.granularity[name];
            let entry = pools.entry(g).or_default();
            entry.0.push(s.features.clone());
            entry.1.push(gt);
        }
    }

    let splits = partition(&id_ds, 0.2, 0.2);
    let standardizer = Standardizer::fit(&splits.train);
    let splits = DatasetSplits {
        train: standardizer.apply_dataset(&splits.train),
        val: standardizer.apply_dataset(&splits.val),
        test: standardizer.apply_dataset(&splits.test),
    };
    let ood_pools = pools
        .into_iter()
        .map(|(granularity, (features, gt_nodes))| OodPool {
            granularity,
            features: features.iter().map(|x| standardizer.apply_vec(x)).collect(),
            gt_nodes,
        })
        .collect();

    Ok(SeedData {
        id_h,
        splits,
        ood_pools,
    })
}

fn train_model(
    data: &SeedData,
    cfg: &BenchConfig,
    model_seed: u64,
    objective: Objective,
    beta: f64,
) -> Result<ModelParams, BenchError> {
    let mcfg = ModelConfig {
        input_dim: cfg.dim,
        trunk_layers: cfg.trunk_layers,
        hidden_dim: None,
        with_flat_head: objective == Objective::Flat,
        seed: model_seed,
    };
    let params0 = ModelParams::init(&data.id_h, &mcfg);
    let mut tcfg = cfg.train.clone();
    tcfg.seed = model_seed;
    let lcfg = LossConfig::new(&data.id_h, cfg.alpha, beta);
    let (params, _) = train_sgd(
        &params0,
        &data.id_h,
        &data.splits.train,
        Some(&data.splits.val),
        &tcfg,
        &lcfg,
        objective,
    )?;
    Ok(params)
}

/// Granularity AUROC rows for one hierarchical model under all three path
/// metrics.
fn hsc_auroc_rows(
    params: &ModelParams,
    data: &SeedData,
) -> Result<BTreeMap<String, GranularityAuroc>, BenchError> {
    let h = &data.id_h;
    let score_pool = |features: &[Vec<f64>]| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), BenchError> {
        let mut pp = Vec::with_capacity(features.len());
        let mut hm = Vec::with_capacity(features.len());
        let mut hmin = Vec::with_capacity(features.len());
        for x in features {
            let nd = forward(params, h, x)?;
            let s = score_distributions(&nd, h)?;
            pp.push(s.path_probability);
            hm.push(s.h_mean);
            hmin.push(s.h_min);
        }
        Ok((pp, hm, hmin))
    };

    let id_feats: Vec<Vec<f64>> = data
        .splits
        .test
        .samples
        .iter()
        .map(|s| s.features.clone())
        .collect();
    let (id_pp, id_hm, id_hmin) = score_pool(&id_feats)?;
    let mut ood_pp: BTreeMap<Granularity, Vec<f64>> = BTreeMap::new();
    let mut ood_hm: BTreeMap<Granularity, Vec<f64>> = BTreeMap::new();
    let mut ood_hmin: BTreeMap<Granularity, Vec<f64>> = BTreeMap::new();
    for pool in &data.ood_pools {
        let (pp, hm, hmin) = score_pool(&pool.features)?;
        ood_pp.insert(pool.granularity, pp);
        ood_hm.insert(pool.granularity, hm);
        ood_hmin.insert(pool.granularity, hmin);
    }

    let mut rows = BTreeMap::new();
    rows.insert(
        "path_probability".to_string(),
        granularity_report(&id_pp, &ood_pp, ScoreDirection::HigherIsId)?,
    );
    rows.insert(
        "h_mean".to_string(),
        granularity_report(&id_hm, &ood_hm, ScoreDirection::LowerIsId)?,
    );
    rows.insert(
        "h_min".to_string(),
        granularity_report(&id_hmin, &ood_hmin, ScoreDirection::LowerIsId)?,
    );
    Ok(rows)
}

fn flat_auroc_row(
    params: &ModelParams,
    data: &SeedData,
) -> Result<GranularityAuroc, BenchError> {
    let id: Vec<f64> = data
        .splits
        .test
        .samples
        .iter()
        .map(|s| msp_score(params, &s.features))
        .collect::<Result<_, _>>()?;
    let mut pools = BTreeMap::new();
    for pool in &data.ood_pools {
        let scores: Vec<f64> = pool
            .features
            .iter()
            .map(|x| msp_score(params, x))
            .collect::<Result<_, _>>()?;
        pools.insert(pool.granularity, scores);
    }
    Ok(granularity_report(&id, &pools, ScoreDirection::HigherIsId)?)
}

/// Per-node micro-ROC over (sample, child) pairs, with and without the
/// path-probability survival filter at `report_tnr`.
fn micro_roc_nodes(
    params: &ModelParams,
    data: &SeedData,
    report_tnr: f64,
) -> Result<Vec<MicroRocNode>, BenchError> {
    let h = &data.id_h;
    let table = calibrate(params, h, &data.splits.val, report_tnr, ThresholdMode::PathWise)?;
    let filter_threshold = table.global_threshold;

    // (distributions, root-to-gt path) per sample; OOD ground truths are
    // internal nodes, so their paths end before the leaves.
    let mut entries: Vec<(crate::model::NodeDistributions, Vec<NodeId>)> = Vec::new();
    for s in &data.splits.test.samples {
        entries.push((forward(params, h, &s.features)?, h.path_from_root(s.label)?));
    }
    for pool in &data.ood_pools {
        for (x, &gt) in pool.features.iter().zip(&pool.gt_nodes) {
            entries.push((forward(params, h, x)?, h.path_from_root(gt)?));
        }
    }

    let mut out = Vec::new();
    for n in h.internals() {
        let mut unfiltered: Vec<(f64, bool)> = Vec::new();
        let mut filtered: Vec<(f64, bool)> = Vec::new();
        for (nd, gt_path) in &entries {
            let pos = match gt_path.iter().position(|&m| m == n) {
                Some(i) => i,
                None => continue,
            };
            // The correct child when the ground truth lies below this node;
            // at the ground-truth node itself every child is wrong.
            let correct = gt_path.get(pos + 1).copied();
            let p = nd.get(n)?;
            let survives = node_path_probability(nd, h, n)? >= filter_threshold;
            for (j, &c) in h.children(n).iter().enumerate() {
                let pair = (p[j], Some(c) == correct);
                unfiltered.push(pair);
                if survives {
                    filtered.push(pair);
                }
            }
        }
        let unthresholded = match node_micro_roc(&unfiltered) {
            Ok(curve) => roc_auc(&curve),
            Err(_) => continue, // one-class node; nothing to compare
        };
        let (thresholded, recovered) = match node_micro_roc(&filtered) {
            Ok(curve) => {
                let a = roc_auc(&curve);
                (Some(a), a >= unthresholded)
            }
            // The filter removed a whole class: no misrankings remain.
            Err(_) => (None, true),
        };
        out.push(MicroRocNode {
            node_name: h.name(n).to_string(),
            unthresholded,
            thresholded,
            recovered,
        });
    }
    Ok(out)
}

/// ID/OOD outcome reports under thresholded inference at `report_tnr`,
/// node-wise.
fn report_outcomes(
    params: &ModelParams,
    data: &SeedData,
    report_tnr: f64,
) -> Result<(Outcomes, Outcomes), BenchError> {
    let h = &data.id_h;
    let table = calibrate(params, h, &data.splits.val, report_tnr, ThresholdMode::NodeWise)?;
    let mut id_preds = Vec::new();
    let mut id_gts = Vec::new();
    for s in &data.splits.test.samples {
        let nd = forward(params, h, &s.features)?;
        id_preds.push(hierarchical_infer_nd(&nd, h, &table)?);
        id_gts.push(s.label);
    }
    let mut ood_preds = Vec::new();
    let mut ood_gts = Vec::new();
    for pool in &data.ood_pools {
        for (x, &gt) in pool.features.iter().zip(&pool.gt_nodes) {
            let nd = forward(params, h, x)?;
            ood_preds.push(hierarchical_infer_nd(&nd, h, &table)?);
            ood_gts.push(gt);
        }
    }
    Ok((
        hierarchical_outcomes(&id_preds, &id_gts, h)?,
        hierarchical_outcomes(&ood_preds, &ood_gts, h)?,
    ))
}

fn run_seed(cfg: &BenchConfig, seed_index: usize) -> Result<SeedReport, BenchError> {
    let data_seed = sub_seed(cfg.master_seed, seed_index);
    let data = build_seed_data(cfg, data_seed)?;

    let beta_primary = if cfg.betas[0] >= cfg.betas[1] {
        cfg.betas[0]
    } else {
        cfg.betas[1]
    };
    let mut auroc = BTreeMap::new();
    let mut primary: Option<ModelParams> = None;
    for (i, &beta) in cfg.betas.iter().enumerate() {
        let params = train_model(
            &data,
            cfg,
            sub_seed(data_seed, 100 + i),
            Objective::Hierarchical,
            beta,
        )?;
        for (metric, rep) in hsc_auroc_rows(&params, &data)? {
            auroc.insert((format!("hsc_b{beta}"), metric), rep);
        }
        if beta == beta_primary && primary.is_none() {
            primary = Some(params);
        }
    }
    let primary = primary.expect("primary beta is one of the trained betas");

    let flat = train_model(&data, cfg, sub_seed(data_seed, 200), Objective::Flat, 0.0)?;
    auroc.insert(("flat".to_string(), "msp".to_string()), flat_auroc_row(&flat, &data)?);

    let sweep = tnr_sweep(
        &primary,
        &data.id_h,
        &data.splits.val,
        &data.splits.test,
        &data.ood_pools,
        &cfg.tnr_grid,
    )?;
    let micro = micro_roc_nodes(&primary, &data, cfg.report_tnr)?;
    let (id_outcomes, ood_outcomes) = report_outcomes(&primary, &data, cfg.report_tnr)?;

    Ok(SeedReport {
        seed_index,
        data_seed,
        auroc,
        sweep,
        micro,
        id_outcomes,
        ood_outcomes,
        id_hierarchy: data.id_h,
        primary_params: primary,
        id_val: data.splits.val,
        id_test: data.splits.test,
        ood_pools: data.ood_pools,
    })
}

/// Runs the full multi-seed benchmark.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    let mut seeds = Vec::with_capacity(cfg.num_seeds);
    for k in 0..cfg.num_seeds {
        seeds.push(run_seed(cfg, k)?);
    }
    Ok(BenchReport {
        config: cfg.clone(),
        seeds,
    })
}

impl BenchReport {
    /// Mean AUROC over seeds for one `(model, metric, granularity)` cell;
    /// absent when no seed produced that pool.
    pub fn mean_auroc(&self, model: &str, metric: &str, g: Granularity) -> Option<f64> {
        let key = (model.to_string(), metric.to_string());
        let vals: Vec<f64> = self
            .seeds
            .iter()
            .filter_map(|s| s.auroc.get(&key))
            .filter_map(|rep| rep.per_granularity.get(&g).copied())
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Sweep points averaged across seeds (grid order is identical per seed).
    pub fn mean_sweep(&self) -> Vec<SweepPoint> {
        let n = self.seeds.len();
        if n == 0 {
            return Vec::new();
        }
        let len = self.seeds[0].sweep.len();
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            let first = &self.seeds[0].sweep[i];
            let mut p = SweepPoint {
                tnr: first.tnr,
                mode: first.mode,
                id_accuracy: 0.0,
                ood_accuracy: 0.0,
                avg_hdist_id: 0.0,
                avg_hdist_ood: 0.0,
            };
            for s in &self.seeds {
                let q = &s.sweep[i];
                p.id_accuracy += q.id_accuracy;
                p.ood_accuracy += q.ood_accuracy;
                p.avg_hdist_id += q.avg_hdist_id;
                p.avg_hdist_ood += q.avg_hdist_ood;
            }
            p.id_accuracy /= n as f64;
            p.ood_accuracy /= n as f64;
            p.avg_hdist_id /= n as f64;
            p.avg_hdist_ood /= n as f64;
            out.push(p);
        }
        out
    }

    /// Fraction of internal nodes (pooled over seeds) whose micro-AUROC did
    /// not degrade under the path-probability filter.
    pub fn micro_recovery_fraction(&self) -> f64 {
        let mut total = 0usize;
        let mut ok = 0usize;
        for s in &self.seeds {
            for m in &s.micro {
                total += 1;
                if m.recovered {
                    ok += 1;
                }
            }
        }
        if total == 0 {
            return f64::NAN;
        }
        ok as f64 / total as f64
    }
}

fn auroc_csv(report: &BenchReport) -> String {
    let mut out = String::from("seed,model,metric,granularity,auroc\n");
    for s in &report.seeds {
        for ((model, metric), rep) in &s.auroc {
            for (g, v) in &rep.per_granularity {
                out.push_str(&format!(
                    "{},{},{},{},{:.6}\n",
                    s.seed_index,
                    model,
                    metric,
                    g.as_str(),
                    v
                ));
            }
            if let Some(v) = rep.overall {
                out.push_str(&format!(
                    "{},{},{},overall,{:.6}\n",
                    s.seed_index, model, metric, v
                ));
            }
        }
    }
    out
}

fn micro_csv(report: &BenchReport) -> String {
    let mut out = String::from("seed,node,unthresholded_auc,thresholded_auc,recovered\n");
    for s in &report.seeds {
        for m in &s.micro {
            let th = match m.thresholded {
                Some(v) => format!("{v:.6}"),
                None => "absent".to_string(),
            };
            out.push_str(&format!(
                "{},{},{:.6},{},{}\n",
                s.seed_index, m.node_name, m.unthresholded, th, m.recovered
            ));
        }
    }
    out
}

fn summed_confusion<'a>(mats: impl Iterator<Item = &'a Vec<Vec<usize>>>) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for m in mats {
        if m.len() > out.len() {
            out.resize(m.len(), Vec::new());
        }
        for (g, row) in m.iter().enumerate() {
            if row.len() > out[g].len() {
                out[g].resize(row.len(), 0);
            }
            for (p, &c) in row.iter().enumerate() {
                out[g][p] += c;
            }
        }
    }
    let cols = out.iter().map(|r| r.len()).max().unwrap_or(0);
    for r in &mut out {
        r.resize(cols, 0);
    }
    out
}

/// Writes the report directory: per-seed and aggregate sweep CSVs,
/// granularity AUROC CSV, pooled confusion matrices, micro-ROC CSV, and a
/// key/value summary. All outputs are deterministic per config.
pub fn write_report(report: &BenchReport, dir: &Path) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("auroc.csv"), auroc_csv(report))?;
    std::fs::write(dir.join("sweep.csv"), sweep_to_csv(&report.mean_sweep()))?;
    for s in &report.seeds {
        std::fs::write(
            dir.join(format!("sweep_seed{}.csv", s.seed_index)),
            sweep_to_csv(&s.sweep),
        )?;
    }
    let id_conf = summed_confusion(report.seeds.iter().map(|s| &s.id_outcomes.confusion));
    let ood_conf = summed_confusion(report.seeds.iter().map(|s| &s.ood_outcomes.confusion));
    std::fs::write(dir.join("confusion_id.csv"), confusion_to_csv(&id_conf))?;
    std::fs::write(dir.join("confusion_ood.csv"), confusion_to_csv(&ood_conf))?;
    std::fs::write(dir.join("micro_roc.csv"), micro_csv(report))?;

    let mut summary = String::from("key,value\n");
    summary.push_str(&format!("master_seed,{}\n", report.config.master_seed));
    summary.push_str(&format!("num_seeds,{}\n", report.seeds.len()));
    let beta_primary = report.config.betas[0].max(report.config.betas[1]);
    for (model, metric) in [
        (format!("hsc_b{beta_primary}"), "path_probability"),
        (format!("hsc_b{beta_primary}"), "h_mean"),
        (format!("hsc_b{beta_primary}"), "h_min"),
        ("flat".to_string(), "msp"),
    ] {
        for g in [Granularity::Fine, Granularity::Medium, Granularity::Coarse] {
            if let Some(v) = report.mean_auroc(&model, metric, g) {
                summary.push_str(&format!(
                    "mean_auroc_{}_{}_{},{:.6}\n",
                    model,
                    metric,
                    g.as_str(),
                    v
                ));
            }
        }
    }
    summary.push_str(&format!(
        "micro_recovery_fraction,{:.6}\n",
        report.micro_recovery_fraction()
    ));
    std::fs::write(dir.join("summary.csv"), summary)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A shrunken configuration that runs in well under a second.
    pub(crate) fn tiny_config(master_seed: u64) -> BenchConfig {
        let mut cfg = BenchConfig::default_with_seed(master_seed);
        cfg.num_seeds = 1;
        cfg.branching = vec![3, 3];
        cfg.dim = 8;
        cfg.level_scales = vec![4.0, 1.0];
        cfg.per_leaf = 10;
        cfg.coarse_prob = 0.3;
        cfg.fine_prob = 0.3;
        cfg.train.epochs = 8;
        cfg.train.lr_milestones = vec![5];
        cfg
    }

    #[test]
    fn tiny_bench_smoke() {
        let cfg = tiny_config(3);
        let report = run_bench(&cfg).unwrap();
        assert_eq!(report.seeds.len(), 1);
        let s = &report.seeds[0];
        // Every trained model contributed AUROC rows.
        assert!(s.auroc.keys().any(|(m, _)| m == "flat"));
        assert!(s.auroc.keys().any(|(m, _)| m.starts_with("hsc_b")));
        for rep in s.auroc.values() {
            for v in rep.per_granularity.values() {
                assert!((0.0..=1.0).contains(v));
            }
        }
        assert_eq!(s.sweep.len(), cfg.tnr_grid.len() * 2);
        assert!(!s.micro.is_empty());
        let total: usize = s.id_outcomes.confusion.iter().flatten().sum();
        assert_eq!(total, s.id_outcomes.count);
    }

    #[test]
    fn tiny_bench_report_files_deterministic() {
        let cfg = tiny_config(5);
        let a = run_bench(&cfg).unwrap();
        let b = run_bench(&cfg).unwrap();
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        write_report(&a, da.path()).unwrap();
        write_report(&b, db.path()).unwrap();
        for entry in std::fs::read_dir(da.path()).unwrap() {
            let entry = entry.unwrap();
            let name = entry.file_name();
            let left = std::fs::read(entry.path()).unwrap();
            let right = std::fs::read(db.path().join(&name)).unwrap();
            assert_eq!(left, right, "file {name:?} differs between runs");
        }
    }

    #[test]
    fn holdout_retry_produces_both_pools() {
        for seed in 0..5 {
            let cfg = tiny_config(seed);
            let data = build_seed_data(&cfg, sub_seed(cfg.master_seed, 0)).unwrap();
            let gs: Vec<Granularity> = data.ood_pools.iter().map(|p| p.granularity).collect();
            assert!(gs.contains(&Granularity::Fine), "seed {seed}");
            assert!(gs.contains(&Granularity::Coarse), "seed {seed}");
        }
    }
}
