//! Acceptance suite: one test per criterion, each printing a single
//! PASS/FAIL line (run with `--nocapture` to see them on success).

use std::collections::BTreeMap;

use once_cell::sync::Lazy;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hiernav_core::benchmark::{run_bench, write_report, BenchConfig, BenchReport};
use hiernav_core::data::{generate_synthetic_features, generate_synthetic_hierarchy, Sample};
use hiernav_core::evaluation::{auroc, ScoreDirection};
use hiernav_core::hierarchy::{Granularity, Hierarchy};
use hiernav_core::inference::{calibrate, hierarchical_infer_nd, ThresholdMode};
use hiernav_core::model::{forward, leaf_posteriors, ModelConfig, ModelParams};
use hiernav_core::training::{
    backward, batch_total_loss, soft_loss, train_sgd, LossConfig, Objective, TrainConfig,
};

static BENCH: Lazy<(BenchReport, std::time::Duration)> = Lazy::new(|| {
    let start = std::time::Instant::now();
    let report = run_bench(&BenchConfig::default_with_seed(7)).expect("benchmark run");
    (report, start.elapsed())
});

fn bench() -> &'static BenchReport {
    &BENCH.0
}

fn verdict(criterion: &str, pass: bool) {
    println!("criterion {criterion}: {}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion} failed");
}

fn random_tree(rng: &mut ChaCha8Rng, max_nodes: usize) -> Hierarchy {
    loop {
        let levels = rng.random_range(1..=3);
        let branching: Vec<usize> = (0..levels).map(|_| rng.random_range(2..=4)).collect();
        let h = generate_synthetic_hierarchy(&branching).unwrap();
        if h.len() <= max_nodes {
            return h;
        }
    }
}

#[test]
fn criterion_01_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let h = random_tree(&mut rng, 64);
        let dim = rng.random_range(2..=12);
        let params = ModelParams::init(
            &h,
            &ModelConfig {
                input_dim: dim,
                trunk_layers: rng.random_range(0..=2),
                hidden_dim: Some(rng.random_range(4..=16)),
                with_flat_head: false,
                seed: rng.random(),
            },
        );
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let nd = forward(&params, &h, &x).unwrap();
        let total: f64 = leaf_posteriors(&nd, &h)
            .unwrap()
            .into_iter()
            .map(|(_, p)| p)
            .sum();
        worst = worst.max((total - 1.0).abs());
    }
    verdict("1 (leaf posterior normalization)", worst < 1e-9);
}

#[test]
fn criterion_02_gradient_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let h = random_tree(&mut rng, 30);
        let dim = rng.random_range(2..=16);
        let mut params = ModelParams::init(
            &h,
            &ModelConfig {
                input_dim: dim,
                trunk_layers: rng.random_range(0..=1),
                hidden_dim: Some(rng.random_range(3..=8)),
                with_flat_head: false,
                seed: rng.random(),
            },
        );
        let leaves = h.leaves();
        let batch: Vec<Sample> = (0..rng.random_range(1..=4))
            .map(|_| Sample {
                features: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                label: leaves[rng.random_range(0..leaves.len())],
            })
            .collect();
        let cfg = LossConfig::new(&h, rng.random_range(0.2..2.0), rng.random_range(0.05..1.0));

        let analytic = backward(&params, &h, &batch, &cfg, 0.0).unwrap();
        let eps = 1e-5;
        macro_rules! check {
            ($ana:expr, $slot:expr) => {{
                let ana: f64 = $ana;
                let orig = $slot;
                $slot = orig + eps;
                let up = batch_total_loss(&params, &h, &batch, &cfg).unwrap();
                $slot = orig - eps;
                let down = batch_total_loss(&params, &h, &batch, &cfg).unwrap();
                $slot = orig;
                let fd = (up - down) / (2.0 * eps);
                let rel = (ana - fd).abs() / ana.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }};
        }
        // Spot-check a handful of coordinates from every parameter group.
        for li in 0..params.trunk.len() {
            for k in 0..3.min(params.trunk[li].weights.len()) {
                check!(analytic.trunk[li].weights[k], params.trunk[li].weights[k]);
            }
            check!(analytic.trunk[li].bias[0], params.trunk[li].bias[0]);
        }
        let nodes: Vec<_> = params.heads.keys().copied().collect();
        for n in nodes {
            for k in 0..2.min(params.heads[&n].weights.len()) {
                check!(
                    analytic.heads[&n].weights[k],
                    params.heads.get_mut(&n).unwrap().weights[k]
                );
            }
            check!(
                analytic.heads[&n].bias[0],
                params.heads.get_mut(&n).unwrap().bias[0]
            );
        }
    }
    verdict("2 (gradient finite-difference oracle)", worst <= 1e-4);
}

#[test]
fn criterion_03_auroc_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut all_equal = true;
    for _ in 0..100 {
        let n = rng.random_range(1..=200);
        let m = rng.random_range(1..=200);
        // Coarse grid to force plenty of ties.
        let id: Vec<f64> = (0..n).map(|_| rng.random_range(0..25) as f64 / 25.0).collect();
        let ood: Vec<f64> = (0..m).map(|_| rng.random_range(0..25) as f64 / 25.0).collect();
        let fast = auroc(&id, &ood, ScoreDirection::HigherIsId).unwrap();
        let mut twice: u64 = 0;
        for &a in &id {
            for &b in &ood {
                if a > b {
                    twice += 2;
                } else if a == b {
                    twice += 1;
                }
            }
        }
        let brute = twice as f64 / (2.0 * n as f64 * m as f64);
        all_equal &= fast == brute;
    }
    verdict("3 (AUROC equals pairwise statistic exactly)", all_equal);
}

#[test]
fn criterion_04_threshold_monotonicity() {
    let seed = &bench().seeds[0];
    let h = &seed.id_hierarchy;
    let grid = [0.5, 0.8, 0.9, 0.95, 0.99];
    let tables: Vec<_> = grid
        .iter()
        .map(|&t| calibrate(&seed.primary_params, h, &seed.id_val, t, ThresholdMode::NodeWise).unwrap())
        .collect();
    let mut violations = 0usize;
    let mut samples: Vec<&Vec<f64>> = seed.id_test.samples.iter().map(|s| &s.features).collect();
    samples.extend(seed.ood_pools.iter().flat_map(|p| p.features.iter()));
    for x in samples.into_iter().take(100) {
        let nd = forward(&seed.primary_params, h, x).unwrap();
        let preds: Vec<_> = tables
            .iter()
            .map(|t| hierarchical_infer_nd(&nd, h, t).unwrap())
            .collect();
        // Stricter TNR (later grid points) must predict at an ancestor of
        // the looser TNR's prediction.
        for w in preds.windows(2) {
            if !h.is_ancestor_or_equal(w[1], w[0]) {
                violations += 1;
            }
        }
    }
    verdict("4 (predictions form ancestor chains across TNR grid)", violations == 0);
}

#[test]
fn criterion_05_granularity_trend() {
    let report = bench();
    let model = "hsc_b0.2";
    let mut pass = true;
    for metric in ["path_probability", "h_min"] {
        let coarse = report.mean_auroc(model, metric, Granularity::Coarse).unwrap();
        let fine = report.mean_auroc(model, metric, Granularity::Fine).unwrap();
        println!("  {metric}: coarse {coarse:.4} fine {fine:.4}");
        pass &= coarse - fine >= 0.05;
    }
    let runtime = BENCH.1;
    println!("  benchmark wall time {runtime:?}");
    pass &= runtime.as_secs() < 300;
    verdict("5 (coarse AUROC exceeds fine by >= 0.05, run < 5 min)", pass);
}

#[test]
fn criterion_06_loss_ablation_direction() {
    let report = bench();
    let mean_coarse = |model: &str| {
        let metrics = ["path_probability", "h_mean", "h_min"];
        let vals: Vec<f64> = metrics
            .iter()
            .filter_map(|m| report.mean_auroc(model, m, Granularity::Coarse))
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let with_beta = mean_coarse("hsc_b0.2");
    let without = mean_coarse("hsc_b0");
    println!("  coarse AUROC: beta=0.2 {with_beta:.4}, beta=0 {without:.4}");
    verdict(
        "6 (beta=0.2 coarse AUROC non-inferior to beta=0)",
        with_beta >= without - 0.01,
    );
}

#[test]
fn criterion_07_sweep_behavior() {
    let sweep = bench().mean_sweep();
    let node_wise: Vec<_> = sweep
        .iter()
        .filter(|p| p.mode == ThresholdMode::NodeWise)
        .collect();
    let lo = node_wise
        .iter()
        .min_by(|a, b| a.tnr.partial_cmp(&b.tnr).unwrap())
        .unwrap();
    let hi = node_wise
        .iter()
        .max_by(|a, b| a.tnr.partial_cmp(&b.tnr).unwrap())
        .unwrap();
    println!(
        "  ood hdist: tnr {} -> {:.4}, tnr {} -> {:.4}; id hdist {:.4} -> {:.4}",
        lo.tnr, lo.avg_hdist_ood, hi.tnr, hi.avg_hdist_ood, lo.avg_hdist_id, hi.avg_hdist_id
    );
    let ood_ok = hi.avg_hdist_ood <= lo.avg_hdist_ood;
    let id_ok = (hi.avg_hdist_id - lo.avg_hdist_id).abs() <= 0.1;
    verdict("7 (OOD hierarchy distance falls, ID distance stable)", ood_ok && id_ok);
}

#[test]
fn criterion_08_micro_roc_recovery() {
    let frac = bench().micro_recovery_fraction();
    println!("  micro-ROC recovery fraction {frac:.4}");
    verdict("8 (thresholding recovers micro-AUROC at >= 80% of nodes)", frac >= 0.8);
}

#[test]
fn criterion_09_memorization() {
    let h = generate_synthetic_hierarchy(&[2, 2]).unwrap();
    let ds = generate_synthetic_features(&h, 4, &[2.0, 1.0], 0.1, 2, 9).unwrap();
    let params = ModelParams::init(
        &h,
        &ModelConfig {
            input_dim: 4,
            trunk_layers: 1,
            hidden_dim: Some(16),
            with_flat_head: false,
            seed: 9,
        },
    );
    let mut tcfg = TrainConfig::desk_default(9);
    tcfg.epochs = 200;
    tcfg.batch_size = ds.len();
    tcfg.weight_decay = 0.0;
    tcfg.lr_milestones = vec![];
    let lcfg = LossConfig::new(&h, 1.0, 0.0);
    let (trained, _) =
        train_sgd(&params, &h, &ds, None, &tcfg, &lcfg, Objective::Hierarchical).unwrap();
    let mut worst: f64 = 0.0;
    for s in &ds.samples {
        let nd = forward(&trained, &h, &s.features).unwrap();
        worst = worst.max(soft_loss(&nd, s.label, &lcfg, &h).unwrap());
    }
    println!("  worst soft loss after 200 epochs: {worst:.6}");
    verdict("9 (single-batch memorization, soft loss < 0.01)", worst < 0.01);
}

#[test]
fn criterion_10_reproducibility() {
    let cfg = BenchConfig::default_with_seed(7);
    let second = run_bench(&cfg).expect("second benchmark run");
    let da = tempfile::tempdir().unwrap();
    let db = tempfile::tempdir().unwrap();
    write_report(bench(), da.path()).unwrap();
    write_report(&second, db.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(da.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let mut identical = !names.is_empty();
    let mut sizes: BTreeMap<String, u64> = BTreeMap::new();
    for name in &names {
        let left = std::fs::read(da.path().join(name)).unwrap();
        let right = std::fs::read(db.path().join(name)).unwrap();
        identical &= left == right;
        sizes.insert(name.to_string_lossy().into_owned(), left.len() as u64);
    }
    println!("  report files: {sizes:?}");
    verdict("10 (bench --seed 7 reports byte-identical)", identical);
}
