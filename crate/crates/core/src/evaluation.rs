//! AUROC by granularity, hierarchical accuracy and distance, confusion
//! matrices, error-mode decomposition, and TNR sweeps.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::data::Dataset;
use crate::hierarchy::{Granularity, Hierarchy, HierarchyError, NodeId};
use crate::inference::{calibrate, hierarchical_infer_nd, CalibrationError, ThresholdMode};
use crate::model::{forward, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("score list is empty")]
    EmptyScores,
    #[error("prediction and ground-truth lists have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

/// Which direction of a score means in-distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreDirection {
    HigherIsId,
    LowerIsId,
}

/// Probability that a random ID sample outranks a random OOD sample, ties
/// counting one half (the Mann-Whitney statistic). Computed from exact
/// integer pair counts so it matches a brute-force enumeration bit for bit.
pub fn auroc(
    id_scores: &[f64],
    ood_scores: &[f64],
    direction: ScoreDirection,
) -> Result<f64, EvalError> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(EvalError::EmptyScores);
    }
    let flip = |s: f64| match direction {
        ScoreDirection::HigherIsId => s,
        ScoreDirection::LowerIsId => -s,
    };
    let mut id: Vec<f64> = id_scores.iter().map(|&s| flip(s)).collect();
    let mut ood: Vec<f64> = ood_scores.iter().map(|&s| flip(s)).collect();
    id.sort_by(|a, b| a.partial_cmp(b).expect("scores must be comparable"));
    ood.sort_by(|a, b| a.partial_cmp(b).expect("scores must be comparable"));

    // Merge-count wins and ties: twice_wins = 2 * #(id > ood) + #(id == ood).
    let mut twice_wins: u64 = 0;
    let mut lo = 0usize; // ood strictly below current id score
    let mut hi = 0usize; // ood at-or-below current id score
    for &s in &id {
        while lo < ood.len() && ood[lo] < s {
            lo += 1;
        }
        while hi < ood.len() && ood[hi] <= s {
            hi += 1;
        }
        twice_wins += 2 * lo as u64 + (hi - lo) as u64;
    }
    Ok(twice_wins as f64 / (2.0 * id.len() as f64 * ood.len() as f64))
}

/// AUROC per granularity pool against a single ID pool; empty pools are
/// reported absent rather than zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GranularityAuroc {
    pub per_granularity: BTreeMap<Granularity, f64>,
    pub overall: Option<f64>,
}

pub fn granularity_report(
    id_scores: &[f64],
    ood_pools: &BTreeMap<Granularity, Vec<f64>>,
    direction: ScoreDirection,
) -> Result<GranularityAuroc, EvalError> {
    if id_scores.is_empty() {
        return Err(EvalError::EmptyScores);
    }
    let mut per_granularity = BTreeMap::new();
    let mut pooled: Vec<f64> = Vec::new();
    for (&g, scores) in ood_pools {
        if scores.is_empty() {
            continue;
        }
        per_granularity.insert(g, auroc(id_scores, scores, direction)?);
        pooled.extend_from_slice(scores);
    }
    let overall = if pooled.is_empty() {
        None
    } else {
        Some(auroc(id_scores, &pooled, direction)?)
    };
    Ok(GranularityAuroc {
        per_granularity,
        overall,
    })
}

/// Outcome of comparing a prediction node against a ground-truth node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ErrorMode {
    Correct,
    /// Prediction is a proper ancestor of the ground truth.
    UnderPrediction,
    /// Ground truth is a proper ancestor of the prediction.
    OverPrediction,
    /// Both legs to the common ancestor are nonzero.
    StandardError,
}

/// Accuracy, average hierarchy distance, distance confusion matrix, and
/// error-mode counts for a set of (prediction, ground truth) node pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcomes {
    pub count: usize,
    /// Exact node match.
    pub accuracy: f64,
    /// Fraction where the ground truth is an ancestor-or-equal of the
    /// prediction (reported alongside exact accuracy for transparency).
    pub lenient_accuracy: f64,
    pub avg_distance: f64,
    /// Indexed `[gt_dist_to_lca][pred_dist_to_lca]`.
    pub confusion: Vec<Vec<usize>>,
    pub modes: BTreeMap<ErrorMode, usize>,
}

pub fn hierarchical_outcomes(
    preds: &[NodeId],
    gts: &[NodeId],
    h: &Hierarchy,
) -> Result<Outcomes, EvalError> {
    if preds.len() != gts.len() {
        return Err(EvalError::LengthMismatch(preds.len(), gts.len()));
    }
    if preds.is_empty() {
        return Err(EvalError::EmptyScores);
    }
    let mut correct = 0usize;
    let mut lenient = 0usize;
    let mut dist_sum = 0usize;
    let mut cells: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut modes: BTreeMap<ErrorMode, usize> = BTreeMap::new();
    let mut max_pd = 0usize;
    let mut max_gd = 0usize;
    for (&p, &g) in preds.iter().zip(gts) {
        let (pd, gd) = h.distance_decomposition(p, g)?;
        dist_sum += pd + gd;
        if p == g {
            correct += 1;
        }
        if h.is_ancestor_or_equal(g, p) {
            lenient += 1;
        }
        let mode = match (pd, gd) {
            (0, 0) => ErrorMode::Correct,
            (0, _) => ErrorMode::UnderPrediction,
            (_, 0) => ErrorMode::OverPrediction,
            _ => ErrorMode::StandardError,
        };
        *modes.entry(mode).or_insert(0) += 1;
        *cells.entry((gd, pd)).or_insert(0) += 1;
        max_pd = max_pd.max(pd);
        max_gd = max_gd.max(gd);
    }
    let mut confusion = vec![vec![0usize; max_pd + 1]; max_gd + 1];
    for ((gd, pd), c) in cells {
        confusion[gd][pd] = c;
    }
    let n = preds.len() as f64;
    Ok(Outcomes {
        count: preds.len(),
        accuracy: correct as f64 / n,
        lenient_accuracy: lenient as f64 / n,
        avg_distance: dist_sum as f64 / n,
        confusion,
        modes,
    })
}

/// One grid point of a TNR sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub tnr: f64,
    pub mode: ThresholdMode,
    pub id_accuracy: f64,
    pub ood_accuracy: f64,
    pub avg_hdist_id: f64,
    pub avg_hdist_ood: f64,
}

/// An OOD pool ready for thresholded evaluation: feature vectors plus their
/// mapped ID-hierarchy ground-truth nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct OodPool {
    pub granularity: Granularity,
    pub features: Vec<Vec<f64>>,
    pub gt_nodes: Vec<NodeId>,
}

/// Recalibrates at every grid point (both modes) and evaluates thresholded
/// inference on the ID test pool and all OOD pools.
pub fn tnr_sweep(
    params: &ModelParams,
    h: &Hierarchy,
    id_val: &Dataset,
    id_test: &Dataset,
    ood_pools: &[OodPool],
    tnr_grid: &[f64],
) -> Result<Vec<SweepPoint>, EvalError> {
    // Distributions are threshold-independent; compute them once.
    let id_nds: Vec<_> = id_test
        .samples
        .iter()
        .map(|s| forward(params, h, &s.features))
        .collect::<Result<_, _>>()?;
    let mut ood_nds = Vec::new();
    let mut ood_gts: Vec<NodeId> = Vec::new();
    for pool in ood_pools {
        for (x, &gt) in pool.features.iter().zip(&pool.gt_nodes) {
            ood_nds.push(forward(params, h, x)?);
            ood_gts.push(gt);
        }
    }

    let mut out = Vec::new();
    for &tnr in tnr_grid {
        for mode in [ThresholdMode::NodeWise, ThresholdMode::PathWise] {
            let table = calibrate(params, h, id_val, tnr, mode)?;
            let id_preds: Vec<NodeId> = id_nds
                .iter()
                .map(|nd| hierarchical_infer_nd(nd, h, &table))
                .collect::<Result<_, _>>()?;
            let id_gts: Vec<NodeId> = id_test.samples.iter().map(|s| s.label).collect();
            let id_out = hierarchical_outcomes(&id_preds, &id_gts, h)?;
            let point = if ood_nds.is_empty() {
                SweepPoint {
                    tnr,
                    mode,
                    id_accuracy: id_out.accuracy,
                    ood_accuracy: f64::NAN,
                    avg_hdist_id: id_out.avg_distance,
                    avg_hdist_ood: f64::NAN,
                }
            } else {
                let ood_preds: Vec<NodeId> = ood_nds
                    .iter()
                    .map(|nd| hierarchical_infer_nd(nd, h, &table))
                    .collect::<Result<_, _>>()?;
                let ood_out = hierarchical_outcomes(&ood_preds, &ood_gts, h)?;
                SweepPoint {
                    tnr,
                    mode,
                    id_accuracy: id_out.accuracy,
                    ood_accuracy: ood_out.accuracy,
                    avg_hdist_id: id_out.avg_distance,
                    avg_hdist_ood: ood_out.avg_distance,
                }
            };
            out.push(point);
        }
    }
    Ok(out)
}

/// Sweep curves CSV: `tnr,mode,id_acc,ood_acc,id_hdist,ood_hdist`.
pub fn sweep_to_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("tnr,mode,id_acc,ood_acc,id_hdist,ood_hdist\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            p.tnr,
            p.mode.as_str(),
            p.id_accuracy,
            p.ood_accuracy,
            p.avg_hdist_id,
            p.avg_hdist_ood
        ));
    }
    out
}

/// Confusion matrix CSV grid with `gt\pred` header row and column.
pub fn confusion_to_csv(confusion: &[Vec<usize>]) -> String {
    let cols = confusion.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut out = String::from("gt_dist\\pred_dist");
    for c in 0..cols {
        out.push_str(&format!(",{c}"));
    }
    out.push('\n');
    for (g, row) in confusion.iter().enumerate() {
        out.push_str(&format!("{g}"));
        for c in 0..cols {
            out.push_str(&format!(",{}", row.get(c).copied().unwrap_or(0)));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// O(n^2) oracle with exact integer arithmetic.
    fn brute_force_auroc(id: &[f64], ood: &[f64]) -> f64 {
        let mut twice_wins: u64 = 0;
        for &a in id {
            for &b in ood {
                if a > b {
                    twice_wins += 2;
                } else if a == b {
                    twice_wins += 1;
                }
            }
        }
        twice_wins as f64 / (2.0 * id.len() as f64 * ood.len() as f64)
    }

    #[test]
    fn auroc_perfect_separation() {
        let a = auroc(&[0.9, 0.8], &[0.1, 0.2], ScoreDirection::HigherIsId).unwrap();
        assert_eq!(a, 1.0);
    }

    #[test]
    fn auroc_all_ties_is_half() {
        let a = auroc(&[0.5, 0.5], &[0.5, 0.5, 0.5], ScoreDirection::HigherIsId).unwrap();
        assert_eq!(a, 0.5);
    }

    #[test]
    fn auroc_pairwise_example() {
        let a = auroc(&[0.9, 0.3], &[0.5, 0.1], ScoreDirection::HigherIsId).unwrap();
        assert_eq!(a, 0.75);
    }

    #[test]
    fn auroc_direction_flip() {
        // Entropies: lower means ID.
        let a = auroc(&[0.1, 0.2], &[0.8, 0.9], ScoreDirection::LowerIsId).unwrap();
        assert_eq!(a, 1.0);
    }

    #[test]
    fn auroc_matches_brute_force_on_random_sets() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let n = rng.random_range(1..60);
            let m = rng.random_range(1..60);
            // Coarse grid so ties actually occur.
            let id: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64 / 10.0).collect();
            let ood: Vec<f64> = (0..m).map(|_| rng.random_range(0..10) as f64 / 10.0).collect();
            let fast = auroc(&id, &ood, ScoreDirection::HigherIsId).unwrap();
            assert_eq!(fast, brute_force_auroc(&id, &ood));
        }
    }

    #[test]
    fn auroc_complement_identity() {
        let id = vec![0.91, 0.42, 0.77];
        let ood = vec![0.5, 0.13];
        let a = auroc(&id, &ood, ScoreDirection::HigherIsId).unwrap();
        let b = auroc(&ood, &id, ScoreDirection::HigherIsId).unwrap();
        assert_eq!(a + b, 1.0);
    }

    #[test]
    fn granularity_report_absent_pool() {
        let mut pools = BTreeMap::new();
        pools.insert(Granularity::Fine, vec![0.1, 0.2]);
        pools.insert(Granularity::Medium, Vec::new());
        pools.insert(Granularity::Coarse, vec![0.05]);
        let rep = granularity_report(&[0.8, 0.9], &pools, ScoreDirection::HigherIsId).unwrap();
        assert!(rep.per_granularity.contains_key(&Granularity::Fine));
        assert!(!rep.per_granularity.contains_key(&Granularity::Medium));
        assert_eq!(rep.per_granularity[&Granularity::Coarse], 1.0);
        assert!(rep.overall.is_some());
    }

    #[test]
    fn granularity_report_identical_distributions() {
        let mut pools = BTreeMap::new();
        pools.insert(Granularity::Fine, vec![0.5, 0.5]);
        pools.insert(Granularity::Coarse, vec![0.5, 0.5]);
        let rep = granularity_report(&[0.5, 0.5], &pools, ScoreDirection::HigherIsId).unwrap();
        assert_eq!(rep.per_granularity[&Granularity::Fine], 0.5);
        assert_eq!(rep.per_granularity[&Granularity::Coarse], 0.5);
        assert_eq!(rep.overall, Some(0.5));
    }

    #[test]
    fn overall_lies_between_pools_for_equal_sizes() {
        let id = vec![0.9, 0.8, 0.7, 0.6];
        let fine = vec![0.85, 0.75];
        let coarse = vec![0.1, 0.2];
        let mut pools = BTreeMap::new();
        pools.insert(Granularity::Fine, fine.clone());
        pools.insert(Granularity::Coarse, coarse.clone());
        let rep = granularity_report(&id, &pools, ScoreDirection::HigherIsId).unwrap();
        let f = rep.per_granularity[&Granularity::Fine];
        let c = rep.per_granularity[&Granularity::Coarse];
        let o = rep.overall.unwrap();
        // Equal-size pools: pooled pairwise count averages the two.
        assert_eq!(o, (f + c) / 2.0);
        assert!(o >= f.min(c) && o <= f.max(c));
    }

    fn tree() -> Hierarchy {
        Hierarchy::parse("r\t-\nbird\tr\nfish\tr\nrobin\tbird\nwren\tbird\ncod\tfish\neel\tfish")
            .unwrap()
    }

    #[test]
    fn outcomes_all_correct() {
        let h = tree();
        let robin = h.id_of("robin").unwrap();
        let o = hierarchical_outcomes(&[robin, robin], &[robin, robin], &h).unwrap();
        assert_eq!(o.accuracy, 1.0);
        assert_eq!(o.avg_distance, 0.0);
        assert_eq!(o.confusion[0][0], 2);
        assert_eq!(o.modes[&ErrorMode::Correct], 2);
    }

    #[test]
    fn outcomes_under_prediction() {
        let h = tree();
        let bird = h.id_of("bird").unwrap();
        let robin = h.id_of("robin").unwrap();
        let o = hierarchical_outcomes(&[bird], &[robin], &h).unwrap();
        assert_eq!(o.accuracy, 0.0);
        assert_eq!(o.avg_distance, 1.0);
        assert_eq!(o.modes[&ErrorMode::UnderPrediction], 1);
    }

    #[test]
    fn outcomes_ood_over_prediction() {
        // OOD junco mapped to bird; model predicts sibling leaf wren.
        let h = tree();
        let bird = h.id_of("bird").unwrap();
        let wren = h.id_of("wren").unwrap();
        let o = hierarchical_outcomes(&[wren], &[bird], &h).unwrap();
        assert_eq!(o.modes[&ErrorMode::OverPrediction], 1);
        assert_eq!(o.confusion[0][1], 1); // decomposition (pred=1, gt=0)
        assert_eq!(o.lenient_accuracy, 1.0);
        assert_eq!(o.accuracy, 0.0);
    }

    #[test]
    fn outcomes_counts_are_consistent() {
        let h = tree();
        let ids: Vec<NodeId> = vec![
            h.id_of("robin").unwrap(),
            h.id_of("wren").unwrap(),
            h.id_of("bird").unwrap(),
            h.id_of("cod").unwrap(),
        ];
        let gts: Vec<NodeId> = vec![
            h.id_of("robin").unwrap(),
            h.id_of("robin").unwrap(),
            h.id_of("robin").unwrap(),
            h.id_of("eel").unwrap(),
        ];
        let o = hierarchical_outcomes(&ids, &gts, &h).unwrap();
        let mode_total: usize = o.modes.values().sum();
        assert_eq!(mode_total, 4);
        let cell_total: usize = o.confusion.iter().flatten().sum();
        assert_eq!(cell_total, 4);
        assert_eq!(o.confusion[0][0], o.modes.get(&ErrorMode::Correct).copied().unwrap_or(0));
    }

    #[test]
    fn on_path_prediction_never_over_predicts() {
        let h = tree();
        let robin = h.id_of("robin").unwrap();
        for pred in h.path_from_root(robin).unwrap() {
            let o = hierarchical_outcomes(&[pred], &[robin], &h).unwrap();
            assert!(!o.modes.contains_key(&ErrorMode::OverPrediction));
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        let h = tree();
        assert!(matches!(
            hierarchical_outcomes(&[0], &[0, 1], &h),
            Err(EvalError::LengthMismatch(1, 2))
        ));
    }
}
