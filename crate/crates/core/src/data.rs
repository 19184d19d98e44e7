//! Synthetic hierarchical Gaussian data generation, dataset file IO, and
//! granularity-tagged OOD holdout selection.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::hierarchy::{Granularity, Hierarchy, HierarchyError, NodeId};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("branching factor {0} is below 2")]
    BranchingTooSmall(usize),
    #[error("branching list is empty")]
    NoLevels,
    #[error("feature dimension must be >= 1")]
    BadDim,
    #[error("scales and noise must be positive ({0})")]
    BadScale(f64),
    #[error("per-leaf sample count must be >= 1")]
    BadPerLeaf,
    #[error("line {line}: expected {expected} features, found {found}")]
    DimMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: unknown leaf name {name:?}")]
    UnknownLeaf { line: usize, name: String },
    #[error("line {line}: label {name:?} is not a leaf")]
    NotALeaf { line: usize, name: String },
    #[error("line {line}: malformed number {text:?}")]
    BadNumber { line: usize, text: String },
    #[error("line {line}: malformed line {text:?}")]
    Malformed { line: usize, text: String },
    #[error("missing or malformed dim header (expected \"dim=<d>\")")]
    MissingDim,
    #[error("holdout selection leaves fewer than 2 in-distribution leaves")]
    SelectionEmptiesTree,
    #[error("split band has probability {0} outside [0,1]")]
    BadProbability(f64),
    #[error("split bands overlap at depth {0}")]
    OverlappingBands(usize),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

/// A labelled feature vector; the label is a leaf of the associated hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: NodeId,
}

/// Feature matrix with leaf labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(dim: usize) -> Dataset {
        Dataset {
            dim,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Per-sample partition of a dataset into train/validation/test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A dataset partitioned by split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// One depth band of the holdout selection scheme: every node whose depth
/// falls in `[depth_min, depth_max]` is held out independently with
/// probability `prob`.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub granularity: Granularity,
    pub depth_min: usize,
    pub depth_max: usize,
    pub prob: f64,
}

/// Seeded holdout-subtree selection parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub bands: Vec<Band>,
    pub seed: u64,
}

impl SplitSpec {
    fn validate(&self) -> Result<(), DataError> {
        for b in &self.bands {
            if !(0.0..=1.0).contains(&b.prob) {
                return Err(DataError::BadProbability(b.prob));
            }
        }
        for (i, a) in self.bands.iter().enumerate() {
            for b in &self.bands[i + 1..] {
                let lo = a.depth_min.max(b.depth_min);
                let hi = a.depth_max.min(b.depth_max);
                if lo <= hi {
                    return Err(DataError::OverlappingBands(lo));
                }
            }
        }
        Ok(())
    }
}

/// Complete tree with the given per-level branching factors and deterministic
/// names `n<level>_<index>` (the root is `root`).
pub fn generate_synthetic_hierarchy(branching: &[usize]) -> Result<Hierarchy, DataError> {
    if branching.is_empty() {
        return Err(DataError::NoLevels);
    }
    for &b in branching {
        if b < 2 {
            return Err(DataError::BranchingTooSmall(b));
        }
    }
    let mut edges: Vec<(String, String)> = vec![("root".to_string(), "-".to_string())];
    let mut prev_level: Vec<String> = vec!["root".to_string()];
    for (level, &b) in branching.iter().enumerate() {
        let mut next = Vec::with_capacity(prev_level.len() * b);
        let mut idx = 0usize;
        for parent in &prev_level {
            for _ in 0..b {
                let name = format!("n{}_{}", level + 1, idx);
                edges.push((name.clone(), parent.clone()));
                next.push(name);
                idx += 1;
            }
        }
        prev_level = next;
    }
    Ok(Hierarchy::from_edges(&edges)?)
}

/// Hierarchical Gaussian diffusion features: each child mean is its parent
/// mean plus an isotropic draw scaled by the child level's scale, and each
/// sample is its leaf mean plus isotropic noise. Pure function of
/// `(hierarchy, params, seed)`.
pub fn generate_synthetic_features(
    h: &Hierarchy,
    dim: usize,
    level_scales: &[f64],
    noise_scale: f64,
    per_leaf: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    if dim == 0 {
        return Err(DataError::BadDim);
    }
    for &s in level_scales {
        if !(s > 0.0) {
            return Err(DataError::BadScale(s));
        }
    }
    if noise_scale < 0.0 || !noise_scale.is_finite() {
        return Err(DataError::BadScale(noise_scale));
    }
    if per_leaf == 0 {
        return Err(DataError::BadPerLeaf);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;

    // Node means in id order so the draw sequence is fixed.
    let mut means: Vec<Vec<f64>> = vec![Vec::new(); h.len()];
    means[h.root()] = vec![0.0; dim];
    for n in 1..h.len() {
        let p = h.parent(n).unwrap();
        let level = h.depth(n) - 1;
        let scale = *level_scales
            .get(level)
            .or_else(|| level_scales.last())
            .expect("level_scales checked nonempty by caller contract");
        let parent_mean = means[p].clone();
        means[n] = parent_mean
            .iter()
            .map(|&m| {
                let z: f64 = normal.sample(&mut rng);
                m + scale * z
            })
            .collect();
    }

    let mut ds = Dataset::new(dim);
    for leaf in h.leaves() {
        for _ in 0..per_leaf {
            let features = means[leaf]
                .iter()
                .map(|&m| {
                    let z: f64 = normal.sample(&mut rng);
                    m + noise_scale * z
                })
                .collect();
            ds.samples.push(Sample {
                features,
                label: leaf,
            });
        }
    }
    Ok(ds)
}

/// Deterministically partitions a dataset per leaf into train/val/test by the
/// given fractions (train gets the remainder).
pub fn partition(ds: &Dataset, val_frac: f64, test_frac: f64) -> DatasetSplits {
    let mut splits = DatasetSplits {
        train: Dataset::new(ds.dim),
        val: Dataset::new(ds.dim),
        test: Dataset::new(ds.dim),
    };
    // Per-leaf counters so every leaf appears in every split when it has
    // enough samples.
    let mut seen: std::collections::HashMap<NodeId, usize> = std::collections::HashMap::new();
    let mut totals: std::collections::HashMap<NodeId, usize> = std::collections::HashMap::new();
    for s in &ds.samples {
        *totals.entry(s.label).or_insert(0) += 1;
    }
    for s in &ds.samples {
        let total = totals[&s.label] as f64;
        let i = seen.entry(s.label).or_insert(0);
        let pos = *i as f64;
        *i += 1;
        let target = if pos < (1.0 - val_frac - test_frac) * total {
            &mut splits.train
        } else if pos < (1.0 - test_frac) * total {
            &mut splits.val
        } else {
            &mut splits.test
        };
        target.samples.push(s.clone());
    }
    splits
}

/// Per-band independent Bernoulli holdout selection with nesting resolved in
/// favor of the shallower node. Returns `(node name, granularity)` pairs.
pub fn select_holdout_subtrees(
    h: &Hierarchy,
    spec: &SplitSpec,
) -> Result<Vec<(String, Granularity)>, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut selected: Vec<NodeId> = Vec::new();
    let mut granularity: Vec<Granularity> = Vec::new();
    // Visit nodes in id order per band so draws are reproducible.
    for band in &spec.bands {
        for n in 1..h.len() {
            let d = h.depth(n);
            if d < band.depth_min || d > band.depth_max {
                continue;
            }
            let u: f64 = rng.random();
            if u < band.prob {
                selected.push(n);
                granularity.push(band.granularity);
            }
        }
    }
    // Drop any selection nested under a shallower selection.
    let mut keep: Vec<(NodeId, Granularity)> = Vec::new();
    'outer: for (i, &n) in selected.iter().enumerate() {
        for (j, &m) in selected.iter().enumerate() {
            if i != j && m != n && h.is_ancestor_or_equal(m, n) {
                continue 'outer;
            }
        }
        keep.push((n, granularity[i]));
    }
    keep.sort_unstable_by_key(|&(n, _)| n);
    keep.dedup_by_key(|&mut (n, _)| n);

    let held: std::collections::HashSet<NodeId> = keep
        .iter()
        .flat_map(|&(n, _)| h.subtree_leaves(n))
        .collect();
    let surviving = h.num_leaves() - held.len();
    if surviving < 2 {
        return Err(DataError::SelectionEmptiesTree);
    }

    Ok(keep
        .into_iter()
        .map(|(n, g)| (h.name(n).to_string(), g))
        .collect())
}

/// Serializes a dataset: `dim=<d>` header, then one
/// `leaf_name<TAB>v1,v2,...,vd` line per sample with shortest round-trip
/// float formatting.
pub fn write_dataset(ds: &Dataset, h: &Hierarchy) -> String {
    let mut out = format!("dim={}\n", ds.dim);
    for s in &ds.samples {
        out.push_str(h.name(s.label));
        out.push('\t');
        for (i, v) in s.features.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    out
}

/// Parses the dataset file format; labels must be leaves of `h`.
pub fn read_dataset(text: &str, h: &Hierarchy) -> Result<Dataset, DataError> {
    let mut lines = text.lines().enumerate();
    let dim = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() || l.starts_with('#') => continue,
            Some((_, l)) => {
                let l = l.trim();
                match l.strip_prefix("dim=") {
                    Some(d) => break d.parse::<usize>().map_err(|_| DataError::MissingDim)?,
                    None => return Err(DataError::MissingDim),
                }
            }
            None => return Err(DataError::MissingDim),
        }
    };
    let mut ds = Dataset::new(dim);
    for (lineno, raw) in lines {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, values) = line.split_once('\t').ok_or_else(|| DataError::Malformed {
            line: lineno + 1,
            text: line.to_string(),
        })?;
        let label = h.id_of(name).ok_or_else(|| DataError::UnknownLeaf {
            line: lineno + 1,
            name: name.to_string(),
        })?;
        if !h.is_leaf(label) {
            return Err(DataError::NotALeaf {
                line: lineno + 1,
                name: name.to_string(),
            });
        }
        let mut features = Vec::with_capacity(dim);
        for tok in values.split(',') {
            let v: f64 = tok.trim().parse().map_err(|_| DataError::BadNumber {
                line: lineno + 1,
                text: tok.to_string(),
            })?;
            features.push(v);
        }
        if features.len() != dim {
            return Err(DataError::DimMismatch {
                line: lineno + 1,
                expected: dim,
                found: features.len(),
            });
        }
        ds.samples.push(Sample { features, label });
    }
    Ok(ds)
}
