//! Rooted label hierarchy: topology queries, distance metrics, pruning and
//! ID/OOD holdout-split construction.

use std::collections::{BTreeMap, HashMap, HashSet};

use thiserror::Error;

/// Node identifier. Ids are topologically ordered: `parent(n) < n` and the
/// root is always `0`.
pub type NodeId = usize;

/// OOD granularity of a held-out subtree, named after the depth band its root
/// falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum Granularity {
    Fine,
    Medium,
    Coarse,
}

impl Granularity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Granularity::Fine => "fine",
            Granularity::Medium => "medium",
            Granularity::Coarse => "coarse",
        }
    }

    pub fn parse(s: &str) -> Option<Granularity> {
        match s {
            "fine" => Some(Granularity::Fine),
            "medium" => Some(Granularity::Medium),
            "coarse" => Some(Granularity::Coarse),
            _ => None,
        }
    }
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("hierarchy file is empty")]
    Empty,
    #[error("line {line}: duplicate node name {name:?}")]
    DuplicateName { line: usize, name: String },
    #[error("line {line}: unknown parent {parent:?} for node {name:?}")]
    UnknownParent {
        line: usize,
        name: String,
        parent: String,
    },
    #[error("line {line}: multiple roots ({first:?} and {second:?})")]
    MultipleRoots {
        line: usize,
        first: String,
        second: String,
    },
    #[error("line {line}: malformed line {text:?} (expected name<TAB>parent)")]
    Malformed { line: usize, text: String },
    #[error("line {line}: invalid node name {name:?} (empty or contains tab/newline)")]
    InvalidName { line: usize, name: String },
    #[error("first node line must be the root (parent \"-\")")]
    MissingRoot,
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("unknown node name {0:?}")]
    UnknownName(String),
    #[error("entropy_prune target {target} out of range (current internal count {current})")]
    BadPruneTarget { target: usize, current: usize },
    #[error("holdout root {0:?} is nested inside another holdout subtree")]
    NestedHoldout(String),
    #[error("holdout removal leaves fewer than 2 leaves")]
    HoldoutEmptiesTree,
    #[error("leaf {0:?} has no positive sample count in its subtree")]
    ZeroMassSubtree(String),
}

/// Immutable rooted tree over named nodes.
///
/// Node `0` is the root; ids are assigned in topological order so that every
/// node's parent has a smaller id. Names are the stable identifiers across
/// pruning transformations (ids are reassigned).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hierarchy {
    names: Vec<String>,
    parent: Vec<Option<NodeId>>,
    children: Vec<Vec<NodeId>>,
    depth: Vec<usize>,
    by_name: HashMap<String, NodeId>,
}

/// Maps each removed leaf class to its ground-truth node in the surviving ID
/// hierarchy, plus the granularity band of the holdout subtree it belonged to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OodGroundTruthMap {
    /// removed leaf name -> node id in the ID hierarchy
    pub mapping: BTreeMap<String, NodeId>,
    /// removed leaf name -> granularity of its holdout subtree root
    pub granularity: BTreeMap<String, Granularity>,
}

/// A holdout subtree root selected for OOD split construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HoldoutRoot {
    pub name: String,
    pub granularity: Granularity,
}

impl Hierarchy {
    /// Builds a hierarchy from `(name, parent_name)` pairs in topological
    /// order; the root uses parent `"-"`.
    pub fn from_edges<S: AsRef<str>>(edges: &[(S, S)]) -> Result<Hierarchy, HierarchyError> {
        if edges.is_empty() {
            return Err(HierarchyError::Empty);
        }
        let mut names: Vec<String> = Vec::with_capacity(edges.len());
        let mut parent: Vec<Option<NodeId>> = Vec::with_capacity(edges.len());
        let mut children: Vec<Vec<NodeId>> = Vec::with_capacity(edges.len());
        let mut depth = Vec::with_capacity(edges.len());
        let mut by_name: HashMap<String, NodeId> = HashMap::new();

        for (line, (name, par)) in edges.iter().enumerate() {
            let name = name.as_ref();
            let par = par.as_ref();
            if name.is_empty() || name.contains('\t') || name.contains('\n') {
                return Err(HierarchyError::InvalidName {
                    line: line + 1,
                    name: name.to_string(),
                });
            }
            if by_name.contains_key(name) {
                return Err(HierarchyError::DuplicateName {
                    line: line + 1,
                    name: name.to_string(),
                });
            }
            let id = names.len();
            if par == "-" {
                if id != 0 {
                    return Err(HierarchyError::MultipleRoots {
                        line: line + 1,
                        first: names[0].clone(),
                        second: name.to_string(),
                    });
                }
                parent.push(None);
                depth.push(0);
            } else {
                if id == 0 {
                    return Err(HierarchyError::MissingRoot);
                }
                let pid = *by_name.get(par).ok_or_else(|| HierarchyError::UnknownParent {
                    line: line + 1,
                    name: name.to_string(),
                    parent: par.to_string(),
                })?;
                parent.push(Some(pid));
                depth.push(depth[pid] + 1);
                children[pid].push(id);
            }
            children.push(Vec::new());
            by_name.insert(name.to_string(), id);
            names.push(name.to_string());
        }

        Ok(Hierarchy {
            names,
            parent,
            children,
            depth,
            by_name,
        })
    }

    /// Parses the hierarchy file format: one `name<TAB>parent` line per node,
    /// root parent `"-"`, `#` comment lines ignored.
    pub fn parse(text: &str) -> Result<Hierarchy, HierarchyError> {
        let mut edges: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(2, '\t');
            let name = parts.next().unwrap_or("");
            let par = match parts.next() {
                Some(p) if !p.is_empty() => p,
                _ => {
                    // Also accept space separation for hand-written fixtures.
                    let mut sp = line.split_whitespace();
                    match (sp.next(), sp.next(), sp.next()) {
                        (Some(_), Some(_), None) => {
                            let mut sp = line.split_whitespace();
                            let n = sp.next().unwrap().to_string();
                            let p = sp.next().unwrap().to_string();
                            edges.push((n, p));
                            continue;
                        }
                        _ => {
                            return Err(HierarchyError::Malformed {
                                line: lineno + 1,
                                text: line.to_string(),
                            })
                        }
                    }
                }
            };
            edges.push((name.to_string(), par.to_string()));
        }
        Hierarchy::from_edges(&edges)
    }

    /// Serializes to the hierarchy file format in id order; `parse` of the
    /// output reconstructs an identical hierarchy.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for id in 0..self.len() {
            out.push_str(&self.names[id]);
            out.push('\t');
            match self.parent[id] {
                None => out.push('-'),
                Some(p) => out.push_str(&self.names[p]),
            }
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn name(&self, n: NodeId) -> &str {
        &self.names[n]
    }

    pub fn id_of(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<NodeId, HierarchyError> {
        self.id_of(name)
            .ok_or_else(|| HierarchyError::UnknownName(name.to_string()))
    }

    pub fn parent(&self, n: NodeId) -> Option<NodeId> {
        self.parent.get(n).copied().flatten()
    }

    pub fn children(&self, n: NodeId) -> &[NodeId] {
        &self.children[n]
    }

    pub fn depth(&self, n: NodeId) -> usize {
        self.depth[n]
    }

    pub fn is_leaf(&self, n: NodeId) -> bool {
        self.children[n].is_empty()
    }

    pub fn is_internal(&self, n: NodeId) -> bool {
        !self.is_leaf(n)
    }

    /// Leaf node ids in ascending order.
    pub fn leaves(&self) -> Vec<NodeId> {
        (0..self.len()).filter(|&n| self.is_leaf(n)).collect()
    }

    /// Internal node ids in ascending order.
    pub fn internals(&self) -> Vec<NodeId> {
        (0..self.len()).filter(|&n| self.is_internal(n)).collect()
    }

    pub fn num_leaves(&self) -> usize {
        (0..self.len()).filter(|&n| self.is_leaf(n)).count()
    }

    pub fn num_internals(&self) -> usize {
        self.len() - self.num_leaves()
    }

    pub fn max_depth(&self) -> usize {
        self.depth.iter().copied().max().unwrap_or(0)
    }

    fn check(&self, n: NodeId) -> Result<(), HierarchyError> {
        if n < self.len() {
            Ok(())
        } else {
            Err(HierarchyError::UnknownNode(n))
        }
    }

    /// Strict ancestors of `n`, root first. Empty for the root.
    pub fn ancestors(&self, n: NodeId) -> Result<Vec<NodeId>, HierarchyError> {
        self.check(n)?;
        let mut anc = Vec::with_capacity(self.depth[n]);
        let mut cur = n;
        while let Some(p) = self.parent[cur] {
            anc.push(p);
            cur = p;
        }
        anc.reverse();
        Ok(anc)
    }

    /// Root-to-`n` path, inclusive of `n`.
    pub fn path_from_root(&self, n: NodeId) -> Result<Vec<NodeId>, HierarchyError> {
        let mut p = self.ancestors(n)?;
        p.push(n);
        Ok(p)
    }

    /// Deepest node that is an ancestor-or-equal of both `a` and `b`.
    pub fn lca(&self, a: NodeId, b: NodeId) -> Result<NodeId, HierarchyError> {
        self.check(a)?;
        self.check(b)?;
        let (mut a, mut b) = (a, b);
        while self.depth[a] > self.depth[b] {
            a = self.parent[a].unwrap();
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b].unwrap();
        }
        while a != b {
            a = self.parent[a].unwrap();
            b = self.parent[b].unwrap();
        }
        Ok(a)
    }

    /// Number of tree edges between `a` and `b`.
    pub fn distance(&self, a: NodeId, b: NodeId) -> Result<usize, HierarchyError> {
        let l = self.lca(a, b)?;
        Ok(self.depth[a] + self.depth[b] - 2 * self.depth[l])
    }

    /// Splits the prediction/ground-truth distance into the two legs to their
    /// lowest common ancestor: `(pred_dist, gt_dist)`.
    pub fn distance_decomposition(
        &self,
        pred: NodeId,
        gt: NodeId,
    ) -> Result<(usize, usize), HierarchyError> {
        let l = self.lca(pred, gt)?;
        Ok((self.depth[pred] - self.depth[l], self.depth[gt] - self.depth[l]))
    }

    /// True if `anc` is an ancestor of `n` or equal to it.
    pub fn is_ancestor_or_equal(&self, anc: NodeId, n: NodeId) -> bool {
        if anc >= self.len() || n >= self.len() {
            return false;
        }
        let mut cur = n;
        loop {
            if cur == anc {
                return true;
            }
            match self.parent[cur] {
                Some(p) => cur = p,
                None => return false,
            }
        }
    }

    /// Leaf ids in the subtree rooted at `n` (just `n` if it is a leaf).
    pub fn subtree_leaves(&self, n: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![n];
        while let Some(cur) = stack.pop() {
            if self.is_leaf(cur) {
                out.push(cur);
            } else {
                for &c in self.children[cur].iter().rev() {
                    stack.push(c);
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Number of leaves below each node (a leaf counts itself).
    pub fn leaf_counts_below(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.len()];
        for n in (0..self.len()).rev() {
            if self.is_leaf(n) {
                counts[n] = 1;
            }
            if let Some(p) = self.parent[n] {
                let c = counts[n];
                counts[p] += c;
            }
        }
        counts
    }

    /// Rebuilds a hierarchy keeping only `keep` nodes, re-parenting each kept
    /// node onto its nearest kept ancestor. The kept set must contain a node
    /// on every kept node's ancestor chain or that node becomes the new root.
    fn rebuild_keeping(&self, keep: &HashSet<NodeId>) -> Hierarchy {
        // New root: shallowest kept node on the old root's chain downward.
        // Kept nodes are visited in id (topological) order.
        let mut edges: Vec<(String, String)> = Vec::new();
        let mut new_root: Option<NodeId> = None;
        for n in 0..self.len() {
            if !keep.contains(&n) {
                continue;
            }
            let mut anc = self.parent[n];
            while let Some(a) = anc {
                if keep.contains(&a) {
                    break;
                }
                anc = self.parent[a];
            }
            match anc {
                Some(a) => edges.push((self.names[n].clone(), self.names[a].clone())),
                None => {
                    debug_assert!(new_root.is_none(), "keep set must have a unique top node");
                    new_root = Some(n);
                    edges.push((self.names[n].clone(), "-".to_string()));
                }
            }
        }
        Hierarchy::from_edges(&edges).expect("rebuild from a valid keep set cannot fail")
    }

    /// Removes every node with exactly one child, splicing the child onto the
    /// grandparent. A single-child root is removed and its child becomes the
    /// root. Idempotent; preserves the leaf name set.
    pub fn prune_single_child(&self) -> Hierarchy {
        // Splicing never changes any other node's child count, so one pass
        // over the original tree suffices.
        let mut keep: HashSet<NodeId> = (0..self.len())
            .filter(|&n| self.children[n].len() != 1)
            .collect();
        // The root collapses onto its surviving child only when that child
        // is internal; above a lone leaf the root stays so the tree keeps a
        // branching point to classify from.
        let root = self.root();
        if self.children[root].len() == 1 {
            let mut c = self.children[root][0];
            while self.children[c].len() == 1 {
                c = self.children[c][0];
            }
            if self.is_leaf(c) {
                keep.insert(root);
            }
        }
        self.rebuild_keeping(&keep)
    }

    /// Shannon entropy (nats) of the children mass distribution of internal
    /// node `n`, where a child's mass is the summed leaf counts in its
    /// subtree.
    fn children_mass_entropy(&self, n: NodeId, subtree_mass: &[f64]) -> f64 {
        let total: f64 = self.children[n].iter().map(|&c| subtree_mass[c]).sum();
        if total <= 0.0 {
            return 0.0;
        }
        let mut h = 0.0;
        for &c in &self.children[n] {
            let p = subtree_mass[c] / total;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        h
    }

    /// Iteratively merges the children of the minimum-entropy internal
    /// non-root node onto its parent until exactly `target_internal` internal
    /// nodes remain. Ties break toward the lowest node id. `leaf_counts` maps
    /// leaf names to training sample counts.
    pub fn entropy_prune(
        &self,
        leaf_counts: &BTreeMap<String, u64>,
        target_internal: usize,
    ) -> Result<Hierarchy, HierarchyError> {
        let current = self.num_internals();
        if target_internal < 1 || target_internal > current {
            return Err(HierarchyError::BadPruneTarget {
                target: target_internal,
                current,
            });
        }
        let mut h = self.clone();
        while h.num_internals() > target_internal {
            // Subtree mass per node from the name-keyed leaf counts.
            let mut mass = vec![0.0f64; h.len()];
            for n in (0..h.len()).rev() {
                if h.is_leaf(n) {
                    mass[n] = *leaf_counts.get(h.name(n)).unwrap_or(&0) as f64;
                }
                if let Some(p) = h.parent(n) {
                    let m = mass[n];
                    mass[p] += m;
                }
            }
            let mut best: Option<(f64, NodeId)> = None;
            for n in 1..h.len() {
                if h.is_leaf(n) {
                    continue;
                }
                let e = h.children_mass_entropy(n, &mass);
                let better = match best {
                    None => true,
                    Some((be, _)) => e < be,
                };
                if better {
                    best = Some((e, n));
                }
            }
            let (_, victim) = best.expect("num_internals > 1 implies a non-root internal node");
            let keep: HashSet<NodeId> = (0..h.len()).filter(|&n| n != victim).collect();
            h = h.rebuild_keeping(&keep);
        }
        Ok(h)
    }

    /// Removes each holdout subtree, prunes single-child nodes, and maps every
    /// removed leaf to its nearest surviving ancestor in the ID hierarchy.
    pub fn holdout_split(
        &self,
        holdout_roots: &[HoldoutRoot],
    ) -> Result<(Hierarchy, OodGroundTruthMap), HierarchyError> {
        let mut root_ids = Vec::with_capacity(holdout_roots.len());
        for r in holdout_roots {
            root_ids.push(self.require(&r.name)?);
        }
        for (i, &a) in root_ids.iter().enumerate() {
            for &b in &root_ids[i + 1..] {
                if self.is_ancestor_or_equal(a, b) || self.is_ancestor_or_equal(b, a) {
                    let deeper = if self.depth(a) >= self.depth(b) { a } else { b };
                    return Err(HierarchyError::NestedHoldout(self.name(deeper).to_string()));
                }
            }
        }

        let mut removed = HashSet::new();
        for &r in &root_ids {
            let mut stack = vec![r];
            while let Some(n) = stack.pop() {
                removed.insert(n);
                stack.extend_from_slice(self.children(n));
            }
        }
        let keep: HashSet<NodeId> = (0..self.len()).filter(|n| !removed.contains(n)).collect();
        let survivors: usize = keep.iter().filter(|&&n| self.is_leaf(n)).count();
        if survivors < 2 {
            return Err(HierarchyError::HoldoutEmptiesTree);
        }

        let id_hierarchy = self.rebuild_keeping(&keep).prune_single_child();

        let mut mapping = BTreeMap::new();
        let mut granularity = BTreeMap::new();
        for (r, spec) in root_ids.iter().zip(holdout_roots) {
            // Nearest original ancestor of the subtree root that survived
            // both the removal and the single-child prune.
            let mut anc = self.parent(*r);
            let target = loop {
                match anc {
                    Some(a) => {
                        if let Some(id) = id_hierarchy.id_of(self.name(a)) {
                            break id;
                        }
                        anc = self.parent(a);
                    }
                    // Root collapse removed every original ancestor; the new
                    // root is the nearest surviving node by construction.
                    None => break id_hierarchy.root(),
                }
            };
            for leaf in self.subtree_leaves(*r) {
                mapping.insert(self.name(leaf).to_string(), target);
                granularity.insert(self.name(leaf).to_string(), spec.granularity);
            }
        }

        Ok((id_hierarchy, OodGroundTruthMap { mapping, granularity }))
    }
}
