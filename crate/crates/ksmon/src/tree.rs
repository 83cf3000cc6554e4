//! CART regression trees: greedy binary splits minimizing the summed squared
//! error of the children, constant (mean) prediction within each leaf.
//!
//! Split search considers, for each candidate feature, the midpoints between
//! consecutive distinct sorted values. A point is routed left when its
//! feature value is strictly below the threshold; values equal to the
//! threshold go right. Among equally good splits the lowest feature index
//! wins, then the lowest threshold.
//!
//! Growth stops at a node when any of these hold:
//! * fewer than `min_split_size` rows reach it,
//! * it sits at `max_depth`,
//! * its response values are all identical,
//! * its SSE is below `min_deviance_fraction` times the root SSE,
//! * or no candidate split leaves both children with `min_leaf_size` rows.
//!
//! The fit presorts row indices once per feature and keeps the per-feature
//! orderings aligned through each partition, so split scanning is a single
//! linear pass per feature per node. Nodes are stored in a flat array with
//! paired child slots (`right == left + 1`) and self-looping leaves, which
//! lets batch prediction walk four points at a time without branching on
//! node type.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ObservationBatch;
use crate::error::{Error, Result};

/// Which regressor family a fit should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressorKind {
    Tree,
    Forest,
}

impl std::fmt::Display for RegressorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RegressorKind::Tree => write!(f, "tree"),
            RegressorKind::Forest => write!(f, "forest"),
        }
    }
}

/// Hyperparameters for fitting a single tree or a forest.
///
/// `forest_*` fields are ignored when fitting a single tree. `forest_mtry`
/// of `None` means "decide from the data": `max(floor(p / 3), 1)` features
/// are sampled at each split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub regressor_kind: RegressorKind,
    /// Nodes with fewer rows than this become leaves.
    pub min_split_size: usize,
    /// Both children of any split must keep at least this many rows.
    pub min_leaf_size: usize,
    /// Nodes whose SSE is below this fraction of the root SSE become leaves.
    pub min_deviance_fraction: f64,
    /// Nodes at this depth become leaves (the root is at depth 0).
    pub max_depth: usize,
    /// Number of bootstrap trees in a forest.
    pub forest_num_trees: usize,
    /// Features sampled per split when fitting forest trees.
    pub forest_mtry: Option<usize>,
    /// Resample rows with replacement per forest tree.
    pub forest_bootstrap: bool,
    /// Root seed for all randomness in the fit.
    pub rng_seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            regressor_kind: RegressorKind::Tree,
            min_split_size: 10,
            min_leaf_size: 5,
            min_deviance_fraction: 0.01,
            max_depth: 31,
            forest_num_trees: 500,
            forest_mtry: None,
            forest_bootstrap: true,
            rng_seed: 0,
        }
    }
}

impl FitConfig {
    /// Defaults for a single-tree fit.
    pub fn tree() -> Self {
        FitConfig::default()
    }

    /// Defaults for a forest fit.
    pub fn forest() -> Self {
        FitConfig { regressor_kind: RegressorKind::Forest, ..FitConfig::default() }
    }

    /// The per-split feature sample size to use for `p` predictors.
    pub fn mtry_for(&self, p: usize) -> usize {
        self.forest_mtry.unwrap_or_else(|| (p / 3).max(1))
    }

    /// Check the configuration against a dataset with `p` predictors.
    pub fn validate(&self, p: usize) -> Result<()> {
        if self.min_leaf_size == 0 {
            return Err(Error::invalid_input("min_leaf_size must be at least 1"));
        }
        if self.min_split_size < 2 * self.min_leaf_size {
            return Err(Error::invalid_input(format!(
                "min_split_size {} is below 2 * min_leaf_size = {}",
                self.min_split_size,
                2 * self.min_leaf_size
            )));
        }
        if !self.min_deviance_fraction.is_finite() || self.min_deviance_fraction < 0.0 {
            return Err(Error::invalid_input("min_deviance_fraction must be finite and non-negative"));
        }
        if self.regressor_kind == RegressorKind::Forest && self.forest_num_trees == 0 {
            return Err(Error::invalid_input("forest_num_trees must be at least 1"));
        }
        let mtry = self.mtry_for(p);
        if mtry == 0 || mtry > p {
            return Err(Error::invalid_input(format!(
                "forest_mtry {mtry} is outside 1..={p}"
            )));
        }
        Ok(())
    }
}

/// One node of the flat tree layout.
///
/// Internal nodes point at a pair of children (`left`, `left + 1`). Leaves
/// point at themselves with an infinite threshold, so a fixed-step walk
/// parks on them.
#[derive(Debug, Clone, Copy)]
struct Node {
    threshold: f64,
    feature: u32,
    left: u32,
}

impl Node {
    fn leaf(id: u32) -> Node {
        Node { threshold: f64::INFINITY, feature: 0, left: id }
    }
}

/// Serialization-friendly view of a single node; `parent`/`side` encode the
/// topology, split fields are present on internal nodes, value/count on
/// leaves.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct NodeRecord {
    pub parent: Option<u32>,
    /// `false` = left child, `true` = right child; meaningless for the root.
    pub right_side: bool,
    pub split: Option<(u32, f64)>,
    pub leaf: Option<(f64, u32)>,
}

/// A fitted CART regression tree.
#[derive(Debug, Clone)]
pub struct RegressionTree {
    p: usize,
    nodes: Vec<Node>,
    /// Mean response of the training rows reaching each node.
    values: Vec<f64>,
    /// Number of training rows reaching each node.
    counts: Vec<u32>,
    depth: usize,
    num_leaves: usize,
}

impl RegressionTree {
    /// Number of predictors the tree was fitted on.
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_leaves(&self) -> usize {
        self.num_leaves
    }

    /// Depth of the deepest leaf; 0 for a stump.
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Predict the response at one point.
    ///
    /// Errors if `x` has the wrong length or contains non-finite values.
    pub fn predict_one(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.p {
            return Err(Error::DimensionMismatch { expected: self.p, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_input("prediction point contains non-finite values"));
        }
        Ok(self.values[self.leaf_for(x)])
    }

    /// Index of the leaf `x` falls into. `x` must have length `p`.
    pub(crate) fn leaf_for(&self, x: &[f64]) -> usize {
        let mut idx = 0u32;
        loop {
            let nd = self.nodes[idx as usize];
            if nd.left == idx {
                return idx as usize;
            }
            idx = nd.left + u32::from(x[nd.feature as usize] >= nd.threshold);
        }
    }

    /// Add `scale * prediction` into `out[i]` for every row of the row-major
    /// matrix `xs`. The hot path of ensemble prediction: four rows advance
    /// through the node array in lockstep so their memory and compare
    /// latencies overlap.
    pub(crate) fn accumulate_predictions(&self, xs: &[f64], out: &mut [f64], scale: f64) {
        let p = self.p;
        let n = out.len();
        debug_assert_eq!(xs.len(), n * p);
        let nodes = &self.nodes;
        let values = &self.values;
        let mut i = 0;
        while i + 4 <= n {
            let base = i * p;
            let (mut a, mut b, mut c, mut d) = (0u32, 0u32, 0u32, 0u32);
            loop {
                let na = nodes[a as usize];
                let nb = nodes[b as usize];
                let nc = nodes[c as usize];
                let nd = nodes[d as usize];
                let a2 = na.left + u32::from(xs[base + na.feature as usize] >= na.threshold);
                let b2 = nb.left + u32::from(xs[base + p + nb.feature as usize] >= nb.threshold);
                let c2 = nc.left + u32::from(xs[base + 2 * p + nc.feature as usize] >= nc.threshold);
                let d2 = nd.left + u32::from(xs[base + 3 * p + nd.feature as usize] >= nd.threshold);
                if a2 == a && b2 == b && c2 == c && d2 == d {
                    break;
                }
                a = a2;
                b = b2;
                c = c2;
                d = d2;
            }
            out[i] += scale * values[a as usize];
            out[i + 1] += scale * values[b as usize];
            out[i + 2] += scale * values[c as usize];
            out[i + 3] += scale * values[d as usize];
            i += 4;
        }
        while i < n {
            out[i] += scale * values[self.leaf_for(&xs[i * p..(i + 1) * p])];
            i += 1;
        }
    }

    /// Flat export of the tree as parent-linked records, in node-id order
    /// (the root first).
    pub(crate) fn node_records(&self) -> Vec<NodeRecord> {
        let mut parents: Vec<Option<u32>> = vec![None; self.nodes.len()];
        let mut right_side = vec![false; self.nodes.len()];
        for (id, nd) in self.nodes.iter().enumerate() {
            if nd.left as usize != id {
                parents[nd.left as usize] = Some(id as u32);
                parents[nd.left as usize + 1] = Some(id as u32);
                right_side[nd.left as usize + 1] = true;
            }
        }
        self.nodes
            .iter()
            .enumerate()
            .map(|(id, nd)| {
                let is_leaf = nd.left as usize == id;
                NodeRecord {
                    parent: parents[id],
                    right_side: right_side[id],
                    split: (!is_leaf).then_some((nd.feature, nd.threshold)),
                    leaf: is_leaf.then_some((self.values[id], self.counts[id])),
                }
            })
            .collect()
    }

    /// Rebuild a tree from parent-linked records, validating the topology:
    /// exactly one root, every internal node has one left and one right
    /// child, leaves carry values, and every record is reachable from the
    /// root. Node ids are renumbered into the canonical paired layout.
    pub(crate) fn from_node_records(p: usize, records: &[NodeRecord]) -> Result<Self> {
        if p == 0 {
            return Err(Error::malformed("tree has p = 0"));
        }
        if records.is_empty() {
            return Err(Error::malformed("tree has no nodes"));
        }
        let n = records.len();
        let mut root = None;
        let mut children: Vec<[Option<usize>; 2]> = vec![[None, None]; n];
        for (id, rec) in records.iter().enumerate() {
            match rec.parent {
                None => {
                    if root.replace(id).is_some() {
                        return Err(Error::malformed("tree has more than one root"));
                    }
                }
                Some(parent) => {
                    let parent = parent as usize;
                    if parent >= n {
                        return Err(Error::malformed(format!("node {id} has out-of-range parent {parent}")));
                    }
                    let slot = usize::from(rec.right_side);
                    if children[parent][slot].replace(id).is_some() {
                        return Err(Error::malformed(format!(
                            "node {parent} has two {} children",
                            if rec.right_side { "right" } else { "left" }
                        )));
                    }
                }
            }
        }
        let root = root.ok_or_else(|| Error::malformed("tree has no root"))?;

        let mut tree = RegressionTree {
            p,
            nodes: vec![Node::leaf(0)],
            values: vec![0.0],
            counts: vec![0],
            depth: 0,
            num_leaves: 0,
        };
        // old-id stack entries: (old id, new id, depth)
        let mut stack = vec![(root, 0usize, 0usize)];
        let mut visited = 0usize;
        while let Some((old, new, depth)) = stack.pop() {
            visited += 1;
            if visited > n {
                return Err(Error::malformed("tree node links contain a cycle"));
            }
            tree.depth = tree.depth.max(depth);
            let rec = &records[old];
            match (rec.split, rec.leaf, children[old]) {
                (Some((feature, threshold)), None, [Some(l), Some(r)]) => {
                    if feature as usize >= p {
                        return Err(Error::malformed(format!(
                            "split node references feature {feature}, but p = {p}"
                        )));
                    }
                    if !threshold.is_finite() {
                        return Err(Error::malformed("split threshold is not finite"));
                    }
                    let left_new = tree.nodes.len();
                    tree.nodes[new] = Node { threshold, feature, left: left_new as u32 };
                    tree.nodes.push(Node::leaf(left_new as u32));
                    tree.nodes.push(Node::leaf(left_new as u32 + 1));
                    tree.values.extend([0.0, 0.0]);
                    tree.counts.extend([0, 0]);
                    stack.push((r, left_new + 1, depth + 1));
                    stack.push((l, left_new, depth + 1));
                }
                (None, Some((value, count)), [None, None]) => {
                    if !value.is_finite() {
                        return Err(Error::malformed("leaf value is not finite"));
                    }
                    tree.values[new] = value;
                    tree.counts[new] = count;
                    tree.num_leaves += 1;
                }
                (Some(_), _, [l, r]) if l.is_none() || r.is_none() => {
                    return Err(Error::malformed("split node is missing a child"));
                }
                (None, Some(_), _) => {
                    return Err(Error::malformed("leaf node has children"));
                }
                _ => {
                    return Err(Error::malformed(
                        "node must carry either split fields or leaf fields, not both or neither",
                    ));
                }
            }
        }
        if visited != n {
            return Err(Error::malformed(format!(
                "tree has {n} node records but only {visited} are reachable from the root"
            )));
        }
        Ok(tree)
    }
}

/// Fit a regression tree to a batch.
pub fn tree_fit(batch: &ObservationBatch, config: &FitConfig) -> Result<RegressionTree> {
    config.validate(batch.p())?;
    fit_tree_raw(batch.predictors(), batch.responses(), batch.p(), config, None)
}

/// Fit on raw arrays; `rng` enables per-split feature sampling (forest mode).
pub(crate) fn fit_tree_raw(
    xs: &[f64],
    ys: &[f64],
    p: usize,
    config: &FitConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<RegressionTree> {
    let n = ys.len();
    if n == 0 || xs.len() != n * p {
        return Err(Error::invalid_input("predictor/response arrays are empty or inconsistent"));
    }
    let mut sorted: Vec<Vec<u32>> = Vec::with_capacity(p);
    for f in 0..p {
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.sort_unstable_by(|&a, &b| {
            let (xa, xb) = (xs[a as usize * p + f], xs[b as usize * p + f]);
            xa.partial_cmp(&xb).expect("finite values compare totally").then(a.cmp(&b))
        });
        sorted.push(order);
    }
    let mut builder = TreeBuilder {
        xs,
        ys,
        p,
        cfg: config,
        mtry: rng.as_ref().map(|_| config.mtry_for(p)),
        rng,
        sorted,
        go_left: vec![false; n],
        buf: Vec::with_capacity(n),
        feat_pool: (0..p as u32).collect(),
        tree: RegressionTree {
            p,
            nodes: vec![Node::leaf(0)],
            values: vec![0.0],
            counts: vec![0],
            depth: 0,
            num_leaves: 0,
        },
        min_dev_abs: 0.0,
    };
    builder.build(0, n, 0, 0);
    let mut tree = builder.tree;
    tree.num_leaves = tree.nodes.iter().enumerate().filter(|(id, nd)| nd.left as usize == *id).count();
    Ok(tree)
}

struct TreeBuilder<'a> {
    xs: &'a [f64],
    ys: &'a [f64],
    p: usize,
    cfg: &'a FitConfig,
    /// `Some(k)` when each split should consider only `k` sampled features.
    mtry: Option<usize>,
    rng: Option<&'a mut ChaCha8Rng>,
    /// Per-feature row indices, sorted by feature value; all `p` vectors
    /// hold the same index set within any node's segment.
    sorted: Vec<Vec<u32>>,
    go_left: Vec<bool>,
    buf: Vec<u32>,
    feat_pool: Vec<u32>,
    tree: RegressionTree,
    min_dev_abs: f64,
}

impl TreeBuilder<'_> {
    fn build(&mut self, lo: usize, hi: usize, depth: usize, node_id: usize) {
        let s = hi - lo;
        let mut sum = 0.0;
        let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for &i in &self.sorted[0][lo..hi] {
            let y = self.ys[i as usize];
            sum += y;
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
        // A pure node's mean is the shared value itself; computing it that
        // way keeps constant responses reproduced exactly.
        let mean = if y_min == y_max { y_min } else { sum / s as f64 };
        let (mut css, mut cs) = (0.0, 0.0);
        for &i in &self.sorted[0][lo..hi] {
            let c = self.ys[i as usize] - mean;
            cs += c;
            css += c * c;
        }
        self.tree.values[node_id] = mean;
        self.tree.counts[node_id] = s as u32;
        self.tree.depth = self.tree.depth.max(depth);
        if node_id == 0 {
            self.min_dev_abs = self.cfg.min_deviance_fraction * css;
        }
        if s < self.cfg.min_split_size
            || depth >= self.cfg.max_depth
            || y_min == y_max
            || css < self.min_dev_abs
        {
            return;
        }
        let Some((feature, threshold, left_k)) = self.best_split(lo, hi, mean, cs, css) else {
            return;
        };

        // Mark which rows go left, then keep every per-feature ordering
        // aligned by stably partitioning each one with the same marks.
        for &i in &self.sorted[feature][lo..lo + left_k] {
            self.go_left[i as usize] = true;
        }
        for &i in &self.sorted[feature][lo + left_k..hi] {
            self.go_left[i as usize] = false;
        }
        for f in 0..self.p {
            if f == feature {
                continue;
            }
            self.buf.clear();
            let mut w = lo;
            for r in lo..hi {
                let idx = self.sorted[f][r];
                if self.go_left[idx as usize] {
                    self.sorted[f][w] = idx;
                    w += 1;
                } else {
                    self.buf.push(idx);
                }
            }
            debug_assert_eq!(w, lo + left_k);
            self.sorted[f][w..hi].copy_from_slice(&self.buf);
        }

        let left_id = self.tree.nodes.len();
        self.tree.nodes[node_id] = Node { threshold, feature: feature as u32, left: left_id as u32 };
        self.tree.nodes.push(Node::leaf(left_id as u32));
        self.tree.nodes.push(Node::leaf(left_id as u32 + 1));
        self.tree.values.extend([0.0, 0.0]);
        self.tree.counts.extend([0, 0]);
        self.build(lo, lo + left_k, depth + 1, left_id);
        self.build(lo + left_k, hi, depth + 1, left_id + 1);
    }

    /// Scan candidate splits of the segment `[lo, hi)`, whose rows have mean
    /// response `mean` and centered totals `cs_total` / `css_total`.
    /// Returns `(feature, threshold, left_size)` of the best candidate.
    fn best_split(&mut self, lo: usize, hi: usize, mean: f64, cs_total: f64, css_total: f64) -> Option<(usize, f64, usize)> {
        let s = hi - lo;
        let min_leaf = self.cfg.min_leaf_size;
        if s < 2 * min_leaf {
            return None;
        }
        let num_feats = match self.mtry {
            Some(mtry) => {
                let rng = self.rng.as_mut().expect("mtry implies an rng");
                let pool = &mut self.feat_pool;
                for i in 0..mtry {
                    let j = rng.random_range(i..pool.len());
                    pool.swap(i, j);
                }
                pool[..mtry].sort_unstable();
                mtry
            }
            None => {
                // feat_pool stays 0..p in ascending order for full scans
                self.feat_pool.sort_unstable();
                self.p
            }
        };
        let mut best: Option<(f64, usize, f64, usize)> = None;
        for fi in 0..num_feats {
            let f = self.feat_pool[fi] as usize;
            let seg = &self.sorted[f][lo..hi];
            let (mut cs, mut css) = (0.0, 0.0);
            for k in 1..s {
                let prev = seg[k - 1] as usize;
                let c = self.ys[prev] - mean;
                cs += c;
                css += c * c;
                if k < min_leaf || s - k < min_leaf {
                    continue;
                }
                let x_lo = self.xs[prev * self.p + f];
                let x_hi = self.xs[seg[k] as usize * self.p + f];
                if x_lo >= x_hi {
                    continue;
                }
                let sse_left = (css - cs * cs / k as f64).max(0.0);
                let cs_r = cs_total - cs;
                let sse_right = ((css_total - css) - cs_r * cs_r / (s - k) as f64).max(0.0);
                let total = sse_left + sse_right;
                if best.as_ref().is_none_or(|b| total < b.0) {
                    best = Some((total, f, 0.5 * (x_lo + x_hi), k));
                }
            }
        }
        best.map(|(_, f, thr, k)| (f, thr, k))
    }
}
