use std::collections::VecDeque;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::leaf::{leaf_score, optimal_leaf_loss, LeafStats};
use super::tree::{Node, RegressionTree};
use crate::error::{Error, Result};
use crate::rng::{rng, Rng};

/// Per-cell covariates (one column per feature) with each column's cell
/// order presorted by `(value, cell index)`.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    columns: Vec<Vec<f64>>,
    sorted: Vec<Vec<u32>>,
}

impl FeatureMatrix {
    pub fn new(columns: Vec<Vec<f64>>) -> Result<Self> {
        let n = columns.first().map_or(0, Vec::len);
        if columns.is_empty() || n == 0 {
            return Err(Error::Contract("feature matrix needs cells and features".into()));
        }
        if n > u32::MAX as usize {
            return Err(Error::Contract("too many cells".into()));
        }
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::Contract("feature columns differ in length".into()));
        }
        if columns.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Contract("feature values must be finite".into()));
        }
        let sorted = columns
            .iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..n as u32).collect();
                idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Ok(FeatureMatrix { columns, sorted })
    }

    pub fn n_cells(&self) -> usize {
        self.columns[0].len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, feature: usize) -> &[f64] {
        &self.columns[feature]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn row(&self, cell: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[cell]).collect()
    }
}

/// Everything the quadratic stage loss needs, aggregated per quadrature cell:
/// `grad[i]` sums `ŵ(x)` over the events in cell `i`, `hess[i]` is
/// `ŵ(t_i) exp(φ̂(t_i)) |T_i|`.
#[derive(Debug, Clone)]
pub struct StageData<'a> {
    features: &'a FeatureMatrix,
    grad: Vec<f64>,
    hess: Vec<f64>,
}

impl<'a> StageData<'a> {
    pub fn new(features: &'a FeatureMatrix, grad: Vec<f64>, hess: Vec<f64>) -> Result<Self> {
        let n = features.n_cells();
        if grad.len() != n || hess.len() != n {
            return Err(Error::Contract(format!(
                "stage data has {} / {} values for {n} cells",
                grad.len(),
                hess.len()
            )));
        }
        if grad.iter().chain(&hess).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Contract("stage statistics must be finite and >= 0".into()));
        }
        if !(hess.iter().sum::<f64>() > 0.0) {
            return Err(Error::Contract("stage has no quadrature mass".into()));
        }
        Ok(StageData {
            features,
            grad,
            hess,
        })
    }

    pub fn features(&self) -> &FeatureMatrix {
        self.features
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn hess(&self) -> &[f64] {
        &self.hess
    }

    pub fn stats_of(&self, cells: &[u32]) -> LeafStats {
        let mut s = LeafStats::default();
        for &c in cells {
            s.r += self.grad[c as usize];
            s.t += self.hess[c as usize];
        }
        s
    }

    pub fn totals(&self) -> LeafStats {
        LeafStats::new(self.grad.iter().sum(), self.hess.iter().sum())
    }

    /// The quadratic stage loss of `tree` evaluated cell by cell:
    /// `γ Σ_v |θ_v| - Σ_i g_i f(z_i) + Σ_i h_i (f(z_i) + f(z_i)²/2)`.
    pub fn quadratic_loss(&self, tree: &RegressionTree, gamma: f64) -> f64 {
        let mut loss = gamma * tree.l1_norm();
        let mut z = vec![0.0; self.features.n_features()];
        for i in 0..self.features.n_cells() {
            for (zj, col) in z.iter_mut().zip(self.features.columns()) {
                *zj = col[i];
            }
            let f = tree.predict(&z);
            loss += -self.grad[i] * f + self.hess[i] * (f + 0.5 * f * f);
        }
        loss
    }
}

/// Best threshold on one feature for one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
    pub left: LeafStats,
    pub right: LeafStats,
}

/// Prefix sums, sorted values and gains of one scan.
#[derive(Debug, Default)]
struct ScanBuffers {
    zs: Vec<f64>,
    cr: Vec<f64>,
    ct: Vec<f64>,
    gain: Vec<f64>,
}

/// Scans cells presorted by `z` and returns the best positive-gain midpoint
/// split. Equal gains keep the lower threshold.
fn scan_sorted(
    order: &[u32],
    z: &[f64],
    grad: &[f64],
    hess: &[f64],
    total: LeafStats,
    gamma: f64,
    buf: &mut ScanBuffers,
) -> Option<(f64, f64, LeafStats)> {
    let n = order.len();
    // No subset of a node with max(R, T) <= γ has |R - T| > γ, so every
    // child scores zero and the gain is at most the parent loss, 0.
    if n < 2 || total.r.max(total.t) <= gamma {
        return None;
    }
    let ScanBuffers { zs, cr, ct, gain } = buf;
    for v in [&mut *zs, &mut *cr, &mut *ct, &mut *gain] {
        if v.len() < n {
            v.resize(n, 0.0);
        }
    }
    let (zs, cr, ct, gain) = (&mut zs[..n], &mut cr[..n], &mut ct[..n], &mut gain[..n - 1]);
    let (mut r, mut t) = (0.0, 0.0);
    for (((&c, zo), ro), to) in order.iter().zip(zs.iter_mut()).zip(cr.iter_mut()).zip(ct.iter_mut()) {
        let c = c as usize;
        r += grad[c];
        t += hess[c];
        *zo = z[c];
        *ro = r;
        *to = t;
    }
    let parent = optimal_leaf_loss(total, gamma);
    for ((g, &lr), &lt) in gain.iter_mut().zip(&cr[..n - 1]).zip(&ct[..n - 1]) {
        let (rr, rt) = (total.r - lr, total.t - lt);
        let ml = ((lr - lt).abs() - gamma).max(0.0);
        let mr = ((rr - rt).abs() - gamma).max(0.0);
        let v = parent + ml * ml / (2.0 * lt) + mr * mr / (2.0 * rt);
        *g = if lt > 0.0 && rt > 0.0 { v } else { f64::NEG_INFINITY };
    }
    let mut best: Option<(usize, f64)> = None;
    // Gains within rounding of the parent loss are zero.
    let mut best_gain = 64.0 * f64::EPSILON * parent.abs();
    for (k, (&g, w)) in gain.iter().zip(zs.windows(2)).enumerate() {
        if g > best_gain && w[1] > w[0] {
            best = Some((k, g));
            best_gain = g;
        }
    }
    best.map(|(k, g)| (midpoint(zs[k], zs[k + 1]), g, LeafStats::new(cr[k], ct[k])))
}

/// A threshold `t` with `lo < t <= hi`.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let t = lo + (hi - lo) / 2.0;
    if lo < t && t <= hi {
        t
    } else {
        hi
    }
}

fn better(cand: &SplitCandidate, best: &Option<SplitCandidate>) -> bool {
    match best {
        None => true,
        Some(b) => {
            cand.gain > b.gain
                || (cand.gain == b.gain
                    && (cand.feature, cand.threshold) < (b.feature, b.threshold))
        }
    }
}

/// Exact greedy split search over the node's cells. Thresholds are midpoints
/// between consecutive distinct cell values; returns the maximal positive-gain
/// split, ties broken by lowest feature index then lowest threshold.
pub fn best_split(
    stage: &StageData<'_>,
    cells: &[u32],
    features: &[usize],
    gamma: f64,
) -> Option<SplitCandidate> {
    let total = stage.stats_of(cells);
    let mut best = None;
    let mut order = cells.to_vec();
    let mut buf = ScanBuffers::default();
    for &j in features {
        let z = stage.features.column(j);
        order.sort_by(|&a, &b| z[a as usize].total_cmp(&z[b as usize]).then(a.cmp(&b)));
        if let Some((threshold, gain, left)) =
            scan_sorted(&order, z, &stage.grad, &stage.hess, total, gamma, &mut buf)
        {
            let cand = SplitCandidate {
                feature: j,
                threshold,
                gain,
                left,
                right: total - left,
            };
            if better(&cand, &best) {
                best = Some(cand);
            }
        }
    }
    best
}

/// Tree-growth settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub gamma: f64,
    /// Fraction of covariates drawn (without replacement) at every node.
    pub feature_fraction: f64,
    /// Splits must gain strictly more than this.
    pub min_gain: f64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            max_depth: 6,
            gamma: 0.0,
            feature_fraction: 1.0,
            min_gain: 0.0,
        }
    }
}

impl TreeConfig {
    pub fn features_per_node(&self, n_features: usize) -> usize {
        ((self.feature_fraction * n_features as f64).ceil() as usize).clamp(1, n_features)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0)
            || !(self.feature_fraction > 0.0 && self.feature_fraction <= 1.0)
            || !(self.min_gain >= 0.0)
        {
            return Err(Error::Contract(format!("invalid tree config {self:?}")));
        }
        Ok(())
    }
}

/// Grows groups of trees on one stage.
///
/// Nodes are memoised across the trees of a group: a node is identified by
/// the splits on its root path, and its per-feature best splits and child
/// partitions are computed at most once. A node's cells sorted by feature `j`
/// live in a block of the `j`-th order buffer, filtered from the parent's
/// block the first time feature `j` is needed there.
#[derive(Debug, Default)]
pub struct TreeGrower {
    arena: Vec<Vec<u32>>,
    memo: Vec<MemoNode>,
    queue: VecDeque<(usize, usize)>,
    candidates: Vec<usize>,
    scratch: Vec<u32>,
    scan: ScanBuffers,
    gains: Vec<(usize, f64)>,
}

type Scan = Option<(f64, f64, LeafStats)>;

#[derive(Debug, Clone, Copy)]
struct Parent {
    node: usize,
    feature: usize,
    threshold: f64,
    left: bool,
}

#[derive(Debug)]
struct MemoNode {
    len: usize,
    depth: usize,
    stats: LeafStats,
    parent: Option<Parent>,
    /// Block start per feature once materialised.
    starts: Vec<Option<usize>>,
    scans: Vec<Option<Scan>>,
    /// Left child per split feature; the right child follows it.
    children: Vec<Option<usize>>,
}

impl MemoNode {
    fn new(len: usize, depth: usize, stats: LeafStats, parent: Option<Parent>, p: usize) -> Self {
        MemoNode {
            len,
            depth,
            stats,
            parent,
            starts: vec![None; p],
            scans: vec![None; p],
            children: vec![None; p],
        }
    }
}

impl TreeGrower {
    pub fn new() -> Self {
        Self::default()
    }

    fn reset(&mut self, stage: &StageData<'_>) {
        let features = stage.features;
        let p = features.n_features();
        let n = features.n_cells();
        self.arena.resize_with(p, Vec::new);
        for (buf, sorted) in self.arena.iter_mut().zip(&features.sorted) {
            buf.clear();
            buf.extend_from_slice(sorted);
        }
        if self.scratch.len() < n {
            self.scratch.resize(n, 0);
        }
        self.memo.clear();
        let mut root = MemoNode::new(n, 0, stage.totals(), None, p);
        root.starts.iter_mut().for_each(|s| *s = Some(0));
        self.memo.push(root);
    }

    /// Block start of node `m` in the order buffer of feature `j`.
    fn materialise(&mut self, stage: &StageData<'_>, m: usize, j: usize) -> usize {
        if let Some(start) = self.memo[m].starts[j] {
            return start;
        }
        let parent = self.memo[m].parent.expect("the root is always materialised");
        let from = self.materialise(stage, parent.node, j);
        let len = self.memo[parent.node].len;
        let z = stage.features.column(parent.feature);
        let buf = &mut self.arena[j];
        let mut k = 0;
        for &c in &buf[from..from + len] {
            self.scratch[k] = c;
            k += ((z[c as usize] < parent.threshold) == parent.left) as usize;
        }
        debug_assert_eq!(k, self.memo[m].len);
        let start = buf.len();
        buf.extend_from_slice(&self.scratch[..k]);
        self.memo[m].starts[j] = Some(start);
        start
    }

    /// Cells of node `m` in some materialised order.
    fn cells(&self, m: usize) -> &[u32] {
        let node = &self.memo[m];
        let (j, start) = node
            .starts
            .iter()
            .enumerate()
            .find_map(|(j, s)| s.map(|s| (j, s)))
            .expect("every node has a materialised order");
        &self.arena[j][start..start + node.len]
    }

    /// Grows one tree top-down and writes every cell's leaf score into
    /// `cell_scores`.
    pub fn grow(
        &mut self,
        stage: &StageData<'_>,
        config: &TreeConfig,
        rng: &mut Rng,
        cell_scores: &mut [f64],
    ) -> RegressionTree {
        cell_scores.iter_mut().for_each(|s| *s = 0.0);
        self.grow_group(stage, config, rng, 1, cell_scores)
            .pop()
            .expect("a group of one tree")
    }

    /// Grows `count` trees on the same stage and adds every cell's leaf
    /// scores into `cell_sums`.
    pub fn grow_group(
        &mut self,
        stage: &StageData<'_>,
        config: &TreeConfig,
        rng: &mut Rng,
        count: usize,
        cell_sums: &mut [f64],
    ) -> Vec<RegressionTree> {
        self.reset(stage);
        (0..count)
            .map(|_| self.grow_one(stage, config, rng, cell_sums))
            .collect()
    }

    fn grow_one(
        &mut self,
        stage: &StageData<'_>,
        config: &TreeConfig,
        rng: &mut Rng,
        cell_sums: &mut [f64],
    ) -> RegressionTree {
        let p = stage.features.n_features();
        let per_node = config.features_per_node(p);
        let mut nodes: Vec<Node> = vec![Node::Leaf { leaf: 0.0 }];
        self.gains.clear();
        self.queue.clear();
        self.queue.push_back((0, 0));
        while let Some((m, out)) = self.queue.pop_front() {
            let mut split = None;
            let node = &self.memo[m];
            if node.depth < config.max_depth && node.len > 1 {
                self.candidates.clear();
                if per_node == p {
                    self.candidates.extend(0..p);
                } else {
                    self.candidates.extend(sample(rng, p, per_node).iter());
                    self.candidates.sort_unstable();
                }
                let mut best: Option<SplitCandidate> = None;
                for k in 0..self.candidates.len() {
                    let j = self.candidates[k];
                    if let Some((threshold, gain, left)) = self.scan_memo(stage, config.gamma, m, j) {
                        let cand = SplitCandidate {
                            feature: j,
                            threshold,
                            gain,
                            left,
                            right: self.memo[m].stats - left,
                        };
                        if better(&cand, &best) {
                            best = Some(cand);
                        }
                    }
                }
                split = best.filter(|b| b.gain > config.min_gain);
            }
            match split {
                Some(s) => {
                    let child = self.children(stage, m, &s);
                    let left = nodes.len();
                    nodes.push(Node::Leaf { leaf: 0.0 });
                    nodes.push(Node::Leaf { leaf: 0.0 });
                    nodes[out] = Node::Split {
                        feature: s.feature,
                        threshold: s.threshold,
                        left,
                        right: left + 1,
                    };
                    self.queue.push_back((child, left));
                    self.queue.push_back((child + 1, left + 1));
                    self.gains.push((out, s.gain));
                }
                None => {
                    // Every memo node carries quadrature mass, so the score exists.
                    let score = leaf_score(self.memo[m].stats, config.gamma).unwrap_or(0.0);
                    nodes[out] = Node::Leaf { leaf: score };
                    if score != 0.0 {
                        for &c in self.cells(m) {
                            cell_sums[c as usize] += score;
                        }
                    }
                }
            }
        }
        RegressionTree::from_nodes(nodes).expect("grown tree is well formed")
    }

    fn scan_memo(&mut self, stage: &StageData<'_>, gamma: f64, m: usize, j: usize) -> Scan {
        if let Some(hit) = self.memo[m].scans[j] {
            return hit;
        }
        let node = &self.memo[m];
        // Skip materialising orders for nodes the prune rejects anyway.
        let result = if node.len < 2 || node.stats.r.max(node.stats.t) <= gamma {
            None
        } else {
            let start = self.materialise(stage, m, j);
            scan_sorted(
                &self.arena[j][start..start + self.memo[m].len],
                stage.features.column(j),
                &stage.grad,
                &stage.hess,
                self.memo[m].stats,
                gamma,
                &mut self.scan,
            )
        };
        self.memo[m].scans[j] = Some(result);
        result
    }

    /// Memo index of the left child of node `m` split by `s`; the split
    /// feature's order is partitioned for both children on first use.
    fn children(&mut self, stage: &StageData<'_>, m: usize, s: &SplitCandidate) -> usize {
        if let Some(c) = self.memo[m].children[s.feature] {
            return c;
        }
        let j = s.feature;
        let (len, depth) = (self.memo[m].len, self.memo[m].depth);
        let from = self.memo[m].starts[j].expect("split feature was scanned");
        let z = stage.features.column(j);
        let buf = &mut self.arena[j];
        let n_left = buf[from..from + len]
            .iter()
            .filter(|&&c| z[c as usize] < s.threshold)
            .count();
        let base = buf.len();
        buf.extend_from_within(from..from + len);
        let (head, tail) = buf.split_at_mut(base);
        let (mut l, mut r) = (0, n_left);
        for &c in &head[from..from + len] {
            let left = z[c as usize] < s.threshold;
            tail[if left { l } else { r }] = c;
            l += left as usize;
            r += !left as usize;
        }
        let p = stage.features.n_features();
        let child = self.memo.len();
        for (left, start, size, stats) in [
            (true, base, n_left, s.left),
            (false, base + n_left, len - n_left, s.right),
        ] {
            let parent = Parent {
                node: m,
                feature: j,
                threshold: s.threshold,
                left,
            };
            let mut node = MemoNode::new(size, depth + 1, stats, Some(parent), p);
            node.starts[j] = Some(start);
            self.memo.push(node);
        }
        self.memo[m].children[j] = Some(child);
        child
    }

    /// `(node index, gain)` of every split in the most recently grown tree.
    pub fn split_gains(&self) -> &[(usize, f64)] {
        &self.gains
    }

    /// Whether any feature admits a positive-gain split of the root.
    pub fn root_has_split(stage: &StageData<'_>, gamma: f64) -> bool {
        let total = stage.totals();
        let mut buf = ScanBuffers::default();
        (0..stage.features.n_features()).any(|j| {
            scan_sorted(
                &stage.features.sorted[j],
                stage.features.column(j),
                &stage.grad,
                &stage.hess,
                total,
                gamma,
                &mut buf,
            )
            .is_some()
        })
    }
}

/// Grows a single tree with a fresh grower seeded by `seed`.
pub fn grow_tree(stage: &StageData<'_>, config: &TreeConfig, seed: u64) -> Result<RegressionTree> {
    config.validate()?;
    let mut scores = vec![0.0; stage.features.n_cells()];
    Ok(TreeGrower::new().grow(stage, config, &mut rng(seed), &mut scores))
}
