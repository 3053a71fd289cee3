//! Histogram gradient boosting fitted per task, exposing the sparse leaf
//! one-hot embedding.
//!
//! The trees here are deliberately vanilla: depth-limited regression trees on
//! 256 quantile bins, fit to loss gradients with unit hessian, one tree per
//! class per round for multiclass. Their job is to carve the feature space
//! into leaves whose one-hot concatenation makes a good embedding, not to win
//! GBDT benchmarks. Two growth flavors exist: greedy per-node splits
//! (variant X) and oblivious symmetric levels (variant C).
//!
//! Determinism: with a fixed seed the fit is bit-reproducible. Split ties
//! break toward the lowest feature index, then the lowest threshold, and the
//! missing-direction tie prefers left.

use crate::error::{Error, Result};
use crate::linalg::quantile_sorted;
use crate::rng::rng_for;
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;

const MISSING_BIN: u16 = u16::MAX;
const GAIN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtConfig {
    pub max_rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub n_bins: usize,
    /// false: greedy per-node growth (variant X); true: symmetric levels
    /// sharing one split per depth (variant C).
    pub oblivious: bool,
    pub val_fraction: f64,
    pub patience: usize,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        GbdtConfig::variant_x()
    }
}

impl GbdtConfig {
    /// Depth-6 greedy trees, 256 bins, shrinkage 0.1.
    pub fn variant_x() -> Self {
        GbdtConfig {
            max_rounds: 100,
            learning_rate: 0.1,
            max_depth: 6,
            n_bins: 256,
            oblivious: false,
            val_fraction: 0.2,
            patience: 50,
        }
    }

    /// Depth-4 oblivious trees, 256 bins, shrinkage 0.1.
    pub fn variant_c() -> Self {
        GbdtConfig { max_depth: 4, oblivious: true, ..GbdtConfig::variant_x() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_rounds == 0 {
            return Err(Error::config("gbdt max_rounds must be >= 1"));
        }
        if self.n_bins < 2 {
            return Err(Error::config("gbdt n_bins must be >= 2"));
        }
        if self.max_depth == 0 {
            return Err(Error::config("gbdt max_depth must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("gbdt val_fraction must be in [0,1)"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("gbdt learning_rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Logistic,
    Softmax,
    Squared,
}

/// One regression tree in struct-of-arrays form. `feature[i] < 0` marks a
/// leaf; internal nodes carry a raw-space threshold (route left iff
/// x < threshold) and a missing-direction flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f64>,
    pub missing_left: Vec<bool>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub value: Vec<f64>,
    /// Leaf ordinal in 0..n_leaves for leaf nodes, u32::MAX elsewhere.
    pub leaf_ordinal: Vec<u32>,
    pub n_leaves: usize,
}

impl Tree {
    pub fn single_leaf(value: f64) -> Tree {
        Tree {
            feature: vec![-1],
            threshold: vec![0.0],
            missing_left: vec![true],
            left: vec![0],
            right: vec![0],
            value: vec![value],
            leaf_ordinal: vec![0],
            n_leaves: 1,
        }
    }

    /// Node index of the leaf row `x` falls into.
    fn leaf_node(&self, x: &[f64]) -> usize {
        let mut node = 0usize;
        loop {
            let f = self.feature[node];
            if f < 0 {
                return node;
            }
            let v = x[f as usize];
            let go_left =
                if v.is_nan() { self.missing_left[node] } else { v < self.threshold[node] };
            node = if go_left { self.left[node] as usize } else { self.right[node] as usize };
        }
    }

    pub fn leaf_of(&self, x: &[f64]) -> u32 {
        self.leaf_ordinal[self.leaf_node(x)]
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.value[self.leaf_node(x)]
    }
}

/// Fitted boosting ensemble plus the binning and config echo needed to embed
/// new rows. Trees are stored round-major, class-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct GbdtModel {
    pub loss: LossKind,
    pub learning_rate: f64,
    /// Rounds kept after early-stopping truncation.
    pub rounds: usize,
    pub max_rounds: usize,
    pub patience: usize,
    pub classes_per_round: usize,
    pub trees: Vec<Tree>,
    pub bin_edges: Vec<Vec<f64>>,
    pub base_score: Vec<f64>,
    pub n_features: usize,
    /// M = sum of leaf counts over all trees.
    pub total_leaves: usize,
    /// Validation loss per round when a holdout was carved (empty otherwise).
    pub val_history: Vec<f64>,
}

/// Index sets steering what the GBDT fits on versus what the hypernetwork
/// later samples from. Indices are positions within the caller's train split.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSplit {
    pub gbdt_fit: Vec<usize>,
    pub hypernet_pool: Vec<usize>,
}

/// Small training sets are used whole for both fitting and generation;
/// larger ones give the GBDT a random 50% (capped at 100 000 rows) and leave
/// the complement as the hypernetwork's sampling pool.
pub fn dynamic_fit_split(n_train: usize, seed: u64) -> FitSplit {
    if n_train < 2000 {
        let all: Vec<usize> = (0..n_train).collect();
        return FitSplit { gbdt_fit: all.clone(), hypernet_pool: all };
    }
    let size = (n_train / 2).min(100_000);
    let mut idx: Vec<usize> = (0..n_train).collect();
    idx.shuffle(&mut rng_for(seed, &[0x51]));
    let mut gbdt_fit: Vec<usize> = idx[..size].to_vec();
    let mut pool: Vec<usize> = idx[size..].to_vec();
    gbdt_fit.sort_unstable();
    pool.sort_unstable();
    FitSplit { gbdt_fit, hypernet_pool: pool }
}

pub enum FitTarget<'a> {
    Classes { y: &'a [u32], k: usize },
    Reals(&'a [f64]),
}

struct SplitChoice {
    feature: usize,
    cut: usize,
    threshold: f64,
    missing_left: bool,
    gain: f64,
}

/// Per-node, per-feature histogram of residual sums and counts, with the
/// missing rows tracked separately so both routing directions can be scored.
struct FeatureHist {
    sums: Vec<f64>,
    counts: Vec<f64>,
    miss_sum: f64,
    miss_count: f64,
}

fn build_hist(
    binned_col: &[u16],
    rows: &[usize],
    residual: &[f64],
    n_bins: usize,
) -> FeatureHist {
    let mut h = FeatureHist {
        sums: vec![0.0; n_bins],
        counts: vec![0.0; n_bins],
        miss_sum: 0.0,
        miss_count: 0.0,
    };
    for &r in rows {
        let b = binned_col[r];
        if b == MISSING_BIN {
            h.miss_sum += residual[r];
            h.miss_count += 1.0;
        } else {
            h.sums[b as usize] += residual[r];
            h.counts[b as usize] += 1.0;
        }
    }
    h
}

/// Variance-reduction gain of a (left, right) partition against the parent,
/// all with unit hessian: sum^2/count terms.
fn partition_gain(sl: f64, nl: f64, sr: f64, nr: f64, s: f64, n: f64) -> Option<f64> {
    if nl <= 0.0 || nr <= 0.0 {
        return None;
    }
    Some(sl * sl / nl + sr * sr / nr - s * s / n)
}

/// Best split of one node for one feature; `None` when nothing valid exists.
fn best_split_for_feature(
    hist: &FeatureHist,
    cuts: &[f64],
    feature: usize,
    s: f64,
    n: f64,
) -> Option<SplitChoice> {
    let finite_sum: f64 = s - hist.miss_sum;
    let finite_count: f64 = n - hist.miss_count;
    let mut best: Option<SplitChoice> = None;
    let mut acc_sum = 0.0;
    let mut acc_count = 0.0;
    for (c, &threshold) in cuts.iter().enumerate() {
        acc_sum += hist.sums[c];
        acc_count += hist.counts[c];
        let right_sum = finite_sum - acc_sum;
        let right_count = finite_count - acc_count;
        // Try missing-left first so a tie keeps the left flag.
        let candidates = [
            (true, acc_sum + hist.miss_sum, acc_count + hist.miss_count, right_sum, right_count),
            (false, acc_sum, acc_count, right_sum + hist.miss_sum, right_count + hist.miss_count),
        ];
        for (missing_left, sl, nl, sr, nr) in candidates {
            if let Some(gain) = partition_gain(sl, nl, sr, nr, s, n) {
                // Zero-gain splits are allowed (an XOR-style node has no
                // first-order gain anywhere yet must split); ties keep the
                // earliest candidate in (feature, threshold, left) order.
                let better = match &best {
                    None => true,
                    Some(b) => gain > b.gain + GAIN_EPS,
                };
                if better {
                    best = Some(SplitChoice { feature, cut: c, threshold, missing_left, gain });
                }
            }
        }
    }
    best
}

/// Intermediate tree during growth.
enum BNode {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, missing_left: bool, left: Box<BNode>, right: Box<BNode> },
}

struct GrowCtx<'a> {
    binned: &'a [Vec<u16>],
    cuts: &'a [Vec<f64>],
    residual: &'a [f64],
    max_depth: usize,
}

fn node_stats(rows: &[usize], residual: &[f64]) -> (f64, f64) {
    let mut s = 0.0;
    for &r in rows {
        s += residual[r];
    }
    (s, rows.len() as f64)
}

/// Excess residual variance, i.e. sum r^2 - (sum r)^2 / n. Zero means the
/// node is pure and splitting it can never help.
fn node_variance_excess(rows: &[usize], residual: &[f64]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let mut s = 0.0;
    let mut sq = 0.0;
    for &r in rows {
        s += residual[r];
        sq += residual[r] * residual[r];
    }
    sq - s * s / rows.len() as f64
}

fn route_left(binned_col: &[u16], row: usize, cut: usize, missing_left: bool) -> bool {
    let b = binned_col[row];
    if b == MISSING_BIN {
        missing_left
    } else {
        (b as usize) <= cut
    }
}

fn grow_greedy(ctx: &GrowCtx, rows: Vec<usize>, depth: usize) -> BNode {
    let (s, n) = node_stats(&rows, ctx.residual);
    let mean = if n > 0.0 { s / n } else { 0.0 };
    if depth >= ctx.max_depth
        || rows.len() < 2
        || node_variance_excess(&rows, ctx.residual) <= GAIN_EPS
    {
        return BNode::Leaf { value: mean };
    }
    let mut best: Option<SplitChoice> = None;
    for f in 0..ctx.binned.len() {
        if ctx.cuts[f].is_empty() {
            continue;
        }
        let hist = build_hist(&ctx.binned[f], &rows, ctx.residual, ctx.cuts[f].len() + 1);
        if let Some(cand) = best_split_for_feature(&hist, &ctx.cuts[f], f, s, n) {
            let better = match &best {
                None => true,
                Some(b) => cand.gain > b.gain + GAIN_EPS,
            };
            if better {
                best = Some(cand);
            }
        }
    }
    let Some(split) = best else {
        return BNode::Leaf { value: mean };
    };
    let (mut left_rows, mut right_rows) = (Vec::new(), Vec::new());
    for &r in &rows {
        if route_left(&ctx.binned[split.feature], r, split.cut, split.missing_left) {
            left_rows.push(r);
        } else {
            right_rows.push(r);
        }
    }
    BNode::Split {
        feature: split.feature,
        threshold: split.threshold,
        missing_left: split.missing_left,
        left: Box::new(grow_greedy(ctx, left_rows, depth + 1)),
        right: Box::new(grow_greedy(ctx, right_rows, depth + 1)),
    }
}

/// Oblivious growth: every node at a depth level shares one
/// (feature, threshold, missing-direction), chosen to maximize summed gain.
fn grow_oblivious(ctx: &GrowCtx, rows: Vec<usize>) -> BNode {
    struct Level {
        node_rows: Vec<Vec<usize>>,
        splits: Vec<(usize, f64, bool)>,
    }
    let mut nodes = vec![rows];
    let mut chosen: Vec<(usize, f64, bool)> = Vec::new();
    for _depth in 0..ctx.max_depth {
        if nodes.iter().all(|r| node_variance_excess(r, ctx.residual) <= GAIN_EPS) {
            break;
        }
        // Score candidates: for each (feature, cut, missing-direction) sum
        // per-node gains, counting only nodes where the split is valid.
        let mut best: Option<(usize, usize, f64, bool, f64)> = None; // f, cut, thr, miss, gain
        for f in 0..ctx.binned.len() {
            if ctx.cuts[f].is_empty() {
                continue;
            }
            let n_bins = ctx.cuts[f].len() + 1;
            let hists: Vec<(FeatureHist, f64, f64)> = nodes
                .iter()
                .map(|rows| {
                    let (s, n) = node_stats(rows, ctx.residual);
                    (build_hist(&ctx.binned[f], rows, ctx.residual, n_bins), s, n)
                })
                .collect();
            for c in 0..ctx.cuts[f].len() {
                for missing_left in [true, false] {
                    let mut total = 0.0;
                    let mut any_valid = false;
                    for (hist, s, n) in &hists {
                        let mut acc_sum = 0.0;
                        let mut acc_count = 0.0;
                        for b in 0..=c {
                            acc_sum += hist.sums[b];
                            acc_count += hist.counts[b];
                        }
                        let finite_sum = s - hist.miss_sum;
                        let finite_count = n - hist.miss_count;
                        let (sl, nl, sr, nr) = if missing_left {
                            (
                                acc_sum + hist.miss_sum,
                                acc_count + hist.miss_count,
                                finite_sum - acc_sum,
                                finite_count - acc_count,
                            )
                        } else {
                            (
                                acc_sum,
                                acc_count,
                                finite_sum - acc_sum + hist.miss_sum,
                                finite_count - acc_count + hist.miss_count,
                            )
                        };
                        if let Some(g) = partition_gain(sl, nl, sr, nr, *s, *n) {
                            total += g;
                            any_valid = true;
                        }
                    }
                    let better = any_valid
                        && match &best {
                            None => true,
                            Some(b) => total > b.4 + GAIN_EPS,
                        };
                    if better {
                        best = Some((f, c, ctx.cuts[f][c], missing_left, total));
                    }
                }
            }
        }
        let Some((f, cut, threshold, missing_left, _gain)) = best else {
            break;
        };
        let mut next = Vec::with_capacity(nodes.len() * 2);
        for rows in &nodes {
            let (mut l, mut r) = (Vec::new(), Vec::new());
            for &row in rows {
                if route_left(&ctx.binned[f], row, cut, missing_left) {
                    l.push(row);
                } else {
                    r.push(row);
                }
            }
            next.push(l);
            next.push(r);
        }
        chosen.push((f, threshold, missing_left));
        nodes = next;
    }
    let level = Level { node_rows: nodes, splits: chosen };

    // Assemble the symmetric tree; empty leaves inherit the parent mean.
    fn assemble(
        level: &Level,
        ctx: &GrowCtx,
        depth: usize,
        node_idx: usize,
        parent_mean: f64,
    ) -> BNode {
        if depth == level.splits.len() {
            let rows = &level.node_rows[node_idx];
            let (s, n) = node_stats(rows, ctx.residual);
            let value = if n > 0.0 { s / n } else { parent_mean };
            return BNode::Leaf { value };
        }
        // Mean over the subtree's rows feeds empty descendants.
        let width = 1 << (level.splits.len() - depth);
        let lo = node_idx * width;
        let mut s = 0.0;
        let mut n = 0.0;
        for leaf in &level.node_rows[lo..lo + width] {
            let (ls, ln) = node_stats(leaf, ctx.residual);
            s += ls;
            n += ln;
        }
        let mean = if n > 0.0 { s / n } else { parent_mean };
        let (feature, threshold, missing_left) = level.splits[depth];
        BNode::Split {
            feature,
            threshold,
            missing_left,
            left: Box::new(assemble(level, ctx, depth + 1, node_idx * 2, mean)),
            right: Box::new(assemble(level, ctx, depth + 1, node_idx * 2 + 1, mean)),
        }
    }
    assemble(&level, ctx, 0, 0, 0.0)
}

/// Flatten a grown tree into arrays, assigning leaf ordinals in depth-first,
/// left-first order.
fn flatten(root: BNode) -> Tree {
    let mut tree = Tree {
        feature: Vec::new(),
        threshold: Vec::new(),
        missing_left: Vec::new(),
        left: Vec::new(),
        right: Vec::new(),
        value: Vec::new(),
        leaf_ordinal: Vec::new(),
        n_leaves: 0,
    };
    fn push(tree: &mut Tree, node: BNode) -> u32 {
        let idx = tree.feature.len() as u32;
        match node {
            BNode::Leaf { value } => {
                tree.feature.push(-1);
                tree.threshold.push(0.0);
                tree.missing_left.push(true);
                tree.left.push(idx);
                tree.right.push(idx);
                tree.value.push(value);
                let ordinal = tree.n_leaves as u32;
                tree.leaf_ordinal.push(ordinal);
                tree.n_leaves += 1;
                idx
            }
            BNode::Split { feature, threshold, missing_left, left, right } => {
                tree.feature.push(feature as i32);
                tree.threshold.push(threshold);
                tree.missing_left.push(missing_left);
                tree.left.push(0);
                tree.right.push(0);
                tree.value.push(0.0);
                tree.leaf_ordinal.push(u32::MAX);
                let l = push(tree, *left);
                let r = push(tree, *right);
                tree.left[idx as usize] = l;
                tree.right[idx as usize] = r;
                idx
            }
        }
    }
    push(&mut tree, root);
    tree
}

/// Quantile bin cut points per feature, computed on the fitting rows.
fn compute_cuts(x: &ArrayView2<f64>, rows: &[usize], n_bins: usize) -> Vec<Vec<f64>> {
    let mut cuts = Vec::with_capacity(x.ncols());
    for f in 0..x.ncols() {
        let mut vals: Vec<f64> = rows.iter().map(|&r| x[[r, f]]).filter(|v| v.is_finite()).collect();
        if vals.len() < 2 {
            cuts.push(Vec::new());
            continue;
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut c = Vec::new();
        for b in 1..n_bins {
            let q = quantile_sorted(&vals, b as f64 / n_bins as f64);
            if c.last().map_or(true, |&last| q > last) {
                c.push(q);
            }
        }
        // A cut at or below the minimum can never separate anything.
        let min = vals[0];
        c.retain(|&v| v > min);
        cuts.push(c);
    }
    cuts
}

fn bin_rows(x: &ArrayView2<f64>, cuts: &[Vec<f64>]) -> Vec<Vec<u16>> {
    let n = x.nrows();
    let mut binned = Vec::with_capacity(cuts.len());
    for f in 0..cuts.len() {
        let col_cuts = &cuts[f];
        let mut col = Vec::with_capacity(n);
        for r in 0..n {
            let v = x[[r, f]];
            if !v.is_finite() {
                col.push(MISSING_BIN);
            } else {
                // bin = number of cuts <= v, so "bin <= c" matches "v < cuts[c]"
                let b = col_cuts.partition_point(|&c| c <= v);
                col.push(b as u16);
            }
        }
        binned.push(col);
    }
    binned
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(1e-12, 1.0 - 1e-12)
}

fn softmax_rows(f: &Array2<f64>) -> Array2<f64> {
    let mut out = f.clone();
    for mut row in out.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Fit the boosting ensemble. `x` is the dense numeric view (NaN = missing)
/// of the designated fitting rows; early stopping carves its own holdout from
/// those rows when `val_fraction` allows.
pub fn fit_gbdt(
    x: &ArrayView2<f64>,
    target: &FitTarget,
    cfg: &GbdtConfig,
    seed: u64,
) -> Result<GbdtModel> {
    cfg.validate()?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::data("gbdt fit with zero rows"));
    }

    let (loss, k) = match target {
        FitTarget::Classes { y, k } => {
            if y.len() != n {
                return Err(Error::data("gbdt fit: label length mismatch"));
            }
            let mut distinct: Vec<u32> = y.to_vec();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() < 2 {
                // Degenerate: base score only, one single-leaf tree keeps the
                // embedding well-defined (all-ones, width 1).
                let p = clamp_p(if distinct.first() == Some(&2) { 1.0 } else { 0.0 });
                return Ok(GbdtModel {
                    loss: LossKind::Logistic,
                    learning_rate: cfg.learning_rate,
                    rounds: 1,
                    max_rounds: cfg.max_rounds,
                    patience: cfg.patience,
                    classes_per_round: 1,
                    trees: vec![Tree::single_leaf(0.0)],
                    bin_edges: vec![Vec::new(); x.ncols()],
                    base_score: vec![(p / (1.0 - p)).ln()],
                    n_features: x.ncols(),
                    total_leaves: 1,
                    val_history: Vec::new(),
                });
            }
            if *k == 2 {
                (LossKind::Logistic, 1usize)
            } else {
                (LossKind::Softmax, *k)
            }
        }
        FitTarget::Reals(y) => {
            if y.len() != n {
                return Err(Error::data("gbdt fit: target length mismatch"));
            }
            (LossKind::Squared, 1usize)
        }
    };
    if matches!(target, FitTarget::Classes { .. }) && n < 2 {
        return Err(Error::data("gbdt classification fit needs >= 2 rows"));
    }

    // Deterministic early-stopping holdout inside the fitting rows.
    let n_val = (n as f64 * cfg.val_fraction).floor() as usize;
    let (train_rows, val_rows): (Vec<usize>, Vec<usize>) = if n_val >= 1 && n >= 10 {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_for(seed, &[0x6b]));
        let mut val: Vec<usize> = idx[..n_val].to_vec();
        let mut train: Vec<usize> = idx[n_val..].to_vec();
        val.sort_unstable();
        train.sort_unstable();
        (train, val)
    } else {
        ((0..n).collect(), Vec::new())
    };

    let cuts = compute_cuts(x, &train_rows, cfg.n_bins);
    let binned = bin_rows(x, &cuts);

    // One-hot targets / base scores.
    let (targets, base): (Array2<f64>, Vec<f64>) = match (target, loss) {
        (FitTarget::Classes { y, .. }, LossKind::Logistic) => {
            let mut t = Array2::zeros((n, 1));
            let mut pos = 0.0;
            for (i, &label) in y.iter().enumerate() {
                let v = if label == 2 { 1.0 } else { 0.0 };
                t[[i, 0]] = v;
            }
            for &r in &train_rows {
                pos += t[[r, 0]];
            }
            let p = clamp_p(pos / train_rows.len() as f64);
            (t, vec![(p / (1.0 - p)).ln()])
        }
        (FitTarget::Classes { y, k }, LossKind::Softmax) => {
            let mut t = Array2::zeros((n, *k));
            for (i, &label) in y.iter().enumerate() {
                t[[i, (label - 1) as usize]] = 1.0;
            }
            let mut base = vec![0.0; *k];
            for &r in &train_rows {
                base[(y[r] - 1) as usize] += 1.0;
            }
            let total = train_rows.len() as f64;
            let base = base.into_iter().map(|c| clamp_p(c / total).ln()).collect();
            (t, base)
        }
        (FitTarget::Reals(y), _) => {
            let mut t = Array2::zeros((n, 1));
            for (i, &v) in y.iter().enumerate() {
                t[[i, 0]] = v;
            }
            let mut mean = 0.0;
            for &r in &train_rows {
                mean += t[[r, 0]];
            }
            mean /= train_rows.len() as f64;
            (t, vec![mean])
        }
        _ => unreachable!(),
    };

    let mut scores = Array2::zeros((n, k));
    for i in 0..n {
        for c in 0..k {
            scores[[i, c]] = base[c];
        }
    }

    let val_loss = |scores: &Array2<f64>| -> f64 {
        if val_rows.is_empty() {
            return f64::NAN;
        }
        let mut total = 0.0;
        match loss {
            LossKind::Logistic => {
                for &r in &val_rows {
                    let p = clamp_p(sigmoid(scores[[r, 0]]));
                    let t = targets[[r, 0]];
                    total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
                }
            }
            LossKind::Softmax => {
                for &r in &val_rows {
                    let row = scores.row(r);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
                    for c in 0..k {
                        if targets[[r, c]] == 1.0 {
                            total -= scores[[r, c]] - lse;
                        }
                    }
                }
            }
            LossKind::Squared => {
                for &r in &val_rows {
                    let d = scores[[r, 0]] - targets[[r, 0]];
                    total += d * d;
                }
            }
        }
        total / val_rows.len() as f64
    };

    let mut residual = vec![0.0; n];
    let mut trees: Vec<Tree> = Vec::new();
    let mut val_history: Vec<f64> = Vec::new();
    let mut best_round = 0usize;
    let mut best_loss = f64::INFINITY;

    for round in 0..cfg.max_rounds {
        // Class probabilities once per round for classification losses.
        let probs = match loss {
            LossKind::Logistic | LossKind::Squared => None,
            LossKind::Softmax => Some(softmax_rows(&scores)),
        };
        for class in 0..k {
            for &r in &train_rows {
                residual[r] = match loss {
                    LossKind::Logistic => targets[[r, 0]] - sigmoid(scores[[r, 0]]),
                    LossKind::Softmax => {
                        targets[[r, class]] - probs.as_ref().unwrap()[[r, class]]
                    }
                    LossKind::Squared => targets[[r, 0]] - scores[[r, 0]],
                };
            }
            let ctx = GrowCtx { binned: &binned, cuts: &cuts, residual: &residual, max_depth: cfg.max_depth };
            let root = if cfg.oblivious {
                grow_oblivious(&ctx, train_rows.clone())
            } else {
                grow_greedy(&ctx, train_rows.clone(), 0)
            };
            let tree = flatten(root);
            for i in 0..n {
                let row: Vec<f64> = (0..x.ncols()).map(|f| x[[i, f]]).collect();
                scores[[i, class]] += cfg.learning_rate * tree.predict_row(&row);
            }
            trees.push(tree);
        }
        if !val_rows.is_empty() {
            let loss_now = val_loss(&scores);
            val_history.push(loss_now);
            if loss_now < best_loss - 1e-12 {
                best_loss = loss_now;
                best_round = round + 1;
            } else if round + 1 - best_round >= cfg.patience {
                break;
            }
        } else {
            best_round = round + 1;
        }
    }
    if best_round == 0 {
        best_round = 1;
    }
    trees.truncate(best_round * k);
    let total_leaves = trees.iter().map(|t| t.n_leaves).sum();

    Ok(GbdtModel {
        loss,
        learning_rate: cfg.learning_rate,
        rounds: best_round,
        max_rounds: cfg.max_rounds,
        patience: cfg.patience,
        classes_per_round: k,
        trees,
        bin_edges: cuts,
        base_score: base,
        n_features: x.ncols(),
        total_leaves,
        val_history,
    })
}

/// Per-tree leaf ordinals for one row.
pub fn leaf_indices(model: &GbdtModel, x: &[f64]) -> Vec<u32> {
    model.trees.iter().map(|t| t.leaf_of(x)).collect()
}

/// Concatenated leaf one-hot embedding: N x M binary matrix with one 1 per
/// tree per row.
pub fn embed(model: &GbdtModel, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != model.n_features {
        return Err(Error::data(format!(
            "embed: {} features, model trained on {}",
            x.ncols(),
            model.n_features
        )));
    }
    let mut out = Array2::zeros((x.nrows(), model.total_leaves));
    let mut row = vec![0.0; x.ncols()];
    for i in 0..x.nrows() {
        for (f, slot) in row.iter_mut().enumerate() {
            *slot = x[[i, f]];
        }
        let mut offset = 0usize;
        for tree in &model.trees {
            let leaf = tree.leaf_of(&row) as usize;
            out[[i, offset + leaf]] = 1.0;
            offset += tree.n_leaves;
        }
    }
    Ok(out)
}

/// Raw boosted scores (base + shrunken tree sums); one column per class for
/// softmax, one column otherwise.
pub fn predict_scores(model: &GbdtModel, x: &ArrayView2<f64>) -> Array2<f64> {
    let k = model.classes_per_round;
    let mut scores = Array2::zeros((x.nrows(), k));
    for i in 0..x.nrows() {
        for c in 0..k {
            scores[[i, c]] = model.base_score[c.min(model.base_score.len() - 1)];
        }
    }
    let mut row = vec![0.0; x.ncols()];
    for i in 0..x.nrows() {
        for (f, slot) in row.iter_mut().enumerate() {
            *slot = x[[i, f]];
        }
        for (t, tree) in model.trees.iter().enumerate() {
            let class = t % k;
            scores[[i, class]] += model.learning_rate * tree.predict_row(&row);
        }
    }
    scores
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dynamic_split_small_uses_everything() {
        let s = dynamic_fit_split(1500, 7);
        assert_eq!(s.gbdt_fit.len(), 1500);
        assert_eq!(s.hypernet_pool.len(), 1500);
        assert_eq!(s.gbdt_fit, s.hypernet_pool);
    }

    #[test]
    fn dynamic_split_half_and_cap() {
        let s = dynamic_fit_split(50_000, 7);
        assert_eq!(s.gbdt_fit.len(), 25_000);
        assert_eq!(s.hypernet_pool.len(), 25_000);
        // Disjoint and covering.
        let mut all: Vec<usize> = s.gbdt_fit.iter().chain(&s.hypernet_pool).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50_000).collect::<Vec<_>>());

        let big = dynamic_fit_split(300_000, 7);
        assert_eq!(big.gbdt_fit.len(), 100_000);
        assert_eq!(big.hypernet_pool.len(), 200_000);
    }

    fn xor_data() -> (Array2<f64>, Vec<u32>) {
        let x = array![[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]];
        let y = vec![1, 1, 2, 2];
        (x, y)
    }

    #[test]
    fn xor_reaches_perfect_training_accuracy() {
        let (x, y) = xor_data();
        let cfg = GbdtConfig {
            max_rounds: 20,
            max_depth: 2,
            val_fraction: 0.0,
            ..GbdtConfig::variant_x()
        };
        let model =
            fit_gbdt(&x.view(), &FitTarget::Classes { y: &y, k: 2 }, &cfg, 3).unwrap();
        let scores = predict_scores(&model, &x.view());
        // Brute-force the ensemble on each corner: base + lr * sum of leaf
        // values reached by walking every tree by hand.
        for i in 0..4 {
            let row: Vec<f64> = (0..2).map(|f| x[[i, f]]).collect();
            let mut expect = model.base_score[0];
            for tree in &model.trees {
                let mut node = 0usize;
                while tree.feature[node] >= 0 {
                    let v = row[tree.feature[node] as usize];
                    node = if v < tree.threshold[node] {
                        tree.left[node] as usize
                    } else {
                        tree.right[node] as usize
                    };
                }
                expect += model.learning_rate * tree.value[node];
            }
            assert!((scores[[i, 0]] - expect).abs() < 1e-12);
            let predicted = if scores[[i, 0]] > 0.0 { 2 } else { 1 };
            assert_eq!(predicted, y[i], "corner {} misclassified", i);
        }
    }

    #[test]
    fn single_class_degenerates_to_one_leaf() {
        let x = array![[1.0], [2.0], [3.0]];
        let y = vec![1, 1, 1];
        let model = fit_gbdt(
            &x.view(),
            &FitTarget::Classes { y: &y, k: 2 },
            &GbdtConfig::variant_x(),
            0,
        )
        .unwrap();
        assert_eq!(model.trees.len(), 1);
        assert_eq!(model.trees[0].n_leaves, 1);
        assert_eq!(model.total_leaves, 1);
        let gamma = embed(&model, &x.view()).unwrap();
        assert_eq!(gamma, array![[1.0], [1.0], [1.0]]);
    }

    #[test]
    fn leaf_indices_of_hand_built_trees() {
        // Tree: root splits feature 0 at 0.5, left leaf ordinal 0, right 1.
        let tree = Tree {
            feature: vec![0, -1, -1],
            threshold: vec![0.5, 0.0, 0.0],
            missing_left: vec![true, true, true],
            left: vec![1, 1, 2],
            right: vec![2, 1, 2],
            value: vec![0.0, -1.0, 1.0],
            leaf_ordinal: vec![u32::MAX, 0, 1],
            n_leaves: 2,
        };
        assert_eq!(tree.leaf_of(&[0.2]), 0);
        assert_eq!(tree.leaf_of(&[0.9]), 1);
        assert_eq!(tree.leaf_of(&[f64::NAN]), 0, "missing goes left here");
        let single = Tree::single_leaf(0.0);
        assert_eq!(single.leaf_of(&[123.0]), 0);
    }

    #[test]
    fn embed_concatenates_one_hots() {
        let t2 = Tree {
            feature: vec![0, -1, -1],
            threshold: vec![0.5, 0.0, 0.0],
            missing_left: vec![true, true, true],
            left: vec![1, 1, 2],
            right: vec![2, 1, 2],
            value: vec![0.0, 0.0, 0.0],
            leaf_ordinal: vec![u32::MAX, 0, 1],
            n_leaves: 2,
        };
        // Depth-2 tree over feature 1 with 3 leaves: ordinals 0,1 under the
        // first split's left branch, 2 on the right.
        let t3 = Tree {
            feature: vec![1, 1, -1, -1, -1],
            threshold: vec![0.5, 0.25, 0.0, 0.0, 0.0],
            missing_left: vec![true, true, true, true, true],
            left: vec![1, 2, 2, 3, 4],
            right: vec![4, 3, 2, 3, 4],
            value: vec![0.0; 5],
            leaf_ordinal: vec![u32::MAX, u32::MAX, 0, 1, 2],
            n_leaves: 3,
        };
        let model = GbdtModel {
            loss: LossKind::Logistic,
            learning_rate: 0.1,
            rounds: 2,
            max_rounds: 100,
            patience: 50,
            classes_per_round: 1,
            trees: vec![t2, t3],
            bin_edges: vec![Vec::new(), Vec::new()],
            base_score: vec![0.0],
            n_features: 2,
            total_leaves: 5,
            val_history: Vec::new(),
        };
        // Row lands in leaf 1 of the first tree and leaf 0 of the second.
        let x = array![[0.9, 0.1]];
        let gamma = embed(&model, &x.view()).unwrap();
        assert_eq!(gamma, array![[0.0, 1.0, 1.0, 0.0, 0.0]]);
    }

    #[test]
    fn embed_row_sums_equal_tree_count_and_columns_count_occupancy() {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(9, &[2]);
        let n = 80;
        let mut x = Array2::zeros((n, 3));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            for j in 0..3 {
                x[[i, j]] = rng.gen_range(-2.0..2.0);
            }
            y.push(if x[[i, 0]] + x[[i, 1]] > 0.0 { 2 } else { 1 });
        }
        let cfg = GbdtConfig { max_rounds: 5, val_fraction: 0.0, ..GbdtConfig::variant_x() };
        let model = fit_gbdt(&x.view(), &FitTarget::Classes { y: &y, k: 2 }, &cfg, 1).unwrap();
        let gamma = embed(&model, &x.view()).unwrap();
        assert_eq!(gamma.ncols(), model.total_leaves);
        let t = model.trees.len() as f64;
        for row in gamma.rows() {
            assert_eq!(row.sum(), t);
        }
        // Column sums equal per-leaf occupancy counted directly.
        let mut occupancy = vec![0.0; model.total_leaves];
        for i in 0..n {
            let row: Vec<f64> = (0..3).map(|f| x[[i, f]]).collect();
            let mut offset = 0;
            for tree in &model.trees {
                occupancy[offset + tree.leaf_of(&row) as usize] += 1.0;
                offset += tree.n_leaves;
            }
        }
        for (j, &want) in occupancy.iter().enumerate() {
            assert_eq!(gamma.column(j).sum(), want);
        }
    }

    #[test]
    fn embedding_is_piecewise_constant_between_thresholds() {
        let x = array![[0.0], [1.0], [2.0], [3.0], [4.0], [5.0]];
        let y = vec![1, 1, 1, 2, 2, 2];
        let cfg = GbdtConfig { max_rounds: 3, val_fraction: 0.0, ..GbdtConfig::variant_x() };
        let model = fit_gbdt(&x.view(), &FitTarget::Classes { y: &y, k: 2 }, &cfg, 5).unwrap();
        // Collect every split threshold on feature 0.
        let mut thresholds: Vec<f64> = Vec::new();
        for tree in &model.trees {
            for (i, &f) in tree.feature.iter().enumerate() {
                if f == 0 {
                    thresholds.push(tree.threshold[i]);
                }
            }
        }
        assert!(!thresholds.is_empty());
        // Perturb a point without crossing any threshold: embedding unchanged.
        let base = 2.0;
        let eps = thresholds
            .iter()
            .map(|&t| (t - base).abs())
            .fold(f64::INFINITY, f64::min)
            * 0.5;
        assert!(eps > 0.0);
        let a = embed(&model, &array![[base]].view()).unwrap();
        let b = embed(&model, &array![[base + eps * 0.9]].view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn early_stopping_truncates_to_best_round() {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(13, &[4]);
        let n = 400;
        let mut x = Array2::zeros((n, 4));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            for j in 0..4 {
                x[[i, j]] = rng.gen_range(-1.0..1.0);
            }
            // Noisy labels force overfitting so validation loss turns.
            let clean = x[[i, 0]] > 0.0;
            let flip = rng.gen_bool(0.35);
            y.push(if clean != flip { 2 } else { 1 });
        }
        let cfg = GbdtConfig {
            max_rounds: 60,
            patience: 10,
            max_depth: 4,
            ..GbdtConfig::variant_x()
        };
        let model = fit_gbdt(&x.view(), &FitTarget::Classes { y: &y, k: 2 }, &cfg, 2).unwrap();
        assert!(!model.val_history.is_empty());
        let best = model.val_history[model.rounds - 1];
        for &earlier in &model.val_history[..model.rounds] {
            assert!(best <= earlier + 1e-12);
        }
        assert_eq!(model.trees.len(), model.rounds * model.classes_per_round);
    }

    #[test]
    fn fit_is_bit_deterministic() {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(21, &[8]);
        let n = 120;
        let mut x = Array2::zeros((n, 3));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            for j in 0..3 {
                x[[i, j]] = rng.gen_range(-1.0..1.0);
            }
            y.push(1 + ((x[[i, 2]] > 0.2) as u32) + ((x[[i, 0]] > 0.0) as u32));
        }
        let cfg = GbdtConfig { max_rounds: 8, ..GbdtConfig::variant_x() };
        let a = fit_gbdt(&x.view(), &FitTarget::Classes { y: &y, k: 3 }, &cfg, 42).unwrap();
        let b = fit_gbdt(&x.view(), &FitTarget::Classes { y: &y, k: 3 }, &cfg, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.classes_per_round, 3, "softmax grows one tree per class per round");
    }

    #[test]
    fn default_config_is_echoed_in_model() {
        let x = array![[0.0], [1.0], [0.2], [0.8], [0.4], [0.6], [0.1], [0.9], [0.3], [0.7]];
        let y = vec![1, 2, 1, 2, 1, 2, 1, 2, 1, 2];
        let model = fit_gbdt(
            &x.view(),
            &FitTarget::Classes { y: &y, k: 2 },
            &GbdtConfig::default(),
            0,
        )
        .unwrap();
        assert_eq!(model.max_rounds, 100);
        assert_eq!(model.patience, 50);
    }

    #[test]
    fn oblivious_trees_share_splits_per_level() {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(33, &[1]);
        let n = 200;
        let mut x = Array2::zeros((n, 5));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            for j in 0..5 {
                x[[i, j]] = rng.gen_range(-1.0..1.0);
            }
            y.push(if x[[i, 1]] * x[[i, 3]] > 0.0 { 2 } else { 1 });
        }
        let cfg = GbdtConfig { max_rounds: 3, val_fraction: 0.0, ..GbdtConfig::variant_c() };
        let model = fit_gbdt(&x.view(), &FitTarget::Classes { y: &y, k: 2 }, &cfg, 6).unwrap();
        for tree in &model.trees {
            // Walk levels from the root: every internal node at one depth
            // must carry the identical (feature, threshold).
            let mut level = vec![0usize];
            while !level.is_empty() {
                let internal: Vec<usize> =
                    level.iter().cloned().filter(|&i| tree.feature[i] >= 0).collect();
                if internal.is_empty() {
                    break;
                }
                let f0 = tree.feature[internal[0]];
                let t0 = tree.threshold[internal[0]];
                for &i in &internal {
                    assert_eq!(tree.feature[i], f0);
                    assert_eq!(tree.threshold[i], t0);
                }
                level = internal
                    .iter()
                    .flat_map(|&i| [tree.left[i] as usize, tree.right[i] as usize])
                    .collect();
            }
        }
    }

    #[test]
    fn missing_direction_minimizes_loss() {
        // Feature 0: missing rows all belong with the high-residual group on
        // the right, so the chosen flag must send missing right.
        let x = array![
            [0.0],
            [0.1],
            [0.2],
            [f64::NAN],
            [f64::NAN],
            [1.0],
            [1.1],
            [1.2]
        ];
        let y = vec![1, 1, 1, 2, 2, 2, 2, 2];
        let cfg = GbdtConfig {
            max_rounds: 1,
            max_depth: 1,
            val_fraction: 0.0,
            ..GbdtConfig::variant_x()
        };
        let model = fit_gbdt(&x.view(), &FitTarget::Classes { y: &y, k: 2 }, &cfg, 0).unwrap();
        let root = 0;
        assert!(model.trees[0].feature[root] >= 0);
        assert!(!model.trees[0].missing_left[root]);
        // And the NaN row indeed lands with the right-side leaf.
        let leaf_nan = model.trees[0].leaf_of(&[f64::NAN]);
        let leaf_right = model.trees[0].leaf_of(&[1.1]);
        assert_eq!(leaf_nan, leaf_right);
    }

    #[test]
    fn regression_fit_reduces_training_error() {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(44, &[0]);
        let n = 150;
        let mut x = Array2::zeros((n, 2));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            x[[i, 0]] = rng.gen_range(-2.0..2.0);
            x[[i, 1]] = rng.gen_range(-2.0..2.0);
            let v: f64 = x[[i, 0]];
            y.push(v.sin() + 0.5 * x[[i, 1]]);
        }
        let cfg = GbdtConfig { max_rounds: 30, val_fraction: 0.0, ..GbdtConfig::variant_x() };
        let model = fit_gbdt(&x.view(), &FitTarget::Reals(&y), &cfg, 0).unwrap();
        let pred = predict_scores(&model, &x.view());
        let base_err: f64 = y
            .iter()
            .map(|&t| (t - model.base_score[0]) * (t - model.base_score[0]))
            .sum::<f64>()
            / n as f64;
        let fit_err: f64 = y
            .iter()
            .enumerate()
            .map(|(i, &t)| (t - pred[[i, 0]]) * (t - pred[[i, 0]]))
            .sum::<f64>()
            / n as f64;
        assert!(fit_err < base_err * 0.3, "boosting should fit well: {} vs {}", fit_err, base_err);
    }
}
