//! Reverse-mode differentiation over the fixed operator set the architecture
//! uses: affine maps, rectifier, concatenation, pooling (global, per-group,
//! per-class-with-fallback), residual addition, row normalization, dropout,
//! and the two losses. Includes a central finite-difference oracle.
//!
//! All tensors are dense f64 matrices; vectors travel as 1×d rows. A tape is
//! single-threaded; independent tapes may run concurrently.

use crate::error::{Error, Result};
use crate::linalg::{pairwise_col_mean, pairwise_sum};
use crate::rng::rng_for;
use ndarray::{s, Array2};
use rand::Rng;

const ROWNORM_EPS: f64 = 1e-12;
const DROPOUT_TAG: u64 = 0x44524f50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    /// x·wᵀ + 1bᵀ, with w: out×in and b: 1×out.
    Affine { x: NodeId, w: NodeId, b: NodeId },
    MatMul { a: NodeId, b: NodeId },
    MatMulTransB { a: NodeId, b: NodeId },
    Relu { x: NodeId },
    Dropout { x: NodeId, mask: Array2<f64> },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { x: NodeId, from: usize, to: usize },
    Reshape { x: NodeId },
    Transpose { x: NodeId },
    MeanRows { x: NodeId },
    RepeatRows { x: NodeId },
    /// Row i of the output is the mean of x over rows sharing labels[i].
    GatherGroupMean { x: NodeId, labels: Vec<u32> },
    /// Row k-1 of the output is the mean of x over rows with label k, or the
    /// global row mean when class k is absent.
    ClassMeansOrGlobal { x: NodeId, labels: Vec<u32>, k: usize },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    RowL2Normalize { x: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, targets: Array2<f64>, probs: Array2<f64> },
    MseLoss { pred: NodeId, target: Array2<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Array2<f64>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, op: Op, value: Array2<f64>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    /// Mark a tensor as a differentiable parameter.
    pub fn param(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Param, value, true)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(xv.ncols(), wv.ncols(), "affine fan-in mismatch");
        assert_eq!(bv.nrows(), 1);
        assert_eq!(bv.ncols(), wv.nrows());
        let mut out = xv.dot(&wv.t());
        for mut row in out.rows_mut() {
            row += &bv.row(0);
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Affine { x, w, b }, out, ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul { a, b }, out, ng)
    }

    pub fn matmul_trans_b(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMulTransB { a, b }, out, ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(Op::Relu { x }, out, ng)
    }

    /// Inverted dropout: kept entries scale by 1/(1-p). The mask is sampled
    /// at record time from (seed), so rebuilding the tape with the same seed
    /// reproduces it exactly. p=0 is the identity.
    pub fn dropout(&mut self, x: NodeId, p: f64, seed: u64) -> NodeId {
        assert!((0.0..1.0).contains(&p));
        let shape = self.nodes[x.0].value.dim();
        let mask = if p == 0.0 {
            Array2::ones(shape)
        } else {
            let mut rng = rng_for(seed, &[DROPOUT_TAG]);
            let keep = 1.0 - p;
            Array2::from_shape_fn(shape, |_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
        };
        let out = &self.nodes[x.0].value * &mask;
        let ng = self.needs(x);
        self.push(Op::Dropout { x, mask }, out, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].0].value.nrows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.ncols()).sum();
        let mut out = Array2::zeros((n, total));
        let mut at = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.nrows(), n, "concat_cols row mismatch");
            out.slice_mut(s![.., at..at + v.ncols()]).assign(v);
            at += v.ncols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatCols { parts: parts.to_vec() }, out, ng)
    }

    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let v = &self.nodes[x.0].value;
        assert!(from < to && to <= v.ncols());
        let out = v.slice(s![.., from..to]).to_owned();
        let ng = self.needs(x);
        self.push(Op::SliceCols { x, from, to }, out, ng)
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = &self.nodes[x.0].value;
        assert_eq!(v.len(), rows * cols, "reshape element count mismatch");
        let flat: Vec<f64> = v.iter().cloned().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).unwrap();
        let ng = self.needs(x);
        self.push(Op::Reshape { x }, out, ng)
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.t().to_owned();
        let ng = self.needs(x);
        self.push(Op::Transpose { x }, out, ng)
    }

    /// Column means as a 1×d row, pairwise-summed so row order perturbs the
    /// result only at rounding scale.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let mean = pairwise_col_mean(&v.view());
        let out = mean.insert_axis(ndarray::Axis(0));
        let ng = self.needs(x);
        self.push(Op::MeanRows { x }, out, ng)
    }

    pub fn repeat_rows(&mut self, x: NodeId, n: usize) -> NodeId {
        let v = &self.nodes[x.0].value;
        assert_eq!(v.nrows(), 1);
        let mut out = Array2::zeros((n, v.ncols()));
        for mut row in out.rows_mut() {
            row.assign(&v.row(0));
        }
        let ng = self.needs(x);
        self.push(Op::RepeatRows { x }, out, ng)
    }

    pub fn gather_group_mean(&mut self, x: NodeId, labels: &[u32]) -> NodeId {
        let v = &self.nodes[x.0].value;
        assert_eq!(v.nrows(), labels.len());
        let out = gather_group_mean_value(v, labels);
        let ng = self.needs(x);
        self.push(Op::GatherGroupMean { x, labels: labels.to_vec() }, out, ng)
    }

    pub fn class_means_or_global(&mut self, x: NodeId, labels: &[u32], k: usize) -> NodeId {
        let v = &self.nodes[x.0].value;
        assert_eq!(v.nrows(), labels.len());
        assert!(k >= 1);
        let out = class_means_value(v, labels, k);
        let ng = self.needs(x);
        self.push(Op::ClassMeansOrGlobal { x, labels: labels.to_vec(), k }, out, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add { a, b }, out, ng)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.nodes[x.0].value.mapv(|v| v * c);
        let ng = self.needs(x);
        self.push(Op::Scale { x, c }, out, ng)
    }

    pub fn row_l2_normalize(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let mut out = v.clone();
        for mut row in out.rows_mut() {
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            let denom = norm + ROWNORM_EPS;
            row.mapv_inplace(|a| a / denom);
        }
        let ng = self.needs(x);
        self.push(Op::RowL2Normalize { x }, out, ng)
    }

    /// Mean over rows of −Σ_k y_k log softmax(logits)_k, log-sum-exp
    /// stabilized. `targets` rows must be one-hot.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: Array2<f64>) -> NodeId {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.dim(), targets.dim());
        let b = lv.nrows();
        let mut probs = Array2::zeros(lv.dim());
        let mut total = 0.0;
        for i in 0..b {
            let row = lv.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..lv.ncols() {
                probs[[i, j]] = (lv[[i, j]] - lse).exp();
            }
            let picked: f64 = (0..lv.ncols()).map(|j| targets[[i, j]] * lv[[i, j]]).sum();
            total += lse - picked;
        }
        let out = Array2::from_elem((1, 1), total / b as f64);
        let ng = self.needs(logits);
        self.push(Op::SoftmaxCrossEntropy { logits, targets, probs }, out, ng)
    }

    /// Mean of squared residuals over all entries.
    pub fn mse_loss(&mut self, pred: NodeId, target: Array2<f64>) -> NodeId {
        let pv = &self.nodes[pred.0].value;
        assert_eq!(pv.dim(), target.dim());
        let n = pv.len() as f64;
        let total: f64 = pv.iter().zip(target.iter()).map(|(p, y)| (p - y) * (p - y)).sum();
        let out = Array2::from_elem((1, 1), total / n);
        let ng = self.needs(pred);
        self.push(Op::MseLoss { pred, target }, out, ng)
    }

    /// Reverse pass from a scalar loss. Clears previous gradients first, so
    /// repeated calls are bit-identical.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.dim() != (1, 1) {
            return Err(Error::numeric("backward requires a 1×1 loss node"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].clone() else { continue };
            let contribs = self.local_grads(i, &g);
            for (j, c) in contribs {
                if !self.nodes[j].needs_grad {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => *acc += &c,
                    slot @ None => *slot = Some(c),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward() loss w.r.t. a marked parameter.
    pub fn grad(&self, id: NodeId) -> Result<&Array2<f64>> {
        match self.nodes[id.0].op {
            Op::Param => {}
            _ => return Err(Error::numeric("gradient requested for a non-parameter node")),
        }
        match &self.grads.get(id.0) {
            Some(Some(g)) => Ok(g),
            _ => Err(Error::numeric("no gradient recorded; run backward first")),
        }
    }

    fn local_grads(&self, i: usize, g: &Array2<f64>) -> Vec<(usize, Array2<f64>)> {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Constant | Op::Param => vec![],
            Op::Affine { x, w, b } => {
                let dx = g.dot(val(*w));
                let dw = g.t().dot(val(*x));
                let db = g
                    .sum_axis(ndarray::Axis(0))
                    .insert_axis(ndarray::Axis(0));
                vec![(x.0, dx), (w.0, dw), (b.0, db)]
            }
            Op::MatMul { a, b } => {
                let da = g.dot(&val(*b).t());
                let db = val(*a).t().dot(g);
                vec![(a.0, da), (b.0, db)]
            }
            Op::MatMulTransB { a, b } => {
                let da = g.dot(val(*b));
                let db = g.t().dot(val(*a));
                vec![(a.0, da), (b.0, db)]
            }
            Op::Relu { x } => {
                let mask = val(*x).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                vec![(x.0, g * &mask)]
            }
            Op::Dropout { x, mask } => vec![(x.0, g * mask)],
            Op::ConcatCols { parts } => {
                let mut out = Vec::with_capacity(parts.len());
                let mut at = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    out.push((p.0, g.slice(s![.., at..at + w]).to_owned()));
                    at += w;
                }
                out
            }
            Op::SliceCols { x, from, to } => {
                let mut dx = Array2::zeros(val(*x).dim());
                dx.slice_mut(s![.., *from..*to]).assign(g);
                vec![(x.0, dx)]
            }
            Op::Reshape { x } => {
                let dim = val(*x).dim();
                let flat: Vec<f64> = g.iter().cloned().collect();
                vec![(x.0, Array2::from_shape_vec(dim, flat).unwrap())]
            }
            Op::Transpose { x } => vec![(x.0, g.t().to_owned())],
            Op::MeanRows { x } => {
                let n = val(*x).nrows();
                let mut dx = Array2::zeros(val(*x).dim());
                let scaled = g.row(0).mapv(|v| v / n as f64);
                for mut row in dx.rows_mut() {
                    row.assign(&scaled);
                }
                vec![(x.0, dx)]
            }
            Op::RepeatRows { x } => {
                let db = g.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
                vec![(x.0, db)]
            }
            Op::GatherGroupMean { x, labels } => {
                // Row j receives (sum of g over j's group) / group size.
                let mut dx = Array2::zeros(val(*x).dim());
                let mut seen: Vec<u32> = labels.to_vec();
                seen.sort_unstable();
                seen.dedup();
                for lbl in seen {
                    let members: Vec<usize> =
                        (0..labels.len()).filter(|&j| labels[j] == lbl).collect();
                    let inv = 1.0 / members.len() as f64;
                    let mut sum = Array2::zeros((1, g.ncols()));
                    for &j in &members {
                        let mut r = sum.row_mut(0);
                        r += &g.row(j);
                    }
                    for &j in &members {
                        let mut r = dx.row_mut(j);
                        r.assign(&sum.row(0).mapv(|v| v * inv));
                    }
                }
                vec![(x.0, dx)]
            }
            Op::ClassMeansOrGlobal { x, labels, k } => {
                let n = labels.len();
                let mut dx = Array2::zeros(val(*x).dim());
                for c in 1..=*k {
                    let members: Vec<usize> =
                        (0..n).filter(|&j| labels[j] == c as u32).collect();
                    let grow = g.row(c - 1);
                    if members.is_empty() {
                        let inv = 1.0 / n as f64;
                        for j in 0..n {
                            let mut r = dx.row_mut(j);
                            r += &grow.mapv(|v| v * inv);
                        }
                    } else {
                        let inv = 1.0 / members.len() as f64;
                        for &j in &members {
                            let mut r = dx.row_mut(j);
                            r += &grow.mapv(|v| v * inv);
                        }
                    }
                }
                vec![(x.0, dx)]
            }
            Op::Add { a, b } => vec![(a.0, g.clone()), (b.0, g.clone())],
            Op::Scale { x, c } => vec![(x.0, g.mapv(|v| v * c))],
            Op::RowL2Normalize { x } => {
                let xv = val(*x);
                let mut dx = Array2::zeros(xv.dim());
                for i in 0..xv.nrows() {
                    let row = xv.row(i);
                    let grow = g.row(i);
                    let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let denom = norm + ROWNORM_EPS;
                    let dot: f64 = grow.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..xv.ncols() {
                        let mut d = grow[j] / denom;
                        if norm > 0.0 {
                            d -= row[j] * dot / (norm * denom * denom);
                        }
                        dx[[i, j]] = d;
                    }
                }
                vec![(x.0, dx)]
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let b = probs.nrows() as f64;
                let dl = (probs - targets).mapv(|v| v / b) * g[[0, 0]];
                vec![(logits.0, dl)]
            }
            Op::MseLoss { pred, target } => {
                let n = val(*pred).len() as f64;
                let dp = (val(*pred) - target).mapv(|v| 2.0 * v / n * g[[0, 0]]);
                vec![(pred.0, dp)]
            }
        }
    }
}

fn gather_group_mean_value(v: &Array2<f64>, labels: &[u32]) -> Array2<f64> {
    let mut out = Array2::zeros(v.dim());
    let mut seen: Vec<u32> = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    for lbl in seen {
        let members: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] == lbl).collect();
        for col in 0..v.ncols() {
            let vals: Vec<f64> = members.iter().map(|&j| v[[j, col]]).collect();
            let mean = pairwise_sum(&vals) / vals.len() as f64;
            for &j in &members {
                out[[j, col]] = mean;
            }
        }
    }
    out
}

fn class_means_value(v: &Array2<f64>, labels: &[u32], k: usize) -> Array2<f64> {
    let mut out = Array2::zeros((k, v.ncols()));
    let global = pairwise_col_mean(&v.view());
    for c in 1..=k {
        let members: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] == c as u32).collect();
        if members.is_empty() {
            out.row_mut(c - 1).assign(&global);
        } else {
            for col in 0..v.ncols() {
                let vals: Vec<f64> = members.iter().map(|&j| v[[j, col]]).collect();
                out[[c - 1, col]] = pairwise_sum(&vals) / vals.len() as f64;
            }
        }
    }
    out
}

/// Max relative error between `analytic` and central finite differences of
/// `f` at `p`, probing every coordinate with the given step.
pub fn finite_diff_max_rel_error<F>(f: F, p: &[f64], analytic: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    finite_diff_max_rel_error_floored(f, p, analytic, step, 1e-8)
}

/// Central-difference check with an explicit denominator floor. Components
/// whose gradient magnitude sits below the floor are judged in absolute
/// units against it, which keeps double-precision round-off in the function
/// evaluations from dominating the reported error.
pub fn finite_diff_max_rel_error_floored<F>(
    mut f: F,
    p: &[f64],
    analytic: &[f64],
    step: f64,
    floor: f64,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(p.len(), analytic.len());
    let mut work = p.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = work[i];
        work[i] = orig + step;
        let fp = f(&work);
        work[i] = orig - step;
        let fm = f(&work);
        work[i] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let denom = fd.abs().max(analytic[i].abs()).max(floor);
        worst = worst.max((fd - analytic[i]).abs() / denom);
    }
    worst
}
