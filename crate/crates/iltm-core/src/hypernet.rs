//! The weight-generating hypernetwork, the generated 3-layer main network,
//! and retrieval-augmented logits.
//!
//! Generation runs on a `Tape`, so the meta-objective can differentiate
//! through it into the hypernetwork parameters; with constant inputs the same
//! graph doubles as the inference path. Layer weights are generated
//! sequentially: each layer's block sees the previous activations, the
//! projected inputs, the label block, and global plus per-class activation
//! means; pooled block outputs feed a linear head that is reshaped into the
//! layer's weight and bias (weights scaled by 1/sqrt(fan_in)). The last layer
//! pools per-sample head outputs per class, absent classes falling back to
//! the global mean.

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tape::{NodeId, Tape};
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

pub const MAIN_LAYERS: usize = 3;
const HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HyperDims {
    pub d_main: usize,
    pub h: usize,
    pub k_max: usize,
}

impl HyperDims {
    /// Width of the per-sample conditioning vector:
    /// [a_prev ‖ x̃ ‖ label block ‖ global mean ‖ class mean].
    pub fn u_width(&self) -> usize {
        4 * self.d_main + self.k_max
    }

    /// Head output width for a layer (1-based).
    pub fn head_width(&self, layer: usize) -> usize {
        if layer < MAIN_LAYERS {
            self.d_main * (self.d_main + 1)
        } else {
            self.d_main + 1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub block_w1: Array2<f64>,
    pub block_b1: Array2<f64>,
    pub block_w2: Array2<f64>,
    pub block_b2: Array2<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperNetParams {
    pub dims: HyperDims,
    pub layers: Vec<LayerParams>,
}

impl HyperNetParams {
    pub fn init(dims: HyperDims, seed: u64) -> HyperNetParams {
        let mut layers = Vec::with_capacity(MAIN_LAYERS);
        for layer in 1..=MAIN_LAYERS {
            let u = dims.u_width();
            let out = dims.head_width(layer);
            let normal = |rows: usize, cols: usize, std: f64, tag: u64| {
                let mut rng = rng_for(seed, &[layer as u64, tag]);
                Array2::from_shape_fn((rows, cols), |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
            };
            layers.push(LayerParams {
                block_w1: normal(dims.h, u, (2.0 / u as f64).sqrt(), 1),
                block_b1: Array2::zeros((1, dims.h)),
                block_w2: normal(dims.h, dims.h, (2.0 / dims.h as f64).sqrt(), 2),
                block_b2: Array2::zeros((1, dims.h)),
                head_w: normal(out, dims.h, HEAD_INIT_SCALE / (dims.h as f64).sqrt(), 3),
                head_b: Array2::zeros((1, out)),
            });
        }
        HyperNetParams { dims, layers }
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.tensors())
            .map(|t| t.len())
            .sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            for t in l.tensors() {
                out.extend(t.iter());
            }
        }
        out
    }

    pub fn from_flat(dims: HyperDims, flat: &[f64]) -> Result<HyperNetParams> {
        let mut template = HyperNetParams::init(dims, 0);
        let mut at = 0;
        for l in &mut template.layers {
            for t in l.tensors_mut() {
                let n = t.len();
                if at + n > flat.len() {
                    return Err(Error::data("flat parameter vector too short"));
                }
                for (dst, src) in t.iter_mut().zip(&flat[at..at + n]) {
                    *dst = *src;
                }
                at += n;
            }
        }
        if at != flat.len() {
            return Err(Error::data("flat parameter vector length mismatch"));
        }
        Ok(template)
    }
}

impl LayerParams {
    pub fn tensors(&self) -> [&Array2<f64>; 6] {
        [
            &self.block_w1,
            &self.block_b1,
            &self.block_w2,
            &self.block_b2,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f64>; 6] {
        [
            &mut self.block_w1,
            &mut self.block_b1,
            &mut self.block_w2,
            &mut self.block_b2,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }
}

/// Generated main-network weights. Biases are 1×width rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MainNetParams {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub w3: Array2<f64>,
    pub b3: Array2<f64>,
}

impl MainNetParams {
    pub fn d(&self) -> usize {
        self.w1.nrows()
    }

    pub fn k(&self) -> usize {
        self.w3.nrows()
    }

    pub fn zeros(d: usize, k: usize) -> MainNetParams {
        MainNetParams {
            w1: Array2::zeros((d, d)),
            b1: Array2::zeros((1, d)),
            w2: Array2::zeros((d, d)),
            b2: Array2::zeros((1, d)),
            w3: Array2::zeros((k, d)),
            b3: Array2::zeros((1, k)),
        }
    }

    pub fn tensors(&self) -> [&Array2<f64>; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.iter().cloned()).collect()
    }

    pub fn from_flat(d: usize, k: usize, flat: &[f64]) -> Result<MainNetParams> {
        let mut out = MainNetParams::zeros(d, k);
        let mut at = 0;
        for t in [
            &mut out.w1,
            &mut out.b1,
            &mut out.w2,
            &mut out.b2,
            &mut out.w3,
            &mut out.b3,
        ] {
            let n = t.len();
            if at + n > flat.len() {
                return Err(Error::data("flat weight vector too short"));
            }
            for (dst, src) in t.iter_mut().zip(&flat[at..at + n]) {
                *dst = *src;
            }
            at += n;
        }
        if at != flat.len() {
            return Err(Error::data("flat weight vector length mismatch"));
        }
        Ok(out)
    }
}

/// Hypernetwork tensors registered on a tape (as trainable parameters for
/// meta-training, constants for inference).
#[derive(Debug, Clone)]
pub struct HyperNodes {
    pub layers: Vec<[NodeId; 6]>,
}

pub fn put_hypernet_on_tape(tape: &mut Tape, phi: &HyperNetParams, trainable: bool) -> HyperNodes {
    let mut layers = Vec::with_capacity(phi.layers.len());
    for l in &phi.layers {
        let mut ids = [NodeId::default(); 6];
        for (slot, t) in ids.iter_mut().zip(l.tensors()) {
            *slot = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
        }
        layers.push(ids);
    }
    HyperNodes { layers }
}

/// Main-network tensors as tape nodes (usually produced by generation).
#[derive(Debug, Clone, Copy)]
pub struct MainNetNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
}

pub fn put_main_net_on_tape(tape: &mut Tape, theta: &MainNetParams, trainable: bool) -> MainNetNodes {
    let mut put = |t: &Array2<f64>| {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    MainNetNodes {
        w1: put(&theta.w1),
        b1: put(&theta.b1),
        w2: put(&theta.w2),
        b2: put(&theta.b2),
        w3: put(&theta.w3),
        b3: put(&theta.b3),
    }
}

pub fn main_net_from_tape(tape: &Tape, nodes: &MainNetNodes) -> MainNetParams {
    MainNetParams {
        w1: tape.value(nodes.w1).clone(),
        b1: tape.value(nodes.b1).clone(),
        w2: tape.value(nodes.w2).clone(),
        b2: tape.value(nodes.b2).clone(),
        w3: tape.value(nodes.w3).clone(),
        b3: tape.value(nodes.b3).clone(),
    }
}

/// How the last layer pools per-sample head outputs.
#[derive(Debug, Clone)]
pub enum FinalPool<'a> {
    /// One output row per class; classes absent from the generation set fall
    /// back to the global mean.
    Classes { labels: &'a [u32], k: usize },
    /// Single output row: the batch mean (regression transfer).
    BatchMean,
}

/// Inputs to weight generation, already on the tape.
#[derive(Debug, Clone)]
pub struct GenerationInput<'a> {
    /// Projected generation rows, n×d_main.
    pub x_gen: NodeId,
    /// Label block, n×k_max: padded one-hot for classification, the
    /// standardized target in column 0 for regression.
    pub label_block: NodeId,
    /// Grouping for the per-class activation means in the conditioning
    /// vector (all-equal for regression).
    pub pool_labels: &'a [u32],
    pub final_pool: FinalPool<'a>,
}

/// Generate the three main-network layers sequentially on the tape.
pub fn generate_on_tape(
    tape: &mut Tape,
    phi_nodes: &HyperNodes,
    dims: &HyperDims,
    input: &GenerationInput,
) -> Result<MainNetNodes> {
    let n = tape.value(input.x_gen).nrows();
    if n == 0 {
        return Err(Error::data("weight generation needs at least one row"));
    }
    if tape.value(input.x_gen).ncols() != dims.d_main {
        return Err(Error::data("generation input width does not match d_main"));
    }
    if tape.value(input.label_block).dim() != (n, dims.k_max) {
        return Err(Error::data("label block shape mismatch"));
    }
    if input.pool_labels.len() != n {
        return Err(Error::data("pool label length mismatch"));
    }
    if let FinalPool::Classes { labels, k } = &input.final_pool {
        if *k == 0 {
            return Err(Error::config(
                "class-pooled generation needs k >= 1; use regression adaptation for k = 0",
            ));
        }
        if labels.len() != n {
            return Err(Error::data("final pool label length mismatch"));
        }
    }

    let d = dims.d_main;
    let scale_w = 1.0 / (d as f64).sqrt();
    let x = input.x_gen;
    let mut a_prev = x;
    let mut generated: Vec<(NodeId, NodeId)> = Vec::with_capacity(MAIN_LAYERS);

    for (layer_idx, ids) in phi_nodes.layers.iter().enumerate() {
        let layer = layer_idx + 1;
        let [bw1, bb1, bw2, bb2, hw, hb] = *ids;

        let gm = tape.mean_rows(a_prev);
        let gm = tape.repeat_rows(gm, n);
        let cm = tape.gather_group_mean(a_prev, input.pool_labels);
        let u = tape.concat_cols(&[a_prev, x, input.label_block, gm, cm]);
        let v = tape.affine(u, bw1, bb1);
        let v = tape.relu(v);
        let v = tape.affine(v, bw2, bb2);
        let v = tape.relu(v);

        if layer < MAIN_LAYERS {
            let z = tape.mean_rows(v);
            let head = tape.affine(z, hw, hb);
            let wflat = tape.slice_cols(head, 0, d * d);
            let w = tape.reshape(wflat, d, d);
            let w = tape.scale(w, scale_w);
            let b = tape.slice_cols(head, d * d, d * d + d);
            generated.push((w, b));

            let pre = tape.affine(a_prev, w, b);
            let act = tape.relu(pre);
            a_prev = if layer == MAIN_LAYERS - 1 {
                tape.add(act, x)
            } else {
                act
            };
        } else {
            let heads = tape.affine(v, hw, hb);
            let pooled = match &input.final_pool {
                FinalPool::Classes { labels, k } => {
                    tape.class_means_or_global(heads, labels, *k)
                }
                FinalPool::BatchMean => tape.mean_rows(heads),
            };
            let w = tape.slice_cols(pooled, 0, d);
            let w = tape.scale(w, scale_w);
            let bcol = tape.slice_cols(pooled, d, d + 1);
            let b = tape.transpose(bcol);
            generated.push((w, b));
        }
    }

    let nodes = MainNetNodes {
        w1: generated[0].0,
        b1: generated[0].1,
        w2: generated[1].0,
        b2: generated[1].1,
        w3: generated[2].0,
        b3: generated[2].1,
    };
    for id in [nodes.w1, nodes.b1, nodes.w2, nodes.b2, nodes.w3, nodes.b3] {
        if !tape.value(id).iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("generated weights contain non-finite values"));
        }
    }
    Ok(nodes)
}

/// Convenience wrapper: generate concrete weights outside any caller tape.
pub fn generate_weights(
    phi: &HyperNetParams,
    x_gen: &Array2<f64>,
    labels: &[u32],
    k: usize,
) -> Result<MainNetParams> {
    let mut tape = Tape::new();
    let phi_nodes = put_hypernet_on_tape(&mut tape, phi, false);
    let x = tape.constant(x_gen.clone());
    let block = tape.constant(one_hot_padded(labels, phi.dims.k_max)?);
    let input = GenerationInput {
        x_gen: x,
        label_block: block,
        pool_labels: labels,
        final_pool: FinalPool::Classes { labels, k },
    };
    let nodes = generate_on_tape(&mut tape, &phi_nodes, &phi.dims, &input)?;
    Ok(main_net_from_tape(&tape, &nodes))
}

/// One-hot labels (1-based classes) padded to k_max columns.
pub fn one_hot_padded(labels: &[u32], k_max: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((labels.len(), k_max));
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 || l as usize > k_max {
            return Err(Error::data(format!(
                "label {} outside 1..={} for the label block",
                l, k_max
            )));
        }
        out[[i, l as usize - 1]] = 1.0;
    }
    Ok(out)
}

/// Main-network forward pass on the tape:
/// a1 = relu(x·W1ᵀ+b1); H = relu(a1·W2ᵀ+b2) + x; logits = H·W3ᵀ+b3.
pub fn forward_main_on_tape(
    tape: &mut Tape,
    theta: &MainNetNodes,
    x: NodeId,
) -> (NodeId, NodeId) {
    let a1 = tape.affine(x, theta.w1, theta.b1);
    let a1 = tape.relu(a1);
    let pre2 = tape.affine(a1, theta.w2, theta.b2);
    let act2 = tape.relu(pre2);
    let h = tape.add(act2, x);
    let logits = tape.affine(h, theta.w3, theta.b3);
    (h, logits)
}

/// Plain forward pass: returns (H, logits).
pub fn forward_main(theta: &MainNetParams, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mut a1 = x.dot(&theta.w1.t());
    for mut row in a1.rows_mut() {
        row += &theta.b1.row(0);
    }
    a1.mapv_inplace(|v| v.max(0.0));
    let mut h = a1.dot(&theta.w2.t());
    for mut row in h.rows_mut() {
        row += &theta.b2.row(0);
    }
    h.mapv_inplace(|v| v.max(0.0));
    h += x;
    let mut logits = h.dot(&theta.w3.t());
    for mut row in logits.rows_mut() {
        row += &theta.b3.row(0);
    }
    (h, logits)
}

fn row_normalized(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-12;
        row.mapv_inplace(|v| v / norm);
    }
    out
}

/// Retrieval logits: cosine similarities against the context, temperature
/// scaled, aggregated over one-hot context labels.
pub fn retrieval_logits(
    h_q: &Array2<f64>,
    h_c: &Array2<f64>,
    y_c: &Array2<f64>,
    tau: f64,
) -> Result<Array2<f64>> {
    if h_c.nrows() == 0 {
        return Err(Error::data("retrieval needs a non-empty context"));
    }
    if tau <= 0.0 {
        return Err(Error::config("retrieval temperature must be positive"));
    }
    let s = row_normalized(h_q).dot(&row_normalized(h_c).t());
    Ok(s.dot(y_c).mapv(|v| v / tau))
}

/// Same computation recorded on a tape (context labels stay constant).
pub fn retrieval_logits_on_tape(
    tape: &mut Tape,
    h_q: NodeId,
    h_c: NodeId,
    y_c: Array2<f64>,
    tau: f64,
) -> NodeId {
    let nq = tape.row_l2_normalize(h_q);
    let nc = tape.row_l2_normalize(h_c);
    let sim = tape.matmul_trans_b(nq, nc);
    let yc = tape.constant(y_c);
    let o = tape.matmul(sim, yc);
    tape.scale(o, 1.0 / tau)
}

/// O = (1-α)·net + α·ret. The endpoints return the input unchanged, so α=0
/// is bit-identical to the main network and α=1 to pure retrieval.
pub fn combined_logits(
    net: &Array2<f64>,
    ret: &Array2<f64>,
    alpha: f64,
) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("retrieval mixing weight must lie in [0, 1]"));
    }
    if alpha == 0.0 {
        return Ok(net.clone());
    }
    if alpha == 1.0 {
        return Ok(ret.clone());
    }
    Ok(net.mapv(|v| v * (1.0 - alpha)) + ret.mapv(|v| v * alpha))
}

pub fn combined_logits_on_tape(
    tape: &mut Tape,
    net: NodeId,
    ret: NodeId,
    alpha: f64,
) -> NodeId {
    if alpha == 0.0 {
        return net;
    }
    if alpha == 1.0 {
        return ret;
    }
    let a = tape.scale(net, 1.0 - alpha);
    let b = tape.scale(ret, alpha);
    tape.add(a, b)
}
