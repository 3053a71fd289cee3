//! Synthetic task generators: Gaussian blob, XOR, and two-moons
//! classification families plus smooth nonlinear regression families, all
//! deterministic under a seed. Used by the benchmark harness and tests.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::rng::{derive_seed, rng_for};
use crate::tabular::{
    ColumnData, ColumnKind, ColumnSpec, Schema, Splits, TabularTask, TargetData, TargetKind,
};

const SYNTH_TAG: u64 = 0x53594e54;
const BLOB_TAG: u64 = 0x424c4f42;
const XOR_TAG: u64 = 0x584f5254;
const MOON_TAG: u64 = 0x4d4f4f4e;
const REG_TAG: u64 = 0x52454753;
const SPLIT_TAG: u64 = 0x53504c49;
const STYLE_TAG: u64 = 0x5354594c;

/// Fraction of rows assigned to the train split; the rest is the test split.
const TRAIN_FRACTION: f64 = 0.7;

fn assemble(
    name: &str,
    x: Array2<f64>,
    target: TargetData,
    classes: usize,
    seed: u64,
) -> Result<TabularTask> {
    let (n, d) = x.dim();
    let features = (0..d)
        .map(|j| ColumnSpec { name: format!("f{j}"), kind: ColumnKind::Numeric })
        .collect();
    let target_kind = match classes {
        0 => TargetKind::Regression,
        k => TargetKind::Classification((1..=k).map(|c| format!("c{c}")).collect()),
    };
    let schema =
        Schema { features, target_name: "target".to_string(), target: target_kind };
    let columns = (0..d)
        .map(|j| ColumnData::Numeric(x.column(j).to_vec()))
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[SYNTH_TAG, SPLIT_TAG]));
    let n_train = ((n as f64 * TRAIN_FRACTION).round() as usize).clamp(1, n - 1);
    let train = order[..n_train].to_vec();
    let test = order[n_train..].to_vec();
    let splits = Splits { train, val: Vec::new(), test };

    TabularTask::new(name.to_string(), schema, columns, target, splits)
}

/// Random per-column affine restyle: scales in exp(U[-1, 1.5]), shifts in
/// N(0, 2). Leaves task structure intact while varying feature scales so the
/// robust preprocessing has work to do.
fn restyle_columns(x: &mut Array2<f64>, seed: u64) {
    let mut rng = rng_for(seed, &[SYNTH_TAG, STYLE_TAG]);
    for mut col in x.columns_mut() {
        let scale = (rng.gen::<f64>() * 2.5 - 1.0).exp();
        let shift: f64 = 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        col.mapv_inplace(|v| v * scale + shift);
    }
}

/// Gaussian blobs: k centers drawn with spread 3.0, unit isotropic noise
/// around each, every dimension informative.
pub fn blobs(name: &str, d: usize, k: usize, n: usize, seed: u64) -> Result<TabularTask> {
    let mut rng = rng_for(seed, &[SYNTH_TAG, BLOB_TAG]);
    let mut centers = Array2::<f64>::zeros((k, d));
    for v in centers.iter_mut() {
        *v = 3.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
    }
    let mut x = Array2::<f64>::zeros((n, d));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.gen_range(0..k);
        y.push((c + 1) as u32);
        for j in 0..d {
            let noise: f64 =
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            x[[i, j]] = centers[[c, j]] + noise;
        }
    }
    restyle_columns(&mut x, seed);
    assemble(name, x, TargetData::Classes(y), k, seed)
}

/// XOR parity on the first two dimensions: the label is the sign of their
/// product; remaining dimensions are standard normal noise. Points inside a
/// small margin around the axes are pushed out so labels stay clean.
pub fn xor(name: &str, d: usize, n: usize, seed: u64) -> Result<TabularTask> {
    assert!(d >= 2, "XOR needs at least two dimensions");
    let mut rng = rng_for(seed, &[SYNTH_TAG, XOR_TAG]);
    let mut x = Array2::<f64>::zeros((n, d));
    let mut y = Vec::with_capacity(n);
    let margin = 0.15;
    for i in 0..n {
        let mut a = rng.gen::<f64>() * 2.0 - 1.0;
        let mut b = rng.gen::<f64>() * 2.0 - 1.0;
        a = a.signum() * (margin + a.abs() * (1.0 - margin));
        b = b.signum() * (margin + b.abs() * (1.0 - margin));
        x[[i, 0]] = 2.0 * a;
        x[[i, 1]] = 2.0 * b;
        for j in 2..d {
            x[[i, j]] = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        }
        y.push(if a * b > 0.0 { 1 } else { 2 });
    }
    restyle_columns(&mut x, seed);
    assemble(name, x, TargetData::Classes(y), 2, seed)
}

/// Two interleaved half-circles in the first two dimensions with Gaussian
/// noise 0.15; remaining dimensions are standard normal noise.
pub fn moons(name: &str, d: usize, n: usize, seed: u64) -> Result<TabularTask> {
    assert!(d >= 2, "moons needs at least two dimensions");
    let mut rng = rng_for(seed, &[SYNTH_TAG, MOON_TAG]);
    let mut x = Array2::<f64>::zeros((n, d));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let upper = rng.gen_range(0..2) == 0;
        let t = rng.gen::<f64>() * std::f64::consts::PI;
        let (cx, cy) = if upper {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let n0: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        let n1: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        x[[i, 0]] = cx + 0.15 * n0;
        x[[i, 1]] = cy + 0.15 * n1;
        for j in 2..d {
            x[[i, j]] = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        }
        y.push(if upper { 1 } else { 2 });
    }
    restyle_columns(&mut x, seed);
    assemble(name, x, TargetData::Classes(y), 2, seed)
}

/// Classic nonlinear benchmark target over U(0,1) features:
/// 10·sin(π·x1·x2) + 20·(x3−0.5)² + 10·x4 + 5·x5, plus noise, then an affine
/// restyle of the target so de-standardization is exercised.
pub fn friedman(
    name: &str,
    d: usize,
    n: usize,
    noise: f64,
    y_scale: f64,
    y_shift: f64,
    seed: u64,
) -> Result<TabularTask> {
    assert!(d >= 5, "the benchmark target reads five dimensions");
    let mut rng = rng_for(seed, &[SYNTH_TAG, REG_TAG, 1]);
    let mut x = Array2::<f64>::zeros((n, d));
    for v in x.iter_mut() {
        *v = rng.gen::<f64>();
    }
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let eps: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        let raw = 10.0 * (std::f64::consts::PI * x[[i, 0]] * x[[i, 1]]).sin()
            + 20.0 * (x[[i, 2]] - 0.5).powi(2)
            + 10.0 * x[[i, 3]]
            + 5.0 * x[[i, 4]]
            + noise * eps;
        y.push(raw * y_scale + y_shift);
    }
    restyle_columns(&mut x, seed);
    assemble(name, x, TargetData::Reals(y), 0, seed)
}

/// Linear target with one sinusoidal bump on the first dimension.
pub fn linear_mix(name: &str, d: usize, n: usize, noise: f64, seed: u64) -> Result<TabularTask> {
    let mut rng = rng_for(seed, &[SYNTH_TAG, REG_TAG, 2]);
    let w: Vec<f64> = (0..d)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    let mut x = Array2::<f64>::zeros((n, d));
    for v in x.iter_mut() {
        *v = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
    }
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let eps: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        let lin: f64 = (0..d).map(|j| w[j] * x[[i, j]]).sum();
        y.push(lin + 2.0 * (2.0 * x[[i, 0]]).sin() + noise * eps);
    }
    restyle_columns(&mut x, seed);
    assemble(name, x, TargetData::Reals(y), 0, seed)
}

/// Product-of-waves target on the first two dimensions plus a linear third.
pub fn sine_product(name: &str, d: usize, n: usize, noise: f64, seed: u64) -> Result<TabularTask> {
    assert!(d >= 3, "the wave target reads three dimensions");
    let mut rng = rng_for(seed, &[SYNTH_TAG, REG_TAG, 3]);
    let mut x = Array2::<f64>::zeros((n, d));
    for v in x.iter_mut() {
        *v = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
    }
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let eps: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        y.push(
            3.0 * (3.0 * x[[i, 0]]).sin() * (2.0 * x[[i, 1]]).cos()
                + 0.5 * x[[i, 2]]
                + noise * eps,
        );
    }
    restyle_columns(&mut x, seed);
    assemble(name, x, TargetData::Reals(y), 0, seed)
}

const D_CYCLE: [usize; 8] = [4, 6, 8, 12, 16, 24, 32, 64];
const N_CYCLE: [usize; 7] = [200, 300, 450, 600, 800, 1200, 2000];

/// Deterministic suite of classification tasks cycling family (blobs, XOR,
/// moons), dimension in [4, 64], class count in {2, 3, 4} for blobs, and row
/// count in [200, 2000]. Task `i` is fully determined by `(base_seed, i)`.
pub fn classification_suite(count: usize, base_seed: u64) -> Result<Vec<TabularTask>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let d = D_CYCLE[i % D_CYCLE.len()];
        let n = N_CYCLE[i % N_CYCLE.len()];
        let seed = derive_seed(base_seed, &[SYNTH_TAG, i as u64]);
        let task = match i % 3 {
            0 => {
                let k = 2 + (i / 3) % 3;
                blobs(&format!("blobs-{i:02}-d{d}-k{k}-n{n}"), d, k, n, seed)?
            }
            1 => xor(&format!("xor-{i:02}-d{d}-n{n}"), d, n, seed)?,
            _ => moons(&format!("moons-{i:02}-d{d}-n{n}"), d, n, seed)?,
        };
        out.push(task);
    }
    Ok(out)
}

/// Five regression tasks with varied dimension, size, noise, and target
/// scale. Task `i` is fully determined by `(base_seed, i)`.
pub fn regression_suite(base_seed: u64) -> Result<Vec<TabularTask>> {
    let seed = |i: u64| derive_seed(base_seed, &[SYNTH_TAG, REG_TAG, i]);
    Ok(vec![
        friedman("reg-0-friedman-d8", 8, 500, 0.5, 1.0, 0.0, seed(0))?,
        friedman("reg-1-friedman-wide", 16, 800, 1.0, 50.0, 1000.0, seed(1))?,
        linear_mix("reg-2-linear-d12", 12, 600, 0.3, seed(2))?,
        sine_product("reg-3-waves-d6", 6, 400, 0.2, seed(3))?,
        friedman("reg-4-friedman-small", 24, 1200, 2.0, 0.01, -5.0, seed(4))?,
    ])
}

/// Three tiny classification tasks for end-to-end configuration smoke runs.
pub fn smoke_suite(base_seed: u64) -> Result<Vec<TabularTask>> {
    let seed = |i: u64| derive_seed(base_seed, &[SYNTH_TAG, 0x534d4f4b, i]);
    Ok(vec![
        blobs("smoke-blobs-d8-k3", 8, 3, 300, seed(0))?,
        xor("smoke-xor-d6", 6, 300, seed(1))?,
        moons("smoke-moons-d6", 6, 300, seed(2))?,
    ])
}
