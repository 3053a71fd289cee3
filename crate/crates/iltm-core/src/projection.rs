//! Fixed-size embedding tail: random-feature expansion of ψ, PCA reduction,
//! and per-column standardization, producing x̃ ∈ R^{d_main}.
//!
//! Ω is never stored densely: each of its r columns is regenerated from
//! (seed, column index), so files carry only the seed and shape, and the
//! expansion streams over column blocks regardless of block size.

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::rng::rng_for;
use ndarray::{s, Array1, Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};

pub const DEFAULT_R: usize = 1 << 15;
pub const DEFAULT_D_MAIN: usize = 512;
pub const PROJECTION_EPS: f64 = 1e-6;

const OMEGA_TAG: u64 = 0x4f4d_4547;
const BLOCK: usize = 256;
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub seed: u64,
    pub m: usize,
    pub r: usize,
    pub d_main: usize,
    /// Column means of the rectified random features on the fit batch.
    pub mu_rf: Array1<f64>,
    /// PCA basis, r × d_main; columns past `rank` are zero.
    pub u: Array2<f64>,
    pub col_mean: Array1<f64>,
    pub col_std: Array1<f64>,
    pub eps: f64,
    pub rank: usize,
}

/// One column block of Ω (m × width), entries N(0, 2/r). Column `j` depends
/// only on (seed, j, m, r), never on how columns are grouped into blocks.
fn omega_block(seed: u64, m: usize, r: usize, j0: usize, width: usize) -> Array2<f64> {
    let std = (2.0 / r as f64).sqrt();
    let mut out = Array2::zeros((m, width));
    for c in 0..width {
        let mut rng = rng_for(seed, &[OMEGA_TAG, (j0 + c) as u64]);
        for i in 0..m {
            let z: f64 = StandardNormal.sample(&mut rng);
            out[[i, c]] = z * std;
        }
    }
    out
}

fn relu_in_place(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

/// Centered rectified features for one column block of the given input.
fn centered_block(
    psi: &ArrayView2<f64>,
    seed: u64,
    m: usize,
    r: usize,
    j0: usize,
    width: usize,
    mu_rf: Option<&Array1<f64>>,
) -> (Array2<f64>, Array1<f64>) {
    let omega = omega_block(seed, m, r, j0, width);
    let mut a = psi.dot(&omega);
    relu_in_place(&mut a);
    let mu = match mu_rf {
        Some(mu) => mu.slice(s![j0..j0 + width]).to_owned(),
        None => {
            let n = a.nrows() as f64;
            Array1::from_iter(a.columns().into_iter().map(|c| c.sum() / n))
        }
    };
    for mut row in a.rows_mut() {
        row -= &mu;
    }
    (a, mu)
}

/// Fit the random-feature + PCA + standardization tail on `psi_fit`.
pub fn fit_projection(
    psi_fit: &ArrayView2<f64>,
    r: usize,
    d_main: usize,
    seed: u64,
) -> Result<ProjectionParams> {
    let n = psi_fit.nrows();
    let m = psi_fit.ncols();
    if n < 2 {
        return Err(Error::data(format!("fit_projection needs at least 2 rows, got {}", n)));
    }
    if r == 0 || d_main == 0 {
        return Err(Error::config("projection widths must be positive"));
    }

    let mut mu_rf = Array1::zeros(r);
    let mut u = Array2::zeros((r, d_main));
    let (eigvals, projected) = if n < r {
        // Dual path: eigendecompose the N×N Gram matrix of the centered
        // features, accumulated block by block.
        let mut gram = Array2::zeros((n, n));
        let mut j0 = 0;
        while j0 < r {
            let width = BLOCK.min(r - j0);
            let (b, mu) = centered_block(psi_fit, seed, m, r, j0, width, None);
            mu_rf.slice_mut(s![j0..j0 + width]).assign(&mu);
            gram = gram + b.dot(&b.t());
            j0 += width;
        }
        let (vals, vecs) = symmetric_eigen(&gram.view())?;
        let k_max = d_main.min(n);
        // u_i = Bᵀ v_i / sqrt(λ_i); recompute the feature blocks to fill U.
        let mut j0 = 0;
        while j0 < r {
            let width = BLOCK.min(r - j0);
            let (b, _) = centered_block(psi_fit, seed, m, r, j0, width, Some(&mu_rf));
            for i in 0..k_max {
                if vals[i] > RANK_TOL {
                    let col = b.t().dot(&vecs.column(i)) / vals[i].sqrt();
                    u.slice_mut(s![j0..j0 + width, i]).assign(&col);
                }
            }
            j0 += width;
        }
        // Projected fit batch: B·u_i = B Bᵀ v_i / sqrt(λ_i) = v_i sqrt(λ_i).
        let mut p = Array2::zeros((n, d_main));
        for i in 0..k_max {
            if vals[i] > RANK_TOL {
                let scaled = vecs.column(i).mapv(|v| v * vals[i].sqrt());
                p.column_mut(i).assign(&scaled);
            }
        }
        (vals, p)
    } else {
        // Primal path: r×r covariance of the centered features.
        let omega = omega_block(seed, m, r, 0, r);
        let mut b = psi_fit.dot(&omega);
        relu_in_place(&mut b);
        for (j, col) in b.columns().into_iter().enumerate() {
            mu_rf[j] = col.sum() / n as f64;
        }
        for mut row in b.rows_mut() {
            row -= &mu_rf;
        }
        let cov = b.t().dot(&b);
        let (vals, vecs) = symmetric_eigen(&cov.view())?;
        let k_max = d_main.min(r);
        u.slice_mut(s![.., ..k_max]).assign(&vecs.slice(s![.., ..k_max]));
        let p = b.dot(&u);
        (vals, p)
    };

    let lambda_max = if eigvals.is_empty() { 0.0 } else { eigvals[0].max(0.0) };
    let thresh = (lambda_max * RANK_TOL).max(RANK_TOL);
    let mut rank = 0;
    for i in 0..d_main.min(eigvals.len()) {
        if eigvals[i] > thresh {
            rank += 1;
        } else {
            break;
        }
    }

    let mut projected = projected;
    // Zero out everything past the rank, then fix each surviving component's
    // sign so its largest-magnitude entry is positive (first index wins ties).
    for j in rank..d_main {
        u.column_mut(j).fill(0.0);
        projected.column_mut(j).fill(0.0);
    }
    for j in 0..rank {
        let col = u.column(j);
        let mut best = 0;
        for (i, &v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            u.column_mut(j).mapv_inplace(|v| -v);
            projected.column_mut(j).mapv_inplace(|v| -v);
        }
    }

    let mut col_mean = Array1::zeros(d_main);
    let mut col_std = Array1::from_elem(d_main, 1.0);
    for j in 0..rank {
        let col = projected.column(j);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        col_mean[j] = mean;
        col_std[j] = var.sqrt();
    }

    Ok(ProjectionParams {
        seed,
        m,
        r,
        d_main,
        mu_rf,
        u,
        col_mean,
        col_std,
        eps: PROJECTION_EPS,
        rank,
    })
}

/// x̃ = ((σ(ψΩ) − μ_rf)·U − μ_j) / sqrt(σ_j² + ε), streamed over Ω blocks.
pub fn apply_projection(params: &ProjectionParams, psi: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if psi.ncols() != params.m {
        return Err(Error::data(format!(
            "projection input has width {}, fitted on {}",
            psi.ncols(),
            params.m
        )));
    }
    let n = psi.nrows();
    let mut out = Array2::zeros((n, params.d_main));
    let mut j0 = 0;
    while j0 < params.r {
        let width = BLOCK.min(params.r - j0);
        let (b, _) =
            centered_block(psi, params.seed, params.m, params.r, j0, width, Some(&params.mu_rf));
        out = out + b.dot(&params.u.slice(s![j0..j0 + width, ..]));
        j0 += width;
    }
    for j in 0..params.d_main {
        let denom = (params.col_std[j] * params.col_std[j] + params.eps).sqrt();
        let mean = params.col_mean[j];
        out.column_mut(j).mapv_inplace(|v| (v - mean) / denom);
    }
    Ok(out)
}
