//! Dense symmetric eigendecomposition and summation helpers.
//!
//! The eigensolver is the classic Householder tridiagonalization followed by
//! implicit-shift QL iteration, kept in-crate so results are bit-deterministic
//! and builds never depend on a system LAPACK. Sizes here are desk scale
//! (a few thousand at most), where the O(n^3) dense path is entirely adequate.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView2};

/// Eigendecomposition of a real symmetric matrix.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// columns of an orthogonal matrix. Symmetry is assumed, not checked; callers
/// pass Gram or covariance matrices built as `X^T X`.
pub fn symmetric_eigen(a: &ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::numeric(format!(
            "symmetric_eigen needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    if n == 0 {
        return Ok((Array1::zeros(0), Array2::zeros((0, 0))));
    }
    let mut v = a.to_owned();
    let mut d = vec![0.0_f64; n];
    let mut e = vec![0.0_f64; n];
    tred2(&mut v, &mut d, &mut e);
    tql2(&mut v, &mut d, &mut e)?;

    // Sort descending, carrying the eigenvector columns along.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].partial_cmp(&d[i]).unwrap_or(std::cmp::Ordering::Equal));
    let values = Array1::from_iter(order.iter().map(|&i| d[i]));
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    Ok((values, vectors))
}

/// Householder reduction to tridiagonal form (in the style of the EISPACK
/// tred2 routine). `v` enters as the symmetric matrix and leaves as the
/// accumulated orthogonal transformation; `d` and `e` receive the diagonal
/// and subdiagonal.
fn tred2(v: &mut Array2<f64>, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[[n - 1, j]];
    }

    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for item in d.iter().take(i) {
            scale += item.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[[i - 1, j]];
                v[[i, j]] = 0.0;
                v[[j, i]] = 0.0;
            }
        } else {
            for item in d.iter_mut().take(i) {
                *item /= scale;
                h += *item * *item;
            }
            let f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for item in e.iter_mut().take(i) {
                *item = 0.0;
            }

            for j in 0..i {
                let f = d[j];
                v[[j, i]] = f;
                let mut g = e[j] + v[[j, j]] * f;
                for k in j + 1..i {
                    g += v[[k, j]] * d[k];
                    e[k] += v[[k, j]] * f;
                }
                e[j] = g;
            }
            let mut f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                let f = d[j];
                let g = e[j];
                for k in j..i {
                    v[[k, j]] -= f * e[k] + g * d[k];
                }
                d[j] = v[[i - 1, j]];
                v[[i, j]] = 0.0;
            }
        }
        d[i] = h;
    }

    // Accumulate transformations.
    for i in 0..n - 1 {
        v[[n - 1, i]] = v[[i, i]];
        v[[i, i]] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[[k, i + 1]] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[[k, i + 1]] * v[[k, j]];
                }
                for k in 0..=i {
                    v[[k, j]] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[[k, i + 1]] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[[n - 1, j]];
        v[[n - 1, j]] = 0.0;
    }
    v[[n - 1, n - 1]] = 1.0;
    e[0] = 0.0;
}

/// Implicit-shift QL iteration on the tridiagonal form, accumulating
/// eigenvectors into `v`. Errors out if an eigenvalue fails to converge.
fn tql2(v: &mut Array2<f64>, d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0_f64;
    let mut tst1 = 0.0_f64;
    let eps = 2.0_f64.powi(-52);
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > 64 {
                    return Err(Error::numeric(
                        "eigensolver failed to converge after 64 QL iterations",
                    ));
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for item in d.iter_mut().take(n).skip(l + 2) {
                    *item -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0_f64;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0_f64;
                let mut s2 = 0.0_f64;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        h = v[[k, i + 1]];
                        v[[k, i + 1]] = s * v[[k, i]] + c * h;
                        v[[k, i]] = c * v[[k, i]] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Quantile of an ascending-sorted slice with linear interpolation between
/// order statistics (the h = (n-1)p convention).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    if sorted.len() == 1 {
        return sorted[0];
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Pairwise (cascade) sum of a slice; error grows like O(log n) rather than
/// O(n), which keeps row-order permutations of pooled batches within the
/// crate's 1e-9 reproducibility tolerances.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        let mut acc = 0.0;
        for &x in v {
            acc += x;
        }
        return acc;
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Column sums of the selected rows of `x`, accumulated pairwise.
pub fn pairwise_row_sum(x: &ArrayView2<f64>, rows: &[usize]) -> Array1<f64> {
    fn go(x: &ArrayView2<f64>, rows: &[usize], out: &mut Array1<f64>) {
        if rows.len() <= 8 {
            for &r in rows {
                *out += &x.row(r);
            }
            return;
        }
        let mid = rows.len() / 2;
        let mut right = Array1::zeros(out.len());
        go(x, &rows[..mid], out);
        go(x, &rows[mid..], &mut right);
        *out += &right;
    }
    let mut out = Array1::zeros(x.ncols());
    go(x, rows, &mut out);
    out
}

/// Column means of all rows of `x`, accumulated pairwise.
pub fn pairwise_col_mean(x: &ArrayView2<f64>) -> Array1<f64> {
    let rows: Vec<usize> = (0..x.nrows()).collect();
    let mut s = pairwise_row_sum(x, &rows);
    if !rows.is_empty() {
        s /= rows.len() as f64;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn eigen_of_diagonal_matrix() {
        let a = array![[3.0, 0.0], [0.0, 1.0]];
        let (vals, vecs) = symmetric_eigen(&a.view()).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        // First eigenvector is +-e1.
        assert!((vecs[[0, 0]].abs() - 1.0).abs() < 1e-12);
        assert!(vecs[[1, 0]].abs() < 1e-12);
    }

    #[test]
    fn eigen_of_2x2_known_values() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1 with eigenvectors
        // (1,1)/sqrt(2) and (1,-1)/sqrt(2).
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let (vals, vecs) = symmetric_eigen(&a.view()).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        let inv_sqrt2 = 1.0 / 2.0_f64.sqrt();
        assert!((vecs[[0, 0]].abs() - inv_sqrt2).abs() < 1e-12);
        assert!((vecs[[1, 0]].abs() - inv_sqrt2).abs() < 1e-12);
        assert!((vecs[[0, 0]] - vecs[[1, 0]]).abs() < 1e-12, "same sign for (1,1)");
    }

    #[test]
    fn eigen_reconstructs_random_symmetric_matrices() {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(11, &[0]);
        for trial in 0..10 {
            let n = 3 + (trial % 5);
            let mut a = Array2::zeros((n, n));
            for i in 0..n {
                for j in 0..=i {
                    let x: f64 = rng.gen_range(-1.0..1.0);
                    a[[i, j]] = x;
                    a[[j, i]] = x;
                }
            }
            let (vals, vecs) = symmetric_eigen(&a.view()).unwrap();
            // V diag(vals) V^T reproduces A.
            let recon = vecs.dot(&Array2::from_diag(&vals)).dot(&vecs.t());
            for i in 0..n {
                for j in 0..n {
                    assert!(
                        (recon[[i, j]] - a[[i, j]]).abs() < 1e-9,
                        "reconstruction off at ({i},{j})"
                    );
                }
            }
            // Orthonormal columns.
            let gram = vecs.t().dot(&vecs);
            for i in 0..n {
                for j in 0..n {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((gram[[i, j]] - want).abs() < 1e-9);
                }
            }
            // Descending order.
            for i in 1..n {
                assert!(vals[i - 1] >= vals[i] - 1e-12);
            }
        }
    }

    #[test]
    fn pairwise_sum_matches_exact_on_integers() {
        let v: Vec<f64> = (1..=100).map(|x| x as f64).collect();
        assert_eq!(pairwise_sum(&v), 5050.0);
    }

    #[test]
    fn pairwise_row_sum_selects_rows() {
        let x = array![[1.0, 2.0], [10.0, 20.0], [100.0, 200.0]];
        let s = pairwise_row_sum(&x.view(), &[0, 2]);
        assert_eq!(s, array![101.0, 202.0]);
    }
}
