//! Elementwise and row-wise primitives shared by the attention and model code.

use rand_distr::{Distribution, StandardNormal};

use super::matrix::Matrix;
use super::rng::RngStream;
use crate::error::{LabError, Result};

/// Variance floor used by [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Stand-in for `-inf` on masked attention logits. Finite so that matrices
/// stay NaN/Inf free, and far enough below any logit that `exp` underflows to 0.
pub const MASK_VALUE: f64 = -1e30;

/// Softmax along each row, stabilised by subtracting the row maximum
/// (softmax is invariant to per-row shifts).
pub fn row_softmax(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for i in 0..a.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Numerically stable log-softmax along each row.
pub fn row_log_softmax(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for i in 0..a.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

pub fn relu(a: &Matrix) -> Matrix {
    a.map(|v| v.max(0.0))
}

/// Mean over rows, as a `1 x cols` matrix.
pub fn row_mean(a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, a.cols());
    if a.rows() == 0 {
        return out;
    }
    for i in 0..a.rows() {
        for (o, &v) in out.row_mut(0).iter_mut().zip(a.row(i)) {
            *o += v;
        }
    }
    let n = a.rows() as f64;
    for o in out.row_mut(0) {
        *o /= n;
    }
    out
}

/// Normalises every row to zero mean and unit variance, then applies the
/// `1 x cols` gain and bias.
pub fn layer_norm(a: &Matrix, gain: &Matrix, bias: &Matrix) -> Result<Matrix> {
    for p in [gain, bias] {
        if p.shape() != (1, a.cols()) {
            return Err(LabError::ShapeMismatch {
                op: "layer_norm",
                left: a.shape(),
                right: p.shape(),
            });
        }
    }
    let n = a.cols() as f64;
    let mut out = a.clone();
    for i in 0..a.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain.get(0, j) + bias.get(0, j);
        }
    }
    Ok(out)
}

/// `T x T` additive mask: zero on and below the diagonal, [`MASK_VALUE`] above.
pub fn causal_mask(t: usize) -> Matrix {
    let mut m = Matrix::zeros(t, t);
    for i in 0..t {
        for j in (i + 1)..t {
            m.set(i, j, MASK_VALUE);
        }
    }
    m
}

/// I.i.d. `N(0, std^2)` entries drawn row-major from `rng`.
pub fn gaussian_matrix(rng: &mut RngStream, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng.inner());
            z * std
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches by construction")
}

/// Solves the square system `a x = b` by Gaussian elimination with partial
/// pivoting. Pivots below `pivot_tol * max|a|` are reported as singular.
pub fn solve(a: &Matrix, b: &[f64], pivot_tol: f64) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(LabError::ShapeMismatch {
            op: "solve",
            left: a.shape(),
            right: (b.len(), 1),
        });
    }
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    let mut m = a.clone();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let (piv_row, piv_abs) = (col..n)
            .map(|r| (r, m.get(r, col).abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if piv_abs <= pivot_tol * scale {
            return Err(LabError::Singular {
                column: col,
                pivot: piv_abs,
            });
        }
        if piv_row != col {
            for j in 0..n {
                let tmp = m.get(col, j);
                m.set(col, j, m.get(piv_row, j));
                m.set(piv_row, j, tmp);
            }
            rhs.swap(col, piv_row);
        }
        let pivot = m.get(col, col);
        for r in (col + 1)..n {
            let factor = m.get(r, col) / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                m.set(r, j, m.get(r, j) - factor * m.get(col, j));
            }
            rhs[r] -= factor * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = rhs[i];
        for j in (i + 1)..n {
            acc -= m.get(i, j) * x[j];
        }
        x[i] = acc / m.get(i, i);
    }
    Ok(x)
}
