//! Closed-form softmax and dual-branch Jacobians, the total gradient norm
//! `G(p) = 2 - 2 sum p^2`, and finite-difference cross-checks.
//!
//! Entries are indexed as `d P_k / d A_j` for a single attention row.

use serde::Serialize;

use crate::attention::Mechanism;
use crate::autodiff::{fd_check, max_relative_error, FD_STEP};
use crate::error::{LabError, Result};
use crate::numerics::{row_softmax, Matrix, RngStream};
use crate::parallel::map_indexed;

const PROB_TOL: f64 = 1e-9;

fn check_index(p: &[f64], idx: usize) -> Result<()> {
    if idx >= p.len() {
        Err(LabError::IndexOutOfRange { index: idx, len: p.len() })
    } else {
        Ok(())
    }
}

fn check_probability(p: &[f64]) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.is_empty() || (s - 1.0).abs() > PROB_TOL || p.iter().any(|&v| v < -PROB_TOL) {
        return Err(LabError::InvalidConfig(format!("row is not a probability vector (sum {s})")));
    }
    Ok(())
}

/// `P_j (1 - P_j)` on the diagonal, `-P_k P_j` off it.
pub fn softmax_jacobian_entry(p_row: &[f64], j: usize, k: usize) -> Result<f64> {
    check_index(p_row, j)?;
    check_index(p_row, k)?;
    check_probability(p_row)?;
    Ok(softmax_entry(p_row, j, k))
}

fn softmax_entry(p: &[f64], j: usize, k: usize) -> f64 {
    if j == k {
        p[j] * (1.0 - p[j])
    } else {
        -p[k] * p[j]
    }
}

/// Jacobian of `A -> (1 + l+) softmax(A) - l- softmax(-A)`, the dual-branch
/// row map when the negative query map is `-I` and the activation is linear.
/// `p_neg_row` is `softmax(-A)`.
pub fn dagpam_jacobian_entry(p_pos_row: &[f64], p_neg_row: &[f64], lambda_pos: f64, lambda_neg: f64, j: usize, k: usize) -> Result<f64> {
    if p_pos_row.len() != p_neg_row.len() {
        return Err(LabError::ShapeMismatch {
            op: "dagpam_jacobian_entry",
            left: (1, p_pos_row.len()),
            right: (1, p_neg_row.len()),
        });
    }
    check_index(p_pos_row, j)?;
    check_index(p_pos_row, k)?;
    check_probability(p_pos_row)?;
    check_probability(p_neg_row)?;
    Ok(dagpam_entry(p_pos_row, p_neg_row, lambda_pos, lambda_neg, j, k))
}

fn dagpam_entry(pp: &[f64], pn: &[f64], lp: f64, ln: f64, j: usize, k: usize) -> f64 {
    let g = softmax_entry(pp, j, k);
    if j == k {
        g + lp * pp[j] * (1.0 - pp[j]) + ln * pn[j] * (1.0 - pn[j])
    } else {
        g - lp * pp[k] * pp[j] - ln * pn[k] * pn[j]
    }
}

/// Derivatives of one row with respect to a single logit `A_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianRow {
    pub diag_term: f64,
    /// `k != j`, in increasing `k`.
    pub off_terms: Vec<f64>,
    pub source: Mechanism,
}

impl JacobianRow {
    pub fn conventional(p_row: &[f64], j: usize) -> Result<Self> {
        let diag_term = softmax_jacobian_entry(p_row, j, j)?;
        let off_terms = (0..p_row.len()).filter(|&k| k != j).map(|k| softmax_entry(p_row, j, k)).collect();
        Ok(Self {
            diag_term,
            off_terms,
            source: Mechanism::Conventional,
        })
    }

    pub fn dagpam(p_pos_row: &[f64], p_neg_row: &[f64], lambda_pos: f64, lambda_neg: f64, j: usize) -> Result<Self> {
        let diag_term = dagpam_jacobian_entry(p_pos_row, p_neg_row, lambda_pos, lambda_neg, j, j)?;
        let off_terms = (0..p_pos_row.len())
            .filter(|&k| k != j)
            .map(|k| dagpam_entry(p_pos_row, p_neg_row, lambda_pos, lambda_neg, j, k))
            .collect();
        Ok(Self {
            diag_term,
            off_terms,
            source: Mechanism::Dagpam,
        })
    }

    /// Zero up to rounding, because the row sum does not depend on `A_j`.
    pub fn total(&self) -> f64 {
        self.diag_term + self.off_terms.iter().sum::<f64>()
    }
}

/// `G(p) = 2 - 2 sum p^2`.
pub fn total_grad_norm(p_row: &[f64]) -> f64 {
    2.0 - 2.0 * p_row.iter().map(|p| p * p).sum::<f64>()
}

/// `G(p)` as the double sum of absolute Jacobian entries.
pub fn total_grad_norm_direct(p_row: &[f64]) -> f64 {
    let n = p_row.len();
    (0..n).map(|j| (0..n).map(|k| softmax_entry(p_row, j, k).abs()).sum::<f64>()).sum()
}

/// Uniform draw from the probability simplex via normalised exponentials.
pub fn sample_simplex(rng: &mut RngStream, t: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..t).map(|_| -(1.0 - rng.uniform()).ln()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniformMaxReport {
    pub t: usize,
    pub trials: usize,
    pub g_uniform: f64,
    pub max_sampled: f64,
    /// Samples above the uniform value, or within 1e-9 of it while not near uniform.
    pub violations: usize,
}

/// Samples `trials` simplex points and checks none beats the uniform row.
pub fn verify_uniform_maximum(t: usize, trials: usize, seed: u64) -> Result<UniformMaxReport> {
    if t < 2 || trials == 0 {
        return Err(LabError::InvalidConfig("need T >= 2 and at least one trial".into()));
    }
    let g_uniform = 2.0 - 2.0 / t as f64;
    let results = map_indexed(trials, |i| {
        let mut rng = RngStream::new(seed, i as u64);
        let p = sample_simplex(&mut rng, t);
        let g = total_grad_norm(&p);
        let gap = g_uniform - g;
        let dist = p.iter().map(|v| (v - 1.0 / t as f64).abs()).fold(0.0, f64::max);
        let bad = gap < -1e-12 || (gap < 1e-9 && dist >= 1e-5);
        (g, bad)
    });
    Ok(UniformMaxReport {
        t,
        trials,
        g_uniform,
        max_sampled: results.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max),
        violations: results.iter().filter(|r| r.1).count(),
    })
}

/// Analytic-vs-FD discrepancy over a batch of rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JacobianCheck {
    pub rows: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

impl JacobianCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// FD Jacobian of a row map, laid out as `J[k][j] = d out_k / d a_j`.
pub fn fd_row_jacobian(map: impl Fn(&Matrix) -> Matrix, a_row: &[f64]) -> Matrix {
    let t = a_row.len();
    let at = Matrix::row_vector(a_row);
    let mut jac = Matrix::zeros(t, t);
    for k in 0..t {
        let grad = fd_check(|a| map(a).get(0, k), &at, FD_STEP);
        jac.row_mut(k).copy_from_slice(grad.row(0));
    }
    jac
}

/// `(1 + l+) softmax(a) - l- softmax(-a)` on one row.
pub fn simplified_dagpam_row(a: &Matrix, lambda_pos: f64, lambda_neg: f64) -> Matrix {
    let pp = row_softmax(a);
    let pn = row_softmax(&a.scale(-1.0));
    pp.scale(1.0 + lambda_pos).sub(&pn.scale(lambda_neg)).expect("same shape")
}

fn compare(analytic: &Matrix, numeric: &Matrix) -> (f64, f64) {
    (analytic.max_abs_diff(numeric), max_relative_error(analytic, numeric))
}

/// Softmax Jacobian against central differences on each logit row.
pub fn check_softmax_jacobian(logit_rows: &[Vec<f64>]) -> JacobianCheck {
    let errs = map_indexed(logit_rows.len(), |r| {
        let a = &logit_rows[r];
        let p = row_softmax(&Matrix::row_vector(a)).into_data();
        let t = a.len();
        let mut analytic = Matrix::zeros(t, t);
        for k in 0..t {
            for j in 0..t {
                analytic.set(k, j, softmax_entry(&p, j, k));
            }
        }
        compare(&analytic, &fd_row_jacobian(row_softmax, a))
    });
    fold_errors(logit_rows.len(), &errs)
}

/// Dual-branch closed form against central differences through the full map.
pub fn check_dagpam_jacobian(logit_rows: &[Vec<f64>], lambdas: &[(f64, f64)]) -> JacobianCheck {
    let errs = map_indexed(logit_rows.len(), |r| {
        let a = &logit_rows[r];
        let (lp, ln) = lambdas[r % lambdas.len()];
        let m = Matrix::row_vector(a);
        let pp = row_softmax(&m).into_data();
        let pn = row_softmax(&m.scale(-1.0)).into_data();
        let t = a.len();
        let mut analytic = Matrix::zeros(t, t);
        for k in 0..t {
            for j in 0..t {
                analytic.set(k, j, dagpam_entry(&pp, &pn, lp, ln, j, k));
            }
        }
        compare(&analytic, &fd_row_jacobian(|x| simplified_dagpam_row(x, lp, ln), a))
    });
    fold_errors(logit_rows.len(), &errs)
}

fn fold_errors(rows: usize, errs: &[(f64, f64)]) -> JacobianCheck {
    JacobianCheck {
        rows,
        max_abs_error: errs.iter().map(|e| e.0).fold(0.0, f64::max),
        max_rel_error: errs.iter().map(|e| e.1).fold(0.0, f64::max),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominationReport {
    pub pairs: usize,
    pub violations: usize,
    pub min_margin: f64,
}

/// Checks `|dual-branch entry| >= |softmax entry|` for every `(j, k)` on random
/// row pairs with lambdas drawn from `[0, lambda_max]`.
pub fn check_gradient_domination(t: usize, pairs: usize, lambda_max: f64, seed: u64) -> DominationReport {
    let results = map_indexed(pairs, |i| {
        let mut rng = RngStream::new(seed, i as u64);
        let pp = sample_simplex(&mut rng, t);
        let pn = sample_simplex(&mut rng, t);
        let lp = rng.uniform_range(0.0, lambda_max);
        let ln = rng.uniform_range(0.0, lambda_max);
        let mut margin = f64::INFINITY;
        for j in 0..t {
            for k in 0..t {
                let m = dagpam_entry(&pp, &pn, lp, ln, j, k).abs() - softmax_entry(&pp, j, k).abs();
                margin = margin.min(m);
            }
        }
        margin
    });
    DominationReport {
        pairs,
        violations: results.iter().filter(|&&m| m < 0.0).count(),
        min_margin: results.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_entry_examples() {
        assert_eq!(softmax_jacobian_entry(&[0.5, 0.5], 0, 0).unwrap(), 0.25);
        let one_hot = [0.0, 1.0, 0.0];
        for j in 0..3 {
            for k in 0..3 {
                assert_eq!(softmax_jacobian_entry(&one_hot, j, k).unwrap().abs(), 0.0);
            }
        }
        assert!(matches!(softmax_jacobian_entry(&[0.5, 0.5], 2, 0), Err(LabError::IndexOutOfRange { .. })));
        assert!(softmax_jacobian_entry(&[0.5, 0.7], 0, 0).is_err());
    }

    #[test]
    fn dagpam_entry_examples() {
        let mut rng = RngStream::new(1, 0);
        let pp = sample_simplex(&mut rng, 6);
        let pn = sample_simplex(&mut rng, 6);
        for j in 0..6 {
            for k in 0..6 {
                assert_eq!(
                    dagpam_jacobian_entry(&pp, &pn, 0.0, 0.0, j, k).unwrap(),
                    softmax_jacobian_entry(&pp, j, k).unwrap()
                );
            }
        }
        let half = [0.5, 0.5];
        assert!((dagpam_jacobian_entry(&half, &half, 1.0, 1.0, 0, 0).unwrap() - 0.75).abs() < 1e-15);
        assert!(dagpam_jacobian_entry(&half, &half, 1.0, 1.0, 0, 5).is_err());
    }

    #[test]
    fn jacobian_rows_sum_to_zero() {
        let mut rng = RngStream::new(2, 0);
        let pp = sample_simplex(&mut rng, 8);
        let pn = sample_simplex(&mut rng, 8);
        for j in 0..8 {
            assert!(JacobianRow::conventional(&pp, j).unwrap().total().abs() < 1e-12);
            assert!(JacobianRow::dagpam(&pp, &pn, 1.3, 0.4, j).unwrap().total().abs() < 1e-12);
        }
    }

    #[test]
    fn total_grad_norm_examples() {
        let uniform = [0.25; 4];
        assert!((total_grad_norm(&uniform) - 1.5).abs() < 1e-15);
        assert_eq!(total_grad_norm(&[0.0, 1.0, 0.0]), 0.0);
        for eps in [0.01, 0.05] {
            let t = 8;
            let mut p = vec![1.0 / t as f64; t];
            p[0] += eps;
            p[1] -= eps;
            let expect = 2.0 - 2.0 / t as f64 - 4.0 * eps * eps;
            assert!((total_grad_norm(&p) - expect).abs() < 1e-12);
        }
        let mut rng = RngStream::new(3, 0);
        let p = sample_simplex(&mut rng, 8);
        assert!((total_grad_norm(&p) - total_grad_norm_direct(&p)).abs() < 1e-12);
    }

    #[test]
    fn uniform_is_the_maximum() {
        let r = verify_uniform_maximum(8, 2000, 4).unwrap();
        assert_eq!(r.violations, 0);
        assert!(r.max_sampled < r.g_uniform);
        assert!(verify_uniform_maximum(1, 10, 0).is_err());
    }

    #[test]
    fn fd_agrees_with_closed_forms() {
        let mut rng = RngStream::new(5, 0);
        let rows: Vec<Vec<f64>> = (0..10).map(|_| (0..8).map(|_| rng.uniform_range(-3.0, 3.0)).collect()).collect();
        assert!(check_softmax_jacobian(&rows).passes(1e-6));
        assert!(check_dagpam_jacobian(&rows, &[(1.0, 1.0), (0.3, 2.2)]).passes(1e-6));
    }

    #[test]
    fn domination_holds() {
        let r = check_gradient_domination(8, 500, 3.0, 6);
        assert_eq!(r.violations, 0);
    }
}
