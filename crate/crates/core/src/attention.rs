//! Scaled dot-product attention and its dual-branch generalisation.
//!
//! The dual-branch head computes a positive softmax `P+` from the usual
//! query/key scores and a negative softmax `P-` from queries passed through an
//! activation and a small `d_qk x d_qk` map, then mixes them as
//! `P^G = (1 + lambda+) P+ - lambda- P-`. Every row of `P^G` sums to
//! `sigma = 1 + lambda+ - lambda-` and its entries lie in
//! `[-lambda-, 1 + lambda+]`; with both lambdas at zero the head reduces to
//! conventional attention.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{LabError, Result};
use crate::numerics::{self, gaussian_matrix, Matrix, RngStream};

/// Row sums and ranges are compared at this tolerance.
pub const CONDITION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Conventional,
    Dagpam,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Conventional => "conventional",
            Mechanism::Dagpam => "dagpam",
        }
    }
}

impl std::str::FromStr for Mechanism {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "conventional" | "baseline" => Ok(Mechanism::Conventional),
            "dagpam" => Ok(Mechanism::Dagpam),
            other => Err(LabError::InvalidConfig(format!("unknown mechanism '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    None,
    Causal,
}

/// Activation applied to the queries of the negative branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    /// Only for checking closed forms that assume a linear negative branch.
    Identity,
}

impl Activation {
    fn apply(self, m: &Matrix) -> Matrix {
        match self {
            Activation::Relu => numerics::relu(m),
            Activation::Identity => m.clone(),
        }
    }
}

/// Parameters of one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    /// `d x d_qk`
    pub w_q_pos: Matrix,
    /// `d x d_qk`
    pub w_k_pos: Matrix,
    /// `d x d_v`
    pub w_v: Matrix,
    /// `d_qk x d_qk`
    pub w_q_neg: Matrix,
    pub lambda_pos: f64,
    pub lambda_neg: f64,
    pub lambdas_trainable: bool,
    pub neg_activation: Activation,
}

impl AttentionWeights {
    pub fn new(w_q_pos: Matrix, w_k_pos: Matrix, w_v: Matrix, w_q_neg: Matrix, lambda_pos: f64, lambda_neg: f64) -> Result<Self> {
        let w = Self {
            w_q_pos,
            w_k_pos,
            w_v,
            w_q_neg,
            lambda_pos,
            lambda_neg,
            lambdas_trainable: false,
            neg_activation: Activation::Relu,
        };
        w.validate()?;
        Ok(w)
    }

    /// Gaussian weights with the given standard deviation.
    pub fn random(rng: &mut RngStream, d: usize, d_qk: usize, d_v: usize, std: f64) -> Self {
        let w_q_pos = gaussian_matrix(rng, d, d_qk, std);
        let w_k_pos = gaussian_matrix(rng, d, d_qk, std);
        let w_v = gaussian_matrix(rng, d, d_v, std);
        let w_q_neg = gaussian_matrix(rng, d_qk, d_qk, std);
        Self {
            w_q_pos,
            w_k_pos,
            w_v,
            w_q_neg,
            lambda_pos: 0.0,
            lambda_neg: 0.0,
            lambdas_trainable: false,
            neg_activation: Activation::Relu,
        }
    }

    pub fn with_lambdas(mut self, lambda_pos: f64, lambda_neg: f64) -> Self {
        self.lambda_pos = lambda_pos;
        self.lambda_neg = lambda_neg;
        self
    }

    pub fn with_activation(mut self, act: Activation) -> Self {
        self.neg_activation = act;
        self
    }

    pub fn d_model(&self) -> usize {
        self.w_q_pos.rows()
    }

    pub fn d_qk(&self) -> usize {
        self.w_q_pos.cols()
    }

    pub fn d_v(&self) -> usize {
        self.w_v.cols()
    }

    pub fn sigma_sum(&self) -> f64 {
        1.0 + self.lambda_pos - self.lambda_neg
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        let d_qk = self.d_qk();
        let expect = |m: &Matrix, shape: (usize, usize)| {
            if m.shape() == shape {
                Ok(())
            } else {
                Err(LabError::ShapeMismatch {
                    op: "attention_weights",
                    left: m.shape(),
                    right: shape,
                })
            }
        };
        expect(&self.w_k_pos, (d, d_qk))?;
        expect(&self.w_v, (d, self.d_v()))?;
        expect(&self.w_q_neg, (d_qk, d_qk))?;
        if d_qk > d {
            return Err(LabError::InvalidConfig(format!("d_qk = {d_qk} exceeds d = {d}")));
        }
        if !self.lambda_pos.is_finite() || !self.lambda_neg.is_finite() {
            return Err(LabError::InvalidConfig("lambdas must be finite".into()));
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        self.validate()?;
        if x.rows() == 0 {
            return Err(LabError::EmptySequence("attention"));
        }
        if x.cols() != self.d_model() {
            return Err(LabError::ShapeMismatch {
                op: "attention",
                left: x.shape(),
                right: self.w_q_pos.shape(),
            });
        }
        Ok(())
    }
}

/// Every intermediate of one forward pass.
///
/// `a_pos`/`a_neg` are the scaled scores before masking. For conventional
/// attention the negative fields mirror the positive ones and `sigma_sum = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub a_pos: Matrix,
    pub a_neg: Matrix,
    pub p_pos: Matrix,
    pub p_neg: Matrix,
    pub p_g: Matrix,
    pub x_v: Matrix,
    pub y_pos: Matrix,
    pub y_neg: Matrix,
    pub y: Matrix,
    pub sigma_sum: f64,
    pub lambda_pos: f64,
    pub lambda_neg: f64,
}

fn masked_softmax(scores: &Matrix, mask: Mask) -> Result<Matrix> {
    match mask {
        Mask::None => Ok(numerics::row_softmax(scores)),
        Mask::Causal => Ok(numerics::row_softmax(&scores.add(&numerics::causal_mask(scores.rows()))?)),
    }
}

/// Conventional single-head attention: `Y = softmax(X Wq (X Wk)^T / sqrt(d_qk)) X Wv`.
pub fn conventional_attention(x: &Matrix, w: &AttentionWeights, mask: Mask) -> Result<AttentionTrace> {
    w.check_input(x)?;
    let inv_sqrt = 1.0 / (w.d_qk() as f64).sqrt();
    let x_q = x.matmul(&w.w_q_pos)?;
    let x_k = x.matmul(&w.w_k_pos)?;
    let x_v = x.matmul(&w.w_v)?;
    let a = x_q.matmul(&x_k.transpose())?.scale(inv_sqrt);
    let p = masked_softmax(&a, mask)?;
    let y = p.matmul(&x_v)?;
    Ok(AttentionTrace {
        a_neg: a.clone(),
        a_pos: a,
        p_neg: p.clone(),
        p_g: p.clone(),
        p_pos: p,
        x_v,
        y_pos: y.clone(),
        y_neg: y.clone(),
        y,
        sigma_sum: 1.0,
        lambda_pos: 0.0,
        lambda_neg: 0.0,
    })
}

/// Dual-branch attention with `P^G = (1 + lambda+) P+ - lambda- P-`, where the
/// negative scores are `(act(X Wq+) Wq-) (X Wk+)^T / sqrt(d_qk)`. Masking is
/// applied to both branches before their softmax.
pub fn dagpam_attention(x: &Matrix, w: &AttentionWeights, mask: Mask) -> Result<AttentionTrace> {
    w.check_input(x)?;
    let inv_sqrt = 1.0 / (w.d_qk() as f64).sqrt();
    let x_q = x.matmul(&w.w_q_pos)?;
    let x_k = x.matmul(&w.w_k_pos)?;
    let x_v = x.matmul(&w.w_v)?;
    let k_t = x_k.transpose();
    let a_pos = x_q.matmul(&k_t)?.scale(inv_sqrt);
    let q_neg = w.neg_activation.apply(&x_q).matmul(&w.w_q_neg)?;
    let a_neg = q_neg.matmul(&k_t)?.scale(inv_sqrt);
    let p_pos = masked_softmax(&a_pos, mask)?;
    let p_neg = masked_softmax(&a_neg, mask)?;
    let p_g = p_pos.scale(1.0 + w.lambda_pos).sub(&p_neg.scale(w.lambda_neg))?;
    let y_pos = p_pos.matmul(&x_v)?;
    let y_neg = p_neg.matmul(&x_v)?;
    let y = p_g.matmul(&x_v)?;
    Ok(AttentionTrace {
        a_pos,
        a_neg,
        p_pos,
        p_neg,
        p_g,
        x_v,
        y_pos,
        y_neg,
        y,
        sigma_sum: w.sigma_sum(),
        lambda_pos: w.lambda_pos,
        lambda_neg: w.lambda_neg,
    })
}

pub fn attend(x: &Matrix, w: &AttentionWeights, mechanism: Mechanism, mask: Mask) -> Result<AttentionTrace> {
    match mechanism {
        Mechanism::Conventional => conventional_attention(x, w, mask),
        Mechanism::Dagpam => dagpam_attention(x, w, mask),
    }
}

/// Runs every head, concatenates their outputs along the feature axis and
/// projects with `w_out` (`(h * d_v) x d`).
pub fn multi_head(x: &Matrix, heads: &[AttentionWeights], w_out: &Matrix, mechanism: Mechanism, mask: Mask) -> Result<Matrix> {
    let Some(first) = heads.first() else {
        return Err(LabError::InvalidConfig("multi_head needs at least one head".into()));
    };
    for h in heads {
        if h.w_q_pos.shape() != first.w_q_pos.shape() || h.w_v.shape() != first.w_v.shape() {
            return Err(LabError::ShapeMismatch {
                op: "multi_head",
                left: first.w_v.shape(),
                right: h.w_v.shape(),
            });
        }
    }
    if heads.len() * first.d_v() != w_out.rows() {
        return Err(LabError::ShapeMismatch {
            op: "multi_head",
            left: (heads.len() * first.d_v(), 0),
            right: w_out.shape(),
        });
    }
    let outputs = heads
        .iter()
        .map(|h| attend(x, h, mechanism, mask).map(|t| t.y))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Matrix> = outputs.iter().collect();
    Matrix::concat_cols(&refs)?.matmul(w_out)
}

/// `Y = sigma Y+ + lambda- Delta` with `Delta = Y+ - Y-`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    pub y_scaled: Matrix,
    pub delta: Matrix,
}

impl Dynamics {
    pub fn reconstruct(&self, lambda_neg: f64) -> Matrix {
        self.y_scaled.add(&self.delta.scale(lambda_neg)).expect("same shapes")
    }
}

pub fn decompose_dynamics(trace: &AttentionTrace) -> Dynamics {
    Dynamics {
        y_scaled: trace.y_pos.scale(trace.sigma_sum),
        delta: trace.y_pos.sub(&trace.y_neg).expect("branch outputs share a shape"),
    }
}

/// Observed range and row sums of a score matrix against a declared
/// finite range and fixed sum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionAudit {
    pub min_score: f64,
    pub max_score: f64,
    pub row_sums: Vec<f64>,
    pub declared_range: (f64, f64),
    pub declared_sum: f64,
    pub finite_range_ok: bool,
    pub fixed_sum_ok: bool,
}

pub fn condition_audit(p: &Matrix, declared_range: (f64, f64), declared_sum: f64) -> ConditionAudit {
    let min_score = p.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max_score = p.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let row_sums: Vec<f64> = (0..p.rows()).map(|i| p.row(i).iter().sum()).collect();
    let finite_range_ok = p.is_finite() && min_score >= declared_range.0 - CONDITION_TOL && max_score <= declared_range.1 + CONDITION_TOL;
    let fixed_sum_ok = row_sums.iter().all(|s| (s - declared_sum).abs() <= CONDITION_TOL);
    ConditionAudit {
        min_score,
        max_score,
        row_sums,
        declared_range,
        declared_sum,
        finite_range_ok,
        fixed_sum_ok,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Membership {
    pub is_member: bool,
    pub residual: f64,
    pub coefficients: Vec<f64>,
}

/// Relative pivot size below which the augmented system counts as singular.
const HULL_PIVOT_TOL: f64 = 1e-12;

/// Distance from `y_row` to the affine hull of the rows of `x_v`.
///
/// Solves `min |c^T X_V - y|` subject to `sum(c) = 1` through the KKT system
/// `[[X X^T, 1], [1^T, 0]] [c; mu] = [X y; 1]`.
pub fn affine_membership(y_row: &[f64], x_v: &Matrix, tol: f64) -> Result<Membership> {
    let t = x_v.rows();
    if t == 0 {
        return Err(LabError::EmptySequence("affine_membership"));
    }
    if y_row.len() != x_v.cols() {
        return Err(LabError::ShapeMismatch {
            op: "affine_membership",
            left: (1, y_row.len()),
            right: x_v.shape(),
        });
    }
    let n = t + 1;
    let mut kkt = Matrix::zeros(n, n);
    let mut rhs = vec![0.0; n];
    for i in 0..t {
        for j in 0..t {
            let dot: f64 = x_v.row(i).iter().zip(x_v.row(j)).map(|(a, b)| a * b).sum();
            kkt.set(i, j, dot);
        }
        kkt.set(i, t, 1.0);
        kkt.set(t, i, 1.0);
        rhs[i] = x_v.row(i).iter().zip(y_row).map(|(a, b)| a * b).sum();
    }
    rhs[t] = 1.0;
    let sol = match numerics::solve(&kkt, &rhs, HULL_PIVOT_TOL) {
        Ok(s) => s,
        Err(LabError::Singular { pivot, .. }) => return Err(LabError::DegenerateHull { pivot }),
        Err(e) => return Err(e),
    };
    let coefficients = sol[..t].to_vec();
    let mut diff = y_row.iter().map(|v| -v).collect::<Vec<_>>();
    for (i, &c) in coefficients.iter().enumerate() {
        for (d, &x) in diff.iter_mut().zip(x_v.row(i)) {
            *d += c * x;
        }
    }
    let residual = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    Ok(Membership {
        is_member: residual < tol,
        residual,
        coefficients,
    })
}

/// How the lambdas of a head enter a taped forward pass.
#[derive(Debug, Clone, Copy)]
pub enum LambdaNodes {
    Fixed { pos: f64, neg: f64 },
    /// `1 x 1` leaves.
    Trainable { pos: NodeId, neg: NodeId },
}

/// Tape handles for one head's weights.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub w_q_pos: NodeId,
    pub w_k_pos: NodeId,
    pub w_v: NodeId,
    pub w_q_neg: Option<NodeId>,
}

/// Records one head on `tape` and returns the node holding `Y`.
///
/// `mask` is an additive mask node, typically [`numerics::causal_mask`]. The
/// operation order mirrors [`conventional_attention`] and [`dagpam_attention`].
pub fn record_head(
    tape: &mut Tape,
    x: NodeId,
    head: &HeadNodes,
    mechanism: Mechanism,
    activation: Activation,
    lambdas: LambdaNodes,
    mask: Option<NodeId>,
) -> Result<NodeId> {
    let d_qk = tape.value(head.w_q_pos).cols();
    let inv_sqrt = 1.0 / (d_qk as f64).sqrt();
    let x_q = tape.matmul(x, head.w_q_pos)?;
    let x_k = tape.matmul(x, head.w_k_pos)?;
    let x_v = tape.matmul(x, head.w_v)?;
    let k_t = tape.transpose(x_k)?;
    let raw = tape.matmul(x_q, k_t)?;
    let a_pos = tape.scale(raw, inv_sqrt)?;
    let logits_pos = match mask {
        Some(m) => tape.add(a_pos, m)?,
        None => a_pos,
    };
    let p_pos = tape.row_softmax(logits_pos)?;
    let p = match mechanism {
        Mechanism::Conventional => p_pos,
        Mechanism::Dagpam => {
            let w_neg = head
                .w_q_neg
                .ok_or_else(|| LabError::InvalidConfig("dual-branch head needs a negative query map".into()))?;
            let q_act = match activation {
                Activation::Relu => tape.relu(x_q)?,
                Activation::Identity => x_q,
            };
            let q_neg = tape.matmul(q_act, w_neg)?;
            let raw_neg = tape.matmul(q_neg, k_t)?;
            let a_neg = tape.scale(raw_neg, inv_sqrt)?;
            let logits_neg = match mask {
                Some(m) => tape.add(a_neg, m)?,
                None => a_neg,
            };
            let p_neg = tape.row_softmax(logits_neg)?;
            let (pos, neg) = match lambdas {
                LambdaNodes::Fixed { pos, neg } => (tape.scale(p_pos, 1.0 + pos)?, tape.scale(p_neg, neg)?),
                LambdaNodes::Trainable { pos, neg } => {
                    let coef = tape.shift(pos, 1.0)?;
                    (tape.scalar_mul(coef, p_pos)?, tape.scalar_mul(neg, p_neg)?)
                }
            };
            tape.sub(pos, neg)?
        }
    };
    tape.matmul(p, x_v)
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: usize = 8;
    const D: usize = 16;
    const D_QK: usize = 4;
    const D_V: usize = 16;

    fn instance(seed: u64, lp: f64, ln: f64) -> (Matrix, AttentionWeights) {
        let mut rng = RngStream::new(seed, 11);
        let x = gaussian_matrix(&mut rng, T, D, 1.0);
        let w = AttentionWeights::random(&mut rng, D, D_QK, D_V, 0.5).with_lambdas(lp, ln);
        (x, w)
    }

    /// Straight-line evaluation with explicit loops, independent of the
    /// matrix helpers.
    fn oracle(x: &Matrix, w: &AttentionWeights, relu: bool) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let t = x.rows();
        let proj = |m: &Matrix| {
            (0..t)
                .map(|i| (0..m.cols()).map(|c| (0..x.cols()).map(|k| x.get(i, k) * m.get(k, c)).sum::<f64>()).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        let q = proj(&w.w_q_pos);
        let k = proj(&w.w_k_pos);
        let v = proj(&w.w_v);
        let dqk = w.d_qk();
        let qn: Vec<Vec<f64>> = q
            .iter()
            .map(|row| {
                (0..dqk)
                    .map(|c| (0..dqk).map(|m| if relu { row[m].max(0.0) } else { row[m] } * w.w_q_neg.get(m, c)).sum())
                    .collect()
            })
            .collect();
        let softmax = |scores: Vec<f64>| {
            let e: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect::<Vec<_>>()
        };
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (dqk as f64).sqrt();
        let mut pg = vec![vec![0.0; t]; t];
        let mut y = vec![vec![0.0; v[0].len()]; t];
        for i in 0..t {
            let pp = softmax((0..t).map(|j| dot(&q[i], &k[j])).collect());
            let pn = softmax((0..t).map(|j| dot(&qn[i], &k[j])).collect());
            for j in 0..t {
                pg[i][j] = (1.0 + w.lambda_pos) * pp[j] - w.lambda_neg * pn[j];
                for c in 0..v[0].len() {
                    y[i][c] += pg[i][j] * v[j][c];
                }
            }
        }
        (pg, y)
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = RngStream::new(1, 0);
        let x = gaussian_matrix(&mut rng, 1, D, 1.0);
        let w = AttentionWeights::random(&mut rng, D, D_QK, D_V, 1.0);
        let tr = conventional_attention(&x, &w, Mask::None).unwrap();
        assert_eq!(tr.p_pos, Matrix::from_rows(&[[1.0]]));
        assert!(tr.y.max_abs_diff(&x.matmul(&w.w_v).unwrap()) < 1e-15);
    }

    #[test]
    fn zero_query_weights_give_uniform_rows() {
        let (x, mut w) = instance(2, 0.0, 0.0);
        w.w_q_pos = Matrix::zeros(D, D_QK);
        let tr = conventional_attention(&x, &w, Mask::None).unwrap();
        for &p in tr.p_pos.data() {
            assert!((p - 1.0 / T as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn conventional_matches_oracle() {
        let mut rng = RngStream::new(3, 0);
        let x = gaussian_matrix(&mut rng, 3, 2, 1.0);
        let w = AttentionWeights::random(&mut rng, 2, 2, 2, 1.0);
        let tr = conventional_attention(&x, &w, Mask::None).unwrap();
        let (pg, y) = oracle(&x, &w, true);
        assert!(tr.p_pos.max_abs_diff(&Matrix::from_rows(&pg)) < 1e-12);
        assert!(tr.y.max_abs_diff(&Matrix::from_rows(&y)) < 1e-12);
    }

    #[test]
    fn dagpam_matches_oracle() {
        for (seed, lp, ln) in [(4, 1.0, 2.0), (5, 0.3303, 0.9355), (6, 2.5, 0.1)] {
            let (x, w) = instance(seed, lp, ln);
            let tr = dagpam_attention(&x, &w, Mask::None).unwrap();
            let (pg, y) = oracle(&x, &w, true);
            assert!(tr.p_g.max_abs_diff(&Matrix::from_rows(&pg)) < 1e-12);
            assert!(tr.y.max_abs_diff(&Matrix::from_rows(&y)) < 1e-12);
        }
    }

    #[test]
    fn reduces_to_conventional_at_zero_lambdas() {
        let (x, w) = instance(7, 0.0, 0.0);
        for mask in [Mask::None, Mask::Causal] {
            let a = conventional_attention(&x, &w, mask).unwrap();
            let b = dagpam_attention(&x, &w, mask).unwrap();
            assert!(a.y.max_abs_diff(&b.y) < 1e-12);
        }
    }

    #[test]
    fn sigma_zero_and_trained_lambdas() {
        let (x, w) = instance(8, 1.0, 2.0);
        let tr = dagpam_attention(&x, &w, Mask::None).unwrap();
        assert_eq!(tr.sigma_sum, 0.0);
        for i in 0..T {
            assert!(tr.p_g.row(i).iter().sum::<f64>().abs() < 1e-9);
        }
        let (_, w) = instance(8, 0.3303, 0.9355);
        assert!((w.sigma_sum() - 0.3948).abs() < 1e-9);
    }

    #[test]
    fn causal_mask_zeroes_future_and_keeps_sigma() {
        let (x, w) = instance(9, 1.2, 0.7);
        let tr = dagpam_attention(&x, &w, Mask::Causal).unwrap();
        for i in 0..T {
            for j in (i + 1)..T {
                assert_eq!(tr.p_g.get(i, j), 0.0);
            }
            let s: f64 = tr.p_g.row(i)[..=i].iter().sum();
            assert!((s - tr.sigma_sum).abs() < 1e-9);
        }
    }

    #[test]
    fn multi_head_cases() {
        let (x, w) = instance(10, 0.0, 0.0);
        let single = multi_head(&x, std::slice::from_ref(&w), &Matrix::identity(D_V), Mechanism::Conventional, Mask::None).unwrap();
        let direct = conventional_attention(&x, &w, Mask::None).unwrap().y;
        assert!(single.max_abs_diff(&direct) < 1e-15);

        let mut rng = RngStream::new(11, 0);
        let heads = vec![
            AttentionWeights::random(&mut rng, D, D_QK, 8, 0.5).with_lambdas(1.0, 1.0),
            AttentionWeights::random(&mut rng, D, D_QK, 8, 0.5).with_lambdas(1.0, 1.0),
        ];
        let w_out = gaussian_matrix(&mut rng, 16, D, 0.3);
        let out = multi_head(&x, &heads, &w_out, Mechanism::Dagpam, Mask::Causal).unwrap();
        let y0 = dagpam_attention(&x, &heads[0], Mask::Causal).unwrap().y;
        let y1 = dagpam_attention(&x, &heads[1], Mask::Causal).unwrap().y;
        let manual = Matrix::concat_cols(&[&y0, &y1]).unwrap().matmul(&w_out).unwrap();
        assert!(out.max_abs_diff(&manual) < 1e-12);

        // Swapping heads together with their projection blocks.
        let swapped_heads = vec![heads[1].clone(), heads[0].clone()];
        let swapped_out = Matrix::from_vec(
            16,
            D,
            [w_out.row_slice(8, 16).unwrap().into_data(), w_out.row_slice(0, 8).unwrap().into_data()].concat(),
        )
        .unwrap();
        let out2 = multi_head(&x, &swapped_heads, &swapped_out, Mechanism::Dagpam, Mask::Causal).unwrap();
        assert!(out.max_abs_diff(&out2) < 1e-12);

        assert!(multi_head(&x, &heads, &Matrix::zeros(8, D), Mechanism::Dagpam, Mask::None).is_err());
    }

    #[test]
    fn dynamics_decomposition() {
        let (x, w) = instance(12, 0.8, 0.0);
        let tr = dagpam_attention(&x, &w, Mask::None).unwrap();
        let dy = decompose_dynamics(&tr);
        assert!(dy.reconstruct(0.0).max_abs_diff(&dy.y_scaled) == 0.0);
        assert!(dy.y_scaled.max_abs_diff(&tr.y) < 1e-10);

        let (x, w) = instance(13, 1.0, 1.0);
        let tr = dagpam_attention(&x, &w, Mask::None).unwrap();
        assert_eq!(tr.sigma_sum, 1.0);
        let dy = decompose_dynamics(&tr);
        let y_from_parts = tr.y_pos.add(&dy.delta).unwrap();
        assert!(y_from_parts.max_abs_diff(&tr.y) < 1e-10);

        let (x, w) = instance(14, 1.7, 0.4);
        let tr = dagpam_attention(&x, &w, Mask::Causal).unwrap();
        let dy = decompose_dynamics(&tr);
        assert!(dy.reconstruct(tr.lambda_neg).max_abs_diff(&tr.y) < 1e-10);
    }

    #[test]
    fn audits() {
        let (x, w) = instance(15, 1.0, 1.0);
        let conv = conventional_attention(&x, &w, Mask::None).unwrap();
        let a = condition_audit(&conv.p_g, (0.0, 1.0), 1.0);
        assert!(a.finite_range_ok && a.fixed_sum_ok);
        let dg = dagpam_attention(&x, &w, Mask::None).unwrap();
        let a = condition_audit(&dg.p_g, (-1.0, 2.0), 1.0);
        assert!(a.finite_range_ok && a.fixed_sum_ok);

        let mut broken = conv.p_g.clone();
        for v in broken.row_mut(2) {
            *v *= 2.0;
        }
        let a = condition_audit(&broken, (0.0, 1.0), 1.0);
        assert!(!a.fixed_sum_ok);
    }

    #[test]
    fn affine_membership_cases() {
        let mut rng = RngStream::new(16, 0);
        let xv = gaussian_matrix(&mut rng, 4, 16, 1.0);
        let mean = numerics::row_mean(&xv);
        let m = affine_membership(mean.row(0), &xv, 1e-9).unwrap();
        assert!(m.is_member && m.residual < 1e-9);
        for c in &m.coefficients {
            assert!((c - 0.25).abs() < 1e-9);
        }

        // Offset by a vector orthogonal to the span of the rows, so it is also
        // orthogonal to every hull direction and to the hull offset.
        let mut off = gaussian_matrix(&mut rng, 1, 16, 1.0).into_data();
        let basis = gram_schmidt(&xv);
        for b in &basis {
            let proj: f64 = off.iter().zip(b).map(|(a, c)| a * c).sum();
            for (o, &bv) in off.iter_mut().zip(b) {
                *o -= proj * bv;
            }
        }
        let y: Vec<f64> = xv.row(1).iter().zip(&off).map(|(a, b)| a + b).collect();
        let m = affine_membership(&y, &xv, 1e-7).unwrap();
        assert!(!m.is_member);
        let off_norm = off.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((m.residual - off_norm).abs() < 1e-9);

        let repeated = Matrix::from_rows(&[[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]);
        assert!(matches!(affine_membership(&[1.0, 2.0, 3.0], &repeated, 1e-7), Err(LabError::DegenerateHull { .. })));
    }

    fn gram_schmidt(m: &Matrix) -> Vec<Vec<f64>> {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for i in 0..m.rows() {
            let mut v = m.row(i).to_vec();
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                for (x, &bv) in v.iter_mut().zip(b) {
                    *x -= p * bv;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
        basis
    }

    #[test]
    fn taped_head_matches_direct() {
        for (mech, lp, ln) in [(Mechanism::Conventional, 0.0, 0.0), (Mechanism::Dagpam, 1.0, 2.0)] {
            let (x, w) = instance(17, lp, ln);
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone());
            let head = HeadNodes {
                w_q_pos: tape.leaf(w.w_q_pos.clone()),
                w_k_pos: tape.leaf(w.w_k_pos.clone()),
                w_v: tape.leaf(w.w_v.clone()),
                w_q_neg: Some(tape.leaf(w.w_q_neg.clone())),
            };
            let mask = tape.constant(numerics::causal_mask(T));
            let y = record_head(&mut tape, xi, &head, mech, Activation::Relu, LambdaNodes::Fixed { pos: lp, neg: ln }, Some(mask)).unwrap();
            let direct = attend(&x, &w, mech, Mask::Causal).unwrap();
            assert!(tape.value(y).max_abs_diff(&direct.y) < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let (x, mut w) = instance(18, 0.0, 0.0);
        assert!(conventional_attention(&Matrix::zeros(0, D), &w, Mask::None).is_err());
        assert!(conventional_attention(&x.col_slice(0, 3).unwrap(), &w, Mask::None).is_err());
        w.w_q_neg = Matrix::zeros(3, 3);
        assert!(dagpam_attention(&x, &w, Mask::None).is_err());
    }
}
