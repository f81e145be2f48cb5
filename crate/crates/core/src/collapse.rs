//! Rank-collapse metrics and residual-bound certificates.
//!
//! `res(X) = X - 1 x_bar^T` with `x_bar` the column mean. The certificates
//! compare the measured `|res(Y)|_{1,inf}` of one attention head against the
//! cubic bound in `|res(X)|_{1,inf}`, where the bound is only claimed while
//! every row of `E = res(X) W_QK res(X)^T / sqrt(d_qk)` has spread at most
//! [`SPREAD_LIMIT`].

use serde::{Deserialize, Serialize};

use crate::attention::{conventional_attention, dagpam_attention, Activation, AttentionWeights, Mask};
use crate::error::{LabError, Result};
use crate::numerics::{gaussian_matrix, row_mean, row_softmax, Matrix, NormKind, RngStream};

/// Largest row spread of `E` for which `exp(x) <= 1 + 2x` holds on `[0, x]`.
pub const SPREAD_LIMIT: f64 = 1.256;

const SANDWICH_TOL: f64 = 1e-12;

/// `x - 1 mean(x)^T`.
pub fn residual(x: &Matrix) -> Matrix {
    let mean = row_mean(x);
    let mut out = x.clone();
    for i in 0..x.rows() {
        for (v, m) in out.row_mut(i).iter_mut().zip(mean.row(0)) {
            *v -= m;
        }
    }
    out
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm2(a) * norm2(b))
}

/// `(1/T) sum_i |y_i - y_bar| / |y_i|`. Zero rows are skipped with a warning.
pub fn avg_relative_residual_norm(y: &Matrix) -> Result<f64> {
    let res = residual(y);
    let mut total = 0.0;
    let mut skipped = 0;
    for i in 0..y.rows() {
        let n = norm2(y.row(i));
        if n == 0.0 {
            skipped += 1;
            continue;
        }
        total += norm2(res.row(i)) / n;
    }
    if skipped == y.rows() {
        return Err(LabError::UndefinedMetric("relative residual norm of an all-zero matrix".into()));
    }
    if skipped > 0 {
        log::warn!("relative residual norm skipped {skipped} zero rows");
    }
    Ok(total / y.rows() as f64)
}

/// `(1/T^2) sum_i sum_j cos(y_i, y_j)`, self-pairs included.
pub fn avg_cosine_similarity(y: &Matrix) -> Result<f64> {
    let t = y.rows();
    if t == 0 {
        return Err(LabError::EmptySequence("avg_cosine_similarity"));
    }
    let norms: Vec<f64> = (0..t).map(|i| norm2(y.row(i))).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(LabError::UndefinedMetric(format!("cosine similarity with zero row {i}")));
    }
    let mut total = 0.0;
    for i in 0..t {
        for j in 0..t {
            let dot: f64 = y.row(i).iter().zip(y.row(j)).map(|(a, b)| a * b).sum();
            total += dot / (norms[i] * norms[j]);
        }
    }
    Ok(total / (t * t) as f64)
}

/// Mean over rows of `cos(y_i, x_i)`; lower means the attention branch moved
/// representations further from their inputs.
pub fn attention_influence(y: &Matrix, x: &Matrix) -> Result<f64> {
    if y.shape() != x.shape() {
        return Err(LabError::ShapeMismatch {
            op: "attention_influence",
            left: y.shape(),
            right: x.shape(),
        });
    }
    if y.rows() == 0 {
        return Err(LabError::EmptySequence("attention_influence"));
    }
    let mut total = 0.0;
    for i in 0..y.rows() {
        if norm2(y.row(i)) == 0.0 || norm2(x.row(i)) == 0.0 {
            return Err(LabError::UndefinedMetric(format!("attention influence with zero row {i}")));
        }
        total += cosine(y.row(i), x.row(i));
    }
    Ok(total / y.rows() as f64)
}

/// The rows of `m` that are not identically zero.
///
/// With `sigma = 0` and a causal mask the first output row is exactly zero, as
/// its two softmax rows are the same one-hot vector.
pub fn nonzero_rows(m: &Matrix) -> Matrix {
    let keep: Vec<f64> = (0..m.rows()).filter(|&i| m.row(i).iter().any(|&v| v != 0.0)).flat_map(|i| m.row(i).to_vec()).collect();
    let rows = keep.len() / m.cols().max(1);
    Matrix::from_vec(rows, m.cols(), keep).expect("whole rows kept")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMetrics {
    pub residual_matrix: Matrix,
    pub avg_relative_norm: f64,
    pub avg_cosine: f64,
}

impl ResidualMetrics {
    pub fn of(y: &Matrix) -> Result<Self> {
        Ok(Self {
            residual_matrix: residual(y),
            avg_relative_norm: avg_relative_residual_norm(y)?,
            avg_cosine: avg_cosine_similarity(y)?,
        })
    }
}

/// `res(X) W_QK res(X)^T / sqrt(d_qk)`.
pub fn e_matrix(r: &Matrix, w_qk: &Matrix, d_qk: usize) -> Result<Matrix> {
    Ok(r.matmul(w_qk)?.matmul(&r.transpose())?.scale(1.0 / (d_qk as f64).sqrt()))
}

/// `D_ii = max_{j,j'} |E_ij - E_ij'|`, the spread of row `i`.
pub fn row_spreads(e: &Matrix) -> Vec<f64> {
    (0..e.rows())
        .map(|i| {
            let r = e.row(i);
            let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
            hi - lo
        })
        .collect()
}

fn max_column_pair_sum(e: &Matrix) -> f64 {
    let t = e.cols();
    let mut best = 0.0f64;
    for j in 0..t {
        for jp in (j + 1)..t {
            let s: f64 = (0..e.rows()).map(|i| (e.get(i, j) - e.get(i, jp)).abs()).sum();
            best = best.max(s);
        }
    }
    best
}

fn max_joint_pair_sum(ep: &Matrix, en: &Matrix) -> f64 {
    let t = ep.cols();
    let pairs: Vec<(usize, usize)> = (0..t).flat_map(|j| ((j + 1)..t).map(move |jp| (j, jp))).collect();
    let diffs = |e: &Matrix, (j, jp): (usize, usize)| (0..e.rows()).map(|i| (e.get(i, j) - e.get(i, jp)).abs()).collect::<Vec<_>>();
    let dp: Vec<Vec<f64>> = pairs.iter().map(|&p| diffs(ep, p)).collect();
    let dn: Vec<Vec<f64>> = pairs.iter().map(|&p| diffs(en, p)).collect();
    let mut best = 0.0f64;
    for a in &dp {
        for b in &dn {
            best = best.max(a.iter().zip(b).map(|(x, y)| x * y).sum());
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaEstimate {
    pub gamma: f64,
    /// Every listed `E` has constant rows, so no condition constrains gamma.
    pub degenerate: bool,
}

/// Smallest gamma meeting the spread condition for each `E`, and for two
/// matrices also the joint condition with its `sqrt(2)` factor.
pub fn compute_gamma(e_list: &[Matrix]) -> Result<GammaEstimate> {
    for e in e_list {
        if e.rows() != e.cols() {
            return Err(LabError::ShapeMismatch {
                op: "compute_gamma",
                left: e.shape(),
                right: (e.rows(), e.rows()),
            });
        }
    }
    let mut gamma = 0.0f64;
    let mut constrained = false;
    for e in e_list {
        let denom = max_column_pair_sum(e);
        if denom > 0.0 {
            let num: f64 = row_spreads(e).iter().sum();
            gamma = gamma.max((num / denom).sqrt());
            constrained = true;
        }
    }
    if let [ep, en] = e_list {
        let denom = max_joint_pair_sum(ep, en);
        if denom > 0.0 {
            let num: f64 = row_spreads(ep).iter().zip(row_spreads(en)).map(|(a, b)| a * b).sum();
            gamma = gamma.max((num / denom).sqrt() / 2f64.sqrt());
            constrained = true;
        }
    }
    Ok(GammaEstimate {
        gamma,
        degenerate: !constrained,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CertificateKind {
    Baseline,
    Dagpam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCertificate {
    pub kind: CertificateKind,
    pub lhs: f64,
    pub rhs: f64,
    pub gamma: f64,
    pub gamma_degenerate: bool,
    pub precondition_ok: bool,
    pub max_spread: f64,
    /// The baseline bound on the same instance, for dual-branch certificates.
    pub baseline_rhs: Option<f64>,
    pub lambda_pos: f64,
    pub lambda_neg: f64,
    /// `(seed, stream)` of the random stream that generated the instance.
    pub seed: Option<u64>,
    pub stream: Option<u64>,
}

impl BoundCertificate {
    /// `lhs > rhs` beyond rounding while the bound is claimed.
    pub fn violated(&self) -> bool {
        self.precondition_ok && self.lhs > self.rhs + 1e-9 * self.rhs.max(1.0)
    }

    pub fn with_origin(mut self, seed: u64, stream: u64) -> Self {
        self.seed = Some(seed);
        self.stream = Some(stream);
        self
    }
}

fn w_qk_pos(w: &AttentionWeights) -> Result<Matrix> {
    w.w_q_pos.matmul(&w.w_k_pos.transpose())
}

fn w_qk_neg(w: &AttentionWeights) -> Result<Matrix> {
    w.w_q_pos.matmul(&w.w_q_neg)?.matmul(&w.w_k_pos.transpose())
}

fn cubic_factor(w: &AttentionWeights, r: &Matrix) -> f64 {
    4.0 * 2f64.sqrt() * w.w_v.norm(NormKind::L1Inf) / (w.d_qk() as f64).sqrt() * r.norm(NormKind::L1Inf).powi(3)
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

/// Single head, no mask.
pub fn baseline_bound_certificate(x: &Matrix, w: &AttentionWeights) -> Result<BoundCertificate> {
    let r = residual(x);
    let wqk = w_qk_pos(w)?;
    let e = e_matrix(&r, &wqk, w.d_qk())?;
    let max_spread = max_of(&row_spreads(&e));
    let g = compute_gamma(std::slice::from_ref(&e))?;
    let y = conventional_attention(x, w, Mask::None)?.y;
    let lhs = residual(&y).norm(NormKind::L1Inf);
    let rhs = g.gamma * wqk.norm(NormKind::L1) * cubic_factor(w, &r);
    Ok(BoundCertificate {
        kind: CertificateKind::Baseline,
        lhs,
        rhs,
        gamma: g.gamma,
        gamma_degenerate: g.degenerate,
        precondition_ok: max_spread <= SPREAD_LIMIT,
        max_spread,
        baseline_rhs: None,
        lambda_pos: 0.0,
        lambda_neg: 0.0,
        seed: None,
        stream: None,
    })
}

/// Single head, no mask, linear negative branch. The bound is
/// `B_org + c gamma |l+ |W+_QK|_1 - l- |W-_QK|_1|` with
/// `W-_QK = W_Q+ W_Q- W_K+^T`. Gamma covers both branches, or only the
/// positive one when `lambda_neg = 0` and the negative branch is inert.
pub fn dagpam_bound_certificate(x: &Matrix, w: &AttentionWeights) -> Result<BoundCertificate> {
    let lin = w.clone().with_activation(Activation::Identity);
    let r = residual(x);
    let wp = w_qk_pos(&lin)?;
    let wn = w_qk_neg(&lin)?;
    let ep = e_matrix(&r, &wp, lin.d_qk())?;
    let en = e_matrix(&r, &wn, lin.d_qk())?;
    let (g, max_spread) = if lin.lambda_neg == 0.0 {
        (compute_gamma(std::slice::from_ref(&ep))?, max_of(&row_spreads(&ep)))
    } else {
        (
            compute_gamma(&[ep.clone(), en.clone()])?,
            max_of(&row_spreads(&ep)).max(max_of(&row_spreads(&en))),
        )
    };
    let g_base = compute_gamma(std::slice::from_ref(&ep))?;
    let factor = cubic_factor(&lin, &r);
    let l1p = wp.norm(NormKind::L1);
    let l1n = wn.norm(NormKind::L1);
    let baseline_rhs = g_base.gamma * l1p * factor;
    let b_org = g.gamma * l1p * factor;
    let rhs = b_org + g.gamma * (lin.lambda_pos * l1p - lin.lambda_neg * l1n).abs() * factor;
    let y = dagpam_attention(x, &lin, Mask::None)?.y;
    let lhs = residual(&y).norm(NormKind::L1Inf);
    Ok(BoundCertificate {
        kind: CertificateKind::Dagpam,
        lhs,
        rhs,
        gamma: g.gamma,
        gamma_degenerate: g.degenerate,
        precondition_ok: max_spread <= SPREAD_LIMIT,
        max_spread,
        baseline_rhs: Some(baseline_rhs),
        lambda_pos: lin.lambda_pos,
        lambda_neg: lin.lambda_neg,
        seed: None,
        stream: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichReport {
    pub precondition_ok: bool,
    /// Elementwise failures of `(1 - 2 D_ii) P~_ij <= P_ij <= (1 + 2 D_ii) P~_ij`.
    pub violations: usize,
    pub max_d: f64,
    /// `|D 1|_1 |D 1|_inf`
    pub d_norm_product: f64,
    /// `8 gamma^2 |E|_1^2`
    pub d_norm_bound: f64,
    pub d_norm_ok: bool,
}

/// Brackets the true `P` between `(I -/+ 2D) 1 softmax(r)^T` with
/// `r = res(X) W_QK^T x_bar / sqrt(d_qk)`. Skipped (no element checks) when the
/// spread precondition fails.
pub fn sandwich_bound_check(x: &Matrix, w: &AttentionWeights) -> Result<SandwichReport> {
    let r_mat = residual(x);
    let wqk = w_qk_pos(w)?;
    let e = e_matrix(&r_mat, &wqk, w.d_qk())?;
    let d = row_spreads(&e);
    let max_d = max_of(&d);
    let precondition_ok = max_d <= SPREAD_LIMIT;
    let g = compute_gamma(std::slice::from_ref(&e))?;
    let d_norm_product = d.iter().sum::<f64>() * max_d;
    let d_norm_bound = 8.0 * g.gamma * g.gamma * e.norm(NormKind::L1).powi(2);
    let d_norm_ok = d_norm_product <= d_norm_bound * (1.0 + 1e-12) + 1e-300;

    let mut violations = 0;
    if precondition_ok {
        let x_bar = row_mean(x).transpose();
        let r = r_mat.matmul(&wqk.transpose())?.matmul(&x_bar)?.scale(1.0 / (w.d_qk() as f64).sqrt());
        let p_tilde = row_softmax(&r.transpose());
        let p = conventional_attention(x, w, Mask::None)?.p_pos;
        for i in 0..p.rows() {
            for j in 0..p.cols() {
                let base = p_tilde.get(0, j);
                let v = p.get(i, j);
                if v < (1.0 - 2.0 * d[i]) * base - SANDWICH_TOL || v > (1.0 + 2.0 * d[i]) * base + SANDWICH_TOL {
                    violations += 1;
                }
            }
        }
    }
    Ok(SandwichReport {
        precondition_ok,
        violations,
        max_d,
        d_norm_product,
        d_norm_bound,
        d_norm_ok,
    })
}

/// Spread margin applied when rescaling inputs, so the precondition holds
/// with room for rounding.
const SPREAD_SAFETY: f64 = 0.9;

/// Draws a Gaussian input and head, then shrinks the input until every
/// relevant `E` meets the spread precondition. Spreads are quadratic in the
/// input scale, so each pass rescales by the square root of the ratio.
pub fn precondition_instance(
    rng: &mut RngStream,
    t: usize,
    d: usize,
    d_qk: usize,
    d_v: usize,
    lambda_pos: f64,
    lambda_neg: f64,
) -> Result<(Matrix, AttentionWeights)> {
    let w = AttentionWeights::random(rng, d, d_qk, d_v, 1.0)
        .with_lambdas(lambda_pos, lambda_neg)
        .with_activation(Activation::Identity);
    let mut x = gaussian_matrix(rng, t, d, 1.0);
    let wp = w_qk_pos(&w)?;
    let wn = w_qk_neg(&w)?;
    for _ in 0..8 {
        let r = residual(&x);
        let spread = max_of(&row_spreads(&e_matrix(&r, &wp, d_qk)?)).max(max_of(&row_spreads(&e_matrix(&r, &wn, d_qk)?)));
        if spread <= SPREAD_LIMIT * SPREAD_SAFETY {
            return Ok((x, w));
        }
        x = x.scale((SPREAD_LIMIT * SPREAD_SAFETY / spread).sqrt());
    }
    Err(LabError::InvalidConfig("could not rescale input to meet the spread precondition".into()))
}
