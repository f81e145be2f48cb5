use anyhow::Result;
use serde::Serialize;

use gpam_core::attention::{conventional_attention, dagpam_attention, condition_audit, AttentionWeights, Mask, Mechanism};
use gpam_core::collapse::{
    avg_cosine_similarity, baseline_bound_certificate, dagpam_bound_certificate, precondition_instance, sandwich_bound_check,
    BoundCertificate, SandwichReport,
};
use gpam_core::grad_analysis::{check_dagpam_jacobian, check_softmax_jacobian, sample_simplex, total_grad_norm, total_grad_norm_direct};
use gpam_core::model::{faithfulness_test, train_toy, CollapseProfile, GradHistory, LayerMetrics, StackConfig, TrainOptions};
use gpam_core::numerics::{gaussian_matrix, RngStream};
use gpam_core::parallel::map_indexed;

use crate::output::{fmt_f64, Artifact};
use crate::{ExperimentSpec, Kind};

pub(crate) struct Outcome {
    pub artifacts: Vec<Artifact>,
    pub violations: Vec<String>,
    pub notes: Vec<String>,
}

impl Outcome {
    fn new(artifacts: Vec<Artifact>) -> Self {
        Self {
            artifacts,
            violations: Vec::new(),
            notes: Vec::new(),
        }
    }
}

pub(crate) fn execute(spec: &ExperimentSpec) -> Result<Outcome> {
    match spec.kind {
        Kind::Faithfulness => faithfulness(spec),
        Kind::GradHistory => grad_history(spec),
        Kind::JacobianCheck => jacobian_check(spec),
        Kind::BoundCheck => bound_check(spec),
        Kind::LambdaSweep => {
            let grid = spec.grid.clone().unwrap_or_else(|| vec![(1.0, 0.5), (1.0, 1.0), (1.0, 1.5), (1.0, 2.0)]);
            let rows = lambda_sweep(&faithfulness_cfg(spec), &grid, spec.n_seeds, spec.seq_len)?;
            Ok(Outcome::new(vec![sweep_artifact(&rows)]))
        }
        Kind::Fig3Toy => {
            let grid = spec
                .grid
                .clone()
                .unwrap_or_else(|| vec![(0.0, 0.0), (1.0, 0.0), (1.0, 0.5), (1.0, 1.0), (1.0, 1.5), (1.0, 2.0)]);
            let rows = fig3_toy(&grid, spec.repeats, FIG3_DIMS, spec.seed)?;
            Ok(Outcome::new(vec![fig3_artifact(&rows)]))
        }
        Kind::ConditionAudit => audit(spec),
    }
}

const LAYER_HEADER: [&str; 6] = [
    "layer",
    "attn_out_res_norm",
    "attn_out_cosine",
    "mlp_out_res_norm",
    "mlp_out_cosine",
    "attention_influence",
];

fn metric_cells(m: &LayerMetrics) -> Vec<String> {
    [
        m.attn_out_res_norm,
        m.attn_out_cosine,
        m.mlp_out_res_norm,
        m.mlp_out_cosine,
        m.attention_influence,
    ]
    .into_iter()
    .map(fmt_f64)
    .collect()
}

fn profile_rows(p: &CollapseProfile) -> Vec<Vec<String>> {
    p.layers
        .iter()
        .enumerate()
        .map(|(l, m)| {
            let mut row = vec![(l + 1).to_string()];
            row.extend(metric_cells(m));
            row
        })
        .collect()
}

fn faithfulness_cfg(spec: &ExperimentSpec) -> StackConfig {
    StackConfig {
        init_std: spec.faithfulness_init_std(),
        seed: spec.seed,
        ..spec.cfg.clone()
    }
}

fn conventional(cfg: &StackConfig) -> StackConfig {
    StackConfig {
        lambdas_trainable: false,
        ..cfg.clone().with_mechanism(Mechanism::Conventional, 0.0, 0.0)
    }
}

fn faithfulness(spec: &ExperimentSpec) -> Result<Outcome> {
    let cfg = faithfulness_cfg(spec);
    let (lp, ln) = (spec.lambda_pos.unwrap_or(1.0), spec.lambda_neg.unwrap_or(2.0));
    let conv = faithfulness_test(&conventional(&cfg), spec.n_seeds, spec.seq_len)?;
    let dual = faithfulness_test(&cfg.clone().with_mechanism(Mechanism::Dagpam, lp, ln), spec.n_seeds, spec.seq_len)?;
    Ok(Outcome::new(vec![
        Artifact::csv("faithfulness_conventional.csv", &LAYER_HEADER, profile_rows(&conv)),
        Artifact::csv("faithfulness_dagpam.csv", &LAYER_HEADER, profile_rows(&dual)),
    ]))
}

/// Seed-mean grad norms `[step][layer]` and losses `[step]`, over the runs
/// that reached each step.
fn aggregate(histories: &[GradHistory], steps: usize, layers: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut norms = vec![vec![0.0; layers]; steps];
    let mut losses = vec![0.0; steps];
    let mut counts = vec![0usize; steps];
    for h in histories {
        for (s, (g, l)) in h.grad_norms.iter().zip(&h.losses).enumerate() {
            for (acc, v) in norms[s].iter_mut().zip(g) {
                *acc += v;
            }
            losses[s] += l;
            counts[s] += 1;
        }
    }
    let reached = counts.iter().take_while(|&&c| c > 0).count();
    norms.truncate(reached);
    losses.truncate(reached);
    for (s, c) in counts.iter().take(reached).enumerate() {
        let c = *c as f64;
        norms[s].iter_mut().for_each(|v| *v /= c);
        losses[s] /= c;
    }
    (norms, losses)
}

fn grad_history(spec: &ExperimentSpec) -> Result<Outcome> {
    let base = StackConfig {
        init_std: spec.training_init_std(),
        ..spec.cfg.clone()
    };
    let (lp, ln) = (spec.lambda_pos.unwrap_or(1.0), spec.lambda_neg.unwrap_or(1.0));
    let opts = TrainOptions {
        task: spec.task,
        steps: spec.steps,
        lr: spec.lr,
        seq_len: spec.seq_len,
        batch: 1,
    };
    let mut grad_rows = Vec::new();
    let mut loss_rows = Vec::new();
    let mut notes = Vec::new();
    for (name, cfg) in [
        ("conventional", conventional(&base)),
        ("dagpam", base.clone().with_mechanism(Mechanism::Dagpam, lp, ln)),
    ] {
        let runs = map_indexed(spec.n_seeds, |s| {
            let c = StackConfig {
                seed: spec.seed.wrapping_add(s as u64),
                ..cfg.clone()
            };
            train_toy(&c, &opts)
        })
        .into_iter()
        .collect::<gpam_core::Result<Vec<_>>>()?;
        for (s, h) in runs.iter().enumerate() {
            if let Some(step) = h.diverged {
                notes.push(format!("{name} seed {} diverged at step {step}", spec.seed.wrapping_add(s as u64)));
            }
        }
        let (norms, losses) = aggregate(&runs, spec.steps, cfg.n_layers);
        for (step, layer_norms) in norms.iter().enumerate() {
            for (l, v) in layer_norms.iter().enumerate() {
                grad_rows.push(vec![name.to_string(), step.to_string(), (l + 1).to_string(), fmt_f64(*v)]);
            }
            loss_rows.push(vec![name.to_string(), step.to_string(), fmt_f64(losses[step])]);
        }
    }
    Ok(Outcome {
        artifacts: vec![
            Artifact::csv("grad_history.csv", &["mechanism", "step", "layer", "mean_grad_norm"], grad_rows),
            Artifact::csv("loss_history.csv", &["mechanism", "step", "mean_loss"], loss_rows),
        ],
        violations: Vec::new(),
        notes,
    })
}

/// Logit rows for FD checks: `T = 8`, standard deviation 2.
fn logit_rows(seed: u64, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| gaussian_matrix(&mut RngStream::new(seed, i as u64), 1, 8, 2.0).into_data())
        .collect()
}

fn jacobian_check(spec: &ExperimentSpec) -> Result<Outcome> {
    const FD_TOL: f64 = 1e-6;
    let rows = logit_rows(spec.seed, spec.instances);
    let mut lrng = RngStream::new(spec.seed, u64::MAX);
    let lambdas: Vec<(f64, f64)> = (0..spec.instances).map(|_| (lrng.uniform_range(0.0, 3.0), lrng.uniform_range(0.0, 3.0))).collect();
    let soft = check_softmax_jacobian(&rows);
    let dual = check_dagpam_jacobian(&rows, &lambdas);
    let closed_err = (0..spec.instances)
        .map(|i| {
            let p = sample_simplex(&mut RngStream::new(spec.seed, (1 << 32) + i as u64), 8);
            (total_grad_norm(&p) - total_grad_norm_direct(&p)).abs()
        })
        .fold(0.0, f64::max);
    let table = [
        ("softmax_vs_fd", soft.max_abs_error, soft.max_rel_error, FD_TOL),
        ("dagpam_vs_fd", dual.max_abs_error, dual.max_rel_error, FD_TOL),
        ("total_norm_closed_form", closed_err, closed_err, 1e-12),
    ];
    let mut violations = Vec::new();
    let body = table
        .iter()
        .map(|&(name, abs, rel, tol)| {
            let pass = rel <= tol;
            if !pass {
                violations.push(format!("{name}: max relative error {rel} exceeds {tol}"));
            }
            vec![name.to_string(), spec.instances.to_string(), fmt_f64(abs), fmt_f64(rel), pass.to_string()]
        })
        .collect();
    Ok(Outcome {
        artifacts: vec![Artifact::csv(
            "jacobian_check.csv",
            &["check", "rows", "max_abs_error", "max_rel_error", "pass"],
            body,
        )],
        violations,
        notes: Vec::new(),
    })
}

/// Bound-check instance sizes.
const BOUND_DIMS: (usize, usize, usize, usize) = (6, 8, 4, 8);

struct BoundInstance {
    baseline: BoundCertificate,
    dual: BoundCertificate,
    sandwich: SandwichReport,
}

fn bound_check(spec: &ExperimentSpec) -> Result<Outcome> {
    let (t, d, d_qk, d_v) = BOUND_DIMS;
    let results = map_indexed(spec.instances, |i| -> gpam_core::Result<BoundInstance> {
        let stream = i as u64;
        let mut rng = RngStream::new(spec.seed, stream);
        let lp = spec.lambda_pos.unwrap_or_else(|| rng.uniform_range(0.0, 3.0));
        let ln = spec.lambda_neg.unwrap_or_else(|| rng.uniform_range(0.0, 3.0));
        let (x, w) = precondition_instance(&mut rng, t, d, d_qk, d_v, lp, ln)?;
        Ok(BoundInstance {
            baseline: baseline_bound_certificate(&x, &w)?.with_origin(spec.seed, stream),
            dual: dagpam_bound_certificate(&x, &w)?.with_origin(spec.seed, stream),
            sandwich: sandwich_bound_check(&x, &w)?,
        })
    })
    .into_iter()
    .collect::<gpam_core::Result<Vec<_>>>()?;

    let mut violations = Vec::new();
    let mut rows = Vec::new();
    for (i, r) in results.iter().enumerate() {
        let (b, g, s) = (&r.baseline, &r.dual, &r.sandwich);
        let dominated = g.rhs - g.baseline_rhs.unwrap_or(g.rhs) >= -1e-12;
        let checks = [
            (b.precondition_ok && g.precondition_ok, "precondition not met"),
            (!b.violated(), "baseline lhs exceeds rhs"),
            (!g.violated(), "dual-branch lhs exceeds rhs"),
            (dominated, "dual-branch rhs below baseline rhs"),
            (s.violations == 0, "sandwich bound violated"),
            (s.d_norm_ok, "D-norm inequality violated"),
        ];
        let mut ok = true;
        for (pass, what) in checks {
            if !pass {
                ok = false;
                violations.push(format!("instance {i}: {what}"));
            }
        }
        rows.push(vec![
            i.to_string(),
            fmt_f64(g.lambda_pos),
            fmt_f64(g.lambda_neg),
            fmt_f64(g.max_spread),
            fmt_f64(b.gamma),
            fmt_f64(g.gamma),
            fmt_f64(b.lhs),
            fmt_f64(b.rhs),
            fmt_f64(g.lhs),
            fmt_f64(g.rhs),
            s.violations.to_string(),
            fmt_f64(s.d_norm_product),
            fmt_f64(s.d_norm_bound),
            ok.to_string(),
        ]);
    }
    let baseline: Vec<&BoundCertificate> = results.iter().map(|r| &r.baseline).collect();
    let dual: Vec<&BoundCertificate> = results.iter().map(|r| &r.dual).collect();
    Ok(Outcome {
        artifacts: vec![
            Artifact::json("baseline_certificates.json", serde_json::to_string_pretty(&baseline)? + "\n"),
            Artifact::json("dagpam_certificates.json", serde_json::to_string_pretty(&dual)? + "\n"),
            Artifact::csv(
                "bound_check.csv",
                &[
                    "instance",
                    "lambda_pos",
                    "lambda_neg",
                    "max_spread",
                    "baseline_gamma",
                    "dagpam_gamma",
                    "baseline_lhs",
                    "baseline_rhs",
                    "dagpam_lhs",
                    "dagpam_rhs",
                    "sandwich_violations",
                    "d_norm_product",
                    "d_norm_bound",
                    "ok",
                ],
                rows,
            ),
        ],
        violations,
        notes: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda_pos: f64,
    pub lambda_neg: f64,
    pub sigma: f64,
    pub layer: usize,
    pub metrics: LayerMetrics,
}

/// Faithfulness metrics of a dual-branch stack for each `(lambda+, lambda-)`
/// cell, seed-averaged, one row per cell and layer.
pub fn lambda_sweep(cfg: &StackConfig, grid: &[(f64, f64)], n_seeds: usize, seq_len: usize) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &(lp, ln) in grid {
        let c = cfg.clone().with_mechanism(Mechanism::Dagpam, lp, ln);
        let p = faithfulness_test(&c, n_seeds, seq_len)?;
        for (l, m) in p.layers.iter().enumerate() {
            rows.push(SweepRow {
                lambda_pos: lp,
                lambda_neg: ln,
                sigma: 1.0 + lp - ln,
                layer: l + 1,
                metrics: *m,
            });
        }
    }
    Ok(rows)
}

fn sweep_artifact(rows: &[SweepRow]) -> Artifact {
    let mut header = vec!["lambda_pos", "lambda_neg", "sigma"];
    header.extend(LAYER_HEADER);
    let body = rows
        .iter()
        .map(|r| {
            let mut row = vec![fmt_f64(r.lambda_pos), fmt_f64(r.lambda_neg), fmt_f64(r.sigma), r.layer.to_string()];
            row.extend(metric_cells(&r.metrics));
            row
        })
        .collect();
    Artifact::csv("lambda_sweep.csv", &header, body)
}

/// Default toy-layer sizes: `T`, `d`, `d_qk`, `d_v`.
pub const FIG3_DIMS: (usize, usize, usize, usize) = (8, 16, 4, 16);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig3Row {
    pub lambda_pos: f64,
    pub lambda_neg: f64,
    pub sigma: f64,
    pub mean_cosine: f64,
    pub repeats: usize,
}

/// One dual-branch layer on standard-Gaussian inputs and weights. Repeat `r`
/// draws from stream `r`, shared by every lambda cell.
pub fn fig3_toy(grid: &[(f64, f64)], repeats: usize, dims: (usize, usize, usize, usize), seed: u64) -> Result<Vec<Fig3Row>> {
    let (t, d, d_qk, d_v) = dims;
    grid.iter()
        .map(|&(lp, ln)| {
            let cos = map_indexed(repeats, |r| {
                let mut rng = RngStream::new(seed, r as u64);
                let x = gaussian_matrix(&mut rng, t, d, 1.0);
                let w = AttentionWeights::random(&mut rng, d, d_qk, d_v, 1.0).with_lambdas(lp, ln);
                avg_cosine_similarity(&dagpam_attention(&x, &w, Mask::None)?.y)
            })
            .into_iter()
            .collect::<gpam_core::Result<Vec<_>>>()?;
            Ok(Fig3Row {
                lambda_pos: lp,
                lambda_neg: ln,
                sigma: 1.0 + lp - ln,
                mean_cosine: cos.iter().sum::<f64>() / repeats as f64,
                repeats,
            })
        })
        .collect()
}

fn fig3_artifact(rows: &[Fig3Row]) -> Artifact {
    let body = rows
        .iter()
        .map(|r| {
            vec![
                fmt_f64(r.lambda_pos),
                fmt_f64(r.lambda_neg),
                fmt_f64(r.sigma),
                fmt_f64(r.mean_cosine),
                r.repeats.to_string(),
            ]
        })
        .collect();
    Artifact::csv("fig3_toy.csv", &["lambda_pos", "lambda_neg", "sigma", "mean_cosine", "repeats"], body)
}

fn audit(spec: &ExperimentSpec) -> Result<Outcome> {
    let (t, d, d_qk, d_v) = FIG3_DIMS;
    type Declared = ((f64, f64), f64);
    // (name, lambda+, lambda-, (declared range, declared sum))
    let cases: [(&str, f64, f64, Declared); 4] = [
        ("conventional", 0.0, 0.0, ((0.0, 1.0), 1.0)),
        ("dagpam", 1.0, 1.0, ((-1.0, 2.0), 1.0)),
        ("dagpam", 1.0, 2.0, ((-2.0, 2.0), 0.0)),
        ("dagpam", 0.3303, 0.9355, ((-0.9355, 1.3303), 0.3948)),
    ];
    let mut rows = Vec::new();
    let mut violations = Vec::new();
    for (name, lp, ln, (range, sum)) in cases {
        let audits = map_indexed(spec.instances, |i| -> gpam_core::Result<_> {
            let mut rng = RngStream::new(spec.seed, i as u64);
            let x = gaussian_matrix(&mut rng, t, d, 1.0);
            let w = AttentionWeights::random(&mut rng, d, d_qk, d_v, 1.0).with_lambdas(lp, ln);
            let tr = if name == "conventional" {
                conventional_attention(&x, &w, Mask::None)?
            } else {
                dagpam_attention(&x, &w, Mask::None)?
            };
            Ok(condition_audit(&tr.p_g, range, sum))
        })
        .into_iter()
        .collect::<gpam_core::Result<Vec<_>>>()?;
        let min = audits.iter().map(|a| a.min_score).fold(f64::INFINITY, f64::min);
        let max = audits.iter().map(|a| a.max_score).fold(f64::NEG_INFINITY, f64::max);
        let sum_err = audits
            .iter()
            .flat_map(|a| a.row_sums.iter().map(move |s| (s - a.declared_sum).abs()))
            .fold(0.0, f64::max);
        let range_ok = audits.iter().all(|a| a.finite_range_ok);
        let sum_ok = audits.iter().all(|a| a.fixed_sum_ok);
        if !range_ok || !sum_ok {
            violations.push(format!("{name} ({lp}, {ln}): range ok {range_ok}, sum ok {sum_ok}"));
        }
        rows.push(vec![
            name.to_string(),
            fmt_f64(lp),
            fmt_f64(ln),
            fmt_f64(range.0),
            fmt_f64(range.1),
            fmt_f64(sum),
            fmt_f64(min),
            fmt_f64(max),
            fmt_f64(sum_err),
            range_ok.to_string(),
            sum_ok.to_string(),
            spec.instances.to_string(),
        ]);
    }
    Ok(Outcome {
        artifacts: vec![Artifact::csv(
            "condition_audit.csv",
            &[
                "mechanism",
                "lambda_pos",
                "lambda_neg",
                "declared_lo",
                "declared_hi",
                "declared_sum",
                "min_score",
                "max_score",
                "max_row_sum_error",
                "finite_range_ok",
                "fixed_sum_ok",
                "instances",
            ],
            rows,
        )],
        violations,
        notes: Vec::new(),
    })
}
