use serde::Serialize;

use crate::collapse::{attention_influence, avg_cosine_similarity, avg_relative_residual_norm, nonzero_rows};
use crate::error::Result;
use crate::numerics::{gaussian_matrix, Matrix, RngStream};
use crate::parallel::map_indexed;

use super::config::StackConfig;
use super::stack::{build_stack, StackForward};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct LayerMetrics {
    pub attn_out_res_norm: f64,
    pub attn_out_cosine: f64,
    pub mlp_out_res_norm: f64,
    pub mlp_out_cosine: f64,
    pub attention_influence: f64,
}

impl LayerMetrics {
    fn accumulate(&mut self, o: &LayerMetrics) {
        self.attn_out_res_norm += o.attn_out_res_norm;
        self.attn_out_cosine += o.attn_out_cosine;
        self.mlp_out_res_norm += o.mlp_out_res_norm;
        self.mlp_out_cosine += o.mlp_out_cosine;
        self.attention_influence += o.attention_influence;
    }

    fn divide(&mut self, n: f64) {
        self.attn_out_res_norm /= n;
        self.attn_out_cosine /= n;
        self.mlp_out_res_norm /= n;
        self.mlp_out_cosine /= n;
        self.attention_influence /= n;
    }
}

/// Seed-averaged per-layer collapse metrics of an untrained stack.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollapseProfile {
    pub layers: Vec<LayerMetrics>,
    /// Per seed, in seed order.
    pub per_seed: Vec<Vec<LayerMetrics>>,
}

impl CollapseProfile {
    pub fn n_seeds(&self) -> usize {
        self.per_seed.len()
    }

    pub fn top(&self) -> &LayerMetrics {
        self.layers.last().expect("at least one layer")
    }
}

/// Metrics of every layer for one forward pass. Exactly-zero rows are left
/// out of the residual and cosine metrics. Influence compares the residual
/// stream after attention with the stack input.
pub fn profile_forward(fwd: &StackForward, x: &Matrix) -> Result<Vec<LayerMetrics>> {
    fwd.layers
        .iter()
        .map(|l| {
            let attn = nonzero_rows(&l.attn_out);
            let mlp = nonzero_rows(&l.mlp_out);
            Ok(LayerMetrics {
                attn_out_res_norm: avg_relative_residual_norm(&attn)?,
                attn_out_cosine: avg_cosine_similarity(&attn)?,
                mlp_out_res_norm: avg_relative_residual_norm(&mlp)?,
                mlp_out_cosine: avg_cosine_similarity(&mlp)?,
                attention_influence: attention_influence(&l.attn_resid, x)?,
            })
        })
        .collect()
}

/// Stack and input streams of sweep member `s`: the same for every mechanism,
/// so paired comparisons share weights and inputs.
pub fn seed_streams(base: u64, s: usize) -> (RngStream, RngStream) {
    let seed = base.wrapping_add(s as u64);
    (RngStream::new(seed, 0), RngStream::new(seed, 1))
}

/// Feeds standard-Gaussian `T x d_model` inputs through `n_seeds` freshly
/// initialised stacks and averages the per-layer metrics.
pub fn faithfulness_test(cfg: &StackConfig, n_seeds: usize, t: usize) -> Result<CollapseProfile> {
    cfg.validate()?;
    if n_seeds == 0 {
        return Err(crate::LabError::InvalidConfig("n_seeds must be at least 1".into()));
    }
    let runs = map_indexed(n_seeds, |s| -> Result<Vec<LayerMetrics>> {
        let (mut w_rng, mut x_rng) = seed_streams(cfg.seed, s);
        let stack = build_stack(cfg, &mut w_rng)?;
        let x = gaussian_matrix(&mut x_rng, t, cfg.d_model, 1.0);
        profile_forward(&stack.forward(&x)?, &x)
    });
    let per_seed = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut layers = vec![LayerMetrics::default(); cfg.n_layers];
    for run in &per_seed {
        for (acc, m) in layers.iter_mut().zip(run) {
            acc.accumulate(m);
        }
    }
    for l in &mut layers {
        l.divide(n_seeds as f64);
    }
    Ok(CollapseProfile { layers, per_seed })
}
