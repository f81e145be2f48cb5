use std::str::FromStr;

use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::{LabError, Result};
use crate::numerics::{Matrix, RngStream};

use super::config::StackConfig;
use super::stack::{build_stack, Stack};

const DATA_STREAM: u64 = 2;
const TASK_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Predict the previous input token.
    Copy,
    /// Predict `perm[current]` for a fixed random permutation.
    Markov,
}

impl FromStr for Task {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "copy" => Ok(Task::Copy),
            "markov" | "next-token-synthetic" => Ok(Task::Markov),
            other => Err(LabError::InvalidConfig(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub task: Task,
    pub steps: usize,
    pub lr: f64,
    pub seq_len: usize,
    /// Number of fixed training sequences; every step uses all of them.
    pub batch: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            task: Task::Copy,
            steps: 100,
            lr: 2.5e-4,
            seq_len: 32,
            batch: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradHistory {
    /// `[step][layer]`: Frobenius norm of the loss gradient with respect to
    /// the positive query weights of all heads in the layer.
    pub grad_norms: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    /// Step at which the loss or a gradient stopped being finite.
    pub diverged: Option<usize>,
}

/// `(inputs, targets)` pairs, both of length `seq_len - 1` for the copy task
/// (the first position has nothing to copy) and `seq_len` for the Markov task.
fn make_data(task: Task, vocab: usize, seq_len: usize, batch: usize, seed: u64) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut rng = RngStream::new(seed, DATA_STREAM);
    let mut perm: Vec<usize> = (0..vocab).collect();
    let mut prng = RngStream::new(seed, TASK_STREAM);
    for i in (1..vocab).rev() {
        perm.swap(i, prng.below(i + 1));
    }
    (0..batch)
        .map(|_| match task {
            Task::Copy => {
                let toks: Vec<usize> = (0..seq_len).map(|_| rng.below(vocab)).collect();
                let targets = toks[..seq_len - 1].to_vec();
                (toks, targets)
            }
            Task::Markov => {
                let mut toks = vec![rng.below(vocab)];
                for _ in 1..seq_len {
                    toks.push(perm[*toks.last().unwrap()]);
                }
                let targets = toks.iter().map(|&t| perm[t]).collect();
                (toks, targets)
            }
        })
        .collect()
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(params: &[Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Matrix], grads: &[Matrix], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
                *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Mean cross-entropy over the fixed batch, with gradients for every parameter.
fn loss_and_grads(stack: &Stack, data: &[(Vec<usize>, Vec<usize>)]) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let params = stack.leaves(&mut tape);
    let mut total = None;
    for (toks, targets) in data {
        let x = stack.record_embedding(&mut tape, toks, &params)?;
        let nodes = stack.record(&mut tape, x, params.clone())?;
        let logits = stack.record_logits(&mut tape, nodes.hidden, &params)?;
        let logits = if targets.len() < toks.len() { tape.row_slice(logits, 1, toks.len())? } else { logits };
        let ce = tape.cross_entropy(logits, targets.clone())?;
        total = Some(match total {
            None => ce,
            Some(acc) => tape.add(acc, ce)?,
        });
    }
    let total = total.ok_or_else(|| LabError::InvalidConfig("empty training batch".into()))?;
    let loss = tape.scale(total, 1.0 / data.len() as f64)?;
    let grads = tape.backward(loss)?;
    let loss_value = tape.value(loss).get(0, 0);
    Ok((loss_value, params.iter().map(|&id| grads.wrt(id)).collect()))
}

/// Trains a fresh stack on a synthetic task with Adam, logging the raw
/// gradient of the positive query weights of each layer before every update.
pub fn train_toy(cfg: &StackConfig, opts: &TrainOptions) -> Result<GradHistory> {
    if opts.steps == 0 || opts.batch == 0 || opts.seq_len < 2 {
        return Err(LabError::InvalidConfig("need steps >= 1, batch >= 1 and seq_len >= 2".into()));
    }
    let mut stack = build_stack(cfg, &mut RngStream::new(cfg.seed, 0))?;
    train_stack(&mut stack, opts)
}

pub fn train_stack(stack: &mut Stack, opts: &TrainOptions) -> Result<GradHistory> {
    let cfg = stack.config().clone();
    let data = make_data(opts.task, cfg.vocab_size, opts.seq_len, opts.batch, cfg.seed);
    let mut adam = Adam::new(stack.params());
    let mut history = GradHistory {
        grad_norms: Vec::with_capacity(opts.steps),
        losses: Vec::with_capacity(opts.steps),
        diverged: None,
    };
    for step in 0..opts.steps {
        let (loss, grads) = loss_and_grads(stack, &data)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            history.diverged = Some(step);
            break;
        }
        let norms = (0..stack.n_layers())
            .map(|l| {
                stack
                    .query_slots(l)
                    .iter()
                    .map(|&i| grads[i].data().iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        history.grad_norms.push(norms);
        history.losses.push(loss);
        adam.step(stack.params_mut(), &grads, opts.lr);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_targets_are_shifted_inputs() {
        let data = make_data(Task::Copy, 5, 6, 2, 1);
        for (toks, targets) in &data {
            assert_eq!(targets.len(), 5);
            assert_eq!(&toks[..5], &targets[..]);
        }
    }

    #[test]
    fn markov_stream_follows_permutation() {
        let data = make_data(Task::Markov, 6, 10, 1, 2);
        let (toks, targets) = &data[0];
        for i in 0..9 {
            assert_eq!(targets[i], toks[i + 1]);
        }
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let cfg = StackConfig {
            n_layers: 2,
            d_model: 16,
            d_ff: 16,
            d_qk: 4,
            d_v: 8,
            vocab_size: 5,
            ..StackConfig::default()
        };
        let opts = TrainOptions {
            steps: 3,
            lr: 0.0,
            seq_len: 6,
            ..TrainOptions::default()
        };
        let h = train_toy(&cfg, &opts).unwrap();
        assert_eq!(h.losses.len(), 3);
        assert!(h.losses.iter().all(|&l| l == h.losses[0]));
        assert!(h.grad_norms.iter().all(|g| g == &h.grad_norms[0]));
        assert!(h.diverged.is_none());
    }
}
