use crate::attention::{record_head, Activation, AttentionWeights, HeadNodes, LambdaNodes, Mechanism};
use crate::autodiff::{NodeId, Tape};
use crate::error::{LabError, Result};
use crate::numerics::{causal_mask, gaussian_matrix, Matrix, RngStream};

use super::config::{NormPlacement, StackConfig};

/// Standard deviation of the token embedding table. Embeddings play the role
/// of standard-Gaussian input representations, so they are not shrunk by
/// `init_std`.
pub const EMBEDDING_STD: f64 = 1.0;

#[derive(Debug, Clone)]
struct HeadSlots {
    w_q_pos: usize,
    w_k_pos: usize,
    w_v: usize,
    w_q_neg: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
enum LambdaSlots {
    Fixed(f64, f64),
    Trainable(usize, usize),
}

#[derive(Debug, Clone)]
struct LayerSlots {
    heads: Vec<HeadSlots>,
    w_out: usize,
    ln1_gain: usize,
    ln1_bias: usize,
    w_ff1: usize,
    b_ff1: usize,
    w_ff2: usize,
    b_ff2: usize,
    ln2_gain: usize,
    ln2_bias: usize,
    lambdas: LambdaSlots,
}

/// Decoder-only stack with causal multi-head attention, ReLU MLPs, residual
/// connections and layer norm. All parameters live in one flat list so the
/// optimiser and the tape can walk them in a fixed order.
#[derive(Debug, Clone)]
pub struct Stack {
    cfg: StackConfig,
    params: Vec<Matrix>,
    layers: Vec<LayerSlots>,
    embedding: usize,
    final_gain: usize,
    final_bias: usize,
    w_lm: usize,
}

/// Nodes of interest from one recorded forward pass.
#[derive(Debug, Clone)]
pub struct StackNodes {
    pub params: Vec<NodeId>,
    /// Multi-head attention output, before the residual add.
    pub attn_out: Vec<NodeId>,
    /// Residual stream right after adding the attention output.
    pub attn_resid: Vec<NodeId>,
    /// MLP output, before the residual add.
    pub mlp_out: Vec<NodeId>,
    pub hidden: NodeId,
}

/// Per-layer intermediate values from [`Stack::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutputs {
    pub attn_out: Matrix,
    pub attn_resid: Matrix,
    pub mlp_out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackForward {
    pub layers: Vec<LayerOutputs>,
    pub hidden: Matrix,
}

/// Randomly initialised stack. Every mechanism consumes the random stream
/// identically, so stacks built from equal seeds share all common weights.
pub fn build_stack(cfg: &StackConfig, rng: &mut RngStream) -> Result<Stack> {
    cfg.validate()?;
    let mut params = Vec::new();
    let mut push = |m: Matrix| {
        params.push(m);
        params.len() - 1
    };
    let (d, std) = (cfg.d_model, cfg.init_std);
    let dual = cfg.mechanism == Mechanism::Dagpam;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for _ in 0..cfg.n_heads {
            let w = AttentionWeights::random(rng, d, cfg.d_qk, cfg.d_v, std);
            heads.push(HeadSlots {
                w_q_pos: push(w.w_q_pos),
                w_k_pos: push(w.w_k_pos),
                w_v: push(w.w_v),
                w_q_neg: dual.then(|| push(w.w_q_neg)),
            });
        }
        let w_out = push(gaussian_matrix(rng, cfg.n_heads * cfg.d_v, d, std));
        let ln1_gain = push(Matrix::filled(1, d, 1.0));
        let ln1_bias = push(Matrix::zeros(1, d));
        let w_ff1 = push(gaussian_matrix(rng, d, cfg.d_ff, std));
        let b_ff1 = push(Matrix::zeros(1, cfg.d_ff));
        let w_ff2 = push(gaussian_matrix(rng, cfg.d_ff, d, std));
        let b_ff2 = push(Matrix::zeros(1, d));
        let ln2_gain = push(Matrix::filled(1, d, 1.0));
        let ln2_bias = push(Matrix::zeros(1, d));
        let lambdas = if dual && cfg.lambdas_trainable {
            LambdaSlots::Trainable(push(Matrix::scalar(cfg.lambda_pos)), push(Matrix::scalar(cfg.lambda_neg)))
        } else if dual {
            LambdaSlots::Fixed(cfg.lambda_pos, cfg.lambda_neg)
        } else {
            LambdaSlots::Fixed(0.0, 0.0)
        };
        layers.push(LayerSlots {
            heads,
            w_out,
            ln1_gain,
            ln1_bias,
            w_ff1,
            b_ff1,
            w_ff2,
            b_ff2,
            ln2_gain,
            ln2_bias,
            lambdas,
        });
    }
    let embedding = push(gaussian_matrix(rng, cfg.vocab_size, d, EMBEDDING_STD));
    let final_gain = push(Matrix::filled(1, d, 1.0));
    let final_bias = push(Matrix::zeros(1, d));
    let w_lm = push(gaussian_matrix(rng, d, cfg.vocab_size, std));
    Ok(Stack {
        cfg: cfg.clone(),
        params,
        layers,
        embedding,
        final_gain,
        final_bias,
        w_lm,
    })
}

/// Fixed sinusoidal position code, `T x d`.
pub fn positional_encoding(t: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(t, d);
    for pos in 0..t {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            m.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

impl Stack {
    pub fn config(&self) -> &StackConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.rows() * p.cols()).sum()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Parameter indices of the positive query weights of layer `l`.
    pub fn query_slots(&self, l: usize) -> Vec<usize> {
        self.layers[l].heads.iter().map(|h| h.w_q_pos).collect()
    }

    /// Current `(lambda+, lambda-)` of layer `l`.
    pub fn lambdas(&self, l: usize) -> (f64, f64) {
        match self.layers[l].lambdas {
            LambdaSlots::Fixed(p, n) => (p, n),
            LambdaSlots::Trainable(p, n) => (self.params[p].get(0, 0), self.params[n].get(0, 0)),
        }
    }

    /// Head weights of layer `l` as standalone attention parameters.
    pub fn layer_heads(&self, l: usize) -> Vec<AttentionWeights> {
        let qk = self.cfg.d_qk;
        let (lp, ln) = self.lambdas(l);
        self.layers[l]
            .heads
            .iter()
            .map(|h| AttentionWeights {
                w_q_pos: self.params[h.w_q_pos].clone(),
                w_k_pos: self.params[h.w_k_pos].clone(),
                w_v: self.params[h.w_v].clone(),
                w_q_neg: h.w_q_neg.map_or_else(|| Matrix::zeros(qk, qk), |i| self.params[i].clone()),
                lambda_pos: lp,
                lambda_neg: ln,
                lambdas_trainable: self.cfg.lambdas_trainable,
                neg_activation: Activation::Relu,
            })
            .collect()
    }

    pub fn layer_w_out(&self, l: usize) -> &Matrix {
        &self.params[self.layers[l].w_out]
    }

    /// `(gain, bias)` of the norm in front of (pre) or after (post) attention.
    pub fn layer_attn_norm(&self, l: usize) -> (&Matrix, &Matrix) {
        (&self.params[self.layers[l].ln1_gain], &self.params[self.layers[l].ln1_bias])
    }

    /// Pushes every parameter as a leaf, in slot order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Records the layers on `tape` starting from the `T x d_model` input node.
    pub fn record(&self, tape: &mut Tape, input: NodeId, params: Vec<NodeId>) -> Result<StackNodes> {
        if params.len() != self.params.len() {
            return Err(LabError::InvalidConfig(format!("expected {} parameter nodes, got {}", self.params.len(), params.len())));
        }
        let t = tape.value(input).rows();
        if t == 0 {
            return Err(LabError::EmptySequence("stack forward"));
        }
        let mask = tape.constant(causal_mask(t));
        let p = |i: usize| params[i];
        let mut h = input;
        let (mut attn_out, mut attn_resid, mut mlp_out) = (Vec::new(), Vec::new(), Vec::new());
        for layer in &self.layers {
            let lambdas = match layer.lambdas {
                LambdaSlots::Fixed(pos, neg) => LambdaNodes::Fixed { pos, neg },
                LambdaSlots::Trainable(pos, neg) => LambdaNodes::Trainable { pos: p(pos), neg: p(neg) },
            };
            let attn_in = match self.cfg.norm_placement {
                NormPlacement::Pre => tape.layer_norm(h, p(layer.ln1_gain), p(layer.ln1_bias))?,
                NormPlacement::Post => h,
            };
            let mut head_out = Vec::with_capacity(layer.heads.len());
            for hs in &layer.heads {
                let nodes = HeadNodes {
                    w_q_pos: p(hs.w_q_pos),
                    w_k_pos: p(hs.w_k_pos),
                    w_v: p(hs.w_v),
                    w_q_neg: hs.w_q_neg.map(p),
                };
                head_out.push(record_head(tape, attn_in, &nodes, self.cfg.mechanism, Activation::Relu, lambdas, Some(mask))?);
            }
            let cat = tape.concat_cols(head_out)?;
            let a = tape.matmul(cat, p(layer.w_out))?;
            let resid = tape.add(h, a)?;
            let h1 = match self.cfg.norm_placement {
                NormPlacement::Pre => resid,
                NormPlacement::Post => tape.layer_norm(resid, p(layer.ln1_gain), p(layer.ln1_bias))?,
            };
            let mlp_in = match self.cfg.norm_placement {
                NormPlacement::Pre => tape.layer_norm(h1, p(layer.ln2_gain), p(layer.ln2_bias))?,
                NormPlacement::Post => h1,
            };
            let z = tape.matmul(mlp_in, p(layer.w_ff1))?;
            let z = tape.add_row(z, p(layer.b_ff1))?;
            let z = tape.relu(z)?;
            let z = tape.matmul(z, p(layer.w_ff2))?;
            let m = tape.add_row(z, p(layer.b_ff2))?;
            let sum = tape.add(h1, m)?;
            h = match self.cfg.norm_placement {
                NormPlacement::Pre => sum,
                NormPlacement::Post => tape.layer_norm(sum, p(layer.ln2_gain), p(layer.ln2_bias))?,
            };
            attn_out.push(a);
            attn_resid.push(resid);
            mlp_out.push(m);
        }
        Ok(StackNodes {
            params,
            attn_out,
            attn_resid,
            mlp_out,
            hidden: h,
        })
    }

    /// Token embeddings plus the position code, as a node.
    pub fn record_embedding(&self, tape: &mut Tape, tokens: &[usize], params: &[NodeId]) -> Result<NodeId> {
        let v = self.cfg.vocab_size;
        let mut one_hot = Matrix::zeros(tokens.len(), v);
        for (i, &tok) in tokens.iter().enumerate() {
            if tok >= v {
                return Err(LabError::IndexOutOfRange { index: tok, len: v });
            }
            one_hot.set(i, tok, 1.0);
        }
        let oh = tape.constant(one_hot);
        let emb = tape.matmul(oh, params[self.embedding])?;
        let pe = tape.constant(positional_encoding(tokens.len(), self.cfg.d_model));
        tape.add(emb, pe)
    }

    /// Vocabulary logits from the final hidden state.
    pub fn record_logits(&self, tape: &mut Tape, hidden: NodeId, params: &[NodeId]) -> Result<NodeId> {
        let h = match self.cfg.norm_placement {
            NormPlacement::Pre => tape.layer_norm(hidden, params[self.final_gain], params[self.final_bias])?,
            NormPlacement::Post => hidden,
        };
        tape.matmul(h, params[self.w_lm])
    }

    /// Forward pass from a `T x d_model` representation, keeping per-layer
    /// intermediates.
    pub fn forward(&self, x: &Matrix) -> Result<StackForward> {
        if x.cols() != self.cfg.d_model {
            return Err(LabError::ShapeMismatch {
                op: "stack forward",
                left: x.shape(),
                right: (x.rows(), self.cfg.d_model),
            });
        }
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let params = self.params.iter().map(|m| tape.constant(m.clone())).collect();
        let nodes = self.record(&mut tape, input, params)?;
        let layers = (0..self.layers.len())
            .map(|l| LayerOutputs {
                attn_out: tape.value(nodes.attn_out[l]).clone(),
                attn_resid: tape.value(nodes.attn_resid[l]).clone(),
                mlp_out: tape.value(nodes.mlp_out[l]).clone(),
            })
            .collect();
        Ok(StackForward {
            layers,
            hidden: tape.value(nodes.hidden).clone(),
        })
    }
}
