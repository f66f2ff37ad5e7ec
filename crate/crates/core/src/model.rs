//! A small post-LN transformer encoder with a label head.
//!
//! Input rows are `tok[token] + seg[segment] + pos[i]`. Each layer applies
//! multi-head self-attention, a residual connection and layer norm, then a
//! GELU feed-forward block, another residual and layer norm. A linear head
//! maps the hidden vector read at `[MASK]` to one logit per label.
//!
//! The tape-level functions (`*_on_tape`) are what training differentiates;
//! the plain functions wrap them for one-off evaluation.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::prompting::Prompt;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub num_labels: usize,
    /// Standard deviation of the embedding tables at initialisation.
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Desk-scale default shape: d=32, two layers, four heads, up to 64 tokens.
    pub fn desk(vocab_size: usize, num_labels: usize) -> Self {
        ModelConfig {
            vocab_size,
            hidden: 32,
            layers: 2,
            heads: 4,
            ffn: 64,
            max_len: 64,
            num_labels,
            init_std: 0.5,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("max_len", self.max_len),
            ("num_labels", self.num_labels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("model {name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::contract(format!("hidden size {} not divisible by {} heads", self.hidden, self.heads)));
        }
        if !(self.init_std >= 0.0) || !(self.layer_norm_eps > 0.0) {
            return Err(Error::contract("init_std must be >= 0 and layer_norm_eps > 0"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

const TOK: usize = 0;
const SEG: usize = 1;
const POS: usize = 2;
const EMBED_TENSORS: usize = 3;
const PER_LAYER: usize = 16;

// offsets inside a layer block
const WQ: usize = 0;
const BQ: usize = 1;
const WK: usize = 2;
const BK: usize = 3;
const WV: usize = 4;
const BV: usize = 5;
const WO: usize = 6;
const BO: usize = 7;
const LN1_G: usize = 8;
const LN1_B: usize = 9;
const W1: usize = 10;
const B1: usize = 11;
const W2: usize = 12;
const B2: usize = 13;
const LN2_G: usize = 14;
const LN2_B: usize = 15;

const LAYER_NAMES: [&str; PER_LAYER] = [
    "wq",
    "bq",
    "wk",
    "bk",
    "wv",
    "bv",
    "wo",
    "bo",
    "ln1_gain",
    "ln1_bias",
    "ffn_in",
    "ffn_in_bias",
    "ffn_out",
    "ffn_out_bias",
    "ln2_gain",
    "ln2_bias",
];

/// All trainable tensors, in a fixed canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.hidden;
    let mut out = vec![
        ("tok".to_string(), vec![config.vocab_size, d]),
        ("seg".to_string(), vec![2, d]),
        ("pos".to_string(), vec![config.max_len, d]),
    ];
    for l in 0..config.layers {
        let shapes: [Vec<usize>; PER_LAYER] = [
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, config.ffn],
            vec![config.ffn],
            vec![config.ffn, d],
            vec![d],
            vec![d],
            vec![d],
        ];
        for (name, shape) in LAYER_NAMES.iter().zip(shapes) {
            out.push((format!("layer{l}.{name}"), shape));
        }
    }
    out.push(("head.weight".to_string(), vec![d, config.num_labels]));
    out.push(("head.bias".to_string(), vec![config.num_labels]));
    out
}

impl ModelParams {
    /// Random initialisation: embeddings `N(0, init_std²)`, dense weights
    /// `N(0, 1/fan_in)`, biases zero, layer-norm gains one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in layout(config) {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with("gain") {
                vec![1.0; numel]
            } else if shape.len() == 1 {
                vec![0.0; numel]
            } else {
                let std = if ["tok", "seg", "pos"].contains(&name.as_str()) {
                    config.init_std
                } else {
                    1.0 / (shape[0] as f64).sqrt()
                };
                if std == 0.0 {
                    vec![0.0; numel]
                } else {
                    let dist = Normal::new(0.0, std).map_err(|e| Error::contract(e.to_string()))?;
                    (0..numel).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(ModelParams { config: config.clone(), names, tensors })
    }

    /// Rebuilds from tensors in canonical order, checking every shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let lay = layout(&config);
        if lay.len() != tensors.len() {
            return Err(Error::shape(format!("model needs {} tensors, got {}", lay.len(), tensors.len())));
        }
        for ((name, shape), t) in lay.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        let names = lay.into_iter().map(|(n, _)| n).collect();
        Ok(ModelParams { config, names, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a parameter on `tape`.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars { vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(), config: self.config.clone() }
    }

    /// Records every tensor as a constant (no gradients wanted).
    pub fn constants(&self, tape: &mut Tape) -> ParamVars {
        ParamVars { vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(), config: self.config.clone() }
    }
}

/// Tape handles for a [`ModelParams`], same order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
    config: ModelConfig,
}

impl ParamVars {
    /// Wraps externally registered variables (canonical order).
    pub fn from_vars(config: ModelConfig, vars: Vec<Var>) -> Result<Self> {
        let n = layout(&config).len();
        if vars.len() != n {
            return Err(Error::shape(format!("expected {n} parameter vars, got {}", vars.len())));
        }
        Ok(ParamVars { vars, config })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn layer(&self, l: usize, k: usize) -> Var {
        self.vars[EMBED_TENSORS + l * PER_LAYER + k]
    }

    fn head(&self) -> (Var, Var) {
        let n = self.vars.len();
        (self.vars[n - 2], self.vars[n - 1])
    }
}

/// `[S×S]` table of which key each query may attend to.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    len: usize,
    allowed: Arc<Vec<bool>>,
}

impl AttentionMask {
    /// Every query sees exactly the keys marked visible.
    pub fn from_keys(keys: &[bool]) -> Self {
        let n = keys.len();
        let allowed = (0..n).flat_map(|_| keys.iter().copied()).collect();
        AttentionMask { len: n, allowed: Arc::new(allowed) }
    }

    /// Each position sees only itself.
    pub fn self_only(n: usize) -> Self {
        let allowed = (0..n * n).map(|i| i / n == i % n).collect();
        AttentionMask { len: n, allowed: Arc::new(allowed) }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.len + key]
    }
}

/// Summed token, segment and position embeddings of a prompt, on the tape.
pub fn embed_on_tape(tape: &mut Tape, pv: &ParamVars, prompt: &Prompt) -> Result<Var> {
    let cfg = &pv.config;
    if prompt.len() > cfg.max_len {
        return Err(Error::contract(format!("prompt of {} tokens exceeds max_len {}", prompt.len(), cfg.max_len)));
    }
    let ids: Vec<usize> = prompt.tokens().iter().map(|t| t.index()).collect();
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::contract(format!("token id {bad} >= vocab size {}", cfg.vocab_size)));
    }
    let segs: Vec<usize> = prompt.segments().iter().map(|&s| s as usize).collect();
    let positions: Vec<usize> = (0..prompt.len()).collect();
    let tok = tape.gather_rows(pv.vars[TOK], &ids)?;
    let seg = tape.gather_rows(pv.vars[SEG], &segs)?;
    let pos = tape.gather_rows(pv.vars[POS], &positions)?;
    let sum = tape.add(tok, seg)?;
    tape.add(sum, pos)
}

/// Runs every encoder layer over `[S×d]` input rows.
pub fn encode_on_tape(tape: &mut Tape, pv: &ParamVars, input: Var, mask: &AttentionMask) -> Result<Var> {
    let cfg = pv.config.clone();
    let (s, d) = tape.value(input).dims2()?;
    if d != cfg.hidden {
        return Err(Error::shape(format!("encoder input width {d}, model width {}", cfg.hidden)));
    }
    if mask.len() != s {
        return Err(Error::shape(format!("attention mask for {} positions, input has {s}", mask.len())));
    }
    let mut x = input;
    for l in 0..cfg.layers {
        x = encoder_layer(tape, pv, l, x, mask).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("encoder layer {l}: {m}")),
            other => other,
        })?;
    }
    Ok(x)
}

fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn encoder_layer(tape: &mut Tape, pv: &ParamVars, l: usize, x: Var, mask: &AttentionMask) -> Result<Var> {
    let cfg = &pv.config;
    let dh = cfg.head_dim();
    let q = dense(tape, x, pv.layer(l, WQ), pv.layer(l, BQ))?;
    let k = dense(tape, x, pv.layer(l, WK), pv.layer(l, BK))?;
    let v = dense(tape, x, pv.layer(l, WV), pv.layer(l, BV))?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.masked_softmax_rows(scores, &mask.allowed)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let attn_out = dense(tape, cat, pv.layer(l, WO), pv.layer(l, BO))?;
    let res1 = tape.add(x, attn_out)?;
    let x1 = tape.layer_norm_rows(res1, pv.layer(l, LN1_G), pv.layer(l, LN1_B), cfg.layer_norm_eps)?;
    let inner = dense(tape, x1, pv.layer(l, W1), pv.layer(l, B1))?;
    let inner = tape.gelu(inner)?;
    let ff = dense(tape, inner, pv.layer(l, W2), pv.layer(l, B2))?;
    let res2 = tape.add(x1, ff)?;
    tape.layer_norm_rows(res2, pv.layer(l, LN2_G), pv.layer(l, LN2_B), cfg.layer_norm_eps)
}

/// Hidden rows at the two `[MASK]` positions.
pub fn extract_on_tape(tape: &mut Tape, hidden: Var, pos_p: usize, pos_aug: usize) -> Result<(Var, Var)> {
    let s = tape.value(hidden).dims2()?.0;
    for pos in [pos_p, pos_aug] {
        if pos >= s {
            return Err(Error::contract(format!("[MASK] position {pos} outside {s} hidden rows")));
        }
    }
    let h_p = tape.row(hidden, pos_p)?;
    let h_aug = if pos_aug == pos_p { h_p } else { tape.row(hidden, pos_aug)? };
    Ok((h_p, h_aug))
}

/// Tolerance on `sum(y) == 1` for soft targets.
pub const TARGET_SUM_TOL: f64 = 1e-6;

pub fn check_target(y: &[f64], num_labels: usize) -> Result<()> {
    if y.len() != num_labels {
        return Err(Error::shape(format!("target has {} entries for {num_labels} labels", y.len())));
    }
    let total: f64 = y.iter().sum();
    if (total - 1.0).abs() > TARGET_SUM_TOL || y.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::contract(format!("target is not a probability vector (sum {total})")));
    }
    Ok(())
}

/// Logits of the label head for a hidden vector.
pub fn logits_on_tape(tape: &mut Tape, pv: &ParamVars, h: Var) -> Result<Var> {
    let d = pv.config.hidden;
    if tape.value(h).shape() != [d] {
        return Err(Error::shape(format!("head input {:?}, expected [{d}]", tape.value(h).shape())));
    }
    let (w, b) = pv.head();
    let row = tape.reshape(h, vec![1, d])?;
    let z = dense(tape, row, w, b)?;
    tape.reshape(z, vec![pv.config.num_labels])
}

/// Logits plus cross-entropy against a probability-vector target.
pub fn head_and_loss_on_tape(tape: &mut Tape, pv: &ParamVars, h: Var, target: &[f64]) -> Result<(Var, Var)> {
    check_target(target, pv.config.num_labels)?;
    let logits = logits_on_tape(tape, pv, h)?;
    let loss = tape.soft_cross_entropy(logits, target)?;
    Ok((logits, loss))
}

/// Values recorded by one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub hidden: Tensor,
    pub mask_positions: (usize, usize),
    pub logits: Tensor,
}

pub fn embed(prompt: &Prompt, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = params.constants(&mut tape);
    let e = embed_on_tape(&mut tape, &pv, prompt)?;
    Ok(tape.value(e).clone())
}

pub fn encode(input: &Tensor, mask: &AttentionMask, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = params.constants(&mut tape);
    let x = tape.constant(input.clone());
    let h = encode_on_tape(&mut tape, &pv, x, mask)?;
    Ok(tape.value(h).clone())
}

pub fn extract_mask_hidden(hidden: &Tensor, pos_p: usize, pos_aug: usize) -> Result<(Tensor, Tensor)> {
    let h_p = hidden.row(pos_p)?.to_vec();
    let h_aug = hidden.row(pos_aug)?.to_vec();
    Ok((Tensor::vector(h_p)?, Tensor::vector(h_aug)?))
}

/// `(logits, loss)` for a hidden vector and soft target.
pub fn head_and_loss(h: &Tensor, target: &[f64], params: &ModelParams) -> Result<(Tensor, f64)> {
    let mut tape = Tape::new();
    let pv = params.constants(&mut tape);
    let hv = tape.constant(h.clone());
    let (logits, loss) = head_and_loss_on_tape(&mut tape, &pv, hv, target)?;
    Ok((tape.value(logits).clone(), tape.value(loss).item()?))
}

/// Single-prompt inference: embed, encode, read `[MASK]`, apply the head.
pub fn predict(prompt: &Prompt, params: &ModelParams) -> Result<ForwardTrace> {
    let mut tape = Tape::new();
    let pv = params.constants(&mut tape);
    let e = embed_on_tape(&mut tape, &pv, prompt)?;
    let h = encode_on_tape(&mut tape, &pv, e, &AttentionMask::from_keys(prompt.attention()))?;
    let (hm, _) = extract_on_tape(&mut tape, h, prompt.mask_pos(), prompt.mask_pos())?;
    let logits = logits_on_tape(&mut tape, &pv, hm)?;
    Ok(ForwardTrace {
        hidden: tape.value(h).clone(),
        mask_positions: (prompt.mask_pos(), prompt.mask_pos()),
        logits: tape.value(logits).clone(),
    })
}
