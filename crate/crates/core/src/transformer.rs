//! Micro-transformer `M(L, D)`.
//!
//! Each block is `x + MHSA(LN(x))` followed by `x + FFN(LN(x))` (pre-norm;
//! post-norm is available through [`NormPlacement::Post`]). Attention splits
//! `D` into `n` heads of width `d_k = D / n`, scores are scaled by
//! `1/sqrt(d_k)`, and the concatenated head outputs are projected by the
//! transpose of the stored `W_O`: `out = concat · W_Oᵀ`. The FFN is
//! `GeLU(x · W_IN) · W_OUT`.
//!
//! FLOPs convention: a multiply-accumulate counts as two FLOPs. Per token,
//! inference costs `2 · N_dense + 2 · L · seq_len · D`, where `N_dense` is
//! the number of matrix weights touched per token (the six mapped matrices
//! of every layer plus the output head). A training step (forward and
//! backward) costs three times that.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    #[default]
    Pre,
    Post,
}

fn default_ffn_ratio() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_eps() -> f64 {
    1e-5
}
fn default_dtype() -> DType {
    DType::F32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
    pub vocab: usize,
    pub seq_len: usize,
    #[serde(default = "default_true")]
    pub causal: bool,
    #[serde(default)]
    pub norm: NormPlacement,
    #[serde(default)]
    pub tied_head: bool,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
    /// Storage precision for checkpoints.
    #[serde(default = "default_dtype")]
    pub dtype: DType,
}

impl ModelConfig {
    pub fn new(n_layers: usize, d_model: usize, n_heads: usize, vocab: usize, seq_len: usize) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            ffn_ratio: 4,
            vocab,
            seq_len,
            causal: true,
            norm: NormPlacement::Pre,
            tied_head: false,
            ln_eps: 1e-5,
            dtype: DType::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_ratio", self.ffn_ratio),
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid!("{name} must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(invalid!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model,
                self.n_heads
            ));
        }
        if !(self.ln_eps > 0.0) {
            return Err(invalid!("ln_eps must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_ratio * self.d_model
    }

    /// Slabs per layer in the packed weight tensor, `2k + 4`.
    pub fn slabs(&self) -> usize {
        2 * self.ffn_ratio + 4
    }
}

macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            pub const FIELDS: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn try_map_named<U, E>(
                &self,
                prefix: &str,
                mut f: impl FnMut(&str, &T) -> std::result::Result<U, E>,
            ) -> std::result::Result<$name<U>, E> {
                Ok($name {
                    $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field)?,)*
                })
            }

            pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> $name<U> {
                $name { $($field: f(&self.$field),)* }
            }

            pub fn named(&self) -> Vec<(&'static str, &T)> {
                vec![$((stringify!($field), &self.$field)),*]
            }

            pub fn named_mut(&mut self) -> Vec<(&'static str, &mut T)> {
                vec![$((stringify!($field), &mut self.$field)),*]
            }
        }
    };
}

param_struct!(
    /// One block. The six mapped matrices come first.
    LayerParams {
        w_q, w_k, w_v, w_o, w_in, w_out,
        b_q, b_k, b_v, b_o, b_in, b_out,
        ln1_g, ln1_b, ln2_g, ln2_b,
    }
);

impl<T> LayerParams<T> {
    /// `[W_Q, W_K, W_V, W_O]`, the square attention matrices.
    pub fn attention(&self) -> [&T; 4] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: T,
    pub lnf_b: T,
    /// `None` when the output head is tied to the token embedding.
    pub head: Option<T>,
    pub head_b: T,
}

pub type ModelWeights = ModelParams<Tensor>;

impl<T> ModelParams<T> {
    pub fn try_map_named<U, E>(
        &self,
        mut f: impl FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<ModelParams<U>, E> {
        Ok(ModelParams {
            tok_emb: f("tok_emb", &self.tok_emb)?,
            pos_emb: f("pos_emb", &self.pos_emb)?,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(j, l)| l.try_map_named(&format!("layers.{j}."), &mut f))
                .collect::<std::result::Result<_, E>>()?,
            lnf_g: f("lnf_g", &self.lnf_g)?,
            lnf_b: f("lnf_b", &self.lnf_b)?,
            head: match &self.head {
                Some(h) => Some(f("head", h)?),
                None => None,
            },
            head_b: f("head_b", &self.head_b)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        match self.try_map_named(|_, t| Ok::<U, std::convert::Infallible>(f(t))) {
            Ok(p) => p,
            Err(never) => match never {},
        }
    }

    /// All entries with their stable names, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (j, l) in self.layers.iter().enumerate() {
            out.extend(l.named().into_iter().map(|(n, t)| (format!("layers.{j}.{n}"), t)));
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        if let Some(h) = &self.head {
            out.push(("head".into(), h));
        }
        out.push(("head_b".into(), &self.head_b));
        out
    }

    /// Mutable entries in the same order as [`ModelParams::named`].
    pub fn entries_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.named_mut().into_iter().map(|(_, t)| t));
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        if let Some(h) = &mut self.head {
            out.push(h);
        }
        out.push(&mut self.head_b);
        out
    }
}

/// Expected shape of every parameter.
pub fn param_shapes(cfg: &ModelConfig) -> ModelParams<Vec<usize>> {
    let (d, f, v) = (cfg.d_model, cfg.ffn_dim(), cfg.vocab);
    let layer = LayerParams {
        w_q: vec![d, d],
        w_k: vec![d, d],
        w_v: vec![d, d],
        w_o: vec![d, d],
        w_in: vec![d, f],
        w_out: vec![f, d],
        b_q: vec![d],
        b_k: vec![d],
        b_v: vec![d],
        b_o: vec![d],
        b_in: vec![f],
        b_out: vec![d],
        ln1_g: vec![d],
        ln1_b: vec![d],
        ln2_g: vec![d],
        ln2_b: vec![d],
    };
    ModelParams {
        tok_emb: vec![v, d],
        pos_emb: vec![cfg.seq_len, d],
        layers: vec![layer; cfg.n_layers],
        lnf_g: vec![d],
        lnf_b: vec![d],
        head: (!cfg.tied_head).then(|| vec![d, v]),
        head_b: vec![v],
    }
}

fn is_gain(name: &str) -> bool {
    name.ends_with("_g")
}

fn is_bias(name: &str) -> bool {
    name.ends_with("_b") || name.contains(".b_")
}

/// Random initialization. Matrices are `N(0, 1/fan_in)`; embeddings use
/// `1/sqrt(D)`; layernorm gains are one and every bias is zero.
pub fn init_random(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    param_shapes(cfg).try_map_named(|name, shape| {
        if is_gain(name) {
            Tensor::full(shape, 1.0)
        } else if is_bias(name) {
            Tensor::zeros(shape)
        } else {
            let fan_in = if name.ends_with("emb") { shape[1] } else { shape[0] };
            Tensor::randn_from(&mut rng, shape, 1.0 / (fan_in as f64).sqrt())
        }
    })
}

impl ModelWeights {
    /// Rebuilds weights from a name → tensor table, checking every shape.
    pub fn from_named(cfg: &ModelConfig, mut table: HashMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let w = param_shapes(cfg).try_map_named(|name, shape| {
            let t = table
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))?;
            if t.shape() != shape.as_slice() {
                return Err(shape_err!("tensor '{name}' has shape {:?}, expected {shape:?}", t.shape()));
            }
            Ok(t)
        })?;
        if let Some(extra) = table.keys().next() {
            return Err(Error::Format(format!("unexpected tensor '{extra}'")));
        }
        Ok(w)
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expect = param_shapes(cfg);
        if expect.layers.len() != self.layers.len() || expect.head.is_some() != self.head.is_some() {
            return Err(shape_err!("weights do not match config structure"));
        }
        for ((name, e), (_, t)) in expect.named().into_iter().zip(self.named()) {
            if t.shape() != e.as_slice() {
                return Err(shape_err!("'{name}' has shape {:?}, expected {e:?}", t.shape()));
            }
        }
        Ok(())
    }

    /// Puts every entry on `tape` as a trainable leaf.
    pub fn to_params(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(|t| tape.param(t.clone()))
    }

    pub fn to_constants(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(|t| tape.constant(t.clone()))
    }
}

/// A `batch × seq` block of token ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(shape_err!("token batch {batch}x{seq} with {} ids", ids.len()));
        }
        Ok(Self { batch, seq, ids })
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }

    pub fn num_tokens(&self) -> usize {
        self.ids.len()
    }
}

pub struct ForwardOutput {
    /// `(batch · seq, vocab)`.
    pub logits: Var,
    /// Per layer, attention probabilities shaped `(batch · heads, seq, seq)`.
    pub attention: Vec<Var>,
}

fn check_tokens(cfg: &ModelConfig, tokens: &TokenBatch) -> Result<()> {
    if tokens.seq > cfg.seq_len {
        return Err(invalid!(
            "sequence length {} exceeds configured seq_len {}",
            tokens.seq,
            cfg.seq_len
        ));
    }
    if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= cfg.vocab) {
        return Err(invalid!("token id {bad} out of range for vocabulary {}", cfg.vocab));
    }
    Ok(())
}

fn layernorm_affine(tape: &mut Tape, x: Var, g: Var, b: Var, eps: f64) -> Result<Var> {
    let n = tape.layernorm(x, eps)?;
    let s = tape.mul_last(n, g)?;
    tape.add_last(s, b)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_last(y, b)
}

fn causal_mask(groups: usize, seq: usize) -> Result<Tensor> {
    let mut m = Tensor::zeros(&[groups, seq, seq])?;
    for g in 0..groups {
        for i in 0..seq {
            for j in i + 1..seq {
                m.set(&[g, i, j], MASKED);
            }
        }
    }
    Ok(m)
}

fn attention_block(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &LayerParams<Var>,
    h: Var,
    batch: usize,
    seq: usize,
    mask: Option<Var>,
) -> Result<(Var, Var)> {
    let (nh, dk, d) = (cfg.n_heads, cfg.head_dim(), cfg.d_model);
    let split = |tape: &mut Tape, x: Var, perm: &[usize], last2: [usize; 2]| -> Result<Var> {
        let x = tape.reshape(x, &[batch, seq, nh, dk])?;
        let x = tape.permute(x, perm)?;
        tape.reshape(x, &[batch * nh, last2[0], last2[1]])
    };
    let q = linear(tape, h, p.w_q, p.b_q)?;
    let k = linear(tape, h, p.w_k, p.b_k)?;
    let v = linear(tape, h, p.w_v, p.b_v)?;
    let q = split(tape, q, &[0, 2, 1, 3], [seq, dk])?;
    let kt = split(tape, k, &[0, 2, 3, 1], [dk, seq])?;
    let v = split(tape, v, &[0, 2, 1, 3], [seq, dk])?;
    let scores = tape.bmm(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    if let Some(m) = mask {
        scores = tape.add(scores, m)?;
    }
    let att = tape.softmax(scores)?;
    let ctx = tape.bmm(att, v)?;
    let ctx = tape.reshape(ctx, &[batch, nh, seq, dk])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[batch * seq, d])?;
    // W_O is stored I×O and applied transposed.
    let wo_t = tape.permute(p.w_o, &[1, 0])?;
    let out = linear(tape, ctx, wo_t, p.b_o)?;
    Ok((out, att))
}

fn ffn_block(tape: &mut Tape, p: &LayerParams<Var>, h: Var) -> Result<Var> {
    let u = linear(tape, h, p.w_in, p.b_in)?;
    let a = tape.gelu(u);
    linear(tape, a, p.w_out, p.b_out)
}

/// Records the forward pass on `tape`.
pub fn forward(tape: &mut Tape, w: &ModelParams<Var>, cfg: &ModelConfig, tokens: &TokenBatch) -> Result<ForwardOutput> {
    cfg.validate()?;
    check_tokens(cfg, tokens)?;
    if w.layers.len() != cfg.n_layers {
        return Err(shape_err!("{} layers supplied for a {}-layer config", w.layers.len(), cfg.n_layers));
    }
    let (b, t, d) = (tokens.batch, tokens.seq, cfg.d_model);
    let eps = cfg.ln_eps;

    let x = tape.embedding(w.tok_emb, &tokens.ids)?;
    let pos = tape.narrow(w.pos_emb, 0, 0, t)?;
    let pos = tape.reshape(pos, &[t * d])?;
    let x = tape.reshape(x, &[b, t * d])?;
    let x = tape.add_last(x, pos)?;
    let mut x = tape.reshape(x, &[b * t, d])?;

    let mask = if cfg.causal && t > 1 {
        Some(tape.constant(causal_mask(b * cfg.n_heads, t)?))
    } else {
        None
    };

    let mut attention = Vec::with_capacity(cfg.n_layers);
    for p in &w.layers {
        match cfg.norm {
            NormPlacement::Pre => {
                let h = layernorm_affine(tape, x, p.ln1_g, p.ln1_b, eps)?;
                let (a, att) = attention_block(tape, cfg, p, h, b, t, mask)?;
                attention.push(att);
                x = tape.add(x, a)?;
                let h = layernorm_affine(tape, x, p.ln2_g, p.ln2_b, eps)?;
                let f = ffn_block(tape, p, h)?;
                x = tape.add(x, f)?;
            }
            NormPlacement::Post => {
                let (a, att) = attention_block(tape, cfg, p, x, b, t, mask)?;
                attention.push(att);
                let s = tape.add(x, a)?;
                x = layernorm_affine(tape, s, p.ln1_g, p.ln1_b, eps)?;
                let f = ffn_block(tape, p, x)?;
                let s = tape.add(x, f)?;
                x = layernorm_affine(tape, s, p.ln2_g, p.ln2_b, eps)?;
            }
        }
    }
    if cfg.norm == NormPlacement::Pre {
        x = layernorm_affine(tape, x, w.lnf_g, w.lnf_b, eps)?;
    }
    let head = match w.head {
        Some(h) => h,
        None => tape.permute(w.tok_emb, &[1, 0])?,
    };
    let logits = linear(tape, x, head, w.head_b)?;
    Ok(ForwardOutput { logits, attention })
}

/// Mean next-token cross-entropy: position `t` predicts token `t + 1`.
pub fn lm_loss_on(tape: &mut Tape, w: &ModelParams<Var>, cfg: &ModelConfig, tokens: &TokenBatch) -> Result<Var> {
    if tokens.seq < 2 {
        return Err(invalid!("language-model loss needs sequences of length >= 2"));
    }
    let out = forward(tape, w, cfg, tokens)?;
    let (b, t, v) = (tokens.batch, tokens.seq, cfg.vocab);
    let logits = tape.reshape(out.logits, &[b, t, v])?;
    let logits = tape.narrow(logits, 1, 0, t - 1)?;
    let logits = tape.reshape(logits, &[b * (t - 1), v])?;
    let targets: Vec<usize> = (0..b).flat_map(|r| tokens.row(r)[1..].iter().copied()).collect();
    tape.cross_entropy(logits, &targets)
}

/// Loss value without gradients.
pub fn lm_loss(w: &ModelWeights, cfg: &ModelConfig, tokens: &TokenBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let p = w.to_constants(&mut tape);
    let loss = lm_loss_on(&mut tape, &p, cfg, tokens)?;
    Ok(tape.value(loss).item())
}

/// Logits `(batch, seq, vocab)` without gradients.
pub fn logits(w: &ModelWeights, cfg: &ModelConfig, tokens: &TokenBatch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = w.to_constants(&mut tape);
    let out = forward(&mut tape, &p, cfg, tokens)?;
    tape.value(out.logits).reshape(&[tokens.batch, tokens.seq, cfg.vocab])
}

/// Softmax attention of one sequence, shaped `(L, heads, seq, seq)`.
pub fn attention_maps(w: &ModelWeights, cfg: &ModelConfig, tokens: &[usize]) -> Result<Tensor> {
    let batch = TokenBatch::new(1, tokens.len(), tokens.to_vec())?;
    let mut tape = Tape::new();
    let p = w.to_constants(&mut tape);
    let out = forward(&mut tape, &p, cfg, &batch)?;
    let parts: Vec<Tensor> = out
        .attention
        .iter()
        .map(|&a| tape.value(a).reshape(&[1, cfg.n_heads, batch.seq, batch.seq]))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat(&refs, 0)
}

/// Exact number of stored parameters.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    param_shapes(cfg)
        .named()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>() as u64)
        .sum()
}

/// Entries of the six mapped matrices in one layer, `(2k + 4) · D²`.
pub fn mapped_params_per_layer(cfg: &ModelConfig) -> u64 {
    (cfg.slabs() * cfg.d_model * cfg.d_model) as u64
}

/// Matrix weights multiplied per token: all mapped matrices plus the head.
pub fn dense_params(cfg: &ModelConfig) -> u64 {
    cfg.n_layers as u64 * mapped_params_per_layer(cfg) + (cfg.d_model * cfg.vocab) as u64
}

/// Forward FLOPs per token spent in the transformer blocks' matrices.
pub fn dense_layer_flops_per_token(cfg: &ModelConfig) -> u64 {
    2 * cfg.n_layers as u64 * mapped_params_per_layer(cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopsMode {
    Inference,
    Train,
}

pub fn flops_per_token(cfg: &ModelConfig, mode: FlopsMode) -> u64 {
    let forward = 2 * dense_params(cfg) + 2 * (cfg.n_layers * cfg.seq_len * cfg.d_model) as u64;
    match mode {
        FlopsMode::Inference => forward,
        FlopsMode::Train => 3 * forward,
    }
}
