//! Adam, model training steps, operator warmup and the `grow` entry point.
//!
//! Adam with bias correction and decoupled decay:
//! `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
//! `p ← p − lr·m̂/(√v̂ + eps) − lr·decay·p` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::growth::{deepen_identity, mango_init, net2net_width, pad_width, stack_depth, GrowthOperator, LigoOperator, MangoCores};
use crate::packing::{check_growth, grow_extras, pack, unpack, unpack_vars, PackedShape, PackedWeights};
use crate::tensor::Tensor;
use crate::transformer::{
    flops_per_token, forward, init_random, lm_loss_on, logits, FlopsMode, ModelConfig, ModelWeights, TokenBatch,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Result<Self> {
        if !(config.lr > 0.0) || !(config.eps > 0.0) {
            return Err(invalid!("Adam needs positive lr and eps"));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(invalid!("Adam betas must lie in [0, 1)"));
        }
        let zeros = |s: &&[usize]| Tensor::zeros(s);
        Ok(Self {
            config,
            m: shapes.iter().map(zeros).collect::<Result<_>>()?,
            v: shapes.iter().map(zeros).collect::<Result<_>>()?,
            t: 0,
        })
    }

    /// One update. Non-finite gradients abort before anything is modified.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(invalid!(
                "Adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        for (j, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[j].shape() {
                return Err(invalid!("Adam tensor {j}: parameter {:?}, gradient {:?}", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    step: self.t + 1,
                    detail: format!("gradient of tensor {j} contains non-finite values"),
                });
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (j, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[j].data_mut(), self.v[j].data_mut());
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= c.lr * mhat / (vhat.sqrt() + c.eps) + c.lr * c.weight_decay * *x;
            }
        }
        Ok(())
    }
}

fn check_loss(loss: f64, step: u64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("loss is {loss}"),
        });
    }
    Ok(())
}

/// Full-model optimizer: Adam over every entry of the weights.
pub struct ModelTrainer {
    pub adam: AdamState,
}

impl ModelTrainer {
    pub fn new(w: &ModelWeights, config: AdamConfig) -> Result<Self> {
        let named = w.named();
        let shapes: Vec<&[usize]> = named.iter().map(|(_, t)| t.shape()).collect();
        Ok(Self { adam: AdamState::new(config, &shapes)? })
    }

    /// Forward, backward and update on one batch; returns the loss before
    /// the update.
    pub fn step(&mut self, w: &mut ModelWeights, cfg: &ModelConfig, batch: &TokenBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let p = w.to_params(&mut tape);
        let loss = lm_loss_on(&mut tape, &p, cfg, batch)?;
        let value = tape.value(loss).item();
        check_loss(value, self.adam.t + 1)?;
        let mut grads = tape.backward(loss)?;
        let vars: Vec<Var> = p.named().into_iter().map(|(_, v)| *v).collect();
        let g: Vec<Tensor> = vars
            .iter()
            .zip(w.named())
            .map(|(v, (_, t))| grads.take(*v).map_or_else(|| Tensor::zeros(t.shape()), Ok))
            .collect::<Result<_>>()?;
        let mut params = w.entries_mut();
        self.adam.step(&mut params, &g)?;
        Ok(value)
    }
}

/// Source of training batches.
pub trait BatchStream {
    fn next_batch(&mut self) -> Result<TokenBatch>;
}

impl<F: FnMut() -> Result<TokenBatch>> BatchStream for F {
    fn next_batch(&mut self) -> Result<TokenBatch> {
        self()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupLoss {
    /// Next-token cross-entropy on the task data.
    #[default]
    TaskLm,
    /// Cross-entropy against the small model's predictive distribution.
    DistillToSmall,
}

fn default_steps() -> usize {
    100
}
fn default_warmup_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_warmup_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: WarmupLoss,
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            lr: default_warmup_lr(),
            batch_size: default_batch(),
            seed: 0,
            loss: WarmupLoss::TaskLm,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WarmupTrace {
    /// Loss at each step, evaluated before that step's update.
    pub losses: Vec<f64>,
    /// FLOPs spent, including operator applications and, for distillation,
    /// the small model's forward passes.
    pub flops: u64,
}

fn warmup_step_flops(apply_flops: u64, cfg1: &ModelConfig, cfg2: &ModelConfig, wc: &WarmupConfig, tokens: u64) -> u64 {
    let mut f = tokens * flops_per_token(cfg2, FlopsMode::Train) + 3 * apply_flops;
    if wc.loss == WarmupLoss::DistillToSmall {
        f += tokens * flops_per_token(cfg1, FlopsMode::Inference);
    }
    f
}

/// Optimizes the operator for `wc.steps` steps. `m1` and `extras` enter the
/// tape as constants, so only the operator's tensors are updated.
#[allow(clippy::too_many_arguments)]
pub fn train_operator<O: GrowthOperator + ?Sized>(
    op: &mut O,
    m1: &PackedWeights,
    extras: &ModelWeights,
    small: &ModelWeights,
    cfg1: &ModelConfig,
    cfg2: &ModelConfig,
    data: &mut dyn BatchStream,
    wc: &WarmupConfig,
) -> Result<WarmupTrace> {
    let (s, t) = op.shapes();
    if s != m1.shape() || t != PackedShape::of(cfg2) {
        return Err(invalid!("operator shapes {s:?} -> {t:?} do not fit the models"));
    }
    extras.check_shapes(cfg2)?;
    let shapes: Vec<Vec<usize>> = op.params().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: wc.lr,
            weight_decay: wc.weight_decay,
            ..AdamConfig::default()
        },
        &shape_refs,
    )?;
    let mut trace = WarmupTrace::default();
    for step in 0..wc.steps {
        let batch = data.next_batch()?;
        let mut tape = Tape::new();
        let params: Vec<Var> = op.params().iter().map(|(_, t)| tape.param((*t).clone())).collect();
        let m1v = tape.constant(m1.tensor.clone());
        let m2 = op.apply_vars(&mut tape, &params, m1v)?;
        let ex = extras.to_constants(&mut tape);
        let w2 = unpack_vars(&mut tape, m2, cfg2, &ex)?;
        let loss = match wc.loss {
            WarmupLoss::TaskLm => lm_loss_on(&mut tape, &w2, cfg2, &batch)?,
            WarmupLoss::DistillToSmall => {
                let teacher = logits(small, cfg1, &batch)?;
                let rows = batch.num_tokens();
                let mut probs = teacher.reshape(&[rows, cfg1.vocab])?;
                for row in probs.data_mut().chunks_mut(cfg1.vocab) {
                    crate::autodiff::softmax_row(row);
                }
                let out = forward(&mut tape, &w2, cfg2, &batch)?;
                tape.soft_cross_entropy(out.logits, probs)?
            }
        };
        let value = tape.value(loss).item();
        check_loss(value, step as u64).map_err(|e| match e {
            Error::NonFinite { detail, .. } => Error::NonFinite {
                step: step as u64,
                detail: format!("operator warmup: {detail}"),
            },
            other => other,
        })?;
        trace.losses.push(value);
        trace.flops += warmup_step_flops(op.apply_flops(), cfg1, cfg2, wc, batch.num_tokens() as u64);
        let mut grads = tape.backward(loss)?;
        let g: Vec<Tensor> = params
            .iter()
            .zip(&shapes)
            .map(|(v, s)| grads.take(*v).map_or_else(|| Tensor::zeros(s), Ok))
            .collect::<Result<_>>()?;
        let mut p = op.params_mut();
        adam.step(&mut p, &g)?;
    }
    Ok(trace)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrowthMethod {
    Mango,
    Ligo,
    Stack,
    Net2net,
    Random,
}

impl GrowthMethod {
    pub const ALL: [GrowthMethod; 5] = [Self::Mango, Self::Ligo, Self::Stack, Self::Net2net, Self::Random];

    pub fn label(self) -> &'static str {
        match self {
            Self::Mango => "mango",
            Self::Ligo => "ligo",
            Self::Stack => "stack",
            Self::Net2net => "net2net",
            Self::Random => "random",
        }
    }

    pub fn is_trainable(self) -> bool {
        matches!(self, Self::Mango | Self::Ligo)
    }
}

impl std::str::FromStr for GrowthMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| invalid!("unknown growth method '{s}' (expected mango, ligo, stack, net2net or random)"))
    }
}

impl std::fmt::Display for GrowthMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

fn default_ranks() -> [usize; 4] {
    [1; 4]
}
fn default_noise() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowOptions {
    #[serde(default = "default_ranks")]
    pub ranks: [usize; 4],
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for GrowOptions {
    fn default() -> Self {
        Self {
            ranks: default_ranks(),
            noise: default_noise(),
            seed: 0,
        }
    }
}

/// Trained operator kept for export.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainedOperator {
    Mango(MangoCores),
    Ligo(LigoOperator),
}

impl TrainedOperator {
    pub fn as_dyn(&self) -> &dyn GrowthOperator {
        match self {
            Self::Mango(c) => c,
            Self::Ligo(l) => l,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GrowOutcome {
    pub weights: ModelWeights,
    pub trace: WarmupTrace,
    pub operator: Option<TrainedOperator>,
}

/// Packs the small model, trains the operator (trainable methods only),
/// recovers `ℳ₂` and unpacks it into the target model.
#[allow(clippy::too_many_arguments)]
pub fn grow(
    small: &ModelWeights,
    cfg1: &ModelConfig,
    cfg2: &ModelConfig,
    method: GrowthMethod,
    data: &mut dyn BatchStream,
    wc: &WarmupConfig,
    opts: &GrowOptions,
) -> Result<GrowOutcome> {
    check_growth(cfg1, cfg2)?;
    small.check_shapes(cfg1)?;
    let seed = opts.seed;
    let simple = |weights| GrowOutcome {
        weights,
        trace: WarmupTrace::default(),
        operator: None,
    };
    match method {
        GrowthMethod::Random => Ok(simple(init_random(cfg2, seed)?)),
        GrowthMethod::Stack => {
            let deep = stack_depth(small, cfg1, cfg2.n_layers)?;
            let cfg_deep = ModelConfig { n_layers: cfg2.n_layers, ..cfg1.clone() };
            Ok(simple(pad_width(&deep, &cfg_deep, cfg2, seed)?))
        }
        GrowthMethod::Net2net => {
            let cfg_wide = ModelConfig { n_layers: cfg1.n_layers, ..cfg2.clone() };
            let wide = net2net_width(small, cfg1, &cfg_wide, seed)?;
            Ok(simple(deepen_identity(&wide, &cfg_wide, cfg2.n_layers, seed)?))
        }
        GrowthMethod::Mango | GrowthMethod::Ligo => {
            let m1 = pack(small, cfg1)?;
            let extras = grow_extras(small, cfg1, cfg2, seed)?;
            let (s, t) = (m1.shape(), PackedShape::of(cfg2));
            let mut op = match method {
                GrowthMethod::Mango => TrainedOperator::Mango(mango_init(s, t, opts.ranks, seed, opts.noise)?),
                _ => TrainedOperator::Ligo(LigoOperator::init(s, t, seed, opts.noise)?),
            };
            let trace = match &mut op {
                TrainedOperator::Mango(c) => train_operator(c, &m1, &extras, small, cfg1, cfg2, data, wc)?,
                TrainedOperator::Ligo(l) => train_operator(l, &m1, &extras, small, cfg1, cfg2, data, wc)?,
            };
            let m2 = PackedWeights::new(op.as_dyn().apply(&m1.tensor)?, cfg2.ffn_ratio)?;
            let weights = unpack(&m2, cfg2, &extras)?;
            Ok(GrowOutcome {
                weights,
                trace,
                operator: Some(op),
            })
        }
    }
}
