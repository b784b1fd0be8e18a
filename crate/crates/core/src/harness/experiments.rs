use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ledger::{flops_saving_ratio, flops_to_reach, CurvePoint, FlopsLedger};
use super::report;
use super::tasks::{Task, TaskSpec};
use crate::error::{invalid, Result};
use crate::growth::param_count_mango;
use crate::packing::PackedShape;
use crate::rng::Rng;
use crate::training::{grow, AdamConfig, GrowOptions, GrowOutcome, GrowthMethod, ModelTrainer, WarmupConfig};
use crate::transformer::{flops_per_token, init_random, FlopsMode, ModelConfig, ModelWeights, TokenBatch};

const SMALL_DATA: u64 = 0x5a11;
const TARGET_DATA: u64 = 0x7a46;
const WARMUP_DATA: u64 = 0x3a6d;

pub const COMPARE_FORMAT: &str = "mango-compare/1";
pub const ABLATION_FORMAT: &str = "mango-ablation/1";

fn default_steps() -> usize {
    300
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    3e-3
}
fn default_eval_every() -> usize {
    25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBudget {
    #[serde(default = "default_steps")]
    pub max_steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for TrainBudget {
    fn default() -> Self {
        Self {
            max_steps: default_steps(),
            batch_size: default_batch(),
            lr: default_lr(),
            eval_every: default_eval_every(),
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub ledger: FlopsLedger,
    pub curve: Vec<CurvePoint>,
    pub weights: ModelWeights,
}

impl RunResult {
    pub fn best_eval(&self) -> f64 {
        self.curve.iter().map(|p| p.eval_loss).fold(f64::INFINITY, f64::min)
    }
}

/// Adam on the task until eval loss reaches `psi` or the budget runs out.
/// Eval happens at step 0, every `eval_every` steps and at the last step;
/// evaluation itself is not charged. `data_seed` fixes the batch order.
#[allow(clippy::too_many_arguments)]
pub fn train_to_threshold(
    w0: &ModelWeights,
    cfg: &ModelConfig,
    task: &Task,
    psi: Option<f64>,
    budget: &TrainBudget,
    data_seed: u64,
    method: &str,
    warmup_flops: u64,
) -> Result<RunResult> {
    if budget.max_steps == 0 || budget.eval_every == 0 || budget.batch_size == 0 {
        return Err(invalid!("training budget must be positive"));
    }
    check_fit(task, cfg)?;
    let mut w = w0.clone();
    let mut trainer = ModelTrainer::new(
        &w,
        AdamConfig {
            lr: budget.lr,
            weight_decay: budget.weight_decay,
            ..AdamConfig::default()
        },
    )?;
    let mut ledger = FlopsLedger::new(method, warmup_flops, psi);
    let per_token = flops_per_token(cfg, FlopsMode::Train);
    let mut rng = Rng::derive(data_seed, TARGET_DATA);
    let reached = |loss: f64| psi.is_some_and(|p| loss <= p);

    let eval0 = task.eval_loss(&w, cfg)?;
    let mut curve = vec![CurvePoint {
        step: 0,
        train_loss: None,
        eval_loss: eval0,
        cum_flops: ledger.cumulative,
    }];
    let mut done = reached(eval0);
    let (mut acc, mut n) = (0.0, 0usize);
    let mut step = 0;
    while !done && step < budget.max_steps {
        step += 1;
        let batch = task.sample_train(&mut rng, budget.batch_size)?;
        acc += trainer.step(&mut w, cfg, &batch)?;
        n += 1;
        ledger.record(batch.num_tokens() as u64 * per_token)?;
        if step % budget.eval_every == 0 || step == budget.max_steps {
            let eval_loss = task.eval_loss(&w, cfg)?;
            curve.push(CurvePoint {
                step,
                train_loss: Some(acc / n as f64),
                eval_loss,
                cum_flops: ledger.cumulative,
            });
            (acc, n) = (0.0, 0);
            done = reached(eval_loss);
        }
    }
    if let Some(p) = psi {
        ledger.flops_to_threshold = flops_to_reach(&curve, p);
        ledger.converged = ledger.flops_to_threshold.is_some();
    }
    Ok(RunResult { ledger, curve, weights: w })
}

fn check_fit(task: &Task, cfg: &ModelConfig) -> Result<()> {
    if cfg.vocab != task.vocab() || cfg.seq_len < task.seq_len() {
        return Err(invalid!(
            "model (vocab {}, seq_len {}) does not fit the task (vocab {}, seq_len {})",
            cfg.vocab,
            cfg.seq_len,
            task.vocab(),
            task.seq_len()
        ));
    }
    Ok(())
}

/// Everything a comparison shares across methods.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub task: Task,
    pub small: ModelConfig,
    pub target: ModelConfig,
    pub small_budget: TrainBudget,
    pub target_budget: TrainBudget,
    pub warmup: WarmupConfig,
    pub grow: GrowOptions,
}

/// Per-seed state shared by every method: the pretrained small model and
/// the scratch run that defines Ψ.
#[derive(Clone, Debug)]
pub struct SeedBaseline {
    pub seed: u64,
    pub small: ModelWeights,
    pub small_eval_loss: f64,
    pub scratch: RunResult,
    pub psi: f64,
    pub xi_scratch: f64,
}

#[derive(Clone, Debug)]
pub struct MethodRun {
    pub method: String,
    pub seed: u64,
    pub initial_eval_loss: f64,
    pub warmup_losses: Vec<f64>,
    pub run: RunResult,
    pub r: Option<f64>,
}

impl Experiment {
    pub fn check(&self) -> Result<()> {
        check_fit(&self.task, &self.small)?;
        check_fit(&self.task, &self.target)
    }

    pub fn pretrain_small(&self, seed: u64) -> Result<RunResult> {
        check_fit(&self.task, &self.small)?;
        let w0 = init_random(&self.small, seed)?;
        train_to_threshold(&w0, &self.small, &self.task, None, &self.small_budget, seed ^ SMALL_DATA, "small", 0)
    }

    /// Trains or adopts the small model, then runs scratch to its budget.
    /// Ψ is scratch's best eval loss.
    pub fn baseline(&self, seed: u64, small: Option<&ModelWeights>) -> Result<SeedBaseline> {
        self.check()?;
        let small = match small {
            Some(w) => {
                w.check_shapes(&self.small)?;
                w.clone()
            }
            None => self.pretrain_small(seed)?.weights,
        };
        let small_eval_loss = self.task.eval_loss(&small, &self.small)?;
        let w0 = init_random(&self.target, seed)?;
        let mut scratch = train_to_threshold(&w0, &self.target, &self.task, None, &self.target_budget, seed, "scratch", 0)?;
        let psi = scratch.best_eval();
        let xi_scratch = flops_to_reach(&scratch.curve, psi).ok_or_else(|| invalid!("scratch never reached its own best"))?;
        scratch.ledger.threshold = Some(psi);
        scratch.ledger.flops_to_threshold = Some(xi_scratch);
        scratch.ledger.converged = true;
        Ok(SeedBaseline {
            seed,
            small,
            small_eval_loss,
            scratch,
            psi,
            xi_scratch,
        })
    }

    /// Grows `small` with warmup batches drawn from the task in the order
    /// fixed by `seed`.
    pub fn grow_model(&self, small: &ModelWeights, method: GrowthMethod, opts: &GrowOptions, seed: u64) -> Result<GrowOutcome> {
        check_fit(&self.task, &self.target)?;
        let opts = GrowOptions { seed, ..opts.clone() };
        let mut rng = Rng::derive(seed ^ self.warmup.seed, WARMUP_DATA);
        let batch = self.warmup.batch_size;
        let mut stream = || -> Result<TokenBatch> { self.task.sample_train(&mut rng, batch) };
        grow(small, &self.small, &self.target, method, &mut stream, &self.warmup, &opts)
    }

    /// Grows from the baseline's small model and trains to its Ψ. Warmup
    /// FLOPs are charged to the run.
    pub fn run_method(&self, base: &SeedBaseline, method: GrowthMethod, opts: &GrowOptions) -> Result<MethodRun> {
        let task = &self.task;
        let out = self.grow_model(&base.small, method, opts, base.seed)?;
        let initial_eval_loss = task.eval_loss(&out.weights, &self.target)?;
        let run = train_to_threshold(
            &out.weights,
            &self.target,
            task,
            Some(base.psi),
            &self.target_budget,
            base.seed,
            method.label(),
            out.trace.flops,
        )?;
        let r = match run.ledger.flops_to_threshold {
            Some(xi) => Some(flops_saving_ratio(base.xi_scratch, xi)?),
            None => None,
        };
        Ok(MethodRun {
            method: method.label().to_string(),
            seed: base.seed,
            initial_eval_loss,
            warmup_losses: out.trace.losses,
            run,
            r,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub psi: f64,
    pub xi_scratch: f64,
    pub small_eval_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub seed: u64,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub steps: usize,
    pub warmup_flops: u64,
    pub cum_flops: u64,
    pub converged: bool,
    pub xi: Option<f64>,
    pub r: Option<f64>,
}

impl From<&MethodRun> for RunSummary {
    fn from(m: &MethodRun) -> Self {
        let l = &m.run.ledger;
        Self {
            method: m.method.clone(),
            seed: m.seed,
            initial_eval_loss: m.initial_eval_loss,
            final_eval_loss: m.run.curve.last().map_or(f64::NAN, |p| p.eval_loss),
            steps: l.steps(),
            warmup_flops: l.warmup_flops,
            cum_flops: l.cumulative,
            converged: l.converged,
            xi: l.flops_to_threshold,
            r: m.r,
        }
    }
}

/// Mean and sample standard deviation of `r` over converged runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub runs: usize,
    pub converged: usize,
    pub mean_r: Option<f64>,
    pub std_r: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std.or(Some(0.0)))
}

fn aggregate(method: &str, runs: &[&MethodRun]) -> Aggregate {
    let rs: Vec<f64> = runs.iter().filter_map(|m| m.r).collect();
    let (mean_r, std_r) = mean_std(&rs);
    Aggregate {
        method: method.to_string(),
        runs: runs.len(),
        converged: rs.len(),
        mean_r,
        std_r,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub format: String,
    pub task: TaskSpec,
    pub small: ModelConfig,
    pub target: ModelConfig,
    pub seeds: Vec<SeedSummary>,
    pub runs: Vec<RunSummary>,
    pub aggregate: Vec<Aggregate>,
}

fn seed_summary(b: &SeedBaseline) -> SeedSummary {
    SeedSummary {
        seed: b.seed,
        psi: b.psi,
        xi_scratch: b.xi_scratch,
        small_eval_loss: b.small_eval_loss,
    }
}

/// Runs every method at every seed from the same small model and data
/// order. With `out_dir`, writes `curves_<method>.csv` and `summary.json`.
pub fn compare_methods(
    exp: &Experiment,
    methods: &[GrowthMethod],
    seeds: &[u64],
    small: Option<&ModelWeights>,
    out_dir: Option<&Path>,
) -> Result<(CompareReport, Vec<MethodRun>)> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(invalid!("need at least one method and one seed"));
    }
    let mut bases = Vec::new();
    let mut runs = Vec::new();
    for &seed in seeds {
        let base = exp.baseline(seed, small)?;
        for &m in methods {
            runs.push(exp.run_method(&base, m, &exp.grow)?);
        }
        bases.push(base);
    }
    let report = CompareReport {
        format: COMPARE_FORMAT.to_string(),
        task: exp.task.spec.clone(),
        small: exp.small.clone(),
        target: exp.target.clone(),
        seeds: bases.iter().map(seed_summary).collect(),
        runs: runs.iter().map(RunSummary::from).collect(),
        aggregate: methods
            .iter()
            .map(|m| {
                let of: Vec<&MethodRun> = runs.iter().filter(|r| r.method == m.label()).collect();
                aggregate(m.label(), &of)
            })
            .collect(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        for m in methods {
            let of: Vec<&MethodRun> = runs.iter().filter(|r| r.method == m.label()).collect();
            report::write_curves(&dir.join(format!("curves_{}.csv", m.label())), &of)?;
        }
        report::write_json(&dir.join("summary.json"), &report)?;
    }
    Ok((report, runs))
}

pub const DEFAULT_RANKS: [usize; 4] = [1, 4, 7, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rank: usize,
    /// Closed-form count for the rank.
    pub param_count: u64,
    /// Entries actually held by the four cores.
    pub stored_params: u64,
    pub warmup_eval_loss: f64,
    pub mean_r: Option<f64>,
    pub per_seed_r: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub format: String,
    pub task: TaskSpec,
    pub small: ModelConfig,
    pub target: ModelConfig,
    pub seeds: Vec<SeedSummary>,
    pub rows: Vec<RankRow>,
    /// max − min of mean r across ranks.
    pub r_spread: Option<f64>,
}

/// Mango with equal ranks `R` for every R in `ranks`, sharing Ψ per seed.
/// With `out_dir`, writes `ablation.csv` and `ablation.json`.
pub fn ablate_ranks(
    exp: &Experiment,
    ranks: &[usize],
    seeds: &[u64],
    small: Option<&ModelWeights>,
    out_dir: Option<&Path>,
) -> Result<(AblationReport, Vec<MethodRun>)> {
    if ranks.is_empty() || seeds.is_empty() || ranks.contains(&0) {
        return Err(invalid!("need positive ranks and at least one seed"));
    }
    let bases: Vec<SeedBaseline> = seeds.iter().map(|&s| exp.baseline(s, small)).collect::<Result<_>>()?;
    let (s1, s2) = (PackedShape::of(&exp.small), PackedShape::of(&exp.target));
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for &rank in ranks {
        let opts = GrowOptions { ranks: [rank; 4], ..exp.grow.clone() };
        let runs: Vec<MethodRun> = bases
            .iter()
            .map(|b| exp.run_method(b, GrowthMethod::Mango, &opts))
            .collect::<Result<_>>()?;
        let per_seed_r: Vec<Option<f64>> = runs.iter().map(|m| m.r).collect();
        let rs: Vec<f64> = per_seed_r.iter().flatten().copied().collect();
        let r2 = (rank * rank) as u64;
        rows.push(RankRow {
            rank,
            param_count: param_count_mango(
                s1.i as u64,
                s2.i as u64,
                s1.b as u64,
                s2.b as u64,
                s1.l as u64,
                s2.l as u64,
                rank as u64,
            ),
            stored_params: r2 * (s1.b * s2.b + s1.i * s2.i + s1.o * s2.o + s1.l * s2.l) as u64,
            warmup_eval_loss: runs.iter().map(|m| m.initial_eval_loss).sum::<f64>() / runs.len() as f64,
            mean_r: mean_std(&rs).0,
            per_seed_r,
        });
        all.extend(runs.into_iter().map(|mut m| {
            m.method = format!("mango_r{rank}");
            m
        }));
    }
    let means: Vec<f64> = rows.iter().filter_map(|r| r.mean_r).collect();
    let r_spread = (means.len() == rows.len()).then(|| {
        means.iter().copied().fold(f64::NEG_INFINITY, f64::max) - means.iter().copied().fold(f64::INFINITY, f64::min)
    });
    let report = AblationReport {
        format: ABLATION_FORMAT.to_string(),
        task: exp.task.spec.clone(),
        small: exp.small.clone(),
        target: exp.target.clone(),
        seeds: bases.iter().map(seed_summary).collect(),
        rows,
        r_spread,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        report::write_ablation_csv(&dir.join("ablation.csv"), &report)?;
        report::write_json(&dir.join("ablation.json"), &report)?;
    }
    Ok((report, all))
}
