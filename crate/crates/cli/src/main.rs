use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mango_core::checkpoint::Checkpoint;
use mango_core::harness::{
    ablate_ranks, compare_methods, export_attention_maps, train_to_threshold, write_curve, write_json,
    write_loss_trace, Experiment,
};
use mango_core::training::GrowthMethod;
use mango_core::{Error, ModelWeights, RunConfig};

#[derive(Parser)]
#[command(name = "mango", version, about = "Grow small transformers into larger ones with tensor-ring operators")]
struct Cli {
    /// Output root; falls back to the config's output_dir, then ./mango-out.
    #[arg(long, global = true, env = "MANGO_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the small model from scratch and save it.
    TrainSmall {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Grow a small checkpoint into the target shape.
    Grow {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        small: PathBuf,
        #[arg(long)]
        method: Option<GrowthMethod>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Continue training a target-shaped checkpoint.
    TrainTarget {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        /// Stop once eval loss reaches this value.
        #[arg(long)]
        psi: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every configured method against scratch.
    Compare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Mango at each rank against scratch.
    AblateRanks {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ranks: Option<Vec<usize>>,
    },
    /// Write attention probabilities as CSV.
    ExportAttn {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated token ids.
        #[arg(long, value_delimiter = ',', conflicts_with = "text")]
        tokens: Option<Vec<usize>>,
        /// Text encoded with the config's character task.
        #[arg(long, requires = "config")]
        text: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "attention.csv")]
        file: PathBuf,
    },
    /// Print a checkpoint's metadata and tensor table.
    InspectCkpt { path: PathBuf },
}

struct Ctx {
    out: PathBuf,
}

impl Ctx {
    fn new(flag: Option<PathBuf>, config: Option<&RunConfig>) -> Result<Self> {
        let out = flag
            .or_else(|| config.and_then(|c| c.output_dir.clone()))
            .unwrap_or_else(|| PathBuf::from("mango-out"));
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self { out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn load_model(path: &Path) -> Result<(Checkpoint, mango_core::ModelConfig, ModelWeights)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let (cfg, w) = ck.to_model().with_context(|| format!("reading {}", path.display()))?;
    Ok((ck, cfg, w))
}

fn small_for(exp: &Experiment, rc: &RunConfig) -> Result<Option<ModelWeights>> {
    let Some(p) = &rc.small_checkpoint else { return Ok(None) };
    let (_, cfg, w) = load_model(p)?;
    if cfg != exp.small {
        bail!(Error::Config(format!("{} does not match the [small] section", p.display())));
    }
    Ok(Some(w))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::TrainSmall { config, seed } => {
            let rc = load_config(&config)?;
            let ctx = Ctx::new(cli.out, Some(&rc))?;
            let exp = rc.experiment()?;
            let seed = seed.unwrap_or(rc.seeds[0]);
            let run = exp.pretrain_small(seed)?;
            write_curve(&ctx.path("small_metrics.csv"), "small", seed, &run.curve)?;
            Checkpoint::from_model(&run.weights, &exp.small, seed, "small")?.save(&ctx.path("small.ckpt"))?;
            let last = run.curve.last().expect("curve has a step-0 point");
            println!(
                "small model: eval loss {:.4} after {} steps (uniform = {:.4}), {} FLOPs",
                last.eval_loss,
                last.step,
                (exp.small.vocab as f64).ln(),
                run.ledger.cumulative
            );
            println!("wrote {}", ctx.path("small.ckpt").display());
        }
        Cmd::Grow { config, small, method, seed } => {
            let rc = load_config(&config)?;
            let ctx = Ctx::new(cli.out, Some(&rc))?;
            let exp = rc.experiment()?;
            let (ck, cfg1, w1) = load_model(&small)?;
            if cfg1 != exp.small {
                bail!(Error::Config(format!("{} does not match the [small] section", small.display())));
            }
            let method = method.unwrap_or(rc.method);
            let seed = seed.unwrap_or(ck.meta.seed);
            let out = exp.grow_model(&w1, method, &exp.grow, seed)?;
            let label = method.label();
            let mut grown = Checkpoint::from_model(&out.weights, &exp.target, seed, label)?;
            grown.meta.warmup_flops = out.trace.flops;
            grown.save(&ctx.path(&format!("target_{label}.ckpt")))?;
            write_loss_trace(&ctx.path(&format!("warmup_{label}.csv")), &out.trace.losses)?;
            if let Some(op) = &out.operator {
                let name = match method {
                    GrowthMethod::Mango => "cores_mango.ckpt",
                    _ => "operator_ligo.ckpt",
                };
                Checkpoint::from_operator(op, exp.target.ffn_ratio, seed).save(&ctx.path(name))?;
            }
            let eval = exp.task.eval_loss(&out.weights, &exp.target)?;
            println!(
                "grew with {label}: eval loss {eval:.4}, warmup {} steps, {} FLOPs",
                out.trace.losses.len(),
                out.trace.flops
            );
        }
        Cmd::TrainTarget { config, init, psi, seed } => {
            let rc = load_config(&config)?;
            let ctx = Ctx::new(cli.out, Some(&rc))?;
            let exp = rc.experiment()?;
            let (ck, cfg, w) = load_model(&init)?;
            if cfg != exp.target {
                bail!(Error::Config(format!("{} does not match the [target] section", init.display())));
            }
            let seed = seed.unwrap_or(ck.meta.seed);
            let label = if ck.meta.note.is_empty() { "target" } else { ck.meta.note.as_str() };
            let run = train_to_threshold(
                &w,
                &cfg,
                &exp.task,
                psi,
                &exp.target_budget,
                seed,
                label,
                ck.meta.warmup_flops,
            )?;
            write_curve(&ctx.path("target_metrics.csv"), label, seed, &run.curve)?;
            Checkpoint::from_model(&run.weights, &cfg, seed, label)?.save(&ctx.path("target_trained.ckpt"))?;
            write_json(&ctx.path("target_ledger.json"), &run.ledger)?;
            let last = run.curve.last().expect("curve has a step-0 point");
            println!(
                "{label}: eval loss {:.4} after {} steps, {} FLOPs{}",
                last.eval_loss,
                last.step,
                run.ledger.cumulative,
                match (psi, run.ledger.converged) {
                    (Some(_), true) => " (reached threshold)",
                    (Some(_), false) => " (threshold not reached)",
                    _ => "",
                }
            );
        }
        Cmd::Compare { config } => {
            let rc = load_config(&config)?;
            let ctx = Ctx::new(cli.out, Some(&rc))?;
            let exp = rc.experiment()?;
            let small = small_for(&exp, &rc)?;
            let (report, _) = compare_methods(&exp, &rc.methods, &rc.seeds, small.as_ref(), Some(&ctx.out))?;
            for a in &report.aggregate {
                println!(
                    "{:<8} converged {}/{}  mean r {}  std {}",
                    a.method,
                    a.converged,
                    a.runs,
                    fmt_opt(a.mean_r),
                    fmt_opt(a.std_r)
                );
            }
            println!("wrote {}", ctx.path("summary.json").display());
        }
        Cmd::AblateRanks { config, ranks } => {
            let rc = load_config(&config)?;
            let ctx = Ctx::new(cli.out, Some(&rc))?;
            let exp = rc.experiment()?;
            let small = small_for(&exp, &rc)?;
            let ranks = ranks.unwrap_or_else(|| rc.ablation_ranks.clone());
            let (report, _) = ablate_ranks(&exp, &ranks, &rc.seeds, small.as_ref(), Some(&ctx.out))?;
            println!("{:>4} {:>10} {:>10} {:>10}", "R", "params", "warm eval", "mean r");
            for row in &report.rows {
                println!(
                    "{:>4} {:>10} {:>10.4} {:>10}",
                    row.rank,
                    row.param_count,
                    row.warmup_eval_loss,
                    fmt_opt(row.mean_r)
                );
            }
            println!("r spread across ranks: {}", fmt_opt(report.r_spread));
        }
        Cmd::ExportAttn { ckpt, tokens, text, config, file } => {
            let rc = config.as_deref().map(load_config).transpose()?;
            let ctx = Ctx::new(cli.out, rc.as_ref())?;
            let (_, cfg, w) = load_model(&ckpt)?;
            let tokens = match (tokens, text, rc) {
                (Some(t), _, _) => t,
                (None, Some(s), Some(rc)) => rc.experiment()?.task.encode(&s)?,
                _ => bail!(Error::Config("pass --tokens, or --text with --config".into())),
            };
            let path = if file.is_absolute() { file } else { ctx.path(&file.to_string_lossy()) };
            let rows = export_attention_maps(&w, &cfg, &tokens, &path)?;
            println!("wrote {rows} rows to {}", path.display());
        }
        Cmd::InspectCkpt { path } => {
            let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            println!("{}", serde_json::to_string_pretty(&ck.meta)?);
            for line in ck.inventory() {
                println!("{line}");
            }
        }
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::NonFinite { .. } => 2,
                Error::Io(_) | Error::Format(_) | Error::Version { .. } => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
