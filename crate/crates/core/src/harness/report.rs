use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::experiments::{AblationReport, MethodRun};
use super::ledger::CurvePoint;
use crate::error::Result;
use crate::transformer::{attention_maps, ModelConfig, ModelWeights};

pub const CURVE_HEADER: [&str; 6] = ["method", "seed", "step", "train_loss", "eval_loss", "cum_flops"];

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

fn curve_rows<W: Write>(out: &mut csv::Writer<W>, method: &str, seed: u64, curve: &[CurvePoint]) -> Result<()> {
    for p in curve {
        out.write_record([
            method.to_string(),
            seed.to_string(),
            p.step.to_string(),
            opt(p.train_loss),
            p.eval_loss.to_string(),
            p.cum_flops.to_string(),
        ])?;
    }
    Ok(())
}

/// One row per logged point, all runs of one method.
pub fn write_curves(path: &Path, runs: &[&MethodRun]) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(CURVE_HEADER)?;
    for m in runs {
        curve_rows(&mut out, &m.method, m.seed, &m.run.curve)?;
    }
    out.flush()?;
    Ok(())
}

/// A single run's curve in the same schema.
pub fn write_curve(path: &Path, method: &str, seed: u64, curve: &[CurvePoint]) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(CURVE_HEADER)?;
    curve_rows(&mut out, method, seed, curve)?;
    out.flush()?;
    Ok(())
}

/// `step,loss` for operator warmup.
pub fn write_loss_trace(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        out.write_record([i.to_string(), l.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_ablation_csv(path: &Path, report: &AblationReport) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["rank", "seed", "param_count", "stored_params", "warmup_eval_loss", "r"])?;
    for row in &report.rows {
        for (s, r) in report.seeds.iter().zip(&row.per_seed_r) {
            out.write_record([
                row.rank.to_string(),
                s.seed.to_string(),
                row.param_count.to_string(),
                row.stored_params.to_string(),
                row.warmup_eval_loss.to_string(),
                opt(*r),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Headerless CSV, one row per (layer, head, query):
/// `layer,head,row,p_0,…,p_{T−1}`.
pub fn export_attention_maps(w: &ModelWeights, cfg: &ModelConfig, tokens: &[usize], path: &Path) -> Result<usize> {
    let maps = attention_maps(w, cfg, tokens)?;
    let t = tokens.len();
    let mut out = BufWriter::new(File::create(path)?);
    let mut rows = 0;
    for (i, block) in maps.data().chunks(t).enumerate() {
        let (layer, head, row) = (i / (cfg.n_heads * t), (i / t) % cfg.n_heads, i % t);
        write!(out, "{layer},{head},{row}")?;
        for p in block {
            write!(out, ",{p}")?;
        }
        writeln!(out)?;
        rows += 1;
    }
    out.flush()?;
    Ok(rows)
}
