//! TOML run configuration. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{Experiment, Task, TaskSpec, TrainBudget, DEFAULT_RANKS};
use crate::tensor::DType;
use crate::training::{GrowOptions, GrowthMethod, WarmupConfig};
use crate::transformer::{ModelConfig, NormPlacement};

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
fn default_ranks() -> [usize; 4] {
    [1; 4]
}
fn default_noise() -> f64 {
    1e-3
}
fn default_method() -> GrowthMethod {
    GrowthMethod::Mango
}
fn default_methods() -> Vec<GrowthMethod> {
    GrowthMethod::ALL.to_vec()
}
fn default_ablation() -> Vec<usize> {
    DEFAULT_RANKS.to_vec()
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// A model config whose vocabulary and context length default to the task's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
    #[serde(default)]
    pub vocab: Option<usize>,
    #[serde(default)]
    pub seq_len: Option<usize>,
    #[serde(default = "default_true")]
    pub causal: bool,
    #[serde(default)]
    pub norm: NormPlacement,
    #[serde(default)]
    pub tied_head: bool,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
}

impl ModelSpec {
    pub fn resolve(&self, task: &Task) -> Result<ModelConfig> {
        let vocab = self.vocab.unwrap_or(task.vocab());
        if vocab != task.vocab() {
            return Err(Error::Config(format!("vocab {vocab} differs from the task's {}", task.vocab())));
        }
        let cfg = ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            ffn_ratio: self.ffn_ratio,
            vocab,
            seq_len: self.seq_len.unwrap_or(task.seq_len()),
            causal: self.causal,
            norm: self.norm,
            tied_head: self.tied_head,
            ln_eps: self.ln_eps,
            dtype: self.dtype,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowSection {
    #[serde(default = "default_ranks")]
    pub ranks: [usize; 4],
    #[serde(default = "default_noise")]
    pub noise: f64,
}

impl Default for GrowSection {
    fn default() -> Self {
        Self {
            ranks: default_ranks(),
            noise: default_noise(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub small: ModelSpec,
    pub target: ModelSpec,
    #[serde(default)]
    pub train_small: TrainBudget,
    #[serde(default)]
    pub train_target: TrainBudget,
    #[serde(default)]
    pub warmup: WarmupConfig,
    #[serde(default)]
    pub grow: GrowSection,
    #[serde(default = "default_method")]
    pub method: GrowthMethod,
    #[serde(default = "default_methods")]
    pub methods: Vec<GrowthMethod>,
    #[serde(default = "default_ablation")]
    pub ablation_ranks: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Pretrained small model; when absent the harness trains one per seed.
    #[serde(default)]
    pub small_checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.check()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn check(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.grow.ranks.contains(&0) || self.ablation_ranks.contains(&0) {
            return Err(Error::Config("ranks must be positive".into()));
        }
        Ok(())
    }

    pub fn experiment(&self) -> Result<Experiment> {
        let task = Task::new(&self.task).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Experiment {
            small: self.small.resolve(&task)?,
            target: self.target.resolve(&task)?,
            task,
            small_budget: self.train_small.clone(),
            target_budget: self.train_target.clone(),
            warmup: self.warmup.clone(),
            grow: GrowOptions {
                ranks: self.grow.ranks,
                noise: self.grow.noise,
                seed: self.seeds[0],
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[task]
kind = "char_lm"
seq_len = 16

[small]
n_layers = 1
d_model = 8
n_heads = 2

[target]
n_layers = 2
d_model = 16
n_heads = 2
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.ablation_ranks, [1, 4, 7, 10]);
        assert_eq!(c.methods.len(), 5);
        assert_eq!(c.warmup.steps, 100);
        assert_eq!(c.warmup.batch_size, 64);
        let e = c.experiment().unwrap();
        assert_eq!(e.small.vocab, e.task.vocab());
        assert_eq!(e.target.seq_len, 16);
        let again = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for extra in ["bogus = 1\n", "[grow]\nrank = 3\n", "[warmup]\nsteps = 5\nlr_decay = 1\n"] {
            let text = format!("{extra}{MINIMAL}");
            let text = if extra.starts_with('[') { format!("{MINIMAL}{extra}") } else { text };
            assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))), "{extra}");
        }
        let bad = MINIMAL.replace("n_heads = 2\n\n[target]", "n_heads = 3\n\n[target]");
        assert!(RunConfig::from_toml(&bad).unwrap().experiment().is_err());
    }
}
