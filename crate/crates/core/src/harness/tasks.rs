//! Desk-scale tasks. Every task yields fixed-length token windows and a
//! fixed evaluation set that is disjoint from the training distribution.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::transformer::{lm_loss, ModelConfig, ModelWeights, TokenBatch};

/// Embedded English prose for the character-level task.
pub const CORPUS: &str = include_str!("../../data/corpus.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CharLm,
    CopyTask,
    ModularAddition,
}

fn default_seq_len() -> usize {
    32
}
fn default_eval_windows() -> usize {
    128
}
fn default_eval_batch() -> usize {
    32
}
fn default_modulus() -> usize {
    23
}
fn default_symbols() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default)]
    pub split_seed: u64,
    /// Upper bound on evaluation windows.
    #[serde(default = "default_eval_windows")]
    pub eval_windows: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    /// Modulus for `modular_addition`.
    #[serde(default = "default_modulus")]
    pub modulus: usize,
    /// Alphabet size for `copy_task`.
    #[serde(default = "default_symbols")]
    pub symbols: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            seq_len: default_seq_len(),
            split_seed: 0,
            eval_windows: default_eval_windows(),
            eval_batch_size: default_eval_batch(),
            modulus: default_modulus(),
            symbols: default_symbols(),
        }
    }
}

#[derive(Clone, Debug)]
enum Source {
    Text { train: Vec<usize>, eval: Vec<usize> },
    Copy { symbols: usize, half: usize },
    Addition { p: usize, train: Vec<(usize, usize)> },
}

#[derive(Clone, Debug)]
pub struct Task {
    pub spec: TaskSpec,
    vocab: usize,
    seq_len: usize,
    source: Source,
    eval: Vec<TokenBatch>,
    /// Byte for each token id (character task only).
    alphabet: Vec<u8>,
}

fn copy_bucket(prefix: &[usize], split_seed: u64) -> bool {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ split_seed;
    for &t in prefix {
        h ^= t as u64 + 1;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h % 5 == 0
}

fn batches(windows: Vec<Vec<usize>>, seq: usize, size: usize) -> Result<Vec<TokenBatch>> {
    windows
        .chunks(size.max(1))
        .map(|c| TokenBatch::new(c.len(), seq, c.concat()))
        .collect()
}

impl Task {
    pub fn new(spec: &TaskSpec) -> Result<Self> {
        if spec.seq_len < 2 {
            return Err(invalid!("task seq_len must be at least 2"));
        }
        if spec.eval_windows == 0 || spec.eval_batch_size == 0 {
            return Err(invalid!("evaluation set must be non-empty"));
        }
        match spec.kind {
            TaskKind::CharLm => Self::char_lm(spec, CORPUS),
            TaskKind::CopyTask => Self::copy_task(spec),
            TaskKind::ModularAddition => Self::modular_addition(spec),
        }
    }

    /// Character task over arbitrary text: first 90% trains, last 10%
    /// evaluates in non-overlapping windows.
    pub fn char_lm(spec: &TaskSpec, text: &str) -> Result<Self> {
        let bytes = text.as_bytes();
        let mut alphabet: Vec<u8> = bytes.to_vec();
        alphabet.sort_unstable();
        alphabet.dedup();
        let mut index = [usize::MAX; 256];
        for (i, &b) in alphabet.iter().enumerate() {
            index[b as usize] = i;
        }
        let ids: Vec<usize> = bytes.iter().map(|&b| index[b as usize]).collect();
        let cut = ids.len() * 9 / 10;
        let (train, eval) = (ids[..cut].to_vec(), ids[cut..].to_vec());
        let seq = spec.seq_len;
        if train.len() <= seq || eval.len() < seq {
            return Err(invalid!("text too short for windows of {seq}"));
        }
        let windows: Vec<Vec<usize>> = eval
            .chunks_exact(seq)
            .take(spec.eval_windows)
            .map(|w| w.to_vec())
            .collect();
        Ok(Self {
            spec: spec.clone(),
            vocab: alphabet.len(),
            seq_len: seq,
            eval: batches(windows, seq, spec.eval_batch_size)?,
            source: Source::Text { train, eval },
            alphabet,
        })
    }

    /// `x₁ … x_h SEP x₁ … x_h`; prefixes are split into train and eval by a
    /// seeded hash, so no evaluation prefix is ever trained on.
    fn copy_task(spec: &TaskSpec) -> Result<Self> {
        if spec.seq_len < 3 || spec.seq_len % 2 == 0 {
            return Err(invalid!("copy_task needs an odd seq_len >= 3"));
        }
        if spec.symbols < 2 {
            return Err(invalid!("copy_task needs at least 2 symbols"));
        }
        let half = (spec.seq_len - 1) / 2;
        let mut task = Self {
            spec: spec.clone(),
            vocab: spec.symbols + 1,
            seq_len: spec.seq_len,
            source: Source::Copy { symbols: spec.symbols, half },
            eval: Vec::new(),
            alphabet: Vec::new(),
        };
        let mut rng = Rng::derive(spec.split_seed, 0xe7a1);
        let mut windows = Vec::new();
        let mut tries = 0usize;
        while windows.len() < spec.eval_windows && tries < 1000 * spec.eval_windows {
            tries += 1;
            let prefix: Vec<usize> = (0..half).map(|_| rng.below(spec.symbols)).collect();
            if copy_bucket(&prefix, spec.split_seed) {
                windows.push(task.copy_window(&prefix));
            }
        }
        if windows.is_empty() {
            return Err(invalid!("copy_task could not build an evaluation set"));
        }
        task.eval = batches(windows, spec.seq_len, spec.eval_batch_size)?;
        Ok(task)
    }

    fn copy_window(&self, prefix: &[usize]) -> Vec<usize> {
        let sep = self.vocab - 1;
        let mut w = prefix.to_vec();
        w.push(sep);
        w.extend_from_slice(prefix);
        w
    }

    /// `a b = c` with `c = (a + b) mod p`; all pairs are shuffled once and
    /// 80% of them train.
    fn modular_addition(spec: &TaskSpec) -> Result<Self> {
        let p = spec.modulus;
        if p < 2 {
            return Err(invalid!("modulus must be at least 2"));
        }
        if spec.seq_len != 4 {
            return Err(invalid!("modular_addition uses seq_len = 4"));
        }
        let mut pairs: Vec<(usize, usize)> = (0..p).flat_map(|a| (0..p).map(move |b| (a, b))).collect();
        Rng::derive(spec.split_seed, 0xadd).shuffle(&mut pairs);
        let cut = (pairs.len() * 4 / 5).max(1);
        let (train, eval) = pairs.split_at(cut);
        if eval.is_empty() {
            return Err(invalid!("modulus too small for a held-out split"));
        }
        let windows = eval
            .iter()
            .take(spec.eval_windows)
            .map(|&(a, b)| vec![a, b, p, (a + b) % p])
            .collect();
        Ok(Self {
            spec: spec.clone(),
            vocab: p + 1,
            seq_len: 4,
            eval: batches(windows, 4, spec.eval_batch_size)?,
            source: Source::Addition { p, train: train.to_vec() },
            alphabet: Vec::new(),
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn eval_set(&self) -> &[TokenBatch] {
        &self.eval
    }

    /// Number of tokens in one pass over the evaluation set.
    pub fn eval_tokens(&self) -> usize {
        self.eval.iter().map(|b| b.num_tokens()).sum()
    }

    pub fn sample_train(&self, rng: &mut Rng, batch: usize) -> Result<TokenBatch> {
        if batch == 0 {
            return Err(invalid!("batch size must be positive"));
        }
        let seq = self.seq_len;
        let mut ids = Vec::with_capacity(batch * seq);
        for _ in 0..batch {
            match &self.source {
                Source::Text { train, .. } => {
                    let s = rng.below(train.len() - seq + 1);
                    ids.extend_from_slice(&train[s..s + seq]);
                }
                Source::Copy { symbols, half } => loop {
                    let prefix: Vec<usize> = (0..*half).map(|_| rng.below(*symbols)).collect();
                    if !copy_bucket(&prefix, self.spec.split_seed) {
                        ids.extend(self.copy_window(&prefix));
                        break;
                    }
                },
                Source::Addition { p, train } => {
                    let (a, b) = train[rng.below(train.len())];
                    ids.extend_from_slice(&[a, b, *p, (a + b) % p]);
                }
            }
        }
        TokenBatch::new(batch, seq, ids)
    }

    /// Mean loss over the evaluation set, weighted by batch size.
    pub fn eval_loss(&self, w: &ModelWeights, cfg: &ModelConfig) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for b in &self.eval {
            total += lm_loss(w, cfg, b)? * b.batch as f64;
            n += b.batch;
        }
        Ok(total / n as f64)
    }

    /// Token ids for `text` (character task only; unknown bytes rejected).
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        if self.alphabet.is_empty() {
            return Err(invalid!("only the character task has a text encoding"));
        }
        text.bytes()
            .map(|b| {
                self.alphabet
                    .binary_search(&b)
                    .map_err(|_| invalid!("byte {b:#04x} is not in the task alphabet"))
            })
            .collect()
    }

    /// The evaluation text itself (character task only).
    pub fn eval_text_ids(&self) -> Option<&[usize]> {
        match &self.source {
            Source::Text { eval, .. } => Some(eval),
            _ => None,
        }
    }
}
