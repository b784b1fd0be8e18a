//! Packing of the six mapped matrices into the `(B, I, O, L)` tensor.
//!
//! Slab order inside one layer (`k` = FFN ratio, `B = 2k + 4`):
//!
//! | slab          | content                                   |
//! |---------------|-------------------------------------------|
//! | 0             | `W_Q`                                     |
//! | 1             | `W_K`                                     |
//! | 2             | `W_V`                                     |
//! | 3             | `W_O` (stored form, applied transposed)   |
//! | 4 + s         | `W_IN[:, s·D .. (s+1)·D]`, `s < k`        |
//! | 4 + k + s     | `W_OUT[s·D .. (s+1)·D, :]`, `s < k`       |
//!
//! The order is part of the checkpoint format; its hash is stored in every
//! checkpoint header.

use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::transformer::{param_shapes, LayerParams, ModelConfig, ModelParams, ModelWeights};

/// Dimensions of a packed tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PackedShape {
    pub b: usize,
    pub i: usize,
    pub o: usize,
    pub l: usize,
}

impl PackedShape {
    pub fn of(cfg: &ModelConfig) -> Self {
        Self {
            b: cfg.slabs(),
            i: cfg.d_model,
            o: cfg.d_model,
            l: cfg.n_layers,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.b, self.i, self.o, self.l]
    }

    pub fn numel(&self) -> usize {
        self.b * self.i * self.o * self.l
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedWeights {
    pub tensor: Tensor,
    pub ffn_ratio: usize,
}

impl PackedWeights {
    pub fn new(tensor: Tensor, ffn_ratio: usize) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 4 || s[0] != 2 * ffn_ratio + 4 || s[1] != s[2] {
            return Err(shape_err!(
                "packed tensor {s:?} is not (2k+4, D, D, L) for k = {ffn_ratio}"
            ));
        }
        Ok(Self { tensor, ffn_ratio })
    }

    pub fn shape(&self) -> PackedShape {
        let s = self.tensor.shape();
        PackedShape { b: s[0], i: s[1], o: s[2], l: s[3] }
    }

    /// One `I × O` slab.
    pub fn slab(&self, b: usize, l: usize) -> Result<Tensor> {
        let s = self.shape();
        if b >= s.b || l >= s.l {
            return Err(invalid!("slab ({b}, {l}) out of range for {:?}", s.dims()));
        }
        let mut out = Tensor::zeros(&[s.i, s.o])?;
        for i in 0..s.i {
            for o in 0..s.o {
                out.set(&[i, o], self.tensor.at(&[b, i, o, l]));
            }
        }
        Ok(out)
    }
}

/// Slab labels for FFN ratio `k`, in packed order.
pub fn slab_names(k: usize) -> Vec<String> {
    let mut names: Vec<String> = ["Q", "K", "V", "O"].iter().map(|s| s.to_string()).collect();
    names.extend((1..=k).map(|s| format!("IN{s}")));
    names.extend((1..=k).map(|s| format!("OUT{s}")));
    names
}

/// SHA-256 of the slab table, hex encoded.
pub fn slab_table_hash(k: usize) -> String {
    let mut h = Sha256::new();
    for (b, name) in slab_names(k).iter().enumerate() {
        h.update(format!("{b}:{name};"));
    }
    hex::encode(h.finalize())
}

fn check_square(cfg: &ModelConfig) -> Result<()> {
    cfg.validate()
}

/// `(B, D, D)` stack of one layer's slabs.
fn layer_slabs(layer: &LayerParams<Tensor>, cfg: &ModelConfig) -> Result<Tensor> {
    let (d, k) = (cfg.d_model, cfg.ffn_ratio);
    let head: Vec<Tensor> = layer
        .attention()
        .iter()
        .map(|m| m.reshape(&[1, d, d]))
        .collect::<Result<_>>()?;
    let w_in = layer.w_in.reshape(&[d, k, d])?.permute(&[1, 0, 2])?;
    let w_out = layer.w_out.reshape(&[k, d, d])?;
    let mut parts: Vec<&Tensor> = head.iter().collect();
    parts.push(&w_in);
    parts.push(&w_out);
    Tensor::concat(&parts, 0)
}

/// Packs the mapped matrices of every layer.
pub fn pack(w: &ModelWeights, cfg: &ModelConfig) -> Result<PackedWeights> {
    check_square(cfg)?;
    if w.layers.len() != cfg.n_layers {
        return Err(shape_err!("{} layers for a {}-layer config", w.layers.len(), cfg.n_layers));
    }
    let d = cfg.d_model;
    let per_layer: Vec<Tensor> = w
        .layers
        .iter()
        .map(|l| {
            for (name, m) in l.named().into_iter().take(6) {
                let expect = match name {
                    "w_in" => [d, cfg.ffn_dim()],
                    "w_out" => [cfg.ffn_dim(), d],
                    _ => [d, d],
                };
                if m.shape() != expect {
                    return Err(shape_err!("{name} has shape {:?}, expected {expect:?}", m.shape()));
                }
            }
            layer_slabs(l, cfg)?.reshape(&[1, cfg.slabs(), d, d])
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = per_layer.iter().collect();
    // (L, B, I, O) -> (B, I, O, L)
    let stacked = Tensor::concat(&refs, 0)?.permute(&[1, 2, 3, 0])?;
    PackedWeights::new(stacked, cfg.ffn_ratio)
}

fn check_target(m: &[usize], cfg: &ModelConfig) -> Result<()> {
    check_square(cfg)?;
    let want = PackedShape::of(cfg).dims();
    if m != want {
        return Err(shape_err!("packed tensor {m:?} does not match target {want:?}"));
    }
    Ok(())
}

/// Replaces the mapped matrices of `extras` with the slabs of `m`.
///
/// Every other entry (embeddings, layernorm, biases, head) is taken from
/// `extras`, which must already have the target shapes.
pub fn unpack(m: &PackedWeights, cfg: &ModelConfig, extras: &ModelWeights) -> Result<ModelWeights> {
    check_target(m.tensor.shape(), cfg)?;
    extras.check_shapes(cfg)?;
    let (d, k) = (cfg.d_model, cfg.ffn_ratio);
    let by_layer = m.tensor.permute(&[3, 0, 1, 2])?;
    let mut out = extras.clone();
    for (j, layer) in out.layers.iter_mut().enumerate() {
        let slabs = by_layer.narrow(0, j, 1)?.reshape(&[cfg.slabs(), d, d])?;
        let slab = |b: usize| slabs.narrow(0, b, 1)?.reshape(&[d, d]);
        layer.w_q = slab(0)?;
        layer.w_k = slab(1)?;
        layer.w_v = slab(2)?;
        layer.w_o = slab(3)?;
        layer.w_in = slabs.narrow(0, 4, k)?.permute(&[1, 0, 2])?.reshape(&[d, k * d])?;
        layer.w_out = slabs.narrow(0, 4 + k, k)?.reshape(&[k * d, d])?;
    }
    Ok(out)
}

/// Tape version of [`unpack`]: gradients reach `m` through every slab.
pub fn unpack_vars(tape: &mut Tape, m: Var, cfg: &ModelConfig, extras: &ModelParams<Var>) -> Result<ModelParams<Var>> {
    check_target(tape.value(m).shape(), cfg)?;
    let (d, k) = (cfg.d_model, cfg.ffn_ratio);
    if extras.layers.len() != cfg.n_layers {
        return Err(shape_err!("extras have {} layers, target has {}", extras.layers.len(), cfg.n_layers));
    }
    let by_layer = tape.permute(m, &[3, 0, 1, 2])?;
    let mut out = extras.clone();
    for (j, layer) in out.layers.iter_mut().enumerate() {
        let s = tape.narrow(by_layer, 0, j, 1)?;
        let slabs = tape.reshape(s, &[cfg.slabs(), d, d])?;
        let mut slab = |b: usize| -> Result<Var> {
            let x = tape.narrow(slabs, 0, b, 1)?;
            tape.reshape(x, &[d, d])
        };
        layer.w_q = slab(0)?;
        layer.w_k = slab(1)?;
        layer.w_v = slab(2)?;
        layer.w_o = slab(3)?;
        let w_in = tape.narrow(slabs, 0, 4, k)?;
        let w_in = tape.permute(w_in, &[1, 0, 2])?;
        layer.w_in = tape.reshape(w_in, &[d, k * d])?;
        let w_out = tape.narrow(slabs, 0, 4 + k, k)?;
        layer.w_out = tape.reshape(w_out, &[k * d, d])?;
    }
    Ok(out)
}

fn is_mapped(name: &str) -> bool {
    LayerParams::<()>::FIELDS[..6].iter().any(|f| name.ends_with(&format!(".{f}")))
}

/// Non-mapped weights of the target model.
///
/// Embeddings and head keep the small model's values in their leading
/// block, new entries are `N(0, 1/D₂)`. Layernorm parameters and biases of
/// the first `L₁` layers (and the final layernorm) are copied into their
/// leading `D₁` entries and padded with the neutral value (gain 1, bias 0);
/// new layers get gain 1 and bias 0. Mapped matrices are left zero.
pub fn grow_extras(small: &ModelWeights, cfg1: &ModelConfig, cfg2: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    check_growth(cfg1, cfg2)?;
    small.check_shapes(cfg1)?;
    let mut rng = Rng::new(seed);
    let pad_scale = 1.0 / (cfg2.d_model as f64).sqrt();
    let small_named: std::collections::HashMap<String, &Tensor> = small.named().into_iter().collect();
    param_shapes(cfg2).try_map_named(|name, shape| {
        if is_mapped(name) {
            return Tensor::zeros(shape);
        }
        let neutral = if name.ends_with("_g") { 1.0 } else { 0.0 };
        let matrix = shape.len() == 2;
        let mut t = if matrix {
            Tensor::randn_from(&mut rng, shape, pad_scale)?
        } else {
            Tensor::full(shape, neutral)?
        };
        if let Some(src) = small_named.get(name) {
            copy_leading_block(src, &mut t);
        }
        Ok(t)
    })
}

/// Writes `src` into the leading block of `dst` (same order, `dst` at
/// least as large on every mode).
pub(crate) fn copy_leading_block(src: &Tensor, dst: &mut Tensor) {
    match src.order() {
        1 => dst.data_mut()[..src.len()].copy_from_slice(src.data()),
        2 => {
            let (rows, cols) = (src.shape()[0], src.shape()[1]);
            let dst_cols = dst.shape()[1];
            for r in 0..rows {
                dst.data_mut()[r * dst_cols..r * dst_cols + cols]
                    .copy_from_slice(&src.data()[r * cols..(r + 1) * cols]);
            }
        }
        _ => unreachable!("model parameters are vectors or matrices"),
    }
}

/// Growth preconditions shared by every operator.
pub fn check_growth(cfg1: &ModelConfig, cfg2: &ModelConfig) -> Result<()> {
    cfg1.validate()?;
    cfg2.validate()?;
    if cfg2.d_model < cfg1.d_model {
        return Err(invalid!(
            "cannot shrink hidden size from {} to {}",
            cfg1.d_model,
            cfg2.d_model
        ));
    }
    if cfg2.n_layers < cfg1.n_layers {
        return Err(invalid!(
            "cannot shrink depth from {} to {}",
            cfg1.n_layers,
            cfg2.n_layers
        ));
    }
    if cfg1.ffn_ratio != cfg2.ffn_ratio {
        return Err(invalid!(
            "FFN ratio must match (small {}, target {})",
            cfg1.ffn_ratio,
            cfg2.ffn_ratio
        ));
    }
    if cfg1.vocab != cfg2.vocab || cfg1.tied_head != cfg2.tied_head {
        return Err(invalid!("vocabulary and head tying must match between small and target"));
    }
    if cfg2.seq_len < cfg1.seq_len {
        return Err(invalid!("target seq_len {} is shorter than {}", cfg2.seq_len, cfg1.seq_len));
    }
    Ok(())
}
