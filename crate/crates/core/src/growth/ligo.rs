//! LiGO-style operator: per-slab width maps and one shared depth map.
//!
//! `ℳ₂[b,i₂,o₂,l₂] = Σ ℳ₁[b,i₁,o₁,l₁] S_I[b,i₁,i₂] S_O[b,o₁,o₂] S_L[l₁,l₂]`
//!
//! Slabs never mix, so `B₂ = B₁`.

use super::{GrowthOperator, MangoCores};
use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::packing::PackedShape;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LigoOperator {
    /// `(B, I₁, I₂)`
    pub s_i: Tensor,
    /// `(B, O₁, O₂)`
    pub s_o: Tensor,
    /// `(L₁, L₂)`
    pub s_l: Tensor,
}

fn padded_identity(shape: &[usize]) -> Result<Tensor> {
    let mut t = Tensor::zeros(shape)?;
    let (a, b) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let batches = t.len() / (a * b);
    for g in 0..batches {
        for x in 0..a.min(b) {
            t.data_mut()[g * a * b + x * b + x] = 1.0;
        }
    }
    Ok(t)
}

impl LigoOperator {
    pub fn new(s_i: Tensor, s_o: Tensor, s_l: Tensor) -> Result<Self> {
        let op = Self { s_i, s_o, s_l };
        op.validate()?;
        Ok(op)
    }

    pub fn validate(&self) -> Result<()> {
        let (i, o, l) = (self.s_i.shape(), self.s_o.shape(), self.s_l.shape());
        if i.len() != 3 || o.len() != 3 || l.len() != 2 || i[0] != o[0] {
            return Err(shape_err!("LiGO maps S_I {i:?}, S_O {o:?}, S_L {l:?} are inconsistent"));
        }
        Ok(())
    }

    /// Padded identities plus `noise · N(0, 1)`.
    pub fn init(small: PackedShape, target: PackedShape, seed: u64, noise: f64) -> Result<Self> {
        if small.b != target.b {
            return Err(invalid!("LiGO cannot change the slab count ({} -> {})", small.b, target.b));
        }
        if !(noise >= 0.0) {
            return Err(invalid!("noise must be non-negative, got {noise}"));
        }
        let mut maps = [
            padded_identity(&[small.b, small.i, target.i])?,
            padded_identity(&[small.b, small.o, target.o])?,
            padded_identity(&[small.l, target.l])?,
        ];
        if noise > 0.0 {
            let mut rng = Rng::new(seed);
            for m in &mut maps {
                let n = Tensor::randn_from(&mut rng, m.shape(), noise)?;
                m.add_assign(&n)?;
            }
        }
        let [s_i, s_o, s_l] = maps;
        Self::new(s_i, s_o, s_l)
    }

    /// Equivalent tensor-ring cores with every rank equal to `B`: `S_B` is
    /// the 4th-order super-diagonal and the rank index selects the slab's
    /// width maps.
    pub fn to_mango(&self) -> Result<MangoCores> {
        let (small, target) = self.shapes();
        let r = small.b;
        let mut s_b = Tensor::zeros(&[r, r, r, r])?;
        for x in 0..r {
            s_b.set(&[x, x, x, x], 1.0);
        }
        let mut s_o = Tensor::zeros(&[r, small.o, target.o, r])?;
        let mut s_i = Tensor::zeros(&[r, small.i, target.i, r])?;
        for x in 0..r {
            for a in 0..small.o {
                for b in 0..target.o {
                    s_o.set(&[x, a, b, x], self.s_o.at(&[x, a, b]));
                }
            }
            for a in 0..small.i {
                for b in 0..target.i {
                    s_i.set(&[x, a, b, x], self.s_i.at(&[x, a, b]));
                }
            }
        }
        let mut s_l = Tensor::zeros(&[r, small.l, target.l, r])?;
        for x in 0..r {
            for a in 0..small.l {
                for b in 0..target.l {
                    s_l.set(&[x, a, b, x], self.s_l.at(&[a, b]));
                }
            }
        }
        MangoCores::new(s_b, s_o, s_l, s_i)
    }
}

impl GrowthOperator for LigoOperator {
    fn name(&self) -> &'static str {
        "ligo"
    }

    fn shapes(&self) -> (PackedShape, PackedShape) {
        let (i, o, l) = (self.s_i.shape(), self.s_o.shape(), self.s_l.shape());
        (
            PackedShape { b: i[0], i: i[1], o: o[1], l: l[0] },
            PackedShape { b: i[0], i: i[2], o: o[2], l: l[1] },
        )
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("S_I", &self.s_i), ("S_O", &self.s_o), ("S_L", &self.s_l)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.s_i, &mut self.s_o, &mut self.s_l]
    }

    fn apply_vars(&self, tape: &mut Tape, params: &[Var], m1: Var) -> Result<Var> {
        let &[s_i, s_o, s_l] = params else {
            return Err(shape_err!("LiGO takes three maps, got {}", params.len()));
        };
        let (s, t) = self.shapes();
        if tape.value(m1).shape() != s.dims() {
            return Err(shape_err!("LiGO expects ℳ₁ {:?}, got {:?}", s.dims(), tape.value(m1).shape()));
        }
        // (B, O₁·L₁, I₁) · (B, I₁, I₂)
        let x = tape.permute(m1, &[0, 2, 3, 1])?;
        let x = tape.reshape(x, &[s.b, s.o * s.l, s.i])?;
        let x = tape.bmm(x, s_i)?;
        // (B, L₁·I₂, O₁) · (B, O₁, O₂)
        let x = tape.reshape(x, &[s.b, s.o, s.l, t.i])?;
        let x = tape.permute(x, &[0, 2, 3, 1])?;
        let x = tape.reshape(x, &[s.b, s.l * t.i, s.o])?;
        let x = tape.bmm(x, s_o)?;
        // (B, I₂, O₂, L₁) · (L₁, L₂)
        let x = tape.reshape(x, &[s.b, s.l, t.i, t.o])?;
        let x = tape.permute(x, &[0, 2, 3, 1])?;
        tape.matmul(x, s_l)
    }

    fn apply_flops(&self) -> u64 {
        let (s, t) = self.shapes();
        let macs = s.b * s.o * s.l * s.i * t.i + s.b * s.l * t.i * s.o * t.o + s.b * t.i * t.o * s.l * t.l;
        2 * macs as u64
    }
}
