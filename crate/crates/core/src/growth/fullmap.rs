//! The full linear map `𝒮 ∈ R^{B₁×I₁×O₁×L₁×B₂×I₂×O₂×L₂}`, test oracle only.

use super::MangoCores;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{contract, Tensor};

pub const DEFAULT_FULLMAP_CAP: usize = 10_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct FullMap {
    /// `(B₁, I₁, O₁, L₁, B₂, I₂, O₂, L₂)`
    pub s: Tensor,
}

impl FullMap {
    pub fn new(s: Tensor, cap: usize) -> Result<Self> {
        if s.order() != 8 {
            return Err(shape_err!("full map must be 8th order, got {:?}", s.shape()));
        }
        check_cap(s.len(), cap)?;
        Ok(Self { s })
    }
}

fn check_cap(entries: usize, cap: usize) -> Result<()> {
    if entries > cap {
        return Err(Error::CapExceeded { entries, cap });
    }
    Ok(())
}

/// Contracts the four cores over their ring ranks into `𝒮`.
pub fn compose_cores(cores: &MangoCores, cap: usize) -> Result<FullMap> {
    cores.validate()?;
    let (s, t) = (cores.small_shape(), cores.target_shape());
    let entries = s
        .numel()
        .checked_mul(t.numel())
        .ok_or(Error::CapExceeded { entries: usize::MAX, cap })?;
    check_cap(entries, cap)?;
    // (R₁,B₁,B₂,O₁,O₂,R₃)
    let x = contract(&cores.s_b, &[3], &cores.s_o, &[0])?;
    // (R₁,B₁,B₂,O₁,O₂,L₁,L₂,R₄)
    let x = contract(&x, &[5], &cores.s_l, &[0])?;
    // (B₁,B₂,O₁,O₂,L₁,L₂,I₁,I₂)
    let x = contract(&x, &[7, 0], &cores.s_i, &[0, 3])?;
    FullMap::new(x.permute(&[0, 6, 2, 4, 1, 7, 3, 5])?, cap)
}

/// `ℳ₂[b₂,i₂,o₂,l₂] = Σ ℳ₁[b₁,i₁,o₁,l₁] 𝒮[b₁,i₁,o₁,l₁,b₂,i₂,o₂,l₂]`, summed literally.
pub fn full_apply(f: &FullMap, m1: &Tensor, cap: usize) -> Result<Tensor> {
    check_cap(f.s.len(), cap)?;
    let shape = f.s.shape();
    if m1.shape() != &shape[..4] {
        return Err(shape_err!("ℳ₁ {:?} does not match full map {:?}", m1.shape(), shape));
    }
    let n1 = m1.len();
    let n2 = f.s.len() / n1.max(1);
    let mut out = vec![0.0; n2];
    for (x, &m) in m1.data().iter().enumerate() {
        let row = &f.s.data()[x * n2..(x + 1) * n2];
        for (o, &s) in out.iter_mut().zip(row) {
            *o += m * s;
        }
    }
    Tensor::new(shape[4..].to_vec(), out)
}
