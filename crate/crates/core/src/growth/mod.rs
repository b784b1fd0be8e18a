//! Growth operators mapping a small model's packed weights to a larger one.

mod baselines;
mod complexity;
mod fullmap;
mod ligo;
mod mango;

pub use baselines::{deepen_identity, net2net_width, pad_width, stack_depth, widen_matrix, UnitMap};
pub use complexity::{param_count_bert2bert, param_count_ligo, param_count_mango};
pub use fullmap::{compose_cores, full_apply, FullMap, DEFAULT_FULLMAP_CAP};
pub use ligo::LigoOperator;
pub use mango::{mango_apply, mango_apply_vars, mango_init, MangoCores};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::packing::PackedShape;
use crate::tensor::Tensor;

/// A trainable linear map from `ℳ₁` to `ℳ₂`.
pub trait GrowthOperator {
    fn name(&self) -> &'static str;

    /// `(small, target)` packed shapes.
    fn shapes(&self) -> (PackedShape, PackedShape);

    /// Trainable tensors with their checkpoint names.
    fn params(&self) -> Vec<(&'static str, &Tensor)>;

    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// `params` are tape handles in the order of [`GrowthOperator::params`].
    fn apply_vars(&self, tape: &mut Tape, params: &[Var], m1: Var) -> Result<Var>;

    /// FLOPs of one application (multiply-accumulate = 2).
    fn apply_flops(&self) -> u64;

    fn apply(&self, m1: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params().iter().map(|(_, t)| tape.constant((*t).clone())).collect();
        let m = tape.constant(m1.clone());
        let out = self.apply_vars(&mut tape, &params, m)?;
        Ok(tape.value(out).clone())
    }

    fn param_count(&self) -> u64 {
        self.params().iter().map(|(_, t)| t.len() as u64).sum()
    }
}
