//! Tensor-ring operator with four cores acting on the slab, input, output
//! and layer modes of the packed tensor:
//!
//! `ℳ₂[b₂,i₂,o₂,l₂] = Σ ℳ₁[b₁,i₁,o₁,l₁] S_B[r₁,b₁,b₂,r₂] S_O[r₂,o₁,o₂,r₃] S_L[r₃,l₁,l₂,r₄] S_I[r₄,i₁,i₂,r₁]`
//!
//! The sum is evaluated in the fixed order B → O → L → I; the ring ranks are
//! closed by the last contraction.

use super::GrowthOperator;
use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::packing::PackedShape;
use crate::rng::Rng;
use crate::tensor::{contract, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MangoCores {
    /// `(R₁, B₁, B₂, R₂)`
    pub s_b: Tensor,
    /// `(R₂, O₁, O₂, R₃)`
    pub s_o: Tensor,
    /// `(R₃, L₁, L₂, R₄)`
    pub s_l: Tensor,
    /// `(R₄, I₁, I₂, R₁)`
    pub s_i: Tensor,
}

impl MangoCores {
    pub fn new(s_b: Tensor, s_o: Tensor, s_l: Tensor, s_i: Tensor) -> Result<Self> {
        let c = Self { s_b, s_o, s_l, s_i };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        check_cores([self.s_b.shape(), self.s_o.shape(), self.s_l.shape(), self.s_i.shape()])
    }

    /// `[R₁, R₂, R₃, R₄]`
    pub fn ranks(&self) -> [usize; 4] {
        [self.s_b.shape()[0], self.s_o.shape()[0], self.s_l.shape()[0], self.s_i.shape()[0]]
    }

    pub fn small_shape(&self) -> PackedShape {
        PackedShape {
            b: self.s_b.shape()[1],
            i: self.s_i.shape()[1],
            o: self.s_o.shape()[1],
            l: self.s_l.shape()[1],
        }
    }

    pub fn target_shape(&self) -> PackedShape {
        PackedShape {
            b: self.s_b.shape()[2],
            i: self.s_i.shape()[2],
            o: self.s_o.shape()[2],
            l: self.s_l.shape()[2],
        }
    }

    fn check_input(&self, m1: &[usize]) -> Result<()> {
        check_input([self.s_b.shape(), self.s_o.shape(), self.s_l.shape(), self.s_i.shape()], m1)
    }
}

fn check_cores(shapes: [&[usize]; 4]) -> Result<()> {
    for (n, c) in ["S_B", "S_O", "S_L", "S_I"].iter().zip(shapes) {
        if c.len() != 4 {
            return Err(shape_err!("{n} must be 4th order, got {c:?}"));
        }
    }
    for j in 0..4 {
        let (a, b) = (shapes[j], shapes[(j + 1) % 4]);
        if a[3] != b[0] {
            return Err(shape_err!(
                "ring rank mismatch between cores {j} and {}: {a:?} vs {b:?}",
                (j + 1) % 4
            ));
        }
    }
    Ok(())
}

/// `m1` must be `(B₁, I₁, O₁, L₁)` as read off the cores.
fn check_input(shapes: [&[usize]; 4], m1: &[usize]) -> Result<()> {
    check_cores(shapes)?;
    let want = [shapes[0][1], shapes[3][1], shapes[1][1], shapes[2][1]];
    if m1 != want {
        return Err(shape_err!("cores expect ℳ₁ of shape {want:?}, got {m1:?}"));
    }
    Ok(())
}

fn identity_core(r_in: usize, a: usize, b: usize, r_out: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[r_in, a, b, r_out])?;
    for x in 0..a.min(b) {
        t.set(&[0, x, x, 0], 1.0);
    }
    Ok(t)
}

/// Cores whose ring slice `(0, 0)` is a truncated identity, plus
/// `noise · N(0, 1)` on every entry. With equal shapes and `noise = 0` the
/// operator is the identity; when growing, ℳ₁ lands in the leading block.
pub fn mango_init(small: PackedShape, target: PackedShape, ranks: [usize; 4], seed: u64, noise: f64) -> Result<MangoCores> {
    if ranks.contains(&0) {
        return Err(invalid!("ranks must be at least 1, got {ranks:?}"));
    }
    if !(noise >= 0.0) {
        return Err(invalid!("noise must be non-negative, got {noise}"));
    }
    let [r1, r2, r3, r4] = ranks;
    let mut cores = [
        identity_core(r1, small.b, target.b, r2)?,
        identity_core(r2, small.o, target.o, r3)?,
        identity_core(r3, small.l, target.l, r4)?,
        identity_core(r4, small.i, target.i, r1)?,
    ];
    if noise > 0.0 {
        let mut rng = Rng::new(seed);
        for c in &mut cores {
            let n = Tensor::randn_from(&mut rng, c.shape(), noise)?;
            c.add_assign(&n)?;
        }
    }
    let [s_b, s_o, s_l, s_i] = cores;
    MangoCores::new(s_b, s_o, s_l, s_i)
}

/// Applies the cores to a packed tensor `(B₁, I₁, O₁, L₁)`.
pub fn mango_apply(cores: &MangoCores, m1: &Tensor) -> Result<Tensor> {
    cores.check_input(m1.shape())?;
    // (I₁,O₁,L₁,R₁,B₂,R₂)
    let t = contract(m1, &[0], &cores.s_b, &[1])?;
    // (I₁,L₁,R₁,B₂,O₂,R₃)
    let t = contract(&t, &[1, 5], &cores.s_o, &[1, 0])?;
    // (I₁,R₁,B₂,O₂,L₂,R₄)
    let t = contract(&t, &[1, 5], &cores.s_l, &[1, 0])?;
    // (B₂,O₂,L₂,I₂)
    let t = contract(&t, &[0, 1, 5], &cores.s_i, &[1, 3, 0])?;
    t.permute(&[0, 3, 1, 2])
}

/// Tape version of [`mango_apply`]; `cores` are `[S_B, S_O, S_L, S_I]`.
pub fn mango_apply_vars(tape: &mut Tape, cores: [Var; 4], m1: Var) -> Result<Var> {
    let [s_b, s_o, s_l, s_i] = cores;
    check_input(
        [
            tape.value(s_b).shape(),
            tape.value(s_o).shape(),
            tape.value(s_l).shape(),
            tape.value(s_i).shape(),
        ],
        tape.value(m1).shape(),
    )?;
    let t = tape.contract(m1, &[0], s_b, &[1])?;
    let t = tape.contract(t, &[1, 5], s_o, &[1, 0])?;
    let t = tape.contract(t, &[1, 5], s_l, &[1, 0])?;
    let t = tape.contract(t, &[0, 1, 5], s_i, &[1, 3, 0])?;
    tape.permute(t, &[0, 3, 1, 2])
}

impl GrowthOperator for MangoCores {
    fn name(&self) -> &'static str {
        "mango"
    }

    fn shapes(&self) -> (PackedShape, PackedShape) {
        (self.small_shape(), self.target_shape())
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("S_B", &self.s_b), ("S_O", &self.s_o), ("S_L", &self.s_l), ("S_I", &self.s_i)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.s_b, &mut self.s_o, &mut self.s_l, &mut self.s_i]
    }

    fn apply_vars(&self, tape: &mut Tape, params: &[Var], m1: Var) -> Result<Var> {
        match params {
            &[b, o, l, i] => mango_apply_vars(tape, [b, o, l, i], m1),
            _ => Err(shape_err!("mango takes four cores, got {}", params.len())),
        }
    }

    fn apply(&self, m1: &Tensor) -> Result<Tensor> {
        mango_apply(self, m1)
    }

    fn apply_flops(&self) -> u64 {
        let (s, t) = self.shapes();
        let [r1, r2, r3, r4] = self.ranks().map(|r| r as u64);
        let (b1, i1, o1, l1) = (s.b as u64, s.i as u64, s.o as u64, s.l as u64);
        let (b2, i2, o2, l2) = (t.b as u64, t.i as u64, t.o as u64, t.l as u64);
        let macs = i1 * o1 * l1 * r1 * b2 * r2 * b1
            + i1 * l1 * r1 * b2 * o2 * r3 * o1 * r2
            + i1 * r1 * b2 * o2 * l2 * r4 * l1 * r3
            + b2 * o2 * l2 * i2 * i1 * r1 * r4;
        2 * macs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn shape(b: usize, i: usize, o: usize, l: usize) -> PackedShape {
        PackedShape { b, i, o, l }
    }

    fn random_cores(s: PackedShape, t: PackedShape, r: [usize; 4], seed: u64) -> MangoCores {
        let mut rng = Rng::new(seed);
        let mut g = |dims: &[usize]| Tensor::randn_from(&mut rng, dims, 1.0).unwrap();
        MangoCores::new(
            g(&[r[0], s.b, t.b, r[1]]),
            g(&[r[1], s.o, t.o, r[2]]),
            g(&[r[2], s.l, t.l, r[3]]),
            g(&[r[3], s.i, t.i, r[0]]),
        )
        .unwrap()
    }

    #[test]
    fn identity_at_equal_shapes() {
        let s = shape(6, 3, 3, 2);
        let cores = mango_init(s, s, [2, 2, 2, 2], 0, 0.0).unwrap();
        let m1 = Tensor::randn(&s.dims(), 1, 1.0).unwrap();
        let m2 = mango_apply(&cores, &m1).unwrap();
        assert!(m2.max_abs_diff(&m1) < 1e-12);
    }

    #[test]
    fn padded_identity_when_growing() {
        let (s, t) = (shape(2, 2, 3, 1), shape(4, 3, 5, 2));
        let cores = mango_init(s, t, [1, 1, 1, 1], 0, 0.0).unwrap();
        let m1 = Tensor::randn(&s.dims(), 2, 1.0).unwrap();
        let m2 = mango_apply(&cores, &m1).unwrap();
        assert_eq!(m2.shape(), &t.dims());
        for b in 0..4 {
            for i in 0..3 {
                for o in 0..5 {
                    for l in 0..2 {
                        let inside = b < 2 && i < 2 && o < 3 && l < 1;
                        let want = if inside { m1.at(&[b, i, o, l]) } else { 0.0 };
                        assert_eq!(m2.at(&[b, i, o, l]), want);
                    }
                }
            }
        }
    }

    #[test]
    fn init_is_deterministic() {
        let (s, t) = (shape(2, 2, 2, 1), shape(3, 4, 4, 2));
        let a = mango_init(s, t, [2, 1, 3, 1], 7, 1e-3).unwrap();
        let b = mango_init(s, t, [2, 1, 3, 1], 7, 1e-3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, mango_init(s, t, [2, 1, 3, 1], 8, 1e-3).unwrap());
        assert!(mango_init(s, t, [0, 1, 1, 1], 7, 0.0).is_err());
        assert!(mango_init(s, t, [1, 1, 1, 1], 7, -1.0).is_err());
    }

    #[test]
    fn rank_one_is_sequence_of_mode_products() {
        let (s, t) = (shape(2, 3, 2, 2), shape(3, 4, 3, 2));
        let c = random_cores(s, t, [1, 1, 1, 1], 3);
        let m1 = Tensor::randn(&s.dims(), 4, 1.0).unwrap();
        let got = mango_apply(&c, &m1).unwrap();
        let sq = |x: &Tensor| x.reshape(&[x.shape()[1], x.shape()[2]]).unwrap();
        let (mb, mo, ml, mi) = (sq(&c.s_b), sq(&c.s_o), sq(&c.s_l), sq(&c.s_i));
        let mut want = Tensor::zeros(&t.dims()).unwrap();
        for b2 in 0..t.b {
            for i2 in 0..t.i {
                for o2 in 0..t.o {
                    for l2 in 0..t.l {
                        let mut acc = 0.0;
                        for b1 in 0..s.b {
                            for i1 in 0..s.i {
                                for o1 in 0..s.o {
                                    for l1 in 0..s.l {
                                        acc += m1.at(&[b1, i1, o1, l1])
                                            * mb.at(&[b1, b2])
                                            * mi.at(&[i1, i2])
                                            * mo.at(&[o1, o2])
                                            * ml.at(&[l1, l2]);
                                    }
                                }
                            }
                        }
                        want.set(&[b2, i2, o2, l2], acc);
                    }
                }
            }
        }
        assert!(got.max_abs_diff(&want) <= 1e-12 * want.frobenius_norm().max(1.0));
    }

    #[test]
    fn linear_in_input() {
        let (s, t) = (shape(2, 2, 2, 2), shape(3, 3, 3, 3));
        let c = random_cores(s, t, [2, 3, 1, 2], 5);
        let a = Tensor::randn(&s.dims(), 6, 1.0).unwrap();
        let b = Tensor::randn(&s.dims(), 7, 1.0).unwrap();
        let lhs = mango_apply(&c, &a.scale(-1.5).add(&b).unwrap()).unwrap();
        let rhs = mango_apply(&c, &a)
            .unwrap()
            .scale(-1.5)
            .add(&mango_apply(&c, &b).unwrap())
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn tape_and_tensor_paths_agree() {
        let (s, t) = (shape(2, 3, 2, 1), shape(4, 3, 4, 2));
        let c = random_cores(s, t, [2, 2, 2, 2], 8);
        let m1 = Tensor::randn(&s.dims(), 9, 1.0).unwrap();
        let direct = mango_apply(&c, &m1).unwrap();
        let via_trait = GrowthOperator::apply(&c, &m1).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<Var> = c.params().iter().map(|(_, t)| tape.param((*t).clone())).collect();
        let m = tape.constant(m1.clone());
        let out = c.apply_vars(&mut tape, &vars, m).unwrap();
        assert!(tape.value(out).bitwise_eq(&direct));
        assert!(via_trait.bitwise_eq(&direct));
    }

    #[test]
    fn core_gradients_match_finite_differences() {
        let (s, t) = (shape(2, 2, 3, 2), shape(3, 3, 3, 2));
        for seed in 0..3 {
            let c = random_cores(s, t, [2, 1, 2, 3], seed);
            let m1 = Tensor::randn(&s.dims(), seed + 50, 1.0).unwrap();
            let w = Tensor::randn(&t.dims(), seed + 60, 1.0).unwrap();
            let mut inputs: Vec<Tensor> = c.params().iter().map(|(_, t)| (*t).clone()).collect();
            inputs.push(m1);
            let report = grad_check(
                |tape, v| {
                    let m2 = mango_apply_vars(tape, [v[0], v[1], v[2], v[3]], v[4])?;
                    let wv = tape.constant(w.clone());
                    let p = tape.mul(m2, wv)?;
                    let sq = tape.mul(p, p)?;
                    Ok(tape.sum(sq))
                },
                &inputs,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "{:?}", report.max_rel_err);
        }
    }

    #[test]
    fn rejects_mismatched_ranks_and_inputs() {
        let t = |d: &[usize]| Tensor::zeros(d).unwrap();
        assert!(MangoCores::new(t(&[1, 2, 2, 2]), t(&[1, 2, 2, 1]), t(&[1, 1, 1, 1]), t(&[1, 2, 2, 1])).is_err());
        let c = mango_init(shape(2, 2, 2, 1), shape(2, 2, 2, 1), [1; 4], 0, 0.0).unwrap();
        assert!(mango_apply(&c, &t(&[2, 2, 2, 2])).is_err());
    }

    #[test]
    fn flop_estimate_is_positive_and_grows_with_rank() {
        let (s, t) = (shape(12, 8, 8, 2), shape(12, 16, 16, 4));
        let f1 = mango_init(s, t, [1; 4], 0, 0.0).unwrap().apply_flops();
        let f4 = mango_init(s, t, [4; 4], 0, 0.0).unwrap().apply_flops();
        assert!(f1 > 0 && f4 > f1);
    }
}
