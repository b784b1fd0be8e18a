use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients against central differences.
///
/// The error for input `j` is `max_i |a_i - n_i| / max(max_i |n_i|, max_i |a_i|, 1e-12)`,
/// i.e. the worst entry measured against the gradient's own magnitude.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Checks the tape's gradients of `f` at `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = |xs: &[Tensor]| -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let root = f(&mut tape, &vars)?;
        let mut grads = tape.backward(root)?;
        vars.iter()
            .zip(xs)
            .map(|(v, x)| match grads.take(*v) {
                Some(g) => Ok(g),
                None => Tensor::zeros(x.shape()),
            })
            .collect()
    };
    let value = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };
    grad_check_with(analytic, value, inputs, h, tol)
}

/// Same check with a caller-supplied analytic gradient.
pub fn grad_check_with<A, V>(analytic: A, value: V, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    A: Fn(&[Tensor]) -> Result<Vec<Tensor>>,
    V: Fn(&[Tensor]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(invalid!("finite-difference step must be positive, got {h}"));
    }
    let grads = analytic(inputs)?;
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel_err = Vec::with_capacity(inputs.len());
    for (j, g) in grads.iter().enumerate() {
        let mut numeric = vec![0.0; inputs[j].len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = inputs[j].data()[i];
            work[j].data_mut()[i] = orig + h;
            let up = value(&work)?;
            work[j].data_mut()[i] = orig - h;
            let down = value(&work)?;
            work[j].data_mut()[i] = orig;
            *n = (up - down) / (2.0 * h);
        }
        let scale = numeric
            .iter()
            .chain(g.data())
            .fold(1e-12f64, |m, v| m.max(v.abs()));
        let worst = numeric
            .iter()
            .zip(g.data())
            .map(|(n, a)| (n - a).abs())
            .fold(0.0, f64::max);
        max_rel_err.push(worst / scale);
    }
    let passed = max_rel_err.iter().all(|&e| e < tol);
    Ok(GradCheckReport {
        max_rel_err,
        tol,
        passed,
    })
}
