use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Cumulative training cost of one run. Warmup cost is charged up front.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsLedger {
    pub method: String,
    pub warmup_flops: u64,
    pub increments: Vec<u64>,
    pub cumulative: u64,
    /// Target eval loss Ψ, when the run had one.
    pub threshold: Option<f64>,
    pub converged: bool,
    /// Interpolated cost at which eval loss first reached Ψ.
    pub flops_to_threshold: Option<f64>,
}

impl FlopsLedger {
    pub fn new(method: impl Into<String>, warmup_flops: u64, threshold: Option<f64>) -> Self {
        Self {
            method: method.into(),
            warmup_flops,
            increments: Vec::new(),
            cumulative: warmup_flops,
            threshold,
            converged: false,
            flops_to_threshold: None,
        }
    }

    pub fn record(&mut self, flops: u64) -> Result<()> {
        if flops == 0 {
            return Err(invalid!("ledger increments must be positive"));
        }
        self.cumulative = self
            .cumulative
            .checked_add(flops)
            .ok_or_else(|| invalid!("FLOPs ledger overflow"))?;
        self.increments.push(flops);
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.increments.len()
    }

    /// Recomputes the total from its parts.
    pub fn is_consistent(&self) -> bool {
        self.increments
            .iter()
            .try_fold(self.warmup_flops, |a, &x| a.checked_add(x))
            == Some(self.cumulative)
    }
}

/// `r = (ξ_scratch − ξ) / ξ_scratch`; negative when the method costs more.
pub fn flops_saving_ratio(xi_scratch: f64, xi_method: f64) -> Result<f64> {
    if !(xi_scratch > 0.0) || !xi_scratch.is_finite() {
        return Err(invalid!("scratch cost must be positive, got {xi_scratch}"));
    }
    if !xi_method.is_finite() || xi_method < 0.0 {
        return Err(invalid!("method cost must be finite and non-negative, got {xi_method}"));
    }
    Ok((xi_scratch - xi_method) / xi_scratch)
}

/// One logged evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean training loss since the previous point; absent at step 0.
    pub train_loss: Option<f64>,
    pub eval_loss: f64,
    pub cum_flops: u64,
}

/// Cost at which the eval curve first reaches `psi`, linearly interpolated
/// between the two logged points that bracket the crossing.
pub fn flops_to_reach(curve: &[CurvePoint], psi: f64) -> Option<f64> {
    let first = curve.first()?;
    if first.eval_loss <= psi {
        return Some(first.cum_flops as f64);
    }
    curve.windows(2).find_map(|w| {
        let (a, b) = (&w[0], &w[1]);
        (b.eval_loss <= psi).then(|| {
            let (fa, fb) = (a.cum_flops as f64, b.cum_flops as f64);
            let t = (a.eval_loss - psi) / (a.eval_loss - b.eval_loss);
            fa + t * (fb - fa)
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_examples() {
        let r = flops_saving_ratio(12.9e18, 3.0e18).unwrap();
        assert!((r - 0.767).abs() < 5e-4);
        assert!((r - 0.764).abs() < 0.01);
        let r = flops_saving_ratio(8.9e19, 5.4e19).unwrap();
        assert!((r - 0.393).abs() < 5e-4);
        assert!((r - 0.392).abs() < 0.005);
        assert_eq!(flops_saving_ratio(7.0, 7.0).unwrap(), 0.0);
        assert!(flops_saving_ratio(1.0, 2.0).unwrap() < 0.0);
        assert!(flops_saving_ratio(0.0, 1.0).is_err());
    }

    #[test]
    fn ledger_is_additive() {
        let mut l = FlopsLedger::new("mango", 17, None);
        for x in [5, 9, 11] {
            l.record(x).unwrap();
        }
        assert_eq!(l.cumulative, 42);
        assert!(l.is_consistent());
        assert!(l.record(0).is_err());
    }

    #[test]
    fn interpolation() {
        let p = |step, eval_loss, cum_flops| CurvePoint { step, train_loss: None, eval_loss, cum_flops };
        let c = [p(0, 4.0, 100), p(10, 3.0, 200), p(20, 2.0, 300)];
        assert_eq!(flops_to_reach(&c, 4.5), Some(100.0));
        assert_eq!(flops_to_reach(&c, 2.5), Some(250.0));
        assert_eq!(flops_to_reach(&c, 2.0), Some(300.0));
        assert_eq!(flops_to_reach(&c, 1.0), None);
    }
}
