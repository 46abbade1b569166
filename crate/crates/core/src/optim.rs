//! Local optimizers (momentum SGD, Adam) and the FedProx proximal gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{axpby, ParamVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            momentum: 0.0,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            lr,
            momentum,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::invalid(format!("adam betas must be in [0, 1), got ({b1}, {b2})")));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("adam eps must be positive"));
        }
        Ok(())
    }
}

/// One model's optimizer: hyperparameters plus moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step_count: u64,
    /// Momentum velocity (SGD) or first moment (Adam).
    pub first: ParamVector,
    /// Second moment (Adam only; stays zero for SGD).
    pub second: ParamVector,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, dim: usize) -> Self {
        OptimizerState {
            config,
            step_count: 0,
            first: ParamVector::zeros(dim),
            second: ParamVector::zeros(dim),
        }
    }

    /// Applies one update to `w` in place.
    pub fn step(&mut self, w: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        if w.dim() != grad.dim() || w.dim() != self.first.dim() {
            return Err(Error::DimensionMismatch {
                left: w.dim(),
                right: if w.dim() != grad.dim() { grad.dim() } else { self.first.dim() },
            });
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite("gradient passed to optimizer".into()));
        }
        let cfg = self.config;
        self.step_count += 1;
        let wv = w.as_mut_slice();
        let g = grad.as_slice();
        match cfg.kind {
            OptimizerKind::SgdMomentum => {
                let v = self.first.as_mut_slice();
                for i in 0..wv.len() {
                    v[i] = cfg.momentum * v[i] + g[i];
                    wv[i] -= cfg.lr * v[i];
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = cfg.betas;
                let t = self.step_count as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                let m = self.first.as_mut_slice();
                let v = self.second.as_mut_slice();
                for i in 0..wv.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    wv[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                }
            }
        }
        Ok(())
    }
}

/// Value-style wrapper around [`OptimizerState::step`].
pub fn opt_step(state: &OptimizerState, w: &ParamVector, grad: &ParamVector) -> Result<(ParamVector, OptimizerState)> {
    let mut state = state.clone();
    let mut w = w.clone();
    state.step(&mut w, grad)?;
    Ok((w, state))
}

/// Gradient of `loss + (mu/2)‖w − anchor‖²`: `grad + mu·(w − anchor)`.
pub fn fedprox_grad(grad: &ParamVector, w: &ParamVector, anchor: &ParamVector, mu: f64) -> Result<ParamVector> {
    if mu < 0.0 {
        return Err(Error::invalid(format!("proximal mu must be >= 0, got {mu}")));
    }
    let diff = axpby(1.0, w, -1.0, anchor)?;
    axpby(1.0, grad, mu, &diff)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    #[test]
    fn adam_defaults() {
        let c = OptimizerConfig::adam(1e-3);
        assert_eq!(c.betas, (0.9, 0.999));
        assert_eq!(c.eps, 1e-8);
    }

    #[test]
    fn plain_sgd_step() {
        let s = OptimizerState::new(OptimizerConfig::sgd(0.1, 0.0), 1);
        let (w, s) = opt_step(&s, &pv(&[1.0]), &pv(&[1.0])).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-15);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        for cfg in [OptimizerConfig::sgd(0.1, 0.9), OptimizerConfig::adam(0.1)] {
            let s = OptimizerState::new(cfg, 3);
            let w = pv(&[1.0, -2.0, 3.0]);
            let (w2, s2) = opt_step(&s, &w, &ParamVector::zeros(3)).unwrap();
            assert_eq!(w2, w);
            assert_eq!(s2.step_count, 1);
        }
        // with an existing velocity, zero gradient only decays the buffer
        let mut s = OptimizerState::new(OptimizerConfig::sgd(0.1, 0.5), 1);
        s.first = pv(&[2.0]);
        let (_, s2) = opt_step(&s, &pv(&[0.0]), &pv(&[0.0])).unwrap();
        assert_eq!(s2.first, pv(&[1.0]));
    }

    #[test]
    fn adam_two_step_trace() {
        let cfg = OptimizerConfig::adam(0.01);
        let mut s = OptimizerState::new(cfg, 1);
        let mut w = pv(&[0.0]);
        let g = 0.3;
        s.step(&mut w, &pv(&[g])).unwrap();
        // t=1: m̂ = g, v̂ = g², step = lr·g/(|g| + eps)
        let first = 0.01 * g / (g + 1e-8);
        assert!((w[0] + first).abs() < 1e-15);
        s.step(&mut w, &pv(&[g])).unwrap();
        let m = 0.9 * 0.1 * g + 0.1 * g;
        let v = 0.999 * 0.001 * g * g + 0.001 * g * g;
        let step2 = 0.01 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64 * 0.999)).sqrt() + 1e-8);
        assert!((w[0] + first + step2).abs() < 1e-15);
    }

    #[test]
    fn step_errors() {
        let mut s = OptimizerState::new(OptimizerConfig::adam(0.1), 2);
        let mut w = pv(&[0.0, 0.0]);
        assert!(s.step(&mut w, &pv(&[1.0])).is_err());
        assert!(s.step(&mut w, &pv(&[f64::NAN, 0.0])).is_err());
        assert_eq!(s.step_count, 0);
    }

    #[test]
    fn fedprox_examples() {
        let g = pv(&[0.7, -0.1]);
        assert_eq!(fedprox_grad(&g, &pv(&[5.0, 1.0]), &pv(&[0.0, 0.0]), 0.0).unwrap(), g);
        assert_eq!(fedprox_grad(&g, &pv(&[5.0, 1.0]), &pv(&[5.0, 1.0]), 0.3).unwrap(), g);
        assert_eq!(fedprox_grad(&pv(&[0.0]), &pv(&[2.0]), &pv(&[0.0]), 0.5).unwrap(), pv(&[1.0]));
        assert!(fedprox_grad(&g, &pv(&[1.0]), &pv(&[1.0]), 0.1).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn fedprox_linear_in_displacement(
                d in prop::collection::vec(-10.0f64..10.0, 5),
                a in -3.0f64..3.0,
                mu in 0.0f64..2.0,
            ) {
                let zero = ParamVector::zeros(5);
                let disp = ParamVector::from_vec(d);
                let scaled = disp.scale(a);
                let base = fedprox_grad(&zero, &disp, &zero, mu).unwrap();
                let lin = fedprox_grad(&zero, &scaled, &zero, mu).unwrap();
                for (x, y) in base.iter().zip(lin.iter()) {
                    prop_assert!((a * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
                }
            }
        }
    }
}
