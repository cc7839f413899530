//! Update rules applied to privatized gradients, and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::encoder::ParamGroups;
use crate::error::{Error, Result};
use crate::privacy::FlatGrad;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay from the base rate to zero over the run.
    Linear,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

impl LrSchedule {
    /// Learning rate for 0-based `step` of `total` steps.
    pub fn rate(self, base: f64, step: u64, total: u64) -> f64 {
        if total == 0 {
            return base;
        }
        let frac = step as f64 / total as f64;
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Linear => base * (1.0 - frac),
            LrSchedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
        }
    }
}

fn check_layout<P: ParamGroups>(params: &P, grad: &FlatGrad) -> Result<()> {
    if params.n_groups() != grad.n_groups()
        || (0..grad.n_groups()).any(|i| params.group(i).len() != grad.group(i).len())
    {
        return Err(Error::Shape("gradient does not match parameter groups".into()));
    }
    Ok(())
}

/// `θ ← θ − η·g̃`.
pub fn dp_sgd_step<P: ParamGroups>(params: &mut P, grad: &FlatGrad, lr: f64) -> Result<()> {
    check_layout(params, grad)?;
    for i in 0..grad.n_groups() {
        for (p, g) in params.group_mut(i).iter_mut().zip(grad.group(i)) {
            *p -= lr * g;
        }
    }
    Ok(())
}

/// Adam moments driven by privatized gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    /// Completed updates.
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    /// Added to `√v̂` in the denominator.
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: ParamGroups>(params: &P) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas<P: ParamGroups>(params: &P, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = (0..params.n_groups())
            .map(|i| vec![0.0; params.group(i).len()])
            .collect();
        Self {
            t: 0,
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One DP-Adam update:
/// `m ← β₁m + (1−β₁)g̃`, `v ← β₂v + (1−β₂)g̃²`,
/// `θ ← θ − η·m̂/(√v̂ + eps)` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)` and `t`
/// counting this update.
pub fn dp_adam_step<P: ParamGroups>(
    state: &mut AdamState,
    params: &mut P,
    grad: &FlatGrad,
    lr: f64,
) -> Result<()> {
    check_layout(params, grad)?;
    if state.m.len() != grad.n_groups() {
        return Err(Error::Shape("optimizer state does not match gradient".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..grad.n_groups() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((p, &g), mi), vi) in params
            .group_mut(i)
            .iter_mut()
            .zip(grad.group(i))
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * g;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer instance holding whatever state its rule needs.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam(AdamState),
}

impl Optimizer {
    pub fn new<P: ParamGroups>(kind: OptimizerKind, params: &P) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam { beta1, beta2, eps } => {
                Optimizer::Adam(AdamState::with_betas(params, beta1, beta2, eps))
            }
        }
    }

    pub fn step<P: ParamGroups>(&mut self, params: &mut P, grad: &FlatGrad, lr: f64) -> Result<()> {
        match self {
            Optimizer::Sgd => dp_sgd_step(params, grad, lr),
            Optimizer::Adam(state) => dp_adam_step(state, params, grad, lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> FlatGrad {
        FlatGrad::from_groups(vec![vec![x]])
    }

    #[test]
    fn sgd_examples() {
        let mut p = scalar(1.0);
        dp_sgd_step(&mut p, &scalar(2.0), 0.1).unwrap();
        assert!((p.group(0)[0] - 0.8).abs() < 1e-15);
        let mut q = scalar(1.0);
        dp_sgd_step(&mut q, &scalar(2.0), 0.0).unwrap();
        dp_sgd_step(&mut q, &scalar(0.0), 0.3).unwrap();
        assert_eq!(q, scalar(1.0));
        assert!(dp_sgd_step(&mut q, &FlatGrad::from_groups(vec![vec![1.0, 2.0]]), 0.1).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = scalar(0.7);
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            dp_adam_step(&mut st, &mut p, &scalar(0.0), 0.1).unwrap();
        }
        assert_eq!(p, scalar(0.7));
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut p = scalar(0.0);
        let mut st = AdamState::new(&p);
        dp_adam_step(&mut st, &mut p, &scalar(1.0), 0.1).unwrap();
        // m̂ = v̂ = 1 after bias correction.
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.group(0)[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_steps_approach_lr() {
        let (lr, c) = (1e-3, -0.37);
        let mut p = scalar(0.0);
        let mut st = AdamState::new(&p);
        let mut last = 0.0;
        for _ in 0..10_000 {
            let before = p.group(0)[0];
            dp_adam_step(&mut st, &mut p, &scalar(c), lr).unwrap();
            last = p.group(0)[0] - before;
        }
        // Steady state: the update is η·sign(g) in the descent direction.
        let expected = -lr * c.signum();
        assert!((last - expected).abs() < 0.01 * lr, "{last} vs {expected}");
    }

    #[test]
    fn schedules() {
        assert_eq!(LrSchedule::Constant.rate(0.1, 5, 10), 0.1);
        assert!((LrSchedule::Linear.rate(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!((LrSchedule::Cosine.rate(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert_eq!(LrSchedule::Cosine.rate(0.1, 0, 10), 0.1);
    }
}
