//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! For integer order `α ≥ 2` the per-step RDP is
//!
//! ```text
//! RDP(α) = 1/(α−1) · ln Σ_{j=0..α} C(α,j) (1−q)^{α−j} q^j exp(j(j−1)/(2σ²))
//! ```
//!
//! evaluated with log-sum-exp. Fractional orders on the grid use the value
//! at `⌈α⌉`, which upper-bounds the true curve because RDP is non-decreasing
//! in `α`. Conversion to `(ε, δ)`:
//!
//! ```text
//! ε = min_α  RDP(α) + ln((α−1)/α) − (ln δ + ln α)/(α−1)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const ACCOUNTANT_KIND: &str = "rdp_subsampled_gaussian";

/// Default order grid: `{1.25, 1.5, 1.75} ∪ {2, …, 256}`.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5, 1.75];
    orders.extend((2..=256).map(f64::from));
    orders
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn rdp_integer(q: f64, sigma: f64, alpha: u32) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    let a = f64::from(alpha);
    if q == 1.0 {
        return a / (2.0 * sigma * sigma);
    }
    let (ln_q, ln_1mq) = (q.ln(), (-q).ln_1p());
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let mut ln_binom = 0.0;
    let mut acc = f64::NEG_INFINITY;
    for j in 0..=alpha {
        if j > 0 {
            ln_binom += (a - f64::from(j) + 1.0).ln() - f64::from(j).ln();
        }
        let jf = f64::from(j);
        let term = ln_binom + (a - jf) * ln_1mq + jf * ln_q + jf * (jf - 1.0) * inv_two_var;
        acc = log_add(acc, term);
    }
    (acc / (a - 1.0)).max(0.0)
}

/// Per-step RDP of the subsampled Gaussian at order `alpha > 1`.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid("sampling ratio must lie in [0, 1]"));
    }
    if !(sigma > 0.0) {
        return Err(invalid("noise multiplier must be positive"));
    }
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(invalid("order must exceed 1"));
    }
    Ok(rdp_integer(q, sigma, alpha.ceil() as u32))
}

/// One composed segment: `steps` applications at `(q, σ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantState {
    pub orders: Vec<f64>,
    pub rdp: Vec<f64>,
    pub history: Vec<Segment>,
    /// `rdp` before the last segment, and that segment's per-step curve.
    /// `rdp = prefix + steps·curve` keeps split and merged compositions of
    /// one segment bitwise equal.
    #[serde(default)]
    prefix: Vec<f64>,
    #[serde(default)]
    last_curve: Vec<f64>,
}

impl Default for AccountantState {
    fn default() -> Self {
        Self::with_orders(default_orders())
    }
}

impl AccountantState {
    pub fn with_orders(orders: Vec<f64>) -> Self {
        let n = orders.len();
        Self {
            orders,
            rdp: vec![0.0; n],
            history: Vec::new(),
            prefix: vec![0.0; n],
            last_curve: vec![0.0; n],
        }
    }

    /// Per-step RDP curve on this state's grid. `σ = 0` with `q > 0` is an
    /// unbounded mechanism and yields infinite entries.
    pub fn step_curve(&self, q: f64, sigma: f64) -> Result<Vec<f64>> {
        if sigma == 0.0 && q > 0.0 {
            return Ok(vec![f64::INFINITY; self.orders.len()]);
        }
        if q == 0.0 {
            return Ok(vec![0.0; self.orders.len()]);
        }
        self.orders
            .iter()
            .map(|&a| rdp_subsampled_gaussian(q, sigma, a))
            .collect()
    }

    /// Adds `steps` copies of a precomputed per-step curve.
    pub fn compose_curve(&mut self, curve: &[f64], segment: Segment) -> Result<()> {
        if curve.len() != self.rdp.len() {
            return Err(Error::Shape("RDP curve does not match the order grid".into()));
        }
        if segment.steps == 0 {
            return Ok(());
        }
        match self.history.last_mut() {
            Some(last)
                if last.q == segment.q
                    && last.sigma == segment.sigma
                    && self.last_curve == curve
                    && self.prefix.len() == self.rdp.len() =>
            {
                last.steps += segment.steps
            }
            _ => {
                self.prefix = self.rdp.clone();
                self.last_curve = curve.to_vec();
                self.history.push(segment);
            }
        }
        let n = self.history.last().map_or(0, |s| s.steps) as f64;
        for ((acc, &base), &r) in self.rdp.iter_mut().zip(&self.prefix).zip(&self.last_curve) {
            *acc = base + n * r;
        }
        Ok(())
    }

    /// `rdp[α] += steps · RDP_step(q, σ, α)` for every order.
    pub fn compose(&mut self, q: f64, sigma: f64, steps: u64) -> Result<()> {
        if !(sigma >= 0.0) {
            return Err(invalid("noise multiplier must be non-negative"));
        }
        if steps == 0 {
            return Ok(());
        }
        let curve = self.step_curve(q, sigma)?;
        self.compose_curve(&curve, Segment { q, sigma, steps })
    }

    /// Smallest ε over the order grid and the order attaining it.
    pub fn to_epsilon(&self, delta: f64) -> Result<(f64, f64)> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(invalid("delta must lie in (0, 1)"));
        }
        if self.orders.is_empty() {
            return Err(invalid("empty order grid"));
        }
        if self.rdp.iter().all(|&r| r == 0.0) {
            return Ok((0.0, self.orders[0]));
        }
        let ln_delta = delta.ln();
        let mut best = (f64::INFINITY, self.orders[0]);
        for (&a, &r) in self.orders.iter().zip(&self.rdp) {
            let eps = r + ((a - 1.0) / a).ln() - (ln_delta + a.ln()) / (a - 1.0);
            if eps < best.0 {
                best = (eps, a);
            }
        }
        Ok((best.0.max(0.0), best.1))
    }
}

/// ε after `steps` subsampled-Gaussian steps on the default grid.
pub fn epsilon_for(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<f64> {
    let mut st = AccountantState::default();
    st.compose(q, sigma, steps)?;
    Ok(st.to_epsilon(delta)?.0)
}

pub const SIGMA_MIN: f64 = 0.05;
pub const SIGMA_MAX: f64 = 1000.0;

/// Bisection for the smallest σ in `[0.05, 1000]` whose ε does not exceed
/// the target. Stops once ε is within 0.01 below the target or the bracket
/// is narrower than 1e-4.
pub fn calibrate_sigma(target_epsilon: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    if !(target_epsilon > 0.0) {
        return Err(invalid("target epsilon must be positive"));
    }
    let eps = |s: f64| epsilon_for(q, s, steps, delta);
    let mut hi = SIGMA_MAX;
    if eps(hi)? > target_epsilon {
        return Err(Error::Calibration(format!(
            "ε={target_epsilon} is not reachable with σ ≤ {SIGMA_MAX}"
        )));
    }
    let mut lo = SIGMA_MIN;
    if eps(lo)? <= target_epsilon {
        return Ok(lo);
    }
    while hi - lo > 1e-4 {
        let achieved = eps(hi)?;
        if target_epsilon - achieved <= 0.01 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if eps(mid)? <= target_epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batch_closed_form() {
        assert_eq!(rdp_subsampled_gaussian(1.0, 1.0, 2.0).unwrap(), 1.0);
        assert_eq!(rdp_subsampled_gaussian(1.0, 2.0, 8.0).unwrap(), 1.0);
    }

    #[test]
    fn zero_rate_is_free() {
        for a in [2.0, 3.0, 64.0] {
            assert_eq!(rdp_subsampled_gaussian(0.0, 0.7, a).unwrap(), 0.0);
        }
    }

    #[test]
    fn invalid_arguments() {
        assert!(rdp_subsampled_gaussian(0.1, 0.0, 2.0).is_err());
        assert!(rdp_subsampled_gaussian(1.1, 1.0, 2.0).is_err());
        assert!(rdp_subsampled_gaussian(0.1, 1.0, 1.0).is_err());
        assert!(AccountantState::default().to_epsilon(1.0).is_err());
    }

    #[test]
    fn empty_history_is_zero() {
        assert_eq!(AccountantState::default().to_epsilon(1e-5).unwrap().0, 0.0);
    }

    #[test]
    fn composition_is_additive() {
        let mut a = AccountantState::default();
        a.compose(0.01, 1.0, 300).unwrap();
        a.compose(0.01, 1.0, 700).unwrap();
        let mut b = AccountantState::default();
        b.compose(0.01, 1.0, 1000).unwrap();
        assert_eq!(a.rdp, b.rdp);
        let single = rdp_subsampled_gaussian(0.01, 1.0, 2.0).unwrap();
        let i2 = b.orders.iter().position(|&o| o == 2.0).unwrap();
        assert_eq!(b.rdp[i2], 1000.0 * single);
        assert_eq!(a.history.len(), 1);
    }

    #[test]
    fn zero_steps_leave_state_unchanged() {
        let mut a = AccountantState::default();
        a.compose(0.3, 1.0, 0).unwrap();
        assert_eq!(a, AccountantState::default());
    }

    #[test]
    fn zero_noise_is_unbounded() {
        let mut a = AccountantState::default();
        a.compose(0.1, 0.0, 1).unwrap();
        assert!(a.to_epsilon(1e-5).unwrap().0.is_infinite());
    }

    #[test]
    fn calibration_round_trip() {
        let (q, t, d) = (0.01, 1000, 1e-5);
        let s = calibrate_sigma(2.0, d, q, t).unwrap();
        let e = epsilon_for(q, s, t, d).unwrap();
        assert!(e <= 2.0 && 2.0 - e <= 0.01, "ε = {e} at σ = {s}");
        assert!(calibrate_sigma(4.0, d, q, t).unwrap() <= s);
        assert!(calibrate_sigma(-1.0, d, q, t).is_err());
    }

    #[test]
    fn unreachable_target_is_reported() {
        assert!(matches!(
            calibrate_sigma(1e-6, 1e-10, 1.0, 1_000_000),
            Err(Error::Calibration(_))
        ));
    }
}
