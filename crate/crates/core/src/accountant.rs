//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Per-step RDP at order `α` is `ln(A_α) / (α - 1)` with
//! `A_α = E_{z~N(0,σ²)}[((1-q) + q·exp((2z-1)/(2σ²)))^α]`. Integer orders
//! use the binomial expansion of that expectation; fractional orders
//! integrate it numerically. RDP composes additively over steps and
//! converts to `(ε, δ)` via `ε = min_α RDP(α) + ln(1/δ)/(α-1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fractional orders then integers `2..=256`.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5, 1.75];
    orders.extend((2..=256).map(f64::from));
    orders
}

fn ln_binomial(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

fn log_a_integer(q: f64, sigma: f64, alpha: u64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let two_s2 = 2.0 * sigma * sigma;
    let terms: Vec<f64> = (0..=alpha)
        .map(|i| {
            let fi = i as f64;
            ln_binomial(alpha, i) + (alpha - i) as f64 * l1q + fi * lq + (fi * fi - fi) / two_s2
        })
        .collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// `ln A_α` for fractional α by composite Simpson integration of
/// `φ(z)·(ratio(z)^α - 1)`, keeping `A_α - 1` free of cancellation.
fn log_a_fractional(q: f64, sigma: f64, alpha: f64) -> f64 {
    let two_s2 = 2.0 * sigma * sigma;
    let lo = -20.0 * sigma;
    let hi = alpha.max(1.0) + 20.0 * sigma;
    let intervals = 16_000usize;
    let h = (hi - lo) / intervals as f64;
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let f = |z: f64| {
        let ratio_minus_one = q * ((2.0 * z - 1.0) / two_s2).exp_m1();
        let excess = (alpha * ratio_minus_one.ln_1p()).exp_m1();
        norm * (-z * z / two_s2).exp() * excess
    };
    let mut sum = f(lo) + f(hi);
    for i in 1..intervals {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(lo + i as f64 * h);
    }
    (sum * h / 3.0).ln_1p()
}

/// RDP of one step of the subsampled Gaussian at order `alpha`.
pub fn rdp_step(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if alpha <= 1.0 || !alpha.is_finite() {
        return Err(Error::Privacy(format!("RDP order must exceed 1, got {alpha}")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Privacy(format!("sampling rate {q} outside (0, 1]")));
    }
    if sigma <= 0.0 || sigma.is_nan() {
        return Err(Error::Privacy(format!("noise multiplier must be positive, got {sigma}")));
    }
    if q == 1.0 {
        return Ok(alpha / (2.0 * sigma * sigma));
    }
    let log_a = if alpha.fract() == 0.0 {
        log_a_integer(q, sigma, alpha as u64)
    } else {
        log_a_fractional(q, sigma, alpha)
    };
    Ok(log_a.max(0.0) / (alpha - 1.0))
}

/// One mechanism applied for some number of steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismRecord {
    pub sample_rate: f64,
    pub noise_multiplier: f64,
    pub steps: u64,
}

/// Accumulated RDP per order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub orders: Vec<f64>,
    pub rdp: Vec<f64>,
    pub steps: u64,
    pub history: Vec<MechanismRecord>,
}

/// `ε` at a given `δ` and the order that achieved it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonReport {
    pub epsilon: f64,
    pub delta: f64,
    pub order: Option<f64>,
}

impl Default for PrivacyLedger {
    fn default() -> Self {
        Self::with_orders(default_orders())
    }
}

impl PrivacyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_orders(orders: Vec<f64>) -> Self {
        let rdp = vec![0.0; orders.len()];
        PrivacyLedger {
            orders,
            rdp,
            steps: 0,
            history: Vec::new(),
        }
    }

    /// Per-step RDP vector for `(q, σ)` over this ledger's orders.
    pub fn step_rdp(&self, q: f64, sigma: f64) -> Result<Vec<f64>> {
        self.orders.iter().map(|&a| rdp_step(q, sigma, a)).collect()
    }

    pub fn compose(&mut self, q: f64, sigma: f64, steps: u64) -> Result<()> {
        if steps == 0 {
            return Ok(());
        }
        let per_step = self.step_rdp(q, sigma)?;
        self.compose_with(&per_step, q, sigma, steps);
        Ok(())
    }

    /// Adds `steps` copies of a precomputed per-step RDP vector.
    pub fn compose_with(&mut self, per_step: &[f64], q: f64, sigma: f64, steps: u64) {
        if steps == 0 {
            return;
        }
        for (acc, &r) in self.rdp.iter_mut().zip(per_step) {
            *acc += steps as f64 * r;
        }
        self.steps += steps;
        match self.history.last_mut() {
            Some(last) if last.sample_rate == q && last.noise_multiplier == sigma => last.steps += steps,
            _ => self.history.push(MechanismRecord {
                sample_rate: q,
                noise_multiplier: sigma,
                steps,
            }),
        }
    }

    pub fn to_epsilon(&self, delta: f64) -> Result<EpsilonReport> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Privacy(format!("delta {delta} outside (0, 1)")));
        }
        if self.steps == 0 {
            return Ok(EpsilonReport {
                epsilon: 0.0,
                delta,
                order: None,
            });
        }
        Ok(epsilon_from_rdp(&self.orders, &self.rdp, delta))
    }
}

fn epsilon_from_rdp(orders: &[f64], rdp: &[f64], delta: f64) -> EpsilonReport {
    let log_inv_delta = -delta.ln();
    let (epsilon, order) = orders
        .iter()
        .zip(rdp)
        .map(|(&a, &r)| (r + log_inv_delta / (a - 1.0), a))
        .fold((f64::INFINITY, None), |best, (eps, a)| {
            if eps < best.0 {
                (eps, Some(a))
            } else {
                best
            }
        });
    EpsilonReport { epsilon, delta, order }
}

/// `ε` after `steps` applications of `(q, σ)`.
pub fn epsilon_for(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<f64> {
    let mut ledger = PrivacyLedger::new();
    ledger.compose(q, sigma, steps)?;
    Ok(ledger.to_epsilon(delta)?.epsilon)
}

const SIGMA_MIN: f64 = 0.3;
const SIGMA_MAX: f64 = 1e3;

/// Smallest-ish `σ` whose `ε` lands in `[target·(1 - 10⁻³), target]`.
pub fn calibrate_sigma(q: f64, steps: u64, target_epsilon: f64, delta: f64) -> Result<f64> {
    if target_epsilon <= 0.0 || target_epsilon.is_nan() {
        return Err(Error::Privacy(format!("target epsilon must be positive, got {target_epsilon}")));
    }
    let eps = |s: f64| epsilon_for(q, s, steps, delta);
    let (mut lo, mut hi) = (SIGMA_MIN, SIGMA_MAX);
    let (eps_lo, eps_hi) = (eps(lo)?, eps(hi)?);
    if eps_hi > target_epsilon || eps_lo <= target_epsilon {
        return Err(Error::Privacy(format!(
            "epsilon {target_epsilon} unreachable for sigma in [{SIGMA_MIN}, {SIGMA_MAX}] \
             (q={q}, steps={steps}, delta={delta})"
        )));
    }
    let floor = target_epsilon * (1.0 - 1e-3);
    let mut eps_at_hi = eps_hi;
    for _ in 0..200 {
        if eps_at_hi >= floor {
            break;
        }
        let mid = (lo * hi).sqrt();
        let e = eps(mid)?;
        debug_assert!(e <= eps(lo)? + 1e-12, "epsilon must decrease in sigma");
        if e <= target_epsilon {
            hi = mid;
            eps_at_hi = e;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Doubles the batch from `b0` until the calibrated `σ` exceeds 2 or the
/// batch reaches `n`.
pub fn choose_batch(n: usize, steps: u64, target_epsilon: f64, delta: f64, b0: usize) -> Result<(usize, f64)> {
    if n == 0 || b0 == 0 {
        return Err(Error::Privacy("dataset and initial batch must be non-empty".into()));
    }
    let mut batch = b0.min(n);
    loop {
        let sigma = calibrate_sigma(batch as f64 / n as f64, steps, target_epsilon, delta)?;
        if sigma > 2.0 || batch >= n {
            return Ok((batch, sigma));
        }
        batch = (batch * 2).min(n);
    }
}

/// Noise for a smaller simulation batch that keeps `σ/q` fixed.
pub fn tan_scale(batch: usize, sigma: f64, small_batch: usize) -> Result<f64> {
    if small_batch == 0 || small_batch > batch {
        return Err(Error::Privacy(format!(
            "scaled batch {small_batch} must lie in (0, {batch}]"
        )));
    }
    Ok(sigma * small_batch as f64 / batch as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batch_closed_form() {
        assert_eq!(rdp_step(1.0, 2.0, 8.0).unwrap(), 1.0);
        assert!(rdp_step(0.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn small_q_vanishes_monotonically() {
        let mut prev = f64::INFINITY;
        for q in [0.5, 0.1, 0.01, 1e-3, 1e-4, 1e-5] {
            let r = rdp_step(q, 2.0, 10.0).unwrap();
            assert!(r < prev && r >= 0.0);
            prev = r;
        }
        assert!(prev < 1e-8);
    }

    #[test]
    fn fractional_orders_sit_between_neighbours() {
        for (q, s) in [(0.01, 1.0), (0.1, 2.0), (0.5, 0.8)] {
            let r: Vec<f64> = [1.25, 1.5, 1.75, 2.0]
                .iter()
                .map(|&a| rdp_step(q, s, a).unwrap())
                .collect();
            assert!(r.windows(2).all(|w| w[0] <= w[1] * (1.0 + 1e-9)), "{r:?}");
        }
    }

    #[test]
    fn fractional_quadrature_agrees_at_integer_order() {
        for (q, s) in [(0.01, 1.0), (0.1, 2.0), (0.3, 1.5)] {
            let exact = log_a_integer(q, s, 2);
            let quad = log_a_fractional(q, s, 2.0);
            assert!((exact - quad).abs() <= 1e-9 * exact.abs().max(1e-12), "{exact} vs {quad}");
        }
    }

    #[test]
    fn one_step_full_batch_epsilon() {
        let mut l = PrivacyLedger::new();
        l.compose(1.0, 2.0, 1).unwrap();
        let r = l.to_epsilon(1e-6).unwrap();
        // fine-grid scan of α/8 + ln(1e6)/(α-1)
        let oracle = (1..200_000)
            .map(|i| 1.0 + i as f64 * 1e-4)
            .map(|a| a / 8.0 + 1e6f64.ln() / (a - 1.0))
            .fold(f64::INFINITY, f64::min);
        assert!((oracle - 2.7532).abs() < 1e-3, "{oracle}");
        assert!(r.epsilon >= oracle && r.epsilon - oracle < 5e-3, "{} vs {oracle}", r.epsilon);
        assert!(matches!(r.order, Some(a) if a == 11.0 || a == 12.0));
    }

    #[test]
    fn empty_ledger_and_delta_limit() {
        let l = PrivacyLedger::new();
        assert_eq!(l.to_epsilon(1e-5).unwrap().epsilon, 0.0);
        let mut l = PrivacyLedger::new();
        l.compose(0.05, 1.5, 100).unwrap();
        let min_rdp = l.rdp.iter().copied().fold(f64::INFINITY, f64::min);
        let e = l.to_epsilon(1.0 - 1e-12).unwrap().epsilon;
        assert!((e - min_rdp).abs() < 1e-6, "{e} vs {min_rdp}");
    }

    #[test]
    fn composition_is_additive() {
        let mut a = PrivacyLedger::new();
        a.compose(0.02, 1.1, 500).unwrap();
        a.compose(0.02, 1.1, 500).unwrap();
        let mut b = PrivacyLedger::new();
        b.compose(0.02, 1.1, 1000).unwrap();
        for (x, y) in a.rdp.iter().zip(&b.rdp) {
            assert!((x - y).abs() <= 1e-12 * y.abs());
        }
        assert_eq!(a.history.len(), 1);
        let before = a.clone();
        a.compose(0.02, 1.1, 0).unwrap();
        assert_eq!(a, before);
    }

    #[test]
    fn calibration_and_batch_choice() {
        let target = epsilon_for(1.0, 2.0, 1, 1e-6).unwrap();
        let s = calibrate_sigma(1.0, 1, target, 1e-6).unwrap();
        assert!((s - 2.0).abs() < 5e-3, "{s}");
        let (b, sigma) = choose_batch(10_000, 1000, 5.0, 1e-6, 16).unwrap();
        assert!(sigma > 2.0 || b == 10_000);
        assert!(b >= 16);
        assert!(tan_scale(100, 4.0, 50).unwrap() == 2.0);
        assert!(tan_scale(100, 4.0, 200).is_err());
    }
}
