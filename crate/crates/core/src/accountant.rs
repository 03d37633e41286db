//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! For sampling rate `q` and noise multiplier `z`, one step has RDP
//! `log(A_α) / (α − 1)` where `A_α = E_{x∼N(0,z²)}[((1−q) + q·e^{(2x−1)/(2z²)})^α]`.
//! Integer orders use the binomial expansion of `A_α`; fractional orders use
//! the two-sided series split at `z0 = z²·ln(1/q − 1) + ½`. Everything is
//! evaluated in log space. RDP composes additively over steps and converts
//! to `(ε, δ)` with
//! `ε = min_α rdp(α) + ln((α−1)/α) − (ln δ + ln α)/(α − 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default order grid: integers 2..=256 plus a few fractional orders.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5, 1.75, 2.5, 3.5];
    orders.extend((2..=256).map(f64::from));
    orders.sort_by(f64::total_cmp);
    orders
}

/// Accountant inputs for one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismParams {
    /// Sampling probability, batch size / dataset size.
    pub q: f64,
    /// Noise multiplier.
    pub z: f64,
    pub steps: u64,
}

impl MechanismParams {
    pub fn from_sizes(batch: f64, dataset: f64, z: f64, steps: u64) -> Self {
        Self {
            q: batch / dataset,
            z,
            steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::Domain(format!("q must be in (0, 1], got {}", self.q)));
        }
        if !(self.z > 0.0 && self.z.is_finite()) {
            return Err(Error::Domain(format!("z must be positive and finite, got {}", self.z)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountingResult {
    pub epsilon: f64,
    pub delta: f64,
    pub optimal_order: f64,
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(e^a − e^b)` for `a ≥ b`.
fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        // Only reachable through cancellation at rounding level.
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

/// `ln erfc(x)`, accurate far into the tail where `erfc` underflows.
pub fn log_erfc(x: f64) -> f64 {
    if x < 25.0 {
        return libm::erfc(x).ln();
    }
    let x2 = x * x;
    let inv = 1.0 / (2.0 * x2);
    // erfc(x) ~ e^{-x²}/(x√π) · (1 − 1/(2x²) + 3/(2x²)² − 15/(2x²)³ + 105/(2x²)⁴)
    let series = 1.0 - inv + 3.0 * inv * inv - 15.0 * inv.powi(3) + 105.0 * inv.powi(4);
    -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln() + series.ln()
}

fn ln_binom(n: u64, k: u64) -> f64 {
    libm::lgamma((n + 1) as f64) - libm::lgamma((k + 1) as f64) - libm::lgamma((n - k + 1) as f64)
}

/// `ln(e^c − 1)` for `c > 0`.
fn log_expm1(c: f64) -> f64 {
    if c > 30.0 {
        c + (-(-c).exp()).ln_1p()
    } else {
        c.exp_m1().ln()
    }
}

/// `ln A_α` at integer α. The binomial weights sum to one, so
/// `A_α = 1 + Σ_{i≥2} C(α,i)(1−q)^{α−i} q^i (e^{(i²−i)/(2z²)} − 1)`; every
/// term of that sum is positive, which keeps tiny `q` free of cancellation.
fn log_a_int(q: f64, z: f64, alpha: u64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let s2 = 2.0 * z * z;
    let mut excess = f64::NEG_INFINITY;
    for i in 2..=alpha {
        let fi = i as f64;
        let term = ln_binom(alpha, i) + fi * lq + (alpha - i) as f64 * l1q + log_expm1((fi * fi - fi) / s2);
        excess = log_add(excess, term);
    }
    log_add(0.0, excess)
}

fn log_a_frac(q: f64, z: f64, alpha: f64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let s2 = z * z;
    let z0 = s2 * (1.0 / q - 1.0).ln() + 0.5;
    let rt2z = std::f64::consts::SQRT_2 * z;
    let (mut a0, mut a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    // Generalised binomial coefficient C(α, i), tracked as sign and log magnitude.
    let (mut log_coef, mut positive) = (0.0f64, true);
    let mut i = 0u64;
    loop {
        let fi = i as f64;
        let j = alpha - fi;
        let log_t0 = log_coef + fi * lq + j * l1q;
        let log_t1 = log_coef + j * lq + fi * l1q;
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / rt2z);
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / rt2z);
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * s2) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * s2) + log_e1;
        if positive {
            a0 = log_add(a0, log_s0);
            a1 = log_add(a1, log_s1);
        } else {
            a0 = log_sub(a0, log_s0);
            a1 = log_sub(a1, log_s1);
        }
        if log_s0.max(log_s1) < -30.0 || i > 10_000 {
            break;
        }
        let ratio = (alpha - fi) / (fi + 1.0);
        if ratio == 0.0 {
            break;
        }
        if ratio < 0.0 {
            positive = !positive;
        }
        log_coef += ratio.abs().ln();
        i += 1;
    }
    log_add(a0, a1)
}

/// RDP of one step at a single order `alpha > 1`.
pub fn rdp_at_order(q: f64, z: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::Domain(format!("RDP order must be > 1, got {alpha}")));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("q must be in [0, 1], got {q}")));
    }
    if z.is_nan() || z < 0.0 {
        return Err(Error::Domain(format!("z must be >= 0, got {z}")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    if z == 0.0 {
        return Ok(f64::INFINITY);
    }
    if q == 1.0 {
        return Ok(alpha / (2.0 * z * z));
    }
    let log_a = if alpha.fract() == 0.0 {
        log_a_int(q, z, alpha as u64)
    } else {
        log_a_frac(q, z, alpha)
    };
    Ok((log_a / (alpha - 1.0)).max(0.0))
}

/// Per-order RDP of one subsampled Gaussian step.
pub fn rdp_subsampled_gaussian(q: f64, z: f64, orders: &[f64]) -> Result<Vec<f64>> {
    orders.iter().map(|&a| rdp_at_order(q, z, a)).collect()
}

/// RDP of `steps` adaptive compositions.
pub fn compose(step_rdp: &[f64], steps: u64) -> Vec<f64> {
    if steps == 0 {
        return vec![0.0; step_rdp.len()];
    }
    step_rdp.iter().map(|r| r * steps as f64).collect()
}

/// Best `(ε, δ)` conversion over the order grid.
pub fn eps_from_rdp(rdp: &[f64], orders: &[f64], delta: f64) -> Result<AccountingResult> {
    if orders.is_empty() {
        return Err(Error::Config("empty order list".into()));
    }
    if rdp.len() != orders.len() {
        return Err(Error::Dimension(format!(
            "{} RDP values for {} orders",
            rdp.len(),
            orders.len()
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must be in (0, 1), got {delta}")));
    }
    let ld = delta.ln();
    let mut best = AccountingResult {
        epsilon: f64::INFINITY,
        delta,
        optimal_order: f64::NAN,
    };
    for (&r, &a) in rdp.iter().zip(orders) {
        if a <= 1.0 {
            return Err(Error::Domain(format!("RDP order must be > 1, got {a}")));
        }
        let eps = r + (-1.0 / a).ln_1p() - (ld + a.ln()) / (a - 1.0);
        if eps < best.epsilon {
            best.epsilon = eps;
            best.optimal_order = a;
        }
    }
    best.epsilon = best.epsilon.max(0.0);
    Ok(best)
}

/// ε spent by `params.steps` steps at the given δ.
pub fn account(params: &MechanismParams, delta: f64, orders: &[f64]) -> Result<AccountingResult> {
    params.validate()?;
    let step = rdp_subsampled_gaussian(params.q, params.z, orders)?;
    eps_from_rdp(&compose(&step, params.steps), orders, delta)
}

/// δ = n^(−1.1) for a dataset of `n` examples.
pub fn delta_rule(n: f64) -> Result<f64> {
    if !(n >= 2.0) || !n.is_finite() {
        return Err(Error::Domain(format!("dataset size must be >= 2, got {n}")));
    }
    Ok(n.powf(-1.1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batch_is_gaussian_closed_form() {
        assert_eq!(rdp_at_order(1.0, 1.0, 2.0).unwrap(), 1.0);
        assert_eq!(rdp_at_order(1.0, 2.0, 8.0).unwrap(), 1.0);
    }

    #[test]
    fn vanishing_q_gives_vanishing_rdp() {
        for &a in &[1.5, 2.0, 8.0, 64.0] {
            assert_eq!(rdp_at_order(0.0, 1.0, a).unwrap(), 0.0);
        }
        for &a in &[1.5, 2.0, 8.0] {
            assert!(rdp_at_order(1e-12, 1.0, a).unwrap() < 1e-20);
        }
    }

    #[test]
    fn large_order_top_term_dominates() {
        // q^α·e^{α(α−1)/(2z²)} swamps the rest at α = 64, z = 1, q = 1e-12.
        let top = (64.0 * 1e-12f64.ln() + 64.0 * 63.0 / 2.0) / 63.0;
        assert!((rdp_at_order(1e-12, 1.0, 64.0).unwrap() - top).abs() < 1e-9);
    }

    #[test]
    fn order_at_most_one_rejected() {
        assert!(matches!(rdp_at_order(0.1, 1.0, 1.0), Err(Error::Domain(_))));
        assert!(rdp_subsampled_gaussian(0.1, 1.0, &[0.5]).is_err());
    }

    #[test]
    fn integer_order_two_closed_form() {
        // A_2 = 1 + q²(e^{1/z²} − 1)
        let (q, z) = (0.05, 0.8);
        let expect = (1.0 + q * q * ((1.0 / (z * z)) as f64).exp_m1()).ln();
        assert!((rdp_at_order(q, z, 2.0).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn fractional_orders_interleave_integers() {
        let (q, z) = (0.01, 1.0);
        let r = |a| rdp_at_order(q, z, a).unwrap();
        assert!(r(1.5) <= r(2.0) + 1e-15);
        assert!(r(2.0) <= r(2.5) + 1e-15);
        assert!(r(2.5) <= r(3.0) + 1e-15);
        assert!(r(3.0) <= r(3.5) + 1e-15);
    }

    #[test]
    fn compose_is_linear() {
        let s = rdp_subsampled_gaussian(0.01, 1.0, &default_orders()).unwrap();
        assert!(compose(&s, 0).iter().all(|&v| v == 0.0));
        let one = compose(&s, 1);
        let two = compose(&s, 2);
        for (a, b) in one.iter().zip(&two) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn zero_rdp_gives_nonnegative_floor() {
        let orders = default_orders();
        let r = eps_from_rdp(&vec![0.0; orders.len()], &orders, 1e-5).unwrap();
        assert!(r.epsilon >= 0.0);
        assert!(r.epsilon < 0.2);
    }

    #[test]
    fn empty_orders_is_config_error() {
        assert!(matches!(eps_from_rdp(&[], &[], 1e-5), Err(Error::Config(_))));
    }

    #[test]
    fn doubling_delta_never_increases_eps() {
        let orders = default_orders();
        let p = MechanismParams {
            q: 0.01,
            z: 1.1,
            steps: 1000,
        };
        let mut d = 1e-12;
        while d < 0.25 {
            let a = account(&p, d, &orders).unwrap().epsilon;
            let b = account(&p, 2.0 * d, &orders).unwrap().epsilon;
            assert!(b <= a);
            d *= 2.0;
        }
    }

    #[test]
    fn delta_rule_points() {
        assert!((delta_rule(10.0).unwrap() - 10f64.powf(-1.1)).abs() < 1e-15);
        assert!((delta_rule(10.0).unwrap() - 0.0794).abs() < 1e-4);
        assert!((delta_rule(1.47e8).unwrap() / 1e-9 - 1.0).abs() < 0.05);
        assert!((delta_rule(1.53e9).unwrap() / 7.9e-11 - 1.0).abs() < 0.05);
        assert!(delta_rule(1.0).is_err());
    }

    #[test]
    fn large_step_count_is_finite() {
        let p = MechanismParams::from_sizes(512.0, 2.85e6, 0.52, 1_000_000);
        let orders = default_orders();
        let total = compose(&rdp_subsampled_gaussian(p.q, p.z, &orders).unwrap(), p.steps);
        assert!(total.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn log_erfc_is_continuous_at_switch() {
        let below = libm::erfc(24.999_999).ln();
        let above = log_erfc(25.0);
        assert!((below - above).abs() < 1e-4);
        assert!(log_erfc(100.0).is_finite());
    }
}
