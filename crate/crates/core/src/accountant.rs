//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! For sampling rate `q` and noise multiplier `σ`, the per-step RDP at order
//! `α` is `ln(A_α) / (α - 1)` where
//!
//! ```text
//! A_α = E_{z ~ N(0, σ²)} [ (1 - q + q·exp((2z - 1) / (2σ²)))^α ]
//! ```
//!
//! Integer orders use the finite binomial expansion of `A_α`; fractional
//! orders use the two-sided series split at
//! `z₀ = σ²·ln(1/q - 1) + 1/2`. Both are evaluated in log space.
//! Composition over steps is linear, and conversion to (ε, δ) uses
//! `ε = min_α rdp(α) + ln(1/δ) / (α - 1)`.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

/// Orders evaluated unless the caller supplies its own.
pub const DEFAULT_ORDERS: [f64; 19] = [
    1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 12.0, 16.0, 20.0, 24.0, 28.0, 32.0,
    48.0, 64.0,
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AccountantError {
    /// σ = 0: the mechanism releases the exact sum and gives no privacy.
    #[error("noise multiplier is zero: privacy loss is unbounded")]
    Unbounded,
    #[error("invalid accountant input: {0}")]
    Invalid(String),
}

/// Cumulative RDP per order for a fixed mechanism and step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub orders: Vec<f64>,
    pub rdp: Vec<f64>,
    pub steps: u64,
    pub sampling_rate: f64,
    pub noise_multiplier: f64,
}

/// An (ε, δ) guarantee and how it was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpend {
    /// `f64::INFINITY` when the mechanism adds no noise.
    pub epsilon: f64,
    pub delta: f64,
    pub orders_evaluated: Vec<f64>,
    pub optimal_order: f64,
    pub steps: u64,
    pub sampling_rate: f64,
}

impl PrivacySpend {
    pub fn is_unbounded(&self) -> bool {
        self.epsilon.is_infinite()
    }
}

/// RDP of `steps` compositions of the subsampled Gaussian at each order.
pub fn rdp_subsampled_gaussian(
    q: f64,
    sigma: f64,
    steps: u64,
    orders: &[f64],
) -> Result<RdpCurve, AccountantError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(AccountantError::Invalid(format!("sampling rate {q} not in (0,1]")));
    }
    if !(sigma >= 0.0) {
        return Err(AccountantError::Invalid(format!("noise multiplier {sigma} < 0")));
    }
    if sigma == 0.0 {
        return Err(AccountantError::Unbounded);
    }
    if steps == 0 {
        return Err(AccountantError::Invalid("steps must be >= 1".into()));
    }
    check_orders(orders)?;
    let rdp = orders
        .iter()
        .map(|&alpha| per_step_rdp(q, sigma, alpha) * steps as f64)
        .collect();
    Ok(RdpCurve {
        orders: orders.to_vec(),
        rdp,
        steps,
        sampling_rate: q,
        noise_multiplier: sigma,
    })
}

/// Converts an RDP curve to the tightest (ε, δ) over its orders.
pub fn rdp_to_epsilon(curve: &RdpCurve, delta: f64) -> Result<PrivacySpend, AccountantError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AccountantError::Invalid(format!("delta {delta} not in (0,1)")));
    }
    if curve.orders.is_empty() {
        return Err(AccountantError::Invalid("no orders to evaluate".into()));
    }
    if curve.orders.len() != curve.rdp.len() {
        return Err(AccountantError::Invalid("orders and rdp lengths differ".into()));
    }
    check_orders(&curve.orders)?;
    let log_inv_delta = -delta.ln();
    let (epsilon, optimal_order) = curve
        .orders
        .iter()
        .zip(&curve.rdp)
        .map(|(&alpha, &rdp)| (rdp + log_inv_delta / (alpha - 1.0), alpha))
        .fold((f64::INFINITY, curve.orders[0]), |best, cand| {
            if cand.0 < best.0 {
                cand
            } else {
                best
            }
        });
    Ok(PrivacySpend {
        epsilon,
        delta,
        orders_evaluated: curve.orders.clone(),
        optimal_order,
        steps: curve.steps,
        sampling_rate: curve.sampling_rate,
    })
}

/// ε for a DP-SGD run; σ = 0 yields an unbounded spend instead of an error.
pub fn compute_epsilon(
    q: f64,
    sigma: f64,
    steps: u64,
    delta: f64,
    orders: &[f64],
) -> Result<PrivacySpend, AccountantError> {
    match rdp_subsampled_gaussian(q, sigma, steps, orders) {
        Ok(curve) => rdp_to_epsilon(&curve, delta),
        Err(AccountantError::Unbounded) => {
            check_orders(orders)?;
            Ok(PrivacySpend {
                epsilon: f64::INFINITY,
                delta,
                orders_evaluated: orders.to_vec(),
                optimal_order: orders[0],
                steps,
                sampling_rate: q,
            })
        }
        Err(e) => Err(e),
    }
}

fn check_orders(orders: &[f64]) -> Result<(), AccountantError> {
    if orders.is_empty() {
        return Err(AccountantError::Invalid("no orders to evaluate".into()));
    }
    if let Some(bad) = orders.iter().find(|a| !(**a > 1.0 && a.is_finite())) {
        return Err(AccountantError::Invalid(format!("order {bad} must be > 1")));
    }
    Ok(())
}

/// Per-step RDP at one order.
pub fn per_step_rdp(q: f64, sigma: f64, alpha: f64) -> f64 {
    if q == 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    log_a(q, sigma, alpha) / (alpha - 1.0)
}

fn log_a(q: f64, sigma: f64, alpha: f64) -> f64 {
    if alpha.fract() == 0.0 {
        log_a_int(q, sigma, alpha as u64)
    } else {
        log_a_frac(q, sigma, alpha)
    }
}

fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let two_var = 2.0 * sigma * sigma;
    let mut log_binom = 0.0f64;
    let mut acc = f64::NEG_INFINITY;
    for i in 0..=alpha {
        if i > 0 {
            log_binom += ((alpha - i + 1) as f64).ln() - (i as f64).ln();
        }
        let fi = i as f64;
        let term = log_binom + fi * log_q + (alpha - i) as f64 * log_1mq + (fi * fi - fi) / two_var;
        acc = log_add(acc, term);
    }
    acc
}

fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let mut log_a0 = f64::NEG_INFINITY;
    let mut log_a1 = f64::NEG_INFINITY;
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let two_var = 2.0 * sigma * sigma;
    let sqrt2_sigma = std::f64::consts::SQRT_2 * sigma;

    // Generalized binomial coefficient C(α, i), tracked as sign and log-magnitude.
    let mut log_coef = 0.0f64;
    let mut coef_positive = true;
    let mut i = 0u64;
    loop {
        let fi = i as f64;
        let j = alpha - fi;
        let log_t0 = log_coef + fi * log_q + j * log_1mq;
        let log_t1 = log_coef + j * log_q + fi * log_1mq;
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / sqrt2_sigma);
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / sqrt2_sigma);
        let log_s0 = log_t0 + (fi * fi - fi) / two_var + log_e0;
        let log_s1 = log_t1 + (j * j - j) / two_var + log_e1;
        if coef_positive {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        if log_s0.max(log_s1) < -30.0 || i > 100_000 {
            break;
        }
        // C(α, i+1) = C(α, i)·(α - i)/(i + 1)
        let ratio = (alpha - fi) / (fi + 1.0);
        if ratio < 0.0 {
            coef_positive = !coef_positive;
        }
        log_coef += ratio.abs().ln();
        i += 1;
    }
    log_add(log_a0, log_a1)
}

/// `ln(e^a + e^b)`.
fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(e^a - e^b)` for `a >= b`.
fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

/// `ln(erfc(x))`, using the asymptotic expansion where `erfc` underflows.
fn log_erfc(x: f64) -> f64 {
    if x < 25.0 {
        return erfc(x).ln();
    }
    let x2 = x * x;
    // erfc(x) ~ exp(-x²)/(x√π) · (1 - 1/(2x²) + 3/(4x⁴) - 15/(8x⁶) + 105/(16x⁸))
    let series = 1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2.powi(3))
        + 105.0 / (16.0 * x2.powi(4));
    -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln() + series.ln()
}
