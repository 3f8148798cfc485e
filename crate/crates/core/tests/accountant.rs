use homefl::accountant::{
    compute_epsilon, per_step_rdp, rdp_subsampled_gaussian, rdp_to_epsilon, AccountantError, DEFAULT_ORDERS,
};
use proptest::prelude::*;

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Per-step RDP by direct numerical integration of
/// E_{z ~ N(0, σ²)} [((1-q) + q·exp((2z-1)/(2σ²)))^α], Simpson's rule in log space.
fn quadrature_rdp(q: f64, sigma: f64, alpha: f64) -> f64 {
    let var = sigma * sigma;
    let lo = -30.0 * sigma;
    let hi = alpha + 30.0 * sigma;
    let n = 400_000usize;
    let h = (hi - lo) / n as f64;
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    let terms: Vec<f64> = (0..=n)
        .map(|i| {
            let z = lo + i as f64 * h;
            let log_ratio = (2.0 * z - 1.0) / (2.0 * var);
            // ln((1-q) + q e^r) computed stably
            let mix = log_sum_exp(&[(1.0 - q).ln(), q.ln() + log_ratio]);
            let w: f64 = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w.ln() + log_norm - z * z / (2.0 * var) + alpha * mix
        })
        .collect();
    let log_a = log_sum_exp(&terms) + (h / 3.0).ln();
    log_a / (alpha - 1.0)
}

#[test]
fn per_step_rdp_matches_quadrature_over_default_orders() {
    let (q, sigma) = (0.01, 1.3);
    for &alpha in &DEFAULT_ORDERS {
        let got = per_step_rdp(q, sigma, alpha);
        let want = quadrature_rdp(q, sigma, alpha);
        let rel = (got - want).abs() / want.abs();
        assert!(rel < 1e-6, "alpha {alpha}: {got} vs {want} (rel {rel})");
    }
}

#[test]
fn per_step_rdp_matches_quadrature_at_reference_rate() {
    let q = 32.0 / 6920.0;
    for sigma in [0.5, 1.3] {
        for alpha in [1.5, 2.0, 4.0, 10.0] {
            let got = per_step_rdp(q, sigma, alpha);
            let want = quadrature_rdp(q, sigma, alpha);
            assert!((got - want).abs() / want < 1e-6, "sigma {sigma} alpha {alpha}: {got} vs {want}");
        }
    }
}

#[test]
fn full_batch_is_the_plain_gaussian_mechanism() {
    let (sigma, steps) = (1.1, 250u64);
    let curve = rdp_subsampled_gaussian(1.0, sigma, steps, &DEFAULT_ORDERS).unwrap();
    for (alpha, rdp) in curve.orders.iter().zip(&curve.rdp) {
        let want = alpha * steps as f64 / (2.0 * sigma * sigma);
        assert!((rdp - want).abs() <= 1e-12 * want);
    }
    let delta = 1e-5;
    let spend = rdp_to_epsilon(&curve, delta).unwrap();
    let best = DEFAULT_ORDERS
        .iter()
        .map(|a| a * steps as f64 / (2.0 * sigma * sigma) + (1.0 / delta).ln() / (a - 1.0))
        .fold(f64::INFINITY, f64::min);
    assert!((spend.epsilon - best).abs() <= 1e-12 * best);
}

#[test]
fn composition_is_linear_in_steps() {
    let one = rdp_subsampled_gaussian(0.004624, 0.5, 1, &DEFAULT_ORDERS).unwrap();
    for steps in [2u64, 17, 28_080] {
        let many = rdp_subsampled_gaussian(0.004624, 0.5, steps, &DEFAULT_ORDERS).unwrap();
        for (a, b) in one.rdp.iter().zip(&many.rdp) {
            assert_eq!(*b, a * steps as f64);
        }
    }
}

#[test]
fn reference_noise_levels_are_ordered() {
    let q = 32.0 / 6920.0;
    let steps = 28_080;
    let eps: Vec<f64> = [0.3, 0.5, 1.3]
        .iter()
        .map(|&s| compute_epsilon(q, s, steps, 1e-4, &DEFAULT_ORDERS).unwrap().epsilon)
        .collect();
    assert!(eps[0] > eps[1] && eps[1] > eps[2], "{eps:?}");
}

#[test]
fn zero_noise_is_unbounded_and_bad_input_is_rejected() {
    let spend = compute_epsilon(0.01, 0.0, 10, 1e-5, &DEFAULT_ORDERS).unwrap();
    assert!(spend.is_unbounded());
    assert_eq!(
        rdp_subsampled_gaussian(0.01, 0.0, 10, &DEFAULT_ORDERS),
        Err(AccountantError::Unbounded)
    );
    assert!(compute_epsilon(0.0, 1.0, 10, 1e-5, &DEFAULT_ORDERS).is_err());
    assert!(compute_epsilon(1.5, 1.0, 10, 1e-5, &DEFAULT_ORDERS).is_err());
    assert!(compute_epsilon(0.1, 1.0, 10, 1.0, &DEFAULT_ORDERS).is_err());
    assert!(compute_epsilon(0.1, 1.0, 10, 1e-5, &[1.0]).is_err());
    assert!(compute_epsilon(0.1, 1.0, 10, 1e-5, &[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn epsilon_decreases_with_noise(q in 1e-4f64..0.2, sigma in 0.3f64..5.0, bump in 0.05f64..2.0, steps in 1u64..5000) {
        let a = compute_epsilon(q, sigma, steps, 1e-5, &DEFAULT_ORDERS).unwrap().epsilon;
        let b = compute_epsilon(q, sigma + bump, steps, 1e-5, &DEFAULT_ORDERS).unwrap().epsilon;
        prop_assert!(b < a);
    }

    #[test]
    fn epsilon_grows_with_steps_and_rate(q in 1e-4f64..0.2, sigma in 0.3f64..5.0, steps in 1u64..5000) {
        let base = compute_epsilon(q, sigma, steps, 1e-5, &DEFAULT_ORDERS).unwrap().epsilon;
        let longer = compute_epsilon(q, sigma, steps + 1, 1e-5, &DEFAULT_ORDERS).unwrap().epsilon;
        let denser = compute_epsilon((q * 1.5).min(1.0), sigma, steps, 1e-5, &DEFAULT_ORDERS).unwrap().epsilon;
        prop_assert!(longer > base);
        prop_assert!(denser > base);
    }

    #[test]
    fn epsilon_shrinks_as_delta_grows(q in 1e-4f64..0.2, sigma in 0.3f64..5.0, steps in 1u64..5000) {
        let tight = compute_epsilon(q, sigma, steps, 1e-6, &DEFAULT_ORDERS).unwrap().epsilon;
        let loose = compute_epsilon(q, sigma, steps, 1e-3, &DEFAULT_ORDERS).unwrap().epsilon;
        prop_assert!(loose < tight);
    }

    #[test]
    fn per_step_rdp_increases_with_order(q in 1e-4f64..0.5, sigma in 0.5f64..5.0) {
        let values: Vec<f64> = DEFAULT_ORDERS.iter().map(|&a| per_step_rdp(q, sigma, a)).collect();
        for w in values.windows(2) {
            prop_assert!(w[1] >= w[0] * (1.0 - 1e-9));
        }
    }
}
