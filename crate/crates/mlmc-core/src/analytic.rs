//! Closed forms for the benchmark problems. These are the references the
//! test suites and reports compare estimates against; nothing here touches
//! the estimators themselves.

use crate::math;

/// Undiscounted call value `E[(X_T - K)^+]` for geometric Brownian motion
/// with drift `mu` and volatility `sigma`:
/// `x0 e^{mu t} Phi(d1) - k Phi(d2)`.
pub fn bs_call(x0: f64, k: f64, mu: f64, sigma: f64, t: f64) -> f64 {
    let fwd = x0 * math::exp(mu * t);
    if sigma <= 0.0 || t <= 0.0 || k <= 0.0 {
        // deterministic terminal value (or a strike below zero): plain payoff
        return (fwd - k).max(0.0);
    }
    let sd = sigma * math::sqrt(t);
    let d1 = (math::ln(x0 / k) + (mu + 0.5 * sigma * sigma) * t) / sd;
    fwd * math::norm_cdf(d1) - k * math::norm_cdf(d1 - sd)
}

/// Undiscounted put value `E[(K - X_T)^+]`, by parity with [`bs_call`].
pub fn bs_put(x0: f64, k: f64, mu: f64, sigma: f64, t: f64) -> f64 {
    bs_call(x0, k, mu, sigma, t) - x0 * math::exp(mu * t) + k
}

/// Large-loss probability of the Gaussian benchmark: the conditional mean is
/// standard normal, so `P(E[X|Y] > l) = Phi(-l)`.
pub fn gaussian_eta(l: f64) -> f64 {
    math::norm_cdf(-l)
}

/// Value-at-risk at level `a` of the Gaussian benchmark: `Phi^{-1}(1 - a)`.
pub fn gaussian_var(a: f64) -> f64 {
    math::norm_quantile(1.0 - a)
}

/// Conditional value-at-risk at level `a` of the Gaussian benchmark:
/// `phi(Phi^{-1}(1 - a)) / a` (the Mills-ratio form of the tail mean).
pub fn gaussian_cvar(a: f64) -> f64 {
    math::norm_pdf(gaussian_var(a)) / a
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn call_values_match_the_reference_solver() {
        // scipy.stats.norm frozen references
        assert_relative_eq!(
            bs_call(1.0, 1.0, 0.05, 0.2, 1.0),
            0.10986396449700797,
            max_relative = 1e-13
        );
        assert_relative_eq!(
            bs_call(1.0, 2.0, 0.05, 0.2, 1.0),
            5.044876643863611e-05,
            max_relative = 1e-12
        );
    }

    #[test]
    fn degenerate_volatility_reduces_to_the_forward() {
        assert_eq!(bs_call(1.0, 0.5, 0.05, 0.0, 1.0), math::exp(0.05) - 0.5);
        assert_eq!(bs_call(1.0, 2.0, 0.05, 0.0, 1.0), 0.0);
    }

    #[test]
    fn put_satisfies_parity() {
        let call = bs_call(1.0, 1.1, 0.05, 0.2, 1.0);
        let put = bs_put(1.0, 1.1, 0.05, 0.2, 1.0);
        assert_relative_eq!(call - put, math::exp(0.05) - 1.1, epsilon = 1e-15);
        assert!(put > 0.0);
    }

    #[test]
    fn gaussian_risk_closed_forms_match_references() {
        assert_relative_eq!(gaussian_eta(1.0), 0.15865525393145707, max_relative = 1e-13);
        assert_relative_eq!(gaussian_var(0.05), 1.6448536269514722, max_relative = 1e-12);
        assert_relative_eq!(gaussian_cvar(0.05), 2.0627128075074275, max_relative = 1e-12);
        assert_eq!(gaussian_var(0.5), 0.0);
        assert_relative_eq!(gaussian_eta(0.0), 0.5, epsilon = 1e-15);
    }
}
