//! Per-level sample statistics and the standard multilevel bookkeeping:
//! sample allocation across levels, the weak-error stopping rule, and
//! log-regression estimates of the decay rates.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{bad_state, invalid};
use crate::math;
use crate::{MlmcError, Result};

/// Streaming moments for one level of a multilevel estimator.
///
/// Merging two `LevelStats` for the same level is plain field-wise addition,
/// which is what lets parallel shards combine into the single-threaded result.
/// Moments up to order four are kept so kurtosis can be reported as a
/// variance-of-variance diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelStats {
    pub level: u32,
    pub count: u64,
    pub sum: f64,
    pub sum_sq: f64,
    pub sum_cube: f64,
    pub sum_quart: f64,
    pub cost_total: f64,
}

impl LevelStats {
    pub fn new(level: u32) -> Self {
        LevelStats { level, count: 0, sum: 0.0, sum_sq: 0.0, sum_cube: 0.0, sum_quart: 0.0, cost_total: 0.0 }
    }

    /// Records one sample value and its simulation cost.
    #[inline]
    pub fn push(&mut self, value: f64, cost: f64) {
        let v2 = value * value;
        self.count += 1;
        self.sum += value;
        self.sum_sq += v2;
        self.sum_cube += v2 * value;
        self.sum_quart += v2 * v2;
        self.cost_total += cost;
    }

    /// Field-wise merge of two shards for the same level.
    pub fn merge(&mut self, other: &LevelStats) {
        assert_eq!(self.level, other.level, "cannot merge stats across levels");
        self.count += other.count;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        self.sum_cube += other.sum_cube;
        self.sum_quart += other.sum_quart;
        self.cost_total += other.cost_total;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.sum / self.count as f64
    }

    /// Population variance `E[v^2] - E[v]^2`, clamped at zero against
    /// round-off. Needs at least two samples.
    pub fn variance(&self) -> f64 {
        assert!(self.count >= 2, "variance needs at least 2 samples, level {} has {}", self.level, self.count);
        let n = self.count as f64;
        let m = self.sum / n;
        (self.sum_sq / n - m * m).max(0.0)
    }

    /// Sample kurtosis `m4 / m2^2` of the recorded values; `None` when the
    /// level is degenerate (fewer than 4 samples or zero variance).
    pub fn kurtosis(&self) -> Option<f64> {
        if self.count < 4 {
            return None;
        }
        let n = self.count as f64;
        let m = self.sum / n;
        let m2 = (self.sum_sq / n - m * m).max(0.0);
        if m2 == 0.0 {
            return None;
        }
        let m4 = self.sum_quart / n - 4.0 * m * self.sum_cube / n + 6.0 * m * m * self.sum_sq / n
            - 3.0 * m * m * m * m;
        Some(m4 / (m2 * m2))
    }

    /// Average cost of one sample on this level.
    pub fn cost_per_sample(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.cost_total / self.count as f64
    }
}

/// Optimal-ish sample counts per level for a root-mean-square target `eps`.
///
/// Uses the classic cost-weighted allocation
/// `N_l = ceil(2 eps^-2 sqrt(V_l / C_l) * sum_m sqrt(V_m C_m))`,
/// which splits the error budget evenly between bias and variance and
/// guarantees `sum_l V_l / N_l <= eps^2 / 2`. Levels with zero variance get
/// no additional samples.
pub fn allocate_samples(levels: &[LevelStats], eps: f64) -> Result<Vec<u64>> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(invalid("eps must be positive and finite"));
    }
    if levels.is_empty() {
        return Err(bad_state("allocate_samples needs at least one level"));
    }
    for s in levels {
        if s.count < 2 {
            return Err(bad_state(alloc::format!(
                "allocate_samples needs pilot count >= 2 on every level, level {} has {}",
                s.level, s.count
            )));
        }
        if !(s.cost_per_sample() > 0.0) {
            return Err(bad_state(alloc::format!("level {} has non-positive cost", s.level)));
        }
    }
    let vs: Vec<f64> = levels.iter().map(|s| s.variance()).collect();
    let cs: Vec<f64> = levels.iter().map(|s| s.cost_per_sample()).collect();
    Ok(allocate_from_moments(&vs, &cs, eps))
}

/// Allocation formula on raw (variance, cost) vectors; lets drivers allocate
/// from guarded moment estimates without synthesizing stats objects.
pub(crate) fn allocate_from_moments(vs: &[f64], cs: &[f64], eps: f64) -> Vec<u64> {
    let mut weight_sum = 0.0;
    for (v, c) in vs.iter().zip(cs) {
        weight_sum += math::sqrt(v * c);
    }
    let scale = 2.0 / (eps * eps);
    vs.iter()
        .zip(cs)
        .map(|(&v, &c)| {
            if v == 0.0 {
                0
            } else {
                math::ceil(scale * math::sqrt(v / c) * weight_sum) as u64
            }
        })
        .collect()
}

/// Weak-error stopping rule based on extrapolating the last two level means
/// of a geometric refinement with weak rate `alpha`.
///
/// Declares the bias converged when
/// `max_{l in {L-1, L}} |mean_l| / (2^{alpha (L - l)} (2^alpha - 1)) <= eps / sqrt(2)`.
pub fn bias_converged(level_means: &[f64], eps: f64, alpha: f64) -> Result<bool> {
    if level_means.len() < 3 {
        return Err(invalid("bias_converged needs at least 3 levels"));
    }
    if !(eps > 0.0) || !(alpha > 0.0) {
        return Err(invalid("bias_converged needs positive eps and alpha"));
    }
    let l = level_means.len() - 1;
    let pow_a = math::powf(2.0, alpha);
    let denom = pow_a - 1.0;
    let last = math::abs(level_means[l]) / denom;
    let prev = math::abs(level_means[l - 1]) / (pow_a * denom);
    Ok(last.max(prev) <= eps / math::sqrt(2.0))
}

/// Log-regression estimates of the multilevel decay rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEstimates {
    /// Weak rate: `|E[Z_l]| ~ 2^(-alpha l)`.
    pub alpha: Option<f64>,
    /// Variance rate: `V[Z_l] ~ 2^(-beta l)`.
    pub beta: Option<f64>,
    /// Cost rate: `C_l ~ 2^(gamma l)`.
    pub gamma: Option<f64>,
    /// Level labels the regression ran over (inclusive).
    pub fit_levels: (u32, u32),
}

/// Fits `alpha`, `beta`, `gamma` by ordinary least squares on `log2` of the
/// absolute level means, variances and per-sample costs against the level
/// index. The first entry of `levels` estimates the base quantity rather
/// than a difference, so it is excluded from the fit.
///
/// Individual rates come back `None` when their regression is degenerate
/// (zero means or variances on the difference levels).
pub fn fit_rates(levels: &[LevelStats]) -> Result<RateEstimates> {
    if levels.len() < 3 {
        return Err(bad_state("fit_rates needs at least 3 levels (2 difference levels)"));
    }
    for s in levels {
        if s.count < 2 {
            return Err(bad_state(alloc::format!(
                "fit_rates needs count >= 2 on every level, level {} has {}",
                s.level, s.count
            )));
        }
    }
    let diff = &levels[1..];

    let mut mean_pts: (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
    let mut var_pts: (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
    let mut cost_pts: (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
    for s in diff {
        let x = s.level as f64;
        let m = math::abs(s.mean());
        if m > 0.0 {
            mean_pts.0.push(x);
            mean_pts.1.push(math::log2(m));
        }
        let v = s.variance();
        if v > 0.0 {
            var_pts.0.push(x);
            var_pts.1.push(math::log2(v));
        }
        let c = s.cost_per_sample();
        if c > 0.0 {
            cost_pts.0.push(x);
            cost_pts.1.push(math::log2(c));
        }
    }
    let slope_of = |pts: &(Vec<f64>, Vec<f64>)| -> Option<f64> {
        if pts.0.len() < 2 {
            return None;
        }
        math::ols_fit(&pts.0, &pts.1).map(|(_, slope)| slope)
    };
    Ok(RateEstimates {
        alpha: slope_of(&mean_pts).map(|s| -s),
        beta: slope_of(&var_pts).map(|s| -s),
        gamma: slope_of(&cost_pts),
        fit_levels: (diff[0].level, diff[diff.len() - 1].level),
    })
}

/// Convenience used by drivers: per-level means.
pub(crate) fn means(levels: &[LevelStats]) -> Vec<f64> {
    levels.iter().map(|s| s.mean()).collect()
}

pub(crate) fn check_finite(x: f64, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(MlmcError::InvalidState(alloc::format!("{what} is not finite ({x})").to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn stats_with(level: u32, values: &[f64], cost: f64) -> LevelStats {
        let mut s = LevelStats::new(level);
        for &v in values {
            s.push(v, cost);
        }
        s
    }

    #[test]
    fn variance_matches_population_formula() {
        let s = stats_with(1, &[1.0, 2.0, 3.0, 4.0], 1.0);
        // population variance of {1,2,3,4} is 1.25
        assert_relative_eq!(s.variance(), 1.25, epsilon = 1e-12);
        assert_relative_eq!(s.mean(), 2.5, epsilon = 1e-12);
    }

    #[test]
    fn merge_equals_single_pass() {
        let values: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let whole = stats_with(2, &values, 3.0);
        let mut a = stats_with(2, &values[..37], 3.0);
        let b = stats_with(2, &values[37..], 3.0);
        a.merge(&b);
        assert_eq!(a.count, whole.count);
        // same additions in the same order on both sides of the split point,
        // so the split sums agree with the single pass to round-off
        assert_relative_eq!(a.sum, whole.sum, epsilon = 1e-12);
        assert_relative_eq!(a.sum_quart, whole.sum_quart, max_relative = 1e-12);
        assert_eq!(a.cost_total, whole.cost_total);
    }

    #[test]
    fn kurtosis_of_gaussian_sample_is_near_three() {
        let mut s = LevelStats::new(1);
        let mut stream = crate::rng::StreamKey::new(5, crate::rng::Purpose::Estimation, 1, 0).stream();
        for _ in 0..200_000 {
            s.push(stream.normal(), 1.0);
        }
        let k = s.kurtosis().unwrap();
        assert!((k - 3.0).abs() < 0.1, "kurtosis {k}");
    }

    #[test]
    fn allocation_single_level_example() {
        // V = 1, C = 1, eps = 0.1 -> N = ceil(2 * 100 * 1 * 1) = 200
        let mut s = LevelStats::new(1);
        // two samples with mean 0 and population variance exactly 1
        s.push(1.0, 1.0);
        s.push(-1.0, 1.0);
        let n = allocate_samples(core::slice::from_ref(&s), 0.1).unwrap();
        assert_eq!(n, alloc::vec![200]);
    }

    #[test]
    fn allocation_two_level_example() {
        // V = (1, 0.25), C = (1, 4), eps = 0.1 -> N = (400, 100)
        let mut a = LevelStats::new(1);
        a.push(1.0, 1.0);
        a.push(-1.0, 1.0);
        let mut b = LevelStats::new(2);
        b.push(0.5, 4.0);
        b.push(-0.5, 4.0);
        let n = allocate_samples(&[a, b], 0.1).unwrap();
        assert_eq!(n, alloc::vec![400, 100]);
    }

    #[test]
    fn allocation_meets_variance_budget() {
        // randomized: whatever the stats, sum V_l / N_l <= eps^2 / 2
        let mut stream = crate::rng::StreamKey::new(9, crate::rng::Purpose::Pilot, 0, 0).stream();
        for round in 0..50 {
            let eps = 0.01 + 0.01 * round as f64;
            let levels: Vec<LevelStats> = (1..=4)
                .map(|l| {
                    let mut s = LevelStats::new(l);
                    for _ in 0..100 {
                        s.push(stream.normal() * (1.5 / l as f64), (l * l) as f64);
                    }
                    s
                })
                .collect();
            let n = allocate_samples(&levels, eps).unwrap();
            let lhs: f64 = levels
                .iter()
                .zip(&n)
                .filter(|(_, &n)| n > 0)
                .map(|(s, &n)| s.variance() / n as f64)
                .sum();
            assert!(lhs <= eps * eps / 2.0 + 1e-15, "budget violated: {lhs} vs {}", eps * eps / 2.0);
        }
    }

    #[test]
    fn allocation_rejects_undersampled_levels() {
        let mut s = LevelStats::new(1);
        s.push(1.0, 1.0);
        assert!(allocate_samples(core::slice::from_ref(&s), 0.1).is_err());
    }

    #[test]
    fn bias_rule_geometric_means() {
        // means (4d, 2d, d) with alpha = 1: extrapolated bias is exactly d
        let d = 0.01;
        let means = [4.0 * d, 2.0 * d, d];
        assert!(bias_converged(&means, d * core::f64::consts::SQRT_2 + 1e-12, 1.0).unwrap());
        assert!(!bias_converged(&means, d * core::f64::consts::SQRT_2 - 1e-6, 1.0).unwrap());
    }

    #[test]
    fn bias_rule_constant_payoff_is_converged() {
        let means = [5.0, 0.0, 0.0];
        assert!(bias_converged(&means, 1e-9, 1.0).unwrap());
    }

    #[test]
    fn rates_recover_synthetic_decays() {
        // variance exactly 2^-l, |mean| exactly 3 * 2^-l, cost exactly 2^l
        let levels: Vec<LevelStats> = (1..=6)
            .map(|l| {
                let mut s = LevelStats::new(l);
                let sd = math::powf(2.0, -0.5 * l as f64);
                let m = 3.0 * math::powf(2.0, -(l as f64));
                // two points with mean m and population variance sd^2 = 2^-l
                s.push(m + sd, math::powf(2.0, l as f64));
                s.push(m - sd, math::powf(2.0, l as f64));
                s
            })
            .collect();
        let r = fit_rates(&levels).unwrap();
        assert_relative_eq!(r.alpha.unwrap(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(r.beta.unwrap(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(r.gamma.unwrap(), 1.0, epsilon = 1e-9);
        assert_eq!(r.fit_levels, (2, 6));
    }

    #[test]
    fn rates_handle_degenerate_levels() {
        let levels: Vec<LevelStats> = (1..=3)
            .map(|l| {
                let mut s = LevelStats::new(l);
                s.push(0.0, 1.0);
                s.push(0.0, 1.0);
                s
            })
            .collect();
        let r = fit_rates(&levels).unwrap();
        assert!(r.alpha.is_none());
        assert!(r.beta.is_none());
        assert!(r.gamma.is_some());
    }
}
