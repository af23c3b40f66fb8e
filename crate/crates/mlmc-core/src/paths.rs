//! Coupled fine/coarse Euler paths from shared Brownian increments.
//!
//! The coarse path of a level sees the sums of M consecutive fine increments,
//! never fresh noise; that coupling is what turns the level difference into a
//! control variate. Everything here is a pure function of (model, config,
//! theta, key), which is the whole reproducibility story.

use alloc::vec::Vec;

use crate::error::invalid;
use crate::math;
use crate::model::{girsanov_weight, MlmcConfig, Payoff, SdeModel};
use crate::rng::StreamKey;
use crate::Result;

/// Terminal data of one coupled fine/coarse path pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSample {
    /// Terminal state on the fine grid of `level`.
    pub x_fine: Vec<f64>,
    /// Terminal state on the grid of `level - 1`; `None` on the first level.
    pub x_coarse: Option<Vec<f64>>,
    /// Terminal Brownian value (sum of all fine increments).
    pub w_t: Vec<f64>,
    pub level: u32,
    /// Fine plus coarse step evaluations.
    pub cost: f64,
}

/// Weighted payoff pair from one coupled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSample {
    /// `G(x_fine)` times the likelihood weight for `theta`.
    pub fine: f64,
    /// `G(x_coarse)` times the same weight; `None` on the first level.
    pub coarse: Option<f64>,
    pub w_t: Vec<f64>,
    pub cost: f64,
}

/// One Euler step of the theta-shifted dynamics, folded so that the shift
/// rides on the noise term: `x += h b(x) + sum_j sigma_j(x) (theta_j h + dw_j)`.
/// With `theta = 0` this is bit-for-bit the unshifted update, which is what
/// makes zero-shift importance sampling exactly reproduce the plain estimator.
#[inline]
fn euler_step(
    model: &SdeModel,
    x: &mut [f64],
    h: f64,
    theta: &[f64],
    dw: &[f64],
    drift: &mut [f64],
    col: &mut [f64],
    incr: &mut [f64],
) {
    let d = x.len();
    model.eval_drift(x, drift);
    for i in 0..d {
        incr[i] = h * drift[i];
    }
    for (j, &tj) in theta.iter().enumerate() {
        model.eval_diffusion_col(j, x, col);
        let scale = tj * h + dw[j];
        for i in 0..d {
            incr[i] += col[i] * scale;
        }
    }
    for i in 0..d {
        x[i] += incr[i];
    }
}

/// Simulates the coupled pair at `key.level` under the theta-shifted drift.
///
/// The fine path takes `base_steps * M^(level-1)` Euler steps; on level >= 2
/// the coarse path advances once per M fine steps using their summed
/// increments. Deterministic in `key`.
pub fn simulate_coupled(
    model: &SdeModel,
    cfg: &MlmcConfig,
    theta: &[f64],
    key: StreamKey,
) -> Result<CoupledSample> {
    cfg.validate()?;
    let level = key.level;
    if level < 1 || level > cfg.max_level {
        return Err(invalid(alloc::format!(
            "level {level} outside [1, {}]",
            cfg.max_level
        )));
    }
    let d = model.dim_state();
    let q = model.dim_noise();
    if theta.len() != q {
        return Err(invalid("theta dimension must match the noise dimension"));
    }
    let t = model.horizon();
    let n_f = cfg.steps_at(level);
    let h_f = t / n_f as f64;
    let sqrt_h_f = math::sqrt(h_f);

    let mut stream = key.stream();
    let mut x_f = model.x0().to_vec();
    let mut w = alloc::vec![0.0; q];
    let mut dw = alloc::vec![0.0; q];
    let mut drift = alloc::vec![0.0; d];
    let mut col = alloc::vec![0.0; d];
    let mut incr = alloc::vec![0.0; d];

    if level == 1 {
        for _ in 0..n_f {
            for j in 0..q {
                dw[j] = sqrt_h_f * stream.normal();
                w[j] += dw[j];
            }
            euler_step(model, &mut x_f, h_f, theta, &dw, &mut drift, &mut col, &mut incr);
        }
        return Ok(CoupledSample { x_fine: x_f, x_coarse: None, w_t: w, level, cost: n_f as f64 });
    }

    let m = cfg.refine_factor as u64;
    let n_c = cfg.steps_at(level - 1);
    let h_c = t / n_c as f64;
    let mut x_c = model.x0().to_vec();
    let mut dw_c = alloc::vec![0.0; q];
    for _ in 0..n_c {
        for v in dw_c.iter_mut() {
            *v = 0.0;
        }
        for _ in 0..m {
            for j in 0..q {
                dw[j] = sqrt_h_f * stream.normal();
                w[j] += dw[j];
                dw_c[j] += dw[j];
            }
            euler_step(model, &mut x_f, h_f, theta, &dw, &mut drift, &mut col, &mut incr);
        }
        euler_step(model, &mut x_c, h_c, theta, &dw_c, &mut drift, &mut col, &mut incr);
    }
    Ok(CoupledSample {
        x_fine: x_f,
        x_coarse: Some(x_c),
        w_t: w,
        level,
        cost: (n_f + n_c) as f64,
    })
}

/// Simulates one coupled sample and returns both payoff values multiplied by
/// the likelihood weight for `theta`. Fine and coarse members share the
/// weight: both come from the same Brownian path and the same shift.
pub fn level_payoff_difference(
    model: &SdeModel,
    payoff: &Payoff,
    cfg: &MlmcConfig,
    theta: &[f64],
    key: StreamKey,
) -> Result<LevelSample> {
    let s = simulate_coupled(model, cfg, theta, key)?;
    let weight = girsanov_weight(theta, &s.w_t, model.horizon())?;
    Ok(LevelSample {
        fine: payoff.eval(&s.x_fine) * weight,
        coarse: s.x_coarse.as_deref().map(|x| payoff.eval(x) * weight),
        w_t: s.w_t,
        cost: s.cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;
    use approx::assert_relative_eq;

    fn gbm() -> SdeModel {
        SdeModel::gbm(1.0, 0.05, 0.2, 1.0).unwrap()
    }

    fn cfg() -> MlmcConfig {
        MlmcConfig { refine_factor: 2, base_steps: 2, max_level: 12, seed: 11 }
    }

    fn key(level: u32, replicate: u64) -> StreamKey {
        StreamKey::new(11, Purpose::Estimation, level, replicate)
    }

    #[test]
    fn zero_diffusion_is_the_deterministic_euler_recursion() {
        let mu = 0.05;
        let m = SdeModel::gbm(1.0, mu, 0.0, 1.0).unwrap();
        let c = cfg();
        for level in [1u32, 3] {
            let n = c.steps_at(level);
            let h = c.h_at(level, 1.0);
            // reference fold written exactly like the simulator's update
            let mut expected = 1.0f64;
            for _ in 0..n {
                expected += h * (mu * expected);
            }
            let mut terminals = alloc::vec![];
            for r in 0..5 {
                let s = simulate_coupled(&m, &c, &[0.0], key(level, r)).unwrap();
                assert_eq!(s.x_fine[0], expected);
                terminals.push(s.x_fine[0]);
            }
            // no noise, no spread
            assert!(terminals.iter().all(|&v| v == terminals[0]));
            assert_relative_eq!(
                expected,
                math::powf(1.0 + mu * h, n as f64),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn additive_model_couples_coarse_to_fine_increment_sums() {
        // dX = dW: terminal states are pure increment sums, so fine, coarse
        // and w_T must all agree up to summation order
        use crate::model::StateFn;
        use alloc::sync::Arc;
        let drift: StateFn = Arc::new(|_, out| out[0] = 0.0);
        let colf: StateFn = Arc::new(|_, out| out[0] = 1.0);
        let m = SdeModel::new(drift, alloc::vec![colf], alloc::vec![0.0], 1.0).unwrap();
        let c = cfg();
        for r in 0..20 {
            let s = simulate_coupled(&m, &c, &[0.0], key(2, r)).unwrap();
            assert_relative_eq!(s.x_fine[0], s.w_t[0], epsilon = 1e-13);
            assert_relative_eq!(s.x_coarse.as_ref().unwrap()[0], s.w_t[0], epsilon = 1e-13);
        }
    }

    #[test]
    fn identical_keys_reproduce_identical_samples() {
        let m = gbm();
        let c = cfg();
        let a = simulate_coupled(&m, &c, &[0.3], key(3, 17)).unwrap();
        let b = simulate_coupled(&m, &c, &[0.3], key(3, 17)).unwrap();
        assert_eq!(a, b);
        let other = simulate_coupled(&m, &c, &[0.3], key(3, 18)).unwrap();
        assert_ne!(a.x_fine, other.x_fine);
    }

    #[test]
    fn cost_is_the_exact_step_count() {
        let m = gbm();
        let c = cfg();
        assert_eq!(simulate_coupled(&m, &c, &[0.0], key(1, 0)).unwrap().cost, 2.0);
        // level 4: 16 fine + 8 coarse
        assert_eq!(simulate_coupled(&m, &c, &[0.0], key(4, 0)).unwrap().cost, 24.0);
    }

    #[test]
    fn rejects_bad_level_and_theta() {
        let m = gbm();
        let c = cfg();
        assert!(simulate_coupled(&m, &c, &[0.0], key(0, 0)).is_err());
        assert!(simulate_coupled(&m, &c, &[0.0], key(13, 0)).is_err());
        assert!(simulate_coupled(&m, &c, &[0.0, 1.0], key(1, 0)).is_err());
    }

    #[test]
    fn gbm_terminal_mean_matches_the_euler_closed_form() {
        // Euler preserves the mean recursion exactly: E[X_n] = x0 (1 + mu h)^n
        let m = gbm();
        let c = cfg();
        let level = 4;
        let n = 1_000_000u64;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for r in 0..n {
            let s = simulate_coupled(&m, &c, &[0.0], key(level, r)).unwrap();
            sum += s.x_fine[0];
            sum_sq += s.x_fine[0] * s.x_fine[0];
        }
        let mean = sum / n as f64;
        let se = math::sqrt((sum_sq / n as f64 - mean * mean) / n as f64);
        let h = c.h_at(level, 1.0);
        let exact_euler = math::powf(1.0 + 0.05 * h, c.steps_at(level) as f64);
        assert!((mean - exact_euler).abs() <= 3.0 * se, "mean {mean} vs {exact_euler}, se {se}");
        // and against the continuous-time limit, allowing the known O(h) bias
        let exact = math::exp(0.05);
        assert!((mean - exact).abs() <= 3.0 * se + (exact - exact_euler).abs());
    }

    #[test]
    fn weighted_payoffs_share_one_weight() {
        let m = gbm();
        let c = cfg();
        let payoff = Payoff::call(1.0);
        let theta = [0.8];
        let s = simulate_coupled(&m, &c, &theta, key(3, 5)).unwrap();
        let ls = level_payoff_difference(&m, &payoff, &c, &theta, key(3, 5)).unwrap();
        let w = girsanov_weight(&theta, &s.w_t, 1.0).unwrap();
        assert_eq!(ls.fine, payoff.eval(&s.x_fine) * w);
        assert_eq!(ls.coarse.unwrap(), payoff.eval(s.x_coarse.as_ref().unwrap()) * w);
        assert_eq!(ls.w_t, s.w_t);
    }

    #[test]
    fn zero_theta_payoff_is_unweighted() {
        let m = gbm();
        let c = cfg();
        let payoff = Payoff::call(1.0);
        let s = simulate_coupled(&m, &c, &[0.0], key(2, 9)).unwrap();
        let ls = level_payoff_difference(&m, &payoff, &c, &[0.0], key(2, 9)).unwrap();
        assert_eq!(ls.fine, payoff.eval(&s.x_fine));
    }

    #[test]
    fn constant_payoff_differences_vanish() {
        let m = gbm();
        let c = cfg();
        let payoff = Payoff::constant(2.5);
        for r in 0..50 {
            let ls = level_payoff_difference(&m, &payoff, &c, &[0.0], key(3, r)).unwrap();
            assert_eq!(ls.fine - ls.coarse.unwrap(), 0.0);
        }
    }

    #[test]
    fn level_means_telescope_between_adjacent_levels() {
        // E[G(coarse at level 2)] == E[G(fine at level 1)]; independent
        // estimates of both must agree within combined 3 standard errors
        let m = gbm();
        let c = cfg();
        let payoff = Payoff::call(1.0);
        let n = 100_000u64;
        let acc = |level: u32, use_coarse: bool| {
            let (mut s1, mut s2) = (0.0, 0.0);
            for r in 0..n {
                let cs = simulate_coupled(&m, &c, &[0.0], key(level, r)).unwrap();
                let x = if use_coarse { cs.x_coarse.unwrap() } else { cs.x_fine };
                let g = payoff.eval(&x);
                s1 += g;
                s2 += g * g;
            }
            let mean = s1 / n as f64;
            (mean, (s2 / n as f64 - mean * mean) / n as f64)
        };
        let (fine_1, var_1) = acc(1, false);
        let (coarse_2, var_2) = acc(2, true);
        let se = math::sqrt(var_1 + var_2);
        assert!((fine_1 - coarse_2).abs() <= 3.0 * se, "{fine_1} vs {coarse_2} (se {se})");
    }

    #[test]
    fn call_correction_variance_decays_at_the_strong_rate() {
        let m = gbm();
        let c = cfg();
        let payoff = Payoff::call(1.0);
        let n = 100_000u64;
        let mut levels = alloc::vec![];
        for level in 1..=6u32 {
            let mut st = crate::stats::LevelStats::new(level);
            for r in 0..n {
                let ls = level_payoff_difference(&m, &payoff, &c, &[0.0], key(level, r)).unwrap();
                let v = ls.fine - ls.coarse.unwrap_or(0.0);
                st.push(v, ls.cost);
            }
            levels.push(st);
        }
        let rates = crate::stats::fit_rates(&levels).unwrap();
        let beta = rates.beta.unwrap();
        assert!((0.7..=1.3).contains(&beta), "beta {beta}");
    }
}
