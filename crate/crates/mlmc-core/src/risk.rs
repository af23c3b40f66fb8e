//! Nested-expectation risk estimators: the probability of a large
//! conditional loss, estimated by plain nested Monte Carlo, by a multilevel
//! scheme over inner sample counts, or by the adaptive variant that spends
//! inner samples only where the conditional mean sits near the threshold.
//! VaR and CVaR searches are built on top of the adaptive estimator.
//!
//! Conventions: levels are 0-based (level l uses `n0 * 2^l` inner samples on
//! its fine side), the coarse member replays the level `l - 1` procedure on
//! the same inner draw sequence (the first half outright under the uniform
//! schedule, the full l - 1 growth rule under the adaptive one), the level-0
//! coarse term is identically zero, and the Heaviside step is strict:
//! `H(0) = 0`.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{bad_state, invalid};
use crate::exec::{chunked, Executor};
use crate::math;
use crate::mlmc::{self, merge_stats, MlmcEstimate, RunOptions};
use crate::rng::{Purpose, Stream, StreamKey};
use crate::stats::{LevelStats, RateEstimates};
use crate::{MlmcError, Result};

/// Draws one outer scenario from the stream.
pub type ScenarioFn = Arc<dyn Fn(&mut Stream) -> f64 + Send + Sync>;
/// Draws one conditional loss sample given a scenario.
pub type LossFn = Arc<dyn Fn(f64, &mut Stream) -> f64 + Send + Sync>;

/// Strict Heaviside step used throughout: 1 above zero, 0 at and below it.
#[inline]
pub fn heaviside(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Closed-form conditional moments for benchmark problems; lets tests and
/// the "perfect adaptation" mode bypass moment estimation.
#[derive(Clone)]
pub struct RiskOracle {
    pub cond_mean: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub cond_sd: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// `eta(l) = P(E[X|Y] > l)`.
    pub eta_at: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

/// A nested expectation `eta = P(E[X|Y] > threshold)` described by its two
/// sampling layers.
#[derive(Clone)]
pub struct RiskProblem {
    outer: ScenarioFn,
    inner: LossFn,
    pub threshold: f64,
    portfolio_size: u32,
    oracle: Option<RiskOracle>,
}

impl core::fmt::Debug for RiskProblem {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("RiskProblem")
            .field("threshold", &self.threshold)
            .field("portfolio_size", &self.portfolio_size)
            .field("oracle", &self.oracle.is_some())
            .finish_non_exhaustive()
    }
}

impl RiskProblem {
    pub fn new(
        outer: ScenarioFn,
        inner: LossFn,
        threshold: f64,
        portfolio_size: u32,
        oracle: Option<RiskOracle>,
    ) -> Result<Self> {
        if !threshold.is_finite() {
            return Err(invalid("threshold must be finite"));
        }
        if portfolio_size == 0 {
            return Err(invalid("portfolio_size must be at least 1"));
        }
        Ok(RiskProblem { outer, inner, threshold, portfolio_size, oracle })
    }

    /// Gaussian benchmark: `Y ~ N(0,1)`, `X | Y = y ~ N(y, 1)`, so the
    /// conditional mean is `Y` itself and every quantity has a closed form.
    pub fn gaussian(threshold: f64) -> Self {
        RiskProblem {
            outer: Arc::new(|s: &mut Stream| s.normal()),
            inner: Arc::new(|y: f64, s: &mut Stream| y + s.normal()),
            threshold,
            portfolio_size: 1,
            oracle: Some(gaussian_oracle()),
        }
    }

    /// Portfolio variant of the Gaussian benchmark: one underlying draw per
    /// inner sample feeds `k` identical payoffs whose average is returned.
    /// Statistically identical to [`RiskProblem::gaussian`], but the cost
    /// accounting charges `k` payoff evaluations per inner sample.
    pub fn gaussian_portfolio(threshold: f64, k: u32) -> Result<Self> {
        if k == 0 {
            return Err(invalid("portfolio needs at least one constituent"));
        }
        let inner: LossFn = Arc::new(move |y: f64, s: &mut Stream| {
            let u = y + s.normal();
            let mut sum = 0.0;
            for _ in 0..k {
                sum += u;
            }
            sum / k as f64
        });
        Ok(RiskProblem {
            outer: Arc::new(|s: &mut Stream| s.normal()),
            inner,
            threshold,
            portfolio_size: k,
            oracle: Some(gaussian_oracle()),
        })
    }

    /// Noise-free inner layer: `X | Y = y` is just `y`. Every level-l
    /// correction vanishes identically, which pins down the coupling.
    pub fn degenerate(threshold: f64) -> Self {
        RiskProblem {
            outer: Arc::new(|s: &mut Stream| s.normal()),
            inner: Arc::new(|y: f64, _: &mut Stream| y),
            threshold,
            portfolio_size: 1,
            oracle: Some(RiskOracle {
                cond_mean: Arc::new(|y| y),
                cond_sd: Arc::new(|_| 0.0),
                eta_at: Arc::new(|l| math::norm_cdf(-l)),
            }),
        }
    }

    /// Same problem at a different loss threshold.
    pub fn with_threshold(&self, threshold: f64) -> Self {
        let mut p = self.clone();
        p.threshold = threshold;
        p
    }

    pub fn portfolio_size(&self) -> u32 {
        self.portfolio_size
    }

    pub fn oracle(&self) -> Option<&RiskOracle> {
        self.oracle.as_ref()
    }

    /// One outer scenario for `key`.
    pub fn scenario(&self, key: StreamKey) -> f64 {
        (self.outer)(&mut key.stream())
    }

    /// Inner sample mean and sample standard deviation over `n` draws.
    pub fn inner_mean(&self, y: f64, n: u64, key: StreamKey) -> Result<(f64, f64)> {
        if n < 2 {
            return Err(invalid("inner_mean needs n >= 2"));
        }
        let mut stream = key.stream();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let x = (self.inner)(y, &mut stream);
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / n as f64;
        let var = ((sum_sq - sum * sum / n as f64) / (n - 1) as f64).max(0.0);
        Ok((mean, math::sqrt(var)))
    }
}

fn gaussian_oracle() -> RiskOracle {
    RiskOracle {
        cond_mean: Arc::new(|y| y),
        cond_sd: Arc::new(|_| 1.0),
        eta_at: Arc::new(|l| math::norm_cdf(-l)),
    }
}

/// What the inner functional of the nested expectation is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum InnerFunctional {
    /// Indicator of the mean exceeding the threshold.
    Heaviside,
    /// `(mean - threshold)^+`, used by the CVaR tail-mean estimate.
    PositivePart,
}

impl InnerFunctional {
    #[inline]
    fn apply(self, mean_minus_threshold: f64) -> f64 {
        match self {
            InnerFunctional::Heaviside => heaviside(mean_minus_threshold),
            InnerFunctional::PositivePart => mean_minus_threshold.max(0.0),
        }
    }
}

/// Moment source of the adaptive rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentMode {
    /// Running sample moments of the scenario's own inner draws.
    Estimated,
    /// Closed-form conditional moments from the problem's oracle
    /// ("perfect adaptation"; benchmark problems only).
    Oracle,
}

/// Controls of the adaptive inner-sampling rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveConfig {
    /// Confidence width multiplier C in the growth rule.
    pub confidence_const: f64,
    /// Exponent r of the growth attenuation.
    pub exponent_r: f64,
    /// Moment order q assumed available; bounds the admissible r.
    pub moment_q: f64,
    /// Constant in the `ceil(c_N / eps)` sample cap.
    pub eps_cap_const: f64,
    /// Inner samples at level 0.
    pub n0_inner: u64,
    pub mode: MomentMode,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig {
            confidence_const: 3.0,
            exponent_r: 1.25,
            moment_q: 6.0,
            eps_cap_const: 1.0,
            n0_inner: 16,
            mode: MomentMode::Estimated,
        }
    }
}

impl AdaptiveConfig {
    /// Largest admissible growth exponent for this moment order and mode.
    pub fn r_bound(&self) -> f64 {
        let q = self.moment_q;
        match self.mode {
            MomentMode::Oracle => 2.0 - 2.0 / q,
            MomentMode::Estimated => 2.0 - (math::sqrt(4.0 * q + 1.0) - 1.0) / q,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.confidence_const > 0.0) || !self.confidence_const.is_finite() {
            return Err(invalid("confidence_const must be positive and finite"));
        }
        if !(self.moment_q > 2.0) {
            return Err(invalid("moment_q must exceed 2"));
        }
        if !(self.eps_cap_const > 0.0) {
            return Err(invalid("eps_cap_const must be positive"));
        }
        if self.n0_inner < 2 {
            return Err(invalid("n0_inner must be at least 2"));
        }
        let bound = self.r_bound();
        if !(self.exponent_r > 1.0 && self.exponent_r < bound) {
            return Err(invalid(alloc::format!(
                "exponent_r must lie in (1, {bound:.4}) for moment_q {} in this mode",
                self.moment_q
            )));
        }
        Ok(())
    }
}

/// Per-level summary of a nested run.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskLevel {
    /// Statistics of the correction values; `stats.count` is the outer
    /// scenario count of the level.
    pub stats: LevelStats,
    /// Mean inner samples drawn per scenario (fine side, before the
    /// portfolio-size cost multiplier).
    pub avg_inner: f64,
}

/// Stopping cause of the VaR bisection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarStop {
    /// The bracket shrank below half the accuracy target.
    BracketWidth,
    /// The tail-probability confidence interval contained the quantile.
    CiContainsTarget,
}

/// VaR/CVaR search result.
#[derive(Debug, Clone, PartialEq)]
pub struct VarCvar {
    /// Tail-probability level the quantile was searched at.
    pub quantile: f64,
    pub var: f64,
    pub cvar: f64,
    /// Accuracy each tail-probability evaluation was driven to.
    pub eta_tol: f64,
    pub stop: VarStop,
    pub bisections: u32,
    /// Tail-probability estimate at the returned VaR.
    pub eta_at_var: f64,
}

/// Result of a nested risk estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskEstimate {
    /// Estimated probability that the conditional mean exceeds the
    /// threshold, clamped into [0, 1].
    pub eta: f64,
    pub std_error: f64,
    pub levels: Vec<RiskLevel>,
    /// Total inner work in payoff evaluations (inner draws times the
    /// portfolio size).
    pub total_inner_samples: f64,
    /// Fitted decay rates; absent for single-level estimators.
    pub rates: Option<RateEstimates>,
    pub var_cvar: Option<VarCvar>,
}

fn assemble_risk(est: MlmcEstimate, k: f64) -> RiskEstimate {
    let levels: Vec<RiskLevel> = est
        .levels
        .iter()
        .map(|s| RiskLevel {
            avg_inner: if s.count == 0 { 0.0 } else { s.cost_total / (k * s.count as f64) },
            stats: s.clone(),
        })
        .collect();
    RiskEstimate {
        eta: est.value.clamp(0.0, 1.0),
        std_error: est.std_error(),
        total_inner_samples: est.levels.iter().map(|s| s.cost_total).sum(),
        rates: Some(est.rates),
        levels,
        var_cvar: None,
    }
}

/// Plain nested Monte Carlo: `m` scenarios, `n` inner samples each.
pub fn nested_mc<E: Executor>(
    problem: &RiskProblem,
    m: u64,
    n: u64,
    seed: u64,
    exec: &E,
) -> Result<RiskEstimate> {
    if m == 0 {
        return Err(invalid("nested_mc needs at least one scenario"));
    }
    if n < 2 {
        return Err(invalid("nested_mc needs n >= 2 inner samples"));
    }
    let k = problem.portfolio_size as f64;
    let stats = chunked(
        exec,
        0,
        m,
        |range| {
            let mut s = LevelStats::new(0);
            for r in range {
                let y = problem.scenario(StreamKey::new(seed, Purpose::Outer, 0, r));
                let (z, _) = problem.inner_mean(y, n, StreamKey::new(seed, Purpose::Inner, 0, r))?;
                s.push(heaviside(z - problem.threshold), n as f64 * k);
            }
            Ok(s)
        },
        merge_stats,
    )
    .expect("m >= 1")?;
    let std_error = if stats.count >= 2 {
        math::sqrt(stats.variance() / stats.count as f64)
    } else {
        0.0
    };
    Ok(RiskEstimate {
        eta: stats.mean().clamp(0.0, 1.0),
        std_error,
        total_inner_samples: stats.cost_total,
        levels: alloc::vec![RiskLevel { stats, avg_inner: n as f64 }],
        rates: None,
        var_cvar: None,
    })
}

/// Fine/coarse functional pair for one scenario under the uniform schedule:
/// `n0 * 2^level` inner samples, coarse value from the first half.
fn uniform_pair(
    problem: &RiskProblem,
    functional: InnerFunctional,
    n0: u64,
    level: u32,
    seed: u64,
    r: u64,
) -> (f64, f64, f64) {
    let y = problem.scenario(StreamKey::new(seed, Purpose::Outer, level, r));
    let n = n0 << level;
    let half = n / 2;
    let mut stream = StreamKey::new(seed, Purpose::Inner, level, r).stream();
    let mut sum = 0.0;
    let mut half_sum = 0.0;
    for i in 0..n {
        sum += (problem.inner)(y, &mut stream);
        if i + 1 == half {
            half_sum = sum;
        }
    }
    let fine = functional.apply(sum / n as f64 - problem.threshold);
    let coarse = if level == 0 {
        0.0
    } else {
        functional.apply(half_sum / half as f64 - problem.threshold)
    };
    (fine, coarse, n as f64)
}

fn check_nested_geometry(n0: u64, max_level: u32) -> Result<()> {
    if n0 < 2 {
        return Err(invalid("inner base count must be at least 2"));
    }
    if max_level > 24 || n0 > 1 << 20 {
        return Err(invalid("inner schedule overflows: need max_level <= 24 and n0 <= 2^20"));
    }
    Ok(())
}

fn uniform_core<E: Executor>(
    problem: &RiskProblem,
    eps: f64,
    functional: InnerFunctional,
    n0: u64,
    opts: &RunOptions,
    max_level: u32,
    seed: u64,
    exec: &E,
) -> Result<MlmcEstimate> {
    check_nested_geometry(n0, max_level)?;
    let k = problem.portfolio_size as f64;
    mlmc::drive(eps, 0, max_level, opts, |level, existing, n_new| {
        let fresh = chunked(
            exec,
            existing.count,
            n_new,
            |range| {
                let mut s = LevelStats::new(level);
                for r in range {
                    let (f, c, draws) = uniform_pair(problem, functional, n0, level, seed, r);
                    s.push(f - c, draws * k);
                }
                Ok(s)
            },
            merge_stats,
        );
        match fresh {
            None => Ok(existing),
            Some(res) => {
                let mut total = existing;
                total.merge(&res?);
                Ok(total)
            }
        }
    })
}

/// Multilevel nested estimator with the uniform (deterministic) inner
/// schedule `n_l = n0 * 2^l`.
pub fn nested_mlmc_uniform<E: Executor>(
    problem: &RiskProblem,
    eps: f64,
    n0: u64,
    opts: &RunOptions,
    max_level: u32,
    seed: u64,
    exec: &E,
) -> Result<RiskEstimate> {
    let est = uniform_core(problem, eps, InnerFunctional::Heaviside, n0, opts, max_level, seed, exec)?;
    Ok(assemble_risk(est, problem.portfolio_size as f64))
}

fn to_count(x: f64) -> u64 {
    if !(x >= 0.0) {
        return 0;
    }
    if x >= 9.0e18 {
        return u64::MAX;
    }
    math::ceil(x) as u64
}

/// Final inner sample count prescribed by the growth rule for distance
/// `mu = z - threshold` and spread `sd`, before the running minimum/doubling
/// mechanics. Branches:
/// scenarios right on the threshold grow to the full budget but are capped
/// at `ceil(c_N / eps)` (or by the variance term when `sd > 0`); noise-free
/// scenarios stop at the minimum schedule unless they sit on the threshold.
fn growth_stop(level: u32, eps: f64, acfg: &AdaptiveConfig, mu: f64, sd: f64) -> u64 {
    let n0 = acfg.n0_inner;
    let min_n = n0 << level;
    let hard = min_n as f64 * math::powf(2.0, level as f64);
    let pow_neg_l = math::powf(2.0, -(level as f64));
    let grow_frac = if mu == 0.0 {
        1.0
    } else if sd == 0.0 {
        0.0
    } else {
        let base = math::sqrt(n0 as f64) * math::powf(2.0, level as f64) * math::abs(mu)
            / (acfg.confidence_const * sd);
        math::powf(base, -acfg.exponent_r).min(1.0)
    };
    let target = to_count(hard * grow_frac.max(pow_neg_l));
    let cap = if sd == 0.0 {
        to_count(acfg.eps_cap_const / eps)
    } else if mu == 0.0 {
        u64::MAX
    } else {
        let var_term = acfg.confidence_const * acfg.confidence_const * sd * sd / (mu * mu);
        to_count((acfg.eps_cap_const / eps).max(var_term))
    };
    min_n.max(target.min(cap))
}

/// Adaptive fine/coarse Heaviside pair for one scenario.
///
/// Draws the minimum schedule `n0 * 2^level`, then doubles the sample while
/// the growth rule asks for more: scenarios whose estimated distance to the
/// threshold is large relative to their spread stop immediately, scenarios
/// near the threshold grow toward `n0 * 4^level`, bounded by the
/// eps-dependent cap. Returns `(h_fine, h_coarse, draws)`.
///
/// The coarse value runs the full level `level - 1` growth rule on the same
/// draw sequence (a prefix, by replay), not on half of the fine's final
/// sample: the fine count is chosen by the level-`level` rule, so half of it
/// is not distributed like a level `level - 1` run, and using it as the
/// coarse value leaves a telescoping mismatch that shows up as a persistent
/// bias in the assembled estimate. With the replayed rule the coarse value
/// is bit-identical to the fine value of a level `level - 1` call under the
/// same key, so consecutive levels cancel exactly in expectation. `draws` is
/// the larger of the two stopping counts (the draws are shared); level 0 has
/// no coarse half and reports 0 there.
pub fn adaptive_inner(
    problem: &RiskProblem,
    y: f64,
    level: u32,
    eps: f64,
    acfg: &AdaptiveConfig,
    key: StreamKey,
) -> Result<(f64, f64, f64)> {
    acfg.validate()?;
    check_nested_geometry(acfg.n0_inner, level)?;
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(invalid("eps must be positive and finite"));
    }
    let mut stream = key.stream();
    let mut xs: Vec<f64> = Vec::new();
    let (h_coarse, n_coarse) = if level == 0 {
        (0.0, 0)
    } else {
        adaptive_rule(problem, y, level - 1, eps, acfg, &mut xs, &mut stream)?
    };
    let (h_fine, n_fine) = adaptive_rule(problem, y, level, eps, acfg, &mut xs, &mut stream)?;
    Ok((h_fine, h_coarse, n_fine.max(n_coarse) as f64))
}

/// One growth process at `rule_level`, reading (and lazily extending) the
/// shared draw buffer. Decisions are functions of prefix moments only, so
/// two rules walking the same buffer each behave exactly like a standalone
/// run on this stream.
fn adaptive_rule(
    problem: &RiskProblem,
    y: f64,
    rule_level: u32,
    eps: f64,
    acfg: &AdaptiveConfig,
    xs: &mut Vec<f64>,
    stream: &mut Stream,
) -> Result<(f64, u64)> {
    let threshold = problem.threshold;
    let extend = |upto: u64, xs: &mut Vec<f64>, stream: &mut Stream| {
        while (xs.len() as u64) < upto {
            xs.push((problem.inner)(y, stream));
        }
    };
    let n = match acfg.mode {
        MomentMode::Oracle => {
            let oracle = problem
                .oracle
                .as_ref()
                .ok_or_else(|| invalid("oracle moment mode needs a problem oracle"))?;
            let mu = (oracle.cond_mean)(y) - threshold;
            let sd = (oracle.cond_sd)(y);
            let n = growth_stop(rule_level, eps, acfg, mu, sd);
            extend(n, xs, stream);
            n
        }
        MomentMode::Estimated => {
            let mut n = acfg.n0_inner << rule_level;
            extend(n, xs, stream);
            loop {
                let nf = n as f64;
                let mut sum = 0.0;
                let mut sum_sq = 0.0;
                for x in &xs[..n as usize] {
                    sum += x;
                    sum_sq += x * x;
                }
                let mu = sum / nf - threshold;
                let var = ((sum_sq - sum * sum / nf) / (nf - 1.0)).max(0.0);
                let stop = growth_stop(rule_level, eps, acfg, mu, math::sqrt(var));
                if n >= stop {
                    break n;
                }
                n = (2 * n).min(stop);
                extend(n, xs, stream);
            }
        }
    };
    let sum: f64 = xs[..n as usize].iter().sum();
    Ok((heaviside(sum / n as f64 - threshold), n))
}

/// Multilevel nested estimator with per-scenario adaptive inner sampling.
pub fn nested_mlmc_adaptive<E: Executor>(
    problem: &RiskProblem,
    eps: f64,
    acfg: &AdaptiveConfig,
    opts: &RunOptions,
    max_level: u32,
    seed: u64,
    exec: &E,
) -> Result<RiskEstimate> {
    acfg.validate()?;
    check_nested_geometry(acfg.n0_inner, max_level)?;
    let k = problem.portfolio_size as f64;
    let est = mlmc::drive(eps, 0, max_level, opts, |level, existing, n_new| {
        let fresh = chunked(
            exec,
            existing.count,
            n_new,
            |range| {
                let mut s = LevelStats::new(level);
                for r in range {
                    let y = problem.scenario(StreamKey::new(seed, Purpose::Outer, level, r));
                    let key = StreamKey::new(seed, Purpose::Inner, level, r);
                    let (f, c, draws) = adaptive_inner(problem, y, level, eps, acfg, key)?;
                    s.push(f - c, draws * k);
                }
                Ok(s)
            },
            merge_stats,
        );
        match fresh {
            None => Ok(existing),
            Some(res) => {
                let mut total = existing;
                total.merge(&res?);
                Ok(total)
            }
        }
    })?;
    Ok(assemble_risk(est, k))
}

/// Inner-sampling scheme for fixed-size level measurements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InnerScheme {
    Uniform { n0: u64 },
    Adaptive { cfg: AdaptiveConfig, eps: f64 },
}

/// Measures the correction statistics of levels `0..=levels` with a fixed
/// number of scenarios per level; used for rate studies rather than
/// estimation, so the caller should pass a seed disjoint from production
/// runs.
pub fn measure_nested_levels<E: Executor>(
    problem: &RiskProblem,
    scheme: InnerScheme,
    levels: u32,
    n_per_level: u64,
    seed: u64,
    exec: &E,
) -> Result<Vec<RiskLevel>> {
    if n_per_level < 2 {
        return Err(invalid("need at least 2 scenarios per level"));
    }
    match scheme {
        InnerScheme::Uniform { n0 } => check_nested_geometry(n0, levels)?,
        InnerScheme::Adaptive { cfg, .. } => {
            cfg.validate()?;
            check_nested_geometry(cfg.n0_inner, levels)?;
        }
    }
    let k = problem.portfolio_size as f64;
    let mut out = Vec::new();
    for level in 0..=levels {
        let stats = chunked(
            exec,
            0,
            n_per_level,
            |range| {
                let mut s = LevelStats::new(level);
                for r in range {
                    let (f, c, draws) = match scheme {
                        InnerScheme::Uniform { n0 } => {
                            uniform_pair(problem, InnerFunctional::Heaviside, n0, level, seed, r)
                        }
                        InnerScheme::Adaptive { cfg, eps } => {
                            let y = problem.scenario(StreamKey::new(seed, Purpose::Outer, level, r));
                            let key = StreamKey::new(seed, Purpose::Inner, level, r);
                            adaptive_inner(problem, y, level, eps, &cfg, key)?
                        }
                    };
                    s.push(f - c, draws * k);
                }
                Ok(s)
            },
            merge_stats,
        )
        .expect("n_per_level >= 2")?;
        out.push(RiskLevel {
            avg_inner: stats.cost_total / (k * stats.count as f64),
            stats,
        });
    }
    Ok(out)
}

/// VaR and CVaR at tail level `quantile_a` to accuracy about `eps`.
///
/// The quantile is found by bisection on the adaptive tail-probability
/// estimator with common random numbers across iterates: a pilot scenario
/// sample brackets the quantile and supplies a density estimate `rho` near
/// it, each eta evaluation is driven to `0.35 * eps * rho` (an eta error
/// divided by the density is a quantile error), and the search stops when
/// the bracket is narrower than `eps / 2` or the evaluation's confidence
/// interval contains `quantile_a`. CVaR is then
/// `VaR + E[(E[X|Y] - VaR)^+] / quantile_a` with the tail mean estimated by
/// the uniform multilevel scheme under the positive-part functional.
pub fn var_cvar<E: Executor>(
    problem: &RiskProblem,
    quantile_a: f64,
    eps: f64,
    acfg: &AdaptiveConfig,
    opts: &RunOptions,
    max_level: u32,
    seed: u64,
    exec: &E,
) -> Result<RiskEstimate> {
    if !(quantile_a > 0.0 && quantile_a < 1.0) {
        return Err(invalid("quantile_a must lie in (0, 1)"));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(invalid("eps must be positive and finite"));
    }
    acfg.validate()?;
    let a = quantile_a;

    // pilot: crude conditional-mean sample to bracket the quantile
    let m = 2000u64.max(to_count(100.0 / a));
    let pilot_inner = 64u64;
    let mut zs: Vec<f64> = Vec::with_capacity(m as usize);
    for r in 0..m {
        let y = problem.scenario(StreamKey::new(seed, Purpose::Pilot, 0, r));
        let (z, _) = problem.inner_mean(y, pilot_inner, StreamKey::new(seed, Purpose::Pilot, 1, r))?;
        zs.push(z);
    }
    zs.sort_by(|x, y| x.partial_cmp(y).expect("finite conditional means"));
    let quantile = |p: f64| -> f64 {
        let idx = ((p * m as f64) as usize).min(m as usize - 1);
        zs[idx]
    };
    let w = (4.0 * math::sqrt(a * (1.0 - a) / m as f64)).max(0.25 * a);
    if 1.0 - a - w <= 0.0 || 1.0 - a + w >= 1.0 {
        return Err(MlmcError::BracketFailure(alloc::format!(
            "tail level {a} too extreme for a pilot of {m} scenarios"
        )));
    }
    let mut lo = quantile(1.0 - a - w);
    let mut hi = quantile(1.0 - a + w);
    if !(hi > lo) {
        return Err(MlmcError::BracketFailure(String::from(
            "pilot quantiles are flat around the target level",
        )));
    }
    let rho = 2.0 * w / (hi - lo);
    let eta_tol = 0.35 * eps * rho;

    let eval = |l: f64| -> Result<RiskEstimate> {
        nested_mlmc_adaptive(&problem.with_threshold(l), eta_tol, acfg, opts, max_level, seed, exec)
    };

    // confirm the bracket with the real estimator, widening at most twice
    let width = hi - lo;
    let mut eta_lo = eval(lo)?;
    for _ in 0..2 {
        if eta_lo.eta > a {
            break;
        }
        lo -= width;
        eta_lo = eval(lo)?;
    }
    if eta_lo.eta <= a {
        return Err(MlmcError::BracketFailure(alloc::format!(
            "tail probability at the lower bracket is {} <= {a}",
            eta_lo.eta
        )));
    }
    let mut eta_hi = eval(hi)?;
    for _ in 0..2 {
        if eta_hi.eta < a {
            break;
        }
        hi += width;
        eta_hi = eval(hi)?;
    }
    if eta_hi.eta >= a {
        return Err(MlmcError::BracketFailure(alloc::format!(
            "tail probability at the upper bracket is {} >= {a}",
            eta_hi.eta
        )));
    }

    let mut bisections = 0u32;
    let mut stop = VarStop::BracketWidth;
    let mut hit: Option<(f64, RiskEstimate)> = None;
    while hi - lo > 0.5 * eps {
        let mid = 0.5 * (lo + hi);
        let est = eval(mid)?;
        bisections += 1;
        if math::abs(est.eta - a) <= est.std_error {
            stop = VarStop::CiContainsTarget;
            hit = Some((mid, est));
            break;
        }
        if est.eta > a {
            lo = mid;
        } else {
            hi = mid;
        }
        if bisections > 200 {
            return Err(bad_state("bisection failed to shrink the bracket"));
        }
    }
    let (var, mut final_est) = match hit {
        Some((v, e)) => (v, e),
        None => {
            let v = 0.5 * (lo + hi);
            (v, eval(v)?)
        }
    };

    // tail mean above the quantile: positive-part nested estimate, clamped
    // so the reported pair always satisfies cvar >= var
    let pp_eps = 0.5 * a * eps;
    let pp = uniform_core(
        &problem.with_threshold(var),
        pp_eps,
        InnerFunctional::PositivePart,
        acfg.n0_inner,
        opts,
        max_level,
        seed,
        exec,
    )?;
    let cvar = var + pp.value.max(0.0) / a;

    final_est.var_cvar = Some(VarCvar {
        quantile: a,
        var,
        cvar,
        eta_tol,
        stop,
        bisections,
        eta_at_var: final_est.eta,
    });
    Ok(final_est)
}
