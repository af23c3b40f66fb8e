//! Drift shifts that cut the level-correction variance.
//!
//! For each level the variance of the weighted correction, seen as a function
//! of the Girsanov parameter, is smooth and strongly convex, so its minimizer
//! is found either by Newton on a pilot sample-average objective or by a
//! projected Robbins-Monro recursion. Both emit a [`ThetaSchedule`] that the
//! multilevel driver applies per level; [`run_adaptive_is_mlmc`] instead
//! interleaves the recursion with estimation inside each level.

use alloc::vec::Vec;

use crate::error::{bad_state, invalid};
use crate::exec::{chunk_parts, chunked, Executor, CHUNK};
use crate::math;
use crate::mlmc::{self, merge_stats, with_estimate, MlmcEstimate, RunOptions};
use crate::model::{girsanov_weight, MlmcConfig, Payoff, SdeModel};
use crate::paths::{level_payoff_difference, simulate_coupled};
use crate::rng::{Purpose, StreamKey};
use crate::stats::LevelStats;
use crate::{MlmcError, Result};

/// Newton stopping tolerance on the gradient norm, relative to the objective
/// value. Relative (not absolute) so that rescaling the payoff by a constant
/// leaves the iterate sequence unchanged.
pub const SAA_TOL: f64 = 1e-6;
pub const SAA_MAX_ITER: u32 = 50;

/// How a schedule's shifts were produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaMethod {
    Saa,
    RobbinsMonro,
    Zero,
}

/// Optimizer trace for one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelDiag {
    pub level: u32,
    pub iterations: u32,
    /// Final gradient norm (Newton).
    pub grad_norm: Option<f64>,
    /// Norm of the final iterate movement (Robbins-Monro).
    pub step_norm: Option<f64>,
    /// Objective value at the returned point (Newton) or a running estimate
    /// of it (Robbins-Monro).
    pub objective: Option<f64>,
}

/// Per-level drift shifts, one q-vector per level starting at `first_level`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaSchedule {
    first_level: u32,
    thetas: Vec<Vec<f64>>,
    pub method: ThetaMethod,
    pub diagnostics: Vec<LevelDiag>,
}

impl ThetaSchedule {
    pub fn new(first_level: u32, thetas: Vec<Vec<f64>>, method: ThetaMethod) -> Result<Self> {
        if thetas.is_empty() {
            return Err(invalid("schedule needs at least one level"));
        }
        let q = thetas[0].len();
        if q == 0 {
            return Err(invalid("schedule shifts must have at least one component"));
        }
        for th in &thetas {
            if th.len() != q {
                return Err(invalid("schedule shifts must share one dimension"));
            }
            if th.iter().any(|x| !x.is_finite()) {
                return Err(invalid("schedule shifts must be finite"));
            }
        }
        Ok(ThetaSchedule { first_level, thetas, method, diagnostics: Vec::new() })
    }

    /// All-zero schedule: running it reproduces the plain estimator.
    pub fn zero(dim_noise: usize, levels: u32) -> Result<Self> {
        if levels == 0 {
            return Err(invalid("schedule needs at least one level"));
        }
        ThetaSchedule::new(1, alloc::vec![alloc::vec![0.0; dim_noise]; levels as usize], ThetaMethod::Zero)
    }

    pub fn first_level(&self) -> u32 {
        self.first_level
    }

    pub fn last_level(&self) -> u32 {
        self.first_level + self.thetas.len() as u32 - 1
    }

    /// Shift for `level`; levels beyond either end reuse the nearest entry.
    pub fn theta_for(&self, level: u32) -> &[f64] {
        let idx = level.saturating_sub(self.first_level) as usize;
        &self.thetas[idx.min(self.thetas.len() - 1)]
    }

    pub fn thetas(&self) -> &[Vec<f64>] {
        &self.thetas
    }

    pub(crate) fn check_dim(&self, q: usize) -> Result<()> {
        if self.thetas[0].len() != q {
            return Err(invalid(alloc::format!(
                "schedule shifts have dimension {}, model noise has {q}",
                self.thetas[0].len()
            )));
        }
        Ok(())
    }
}

/// Pilot data for the per-level variance objective
/// `v(theta) = (1/N) sum_k s_k^2 exp(-<theta, w_k> + |theta|^2 T / 2)`,
/// where `s_k^2` is the (level-normalized) squared payoff correction of pilot
/// path k and `w_k` its terminal Brownian value. Zero-payoff samples
/// contribute nothing to any derivative, so only the active ones are stored;
/// `total` keeps the original count for the 1/N factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SaaProblem {
    level: u32,
    horizon: f64,
    normalization: f64,
    dim: usize,
    total: u64,
    active: Vec<(f64, Vec<f64>)>,
}

impl SaaProblem {
    /// Builds a problem from explicit `(s^2, w_T)` pairs (normalization
    /// already applied). Mostly useful for tests and closed-form checks.
    pub fn from_parts(
        level: u32,
        horizon: f64,
        total: u64,
        samples: Vec<(f64, Vec<f64>)>,
    ) -> Result<Self> {
        if !(horizon > 0.0) || samples.is_empty() || total < samples.len() as u64 {
            return Err(invalid("need horizon > 0 and total >= provided samples"));
        }
        let dim = samples[0].1.len();
        for (s2, w) in &samples {
            if !s2.is_finite() || *s2 < 0.0 || w.len() != dim || w.iter().any(|x| !x.is_finite()) {
                return Err(invalid("samples must be finite with one common dimension"));
            }
        }
        let active: Vec<_> = samples.into_iter().filter(|(s2, _)| *s2 > 0.0).collect();
        if active.is_empty() {
            return Err(MlmcError::DegenerateObjective { level });
        }
        Ok(SaaProblem { level, horizon, normalization: 1.0, dim, total, active })
    }

    /// Draws `pilot` coupled paths on `level` under the nominal measure
    /// (optimizer streams, never shared with estimation) and records the
    /// squared corrections.
    pub fn from_pilot<E: Executor>(
        model: &SdeModel,
        payoff: &Payoff,
        cfg: &MlmcConfig,
        level: u32,
        pilot: u64,
        exec: &E,
    ) -> Result<Self> {
        cfg.validate()?;
        if pilot == 0 {
            return Err(invalid("pilot must be positive"));
        }
        let zeros = alloc::vec![0.0; model.dim_noise()];
        let norm = cfg.level_norm(level, model.horizon());
        let active = chunked(
            exec,
            0,
            pilot,
            |range| {
                let mut acc: Vec<(f64, Vec<f64>)> = Vec::new();
                for r in range {
                    let key = StreamKey::new(cfg.seed, Purpose::Optimizer, level, r);
                    let ls = level_payoff_difference(model, payoff, cfg, &zeros, key)?;
                    let dg = ls.fine - ls.coarse.unwrap_or(0.0);
                    let s2 = norm * dg * dg;
                    if s2 > 0.0 {
                        acc.push((s2, ls.w_t));
                    }
                }
                Ok(acc)
            },
            |a: Result<Vec<_>>, b| match (a, b) {
                (Ok(mut x), Ok(y)) => {
                    x.extend(y);
                    Ok(x)
                }
                (Err(e), _) | (_, Err(e)) => Err(e),
            },
        )
        .expect("pilot > 0")?;
        if active.is_empty() {
            return Err(MlmcError::DegenerateObjective { level });
        }
        Ok(SaaProblem {
            level,
            horizon: model.horizon(),
            normalization: norm,
            dim: model.dim_noise(),
            total: pilot,
            active,
        })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    /// Scales every `s^2` by a constant; the argmin is invariant under this.
    #[cfg(test)]
    fn scaled(&self, c: f64) -> Self {
        let mut p = self.clone();
        for (s2, _) in p.active.iter_mut() {
            *s2 *= c;
        }
        p
    }
}

fn check_theta(theta: &[f64], dim: usize) -> Result<()> {
    if theta.len() != dim || theta.iter().any(|x| !x.is_finite()) {
        return Err(invalid("theta must be finite and match the noise dimension"));
    }
    Ok(())
}

/// Value of the pilot objective at `theta` (no derivatives).
fn saa_value(problem: &SaaProblem, theta: &[f64]) -> f64 {
    let t = problem.horizon;
    let half_norm = 0.5 * math::norm_sq(theta) * t;
    let mut value = 0.0;
    for (s2, w) in &problem.active {
        value += s2 * math::exp(half_norm - math::dot(theta, w));
    }
    value / problem.total as f64
}

/// Objective value, gradient and Hessian (row-major, `q x q`) at `theta`.
///
/// The derivatives are exact: each sample contributes
/// `term * (theta T - w)` to the gradient and
/// `term * (T I + (theta T - w)(theta T - w)^T)` to the Hessian, with
/// `term = s^2 exp(-<theta, w> + |theta|^2 T / 2)`. The Hessian dominates
/// `T * value * I`, so it is positive definite on every non-degenerate
/// problem.
pub fn saa_objective(problem: &SaaProblem, theta: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_theta(theta, problem.dim)?;
    let q = problem.dim;
    let t = problem.horizon;
    let half_norm = 0.5 * math::norm_sq(theta) * t;
    let mut value = 0.0;
    let mut grad = alloc::vec![0.0; q];
    let mut hess = alloc::vec![0.0; q * q];
    let mut u = alloc::vec![0.0; q];
    for (s2, w) in &problem.active {
        let term = s2 * math::exp(half_norm - math::dot(theta, w));
        value += term;
        for i in 0..q {
            u[i] = theta[i] * t - w[i];
            grad[i] += term * u[i];
        }
        for i in 0..q {
            hess[i * q + i] += term * t;
            for j in 0..q {
                hess[i * q + j] += term * u[i] * u[j];
            }
        }
    }
    let inv_n = 1.0 / problem.total as f64;
    value *= inv_n;
    for g in grad.iter_mut() {
        *g *= inv_n;
    }
    for h in hess.iter_mut() {
        *h *= inv_n;
    }
    Ok((value, grad, hess))
}

/// Newton solution of the pilot objective.
#[derive(Debug, Clone, PartialEq)]
pub struct SaaSolution {
    pub theta: Vec<f64>,
    pub iterations: u32,
    pub grad_norm: f64,
    pub objective: f64,
}

/// Damped Newton from zero: full steps, halved while the objective fails to
/// decrease, stopping when the gradient norm falls below `tol * value`.
pub fn solve_saa(problem: &SaaProblem, tol: f64, max_iter: u32) -> Result<SaaSolution> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(invalid("solve_saa needs tol > 0 and max_iter >= 1"));
    }
    let mut theta = alloc::vec![0.0; problem.dim];
    let (mut value, mut grad, mut hess) = saa_objective(problem, &theta)?;
    for it in 0..=max_iter {
        let grad_norm = math::norm(&grad);
        if grad_norm <= tol * value {
            return Ok(SaaSolution { theta, iterations: it, grad_norm, objective: value });
        }
        if it == max_iter {
            break;
        }
        let dir = math::cholesky_solve(&hess, &grad)
            .ok_or_else(|| bad_state("objective Hessian lost positive definiteness"))?;
        let mut step = 1.0;
        let cand = loop {
            let cand: Vec<f64> =
                theta.iter().zip(&dir).map(|(x, d)| x - step * d).collect();
            if saa_value(problem, &cand) < value {
                break cand;
            }
            step *= 0.5;
            if step < 1e-18 {
                return Err(MlmcError::NoConvergence {
                    iterations: it,
                    last_theta: theta,
                    grad_norm,
                });
            }
        };
        theta = cand;
        let (v, g, h) = saa_objective(problem, &theta)?;
        value = v;
        grad = g;
        hess = h;
    }
    Err(MlmcError::NoConvergence {
        iterations: max_iter,
        last_theta: theta,
        grad_norm: math::norm(&grad),
    })
}

/// Robbins-Monro controls. The recursion is
/// `theta_{n+1} = Proj_R[theta_n - gamma_{n+1} H(theta_n, sample)]` with
/// `gamma_n = gamma0 / (n + n0)` and `Proj_R` the radial projection onto the
/// ball of radius `radius`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmConfig {
    pub radius: f64,
    /// Base gain; 0 disables adaptation entirely (the iterate stays put).
    pub gamma0: f64,
    pub n0: f64,
    /// Recursion steps before the iterate is frozen.
    pub iterations: u64,
    /// Nominal-measure pilot paths used to initialize the iterate and the
    /// gain normalizer before the recursion starts; 0 starts cold at zero.
    pub warm_pilot: u64,
    /// Return the average of the trajectory's second half instead of the
    /// last iterate (standalone optimizer only).
    pub averaging: bool,
}

impl Default for RmConfig {
    fn default() -> Self {
        RmConfig {
            radius: 5.0,
            gamma0: 1.0,
            n0: 100.0,
            iterations: 10_000,
            warm_pilot: 1000,
            averaging: false,
        }
    }
}

impl RmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(invalid("radius must be positive and finite"));
        }
        if !(self.gamma0 >= 0.0) || !self.gamma0.is_finite() {
            return Err(invalid("gamma0 must be non-negative and finite"));
        }
        if !(self.n0 > 0.0) || !self.n0.is_finite() {
            return Err(invalid("n0 must be positive and finite"));
        }
        if self.iterations == 0 {
            return Err(invalid("iterations must be positive"));
        }
        Ok(())
    }
}

fn clamp_ball(theta: &mut [f64], radius: f64) {
    let n = math::norm(theta);
    if n > radius {
        for x in theta.iter_mut() {
            *x = *x / n * radius;
        }
    }
}

/// One projected stochastic-approximation step.
///
/// `sample` is the pair `(s^2, w_T)` of the squared level-normalized payoff
/// correction and the terminal Brownian value; `n` counts the steps already
/// taken, so this step uses `gamma_{n+1}`. The innovation is
/// `H = (theta T - w_T) s^2 exp(-<theta, w_T> + |theta|^2 T / 2)`,
/// an unbiased estimate of the objective gradient at `theta_n`.
pub fn rm_step(
    theta_n: &[f64],
    sample: (f64, &[f64]),
    horizon: f64,
    n: u64,
    rmc: &RmConfig,
) -> Vec<f64> {
    let (s_sq, w_t) = sample;
    debug_assert!(math::norm(theta_n) <= rmc.radius * (1.0 + 1e-9));
    let mut next = theta_n.to_vec();
    if s_sq == 0.0 {
        return next;
    }
    let gamma = rmc.gamma0 / ((n + 1) as f64 + rmc.n0);
    let e = math::exp(0.5 * math::norm_sq(theta_n) * horizon - math::dot(theta_n, w_t));
    for (i, x) in next.iter_mut().enumerate() {
        let h = (theta_n[i] * horizon - w_t[i]) * s_sq * e;
        *x -= gamma * h;
    }
    clamp_ball(&mut next, rmc.radius);
    next
}

/// Recursion state threaded through a level: the iterate plus a slow
/// exponential average of the objective used to normalize the gain (the raw
/// innovation scales with the payoff, so a fixed gamma0 would make the step
/// size depend on the payoff's units).
#[derive(Debug, Clone)]
struct RmState {
    theta: Vec<f64>,
    steps: u64,
    v_bar: f64,
    v_seen: bool,
}

impl RmState {
    fn cold(dim: usize) -> Self {
        RmState { theta: alloc::vec![0.0; dim], steps: 0, v_bar: 1.0, v_seen: false }
    }

    /// Fresh recursion for the next level starting from this one's iterate.
    fn inherit(&self) -> Self {
        RmState { theta: self.theta.clone(), steps: 0, v_bar: self.v_bar, v_seen: self.v_seen }
    }

    fn advance(&mut self, s_sq: f64, w_t: &[f64], horizon: f64, rmc: &RmConfig) {
        if s_sq > 0.0 {
            // per-sample objective estimate; 1/64 rate and the plain ratio
            // keep the whole trajectory invariant under payoff rescaling
            let e = math::exp(0.5 * math::norm_sq(&self.theta) * horizon - math::dot(&self.theta, w_t));
            let v_hat = s_sq * e;
            if self.v_seen {
                self.v_bar += (v_hat - self.v_bar) / 64.0;
            } else {
                self.v_bar = v_hat;
                self.v_seen = true;
            }
            let gain = RmConfig { gamma0: rmc.gamma0 / self.v_bar, ..*rmc };
            self.theta = rm_step(&self.theta, (s_sq, w_t), horizon, self.steps, &gain);
        }
        self.steps += 1;
    }
}

/// Optimizer-stream replicate offset of the warm-start pilot; keeps it clear
/// of the recursion's own sample indices.
const WARM_OFFSET: u64 = 1 << 60;

/// Initializes the recursion from `warm_pilot` nominal-measure paths:
/// `theta_0` is the payoff-weighted mean of `w_T / T` (the small-shift
/// optimum), projected into the ball, and the gain normalizer starts at the
/// mean active squared correction.
fn warm_state(
    model: &SdeModel,
    payoff: &Payoff,
    cfg: &MlmcConfig,
    level: u32,
    rmc: &RmConfig,
) -> Result<RmState> {
    let q = model.dim_noise();
    let t = model.horizon();
    let norm = cfg.level_norm(level, t);
    let zeros = alloc::vec![0.0; q];
    let mut st = RmState::cold(q);
    let mut s2_sum = 0.0;
    let mut s2w = alloc::vec![0.0; q];
    let mut n_pos = 0u64;
    for k in 0..rmc.warm_pilot {
        let key = StreamKey::new(cfg.seed, Purpose::Optimizer, level, WARM_OFFSET + k);
        let ls = level_payoff_difference(model, payoff, cfg, &zeros, key)?;
        let dg = ls.fine - ls.coarse.unwrap_or(0.0);
        let s2 = norm * dg * dg;
        if s2 > 0.0 {
            s2_sum += s2;
            for (acc, w) in s2w.iter_mut().zip(&ls.w_t) {
                *acc += s2 * w;
            }
            n_pos += 1;
        }
    }
    if s2_sum > 0.0 {
        st.theta = s2w.iter().map(|x| x / (t * s2_sum)).collect();
        clamp_ball(&mut st.theta, rmc.radius);
        st.v_bar = s2_sum / n_pos as f64;
        st.v_seen = true;
    }
    Ok(st)
}

/// Runs the projected recursion on one level: every sample is simulated
/// under the current iterate and fed back (sampling under `theta` keeps the
/// payoff region visible, which a nominal-measure recursion loses for rare
/// payoffs). Returns the frozen shift and a trace.
pub fn rm_optimize_level(
    model: &SdeModel,
    payoff: &Payoff,
    cfg: &MlmcConfig,
    level: u32,
    rmc: &RmConfig,
) -> Result<(Vec<f64>, LevelDiag)> {
    cfg.validate()?;
    rmc.validate()?;
    let q = model.dim_noise();
    let t = model.horizon();
    let norm = cfg.level_norm(level, t);
    let mut st = if rmc.gamma0 > 0.0 && rmc.warm_pilot > 0 {
        warm_state(model, payoff, cfg, level, rmc)?
    } else {
        RmState::cold(q)
    };
    let tail_from = rmc.iterations / 2;
    let mut tail_sum = alloc::vec![0.0; q];
    let mut tail_n = 0u64;
    let mut last_step = 0.0;
    let mut prev = alloc::vec![0.0; q];
    for k in 0..rmc.iterations {
        let key = StreamKey::new(cfg.seed, Purpose::Optimizer, level, k);
        let s = simulate_coupled(model, cfg, &st.theta, key)?;
        let weight = girsanov_weight(&st.theta, &s.w_t, t)?;
        let gf = payoff.eval(&s.x_fine);
        let dg = gf - s.x_coarse.as_deref().map(|x| payoff.eval(x)).unwrap_or(0.0);
        // the recursion targets the nominal-measure objective, so the
        // shifted sample enters as (s^2 * weight, w_T + theta t): the step's
        // own exponential then reproduces the sampling weight, giving an
        // unbiased gradient estimate under the shifted measure
        let s_tilde = norm * dg * dg * weight;
        let b: Vec<f64> = s.w_t.iter().zip(&st.theta).map(|(w, th)| w + th * t).collect();
        prev.copy_from_slice(&st.theta);
        st.advance(s_tilde, &b, t, rmc);
        if k + 1 == rmc.iterations {
            let d: Vec<f64> = st.theta.iter().zip(&prev).map(|(a, b)| a - b).collect();
            last_step = math::norm(&d);
        }
        if k >= tail_from {
            for (acc, th) in tail_sum.iter_mut().zip(&st.theta) {
                *acc += th;
            }
            tail_n += 1;
        }
    }
    let theta = if rmc.averaging && tail_n > 0 {
        tail_sum.iter().map(|x| x / tail_n as f64).collect()
    } else {
        st.theta
    };
    let diag = LevelDiag {
        level,
        iterations: rmc.iterations.min(u32::MAX as u64) as u32,
        grad_norm: None,
        step_norm: Some(last_step),
        objective: st.v_seen.then_some(st.v_bar),
    };
    Ok((theta, diag))
}

/// Builds a schedule for levels `1..=levels` by Newton on per-level pilots.
pub fn saa_schedule<E: Executor>(
    model: &SdeModel,
    payoff: &Payoff,
    cfg: &MlmcConfig,
    levels: u32,
    pilot: u64,
    tol: f64,
    max_iter: u32,
    exec: &E,
) -> Result<ThetaSchedule> {
    if levels == 0 || levels > cfg.max_level {
        return Err(invalid("schedule levels must lie in [1, max_level]"));
    }
    let mut thetas = Vec::new();
    let mut diags = Vec::new();
    for level in 1..=levels {
        let problem = SaaProblem::from_pilot(model, payoff, cfg, level, pilot, exec)?;
        let sol = solve_saa(&problem, tol, max_iter)?;
        diags.push(LevelDiag {
            level,
            iterations: sol.iterations,
            grad_norm: Some(sol.grad_norm),
            step_norm: None,
            objective: Some(sol.objective),
        });
        thetas.push(sol.theta);
    }
    let mut s = ThetaSchedule::new(1, thetas, ThetaMethod::Saa)?;
    s.diagnostics = diags;
    Ok(s)
}

/// Builds a schedule for levels `1..=levels` by per-level recursions.
pub fn robbins_monro_schedule(
    model: &SdeModel,
    payoff: &Payoff,
    cfg: &MlmcConfig,
    levels: u32,
    rmc: &RmConfig,
) -> Result<ThetaSchedule> {
    if levels == 0 || levels > cfg.max_level {
        return Err(invalid("schedule levels must lie in [1, max_level]"));
    }
    let mut thetas = Vec::new();
    let mut diags = Vec::new();
    for level in 1..=levels {
        let (theta, diag) = rm_optimize_level(model, payoff, cfg, level, rmc)?;
        thetas.push(theta);
        diags.push(diag);
    }
    let mut s = ThetaSchedule::new(1, thetas, ThetaMethod::RobbinsMonro)?;
    s.diagnostics = diags;
    Ok(s)
}

/// Multilevel run with a precomputed shift schedule. Levels past the
/// schedule's end reuse its last shift (noted on the estimate).
pub fn run_is_mlmc<E: Executor>(
    model: &SdeModel,
    payoff: &Payoff,
    cfg: &MlmcConfig,
    eps: f64,
    schedule: &ThetaSchedule,
    opts: &RunOptions,
    exec: &E,
) -> Result<MlmcEstimate> {
    mlmc::run_mlmc(model, payoff, cfg, eps, Some(schedule), opts, exec)
}

/// Multilevel run that finds each level's shift on the fly: sample `k` of a
/// level is weighted with the iterate built from samples `1..k-1` only, the
/// recursion then absorbs sample `k`, and after a per-level burn-in of
/// `min(rmc.iterations, first_batch / 2)` samples the iterate freezes. New
/// levels start from the previous level's frozen shift.
///
/// With `gamma0 = 0` nothing ever moves and the run is bit-identical to the
/// plain estimator.
pub fn run_adaptive_is_mlmc<E: Executor>(
    model: &SdeModel,
    payoff: &Payoff,
    cfg: &MlmcConfig,
    eps: f64,
    rmc: &RmConfig,
    opts: &RunOptions,
    exec: &E,
) -> Result<MlmcEstimate> {
    cfg.validate()?;
    rmc.validate()?;
    let t = model.horizon();
    let q = model.dim_noise();
    let mut states: Vec<(RmState, u64)> = Vec::new();
    let res = mlmc::drive(eps, 1, cfg.max_level, opts, |level, existing, n_new| {
        let idx = (level - 1) as usize;
        if states.len() == idx {
            let st = if idx > 0 {
                states[idx - 1].0.inherit()
            } else if rmc.gamma0 > 0.0 && rmc.warm_pilot > 0 {
                warm_state(model, payoff, cfg, level, rmc)?
            } else {
                RmState::cold(q)
            };
            let burn = if rmc.gamma0 > 0.0 { rmc.iterations.min((n_new / 2).max(1)) } else { 0 };
            states.push((st, burn));
        }
        let (state, burn_remaining) = &mut states[idx];
        let norm = cfg.level_norm(level, t);
        let start = existing.count;
        // the adapting prefix runs sequentially but is rounded up to whole
        // chunks so the partial-sum tree matches the frozen/parallel layout
        let seq_len = if *burn_remaining == 0 {
            0
        } else {
            n_new.min(burn_remaining.div_ceil(CHUNK) * CHUNK)
        };
        let mut parts: Vec<Result<LevelStats>> = Vec::new();
        let mut done = 0u64;
        while done < seq_len {
            let hi = (done + CHUNK).min(seq_len);
            let mut part = LevelStats::new(level);
            for r in (start + done)..(start + hi) {
                let key = StreamKey::new(cfg.seed, Purpose::Estimation, level, r);
                let s = simulate_coupled(model, cfg, &state.theta, key)?;
                let weight = girsanov_weight(&state.theta, &s.w_t, t)?;
                let gf = payoff.eval(&s.x_fine);
                let fine = gf * weight;
                let dg = match s.x_coarse.as_deref() {
                    Some(xc) => {
                        let gc = payoff.eval(xc);
                        part.push(fine - gc * weight, s.cost);
                        gf - gc
                    }
                    None => {
                        part.push(fine, s.cost);
                        gf
                    }
                };
                if *burn_remaining > 0 {
                    let s_tilde = norm * dg * dg * weight;
                    let b: Vec<f64> =
                        s.w_t.iter().zip(&state.theta).map(|(w, th)| w + th * t).collect();
                    state.advance(s_tilde, &b, t, rmc);
                    *burn_remaining -= 1;
                }
            }
            parts.push(Ok(part));
            done = hi;
        }
        let frozen = state.theta.clone();
        parts.extend(chunk_parts(exec, start + seq_len, n_new - seq_len, |range| {
            let mut part = LevelStats::new(level);
            for r in range {
                let key = StreamKey::new(cfg.seed, Purpose::Estimation, level, r);
                let ls = level_payoff_difference(model, payoff, cfg, &frozen, key)?;
                part.push(ls.fine - ls.coarse.unwrap_or(0.0), ls.cost);
            }
            Ok(part)
        }));
        match parts.into_iter().reduce(merge_stats) {
            None => Ok(existing),
            Some(fresh) => {
                let mut total = existing;
                total.merge(&fresh?);
                Ok(total)
            }
        }
    });
    with_estimate(res, |e| {
        e.thetas = Some(states.iter().map(|(s, _)| s.theta.clone()).collect());
    })
}

/// Variance of the weighted level correction under `theta`, measured on `n`
/// fresh paths from the pilot stream family (independent of both optimizer
/// and estimation streams).
pub fn measure_level_variance<E: Executor>(
    model: &SdeModel,
    payoff: &Payoff,
    cfg: &MlmcConfig,
    theta: &[f64],
    level: u32,
    n: u64,
    exec: &E,
) -> Result<LevelStats> {
    if n < 2 {
        return Err(invalid("variance measurement needs n >= 2"));
    }
    chunked(
        exec,
        0,
        n,
        |range| {
            let mut part = LevelStats::new(level);
            for r in range {
                let key = StreamKey::new(cfg.seed, Purpose::Pilot, level, r);
                let ls = level_payoff_difference(model, payoff, cfg, theta, key)?;
                part.push(ls.fine - ls.coarse.unwrap_or(0.0), ls.cost);
            }
            Ok(part)
        },
        merge_stats,
    )
    .expect("n >= 2")
}
