//! SDE dynamics, payoff functionals, and the change-of-measure machinery
//! (drift shift plus likelihood weight) shared by every estimator.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::invalid;
use crate::math;
use crate::rng::{Purpose, StreamKey};
use crate::Result;

/// A vector field on the state space, written into a caller-provided buffer.
/// Must be pure: evaluation may not depend on hidden mutable state, since
/// models are shared across worker threads.
pub type StateFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Drift/diffusion specification of a d-dimensional SDE
/// `dX = b(X) dt + sum_j sigma_j(X) dW_j` driven by a q-dimensional
/// Brownian motion, together with the initial state and time horizon.
#[derive(Clone)]
pub struct SdeModel {
    dim_state: usize,
    dim_noise: usize,
    drift: StateFn,
    diffusion_cols: Vec<StateFn>,
    x0: Vec<f64>,
    horizon: f64,
}

impl core::fmt::Debug for SdeModel {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("SdeModel")
            .field("dim_state", &self.dim_state)
            .field("dim_noise", &self.dim_noise)
            .field("x0", &self.x0)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

impl SdeModel {
    pub fn new(
        drift: StateFn,
        diffusion_cols: Vec<StateFn>,
        x0: Vec<f64>,
        horizon: f64,
    ) -> Result<SdeModel> {
        if x0.is_empty() {
            return Err(invalid("x0 must be non-empty"));
        }
        if diffusion_cols.is_empty() {
            return Err(invalid("need at least one diffusion column"));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(invalid("horizon must be positive and finite"));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(invalid("x0 must be finite"));
        }
        Ok(SdeModel {
            dim_state: x0.len(),
            dim_noise: diffusion_cols.len(),
            drift,
            diffusion_cols,
            x0,
            horizon,
        })
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    #[inline]
    pub fn eval_drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out);
    }

    #[inline]
    pub fn eval_diffusion_col(&self, j: usize, x: &[f64], out: &mut [f64]) {
        (self.diffusion_cols[j])(x, out);
    }

    /// 1-d geometric Brownian motion `dX = mu X dt + sigma X dW`.
    pub fn gbm(x0: f64, mu: f64, sigma: f64, horizon: f64) -> Result<SdeModel> {
        let drift: StateFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
            out[0] = mu * x[0];
        });
        let col: StateFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
            out[0] = sigma * x[0];
        });
        SdeModel::new(drift, alloc::vec![col], alloc::vec![x0], horizon)
    }

    /// d-dimensional GBM, every asset with the same `mu`, `sigma`, initial
    /// value, and pairwise correlation `rho` between the driving Brownian
    /// motions. Correlation is realized by mixing independent drivers through
    /// the Cholesky factor of the equicorrelation matrix, so `rho` must keep
    /// that matrix positive definite (`rho` in (-1/(d-1), 1)).
    pub fn gbm_basket(
        dim: usize,
        x0: f64,
        mu: f64,
        sigma: f64,
        rho: f64,
        horizon: f64,
    ) -> Result<SdeModel> {
        if dim == 0 {
            return Err(invalid("basket dimension must be positive"));
        }
        let mut corr = alloc::vec![rho; dim * dim];
        for i in 0..dim {
            corr[i * dim + i] = 1.0;
        }
        let chol = math::cholesky_factor(&corr, dim)
            .ok_or_else(|| invalid("correlation matrix is not positive definite"))?;
        let chol = Arc::new(chol);
        let drift: StateFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
            for i in 0..x.len() {
                out[i] = mu * x[i];
            }
        });
        let cols: Vec<StateFn> = (0..dim)
            .map(|j| {
                let l = Arc::clone(&chol);
                let f: StateFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
                    let d = x.len();
                    for i in 0..d {
                        // lower-triangular factor: column j touches rows i >= j
                        out[i] = if i >= j { sigma * x[i] * l[i * d + j] } else { 0.0 };
                    }
                });
                f
            })
            .collect();
        SdeModel::new(drift, cols, alloc::vec![x0; dim], horizon)
    }

    /// Empirical Lipschitz diagnostic: samples `pairs` random point pairs in
    /// the box `[lo, hi]^d` and reports the largest observed ratio
    /// `(|b(x)-b(y)| + sum_j |sigma_j(x)-sigma_j(y)|) / |x-y|`.
    ///
    /// Advisory only; a finite return does not prove global Lipschitz
    /// continuity, it just flags wild coefficients early.
    pub fn empirical_lipschitz(&self, lo: f64, hi: f64, pairs: u32, seed: u64) -> f64 {
        let d = self.dim_state;
        let mut stream = StreamKey::new(seed, Purpose::Pilot, 0, 0).stream();
        let mut x = alloc::vec![0.0; d];
        let mut y = alloc::vec![0.0; d];
        let mut bx = alloc::vec![0.0; d];
        let mut by = alloc::vec![0.0; d];
        let mut best: f64 = 0.0;
        for _ in 0..pairs {
            for i in 0..d {
                x[i] = lo + (hi - lo) * stream.uniform();
                y[i] = lo + (hi - lo) * stream.uniform();
            }
            let mut dist2 = 0.0;
            for i in 0..d {
                let dv = x[i] - y[i];
                dist2 += dv * dv;
            }
            if dist2 == 0.0 {
                continue;
            }
            self.eval_drift(&x, &mut bx);
            self.eval_drift(&y, &mut by);
            let mut num = diff_norm(&bx, &by);
            for j in 0..self.dim_noise {
                self.eval_diffusion_col(j, &x, &mut bx);
                self.eval_diffusion_col(j, &y, &mut by);
                num += diff_norm(&bx, &by);
            }
            best = best.max(num / math::sqrt(dist2));
        }
        best
    }
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    math::sqrt(s)
}

/// Terminal-state functional `G` with a human-readable label.
///
/// Non-degeneracy (`P(G(X) != 0) > 0`) is required by the variance
/// optimizers; they check it empirically on their pilot samples before
/// running.
pub type PayoffFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct Payoff {
    label: String,
    eval: PayoffFn,
}

impl core::fmt::Debug for Payoff {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Payoff({})", self.label)
    }
}

impl Payoff {
    pub fn new(label: impl Into<String>, eval: PayoffFn) -> Payoff {
        Payoff { label: label.into(), eval }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    /// European call on the first coordinate: `(x_0 - strike)^+`.
    pub fn call(strike: f64) -> Payoff {
        Payoff::new(
            alloc::format!("call(k={strike})"),
            Arc::new(move |x: &[f64]| (x[0] - strike).max(0.0)),
        )
    }

    /// European put on the first coordinate: `(strike - x_0)^+`.
    pub fn put(strike: f64) -> Payoff {
        Payoff::new(
            alloc::format!("put(k={strike})"),
            Arc::new(move |x: &[f64]| (strike - x[0]).max(0.0)),
        )
    }

    /// Call on the arithmetic mean of all coordinates.
    pub fn basket_call(strike: f64) -> Payoff {
        Payoff::new(
            alloc::format!("basket_call(k={strike})"),
            Arc::new(move |x: &[f64]| {
                let mean = x.iter().sum::<f64>() / x.len() as f64;
                (mean - strike).max(0.0)
            }),
        )
    }

    /// Bounded digital: 1 when the first coordinate exceeds the barrier,
    /// else 0. Strict inequality, consistent with the Heaviside convention
    /// used by the risk estimators.
    pub fn digital(barrier: f64) -> Payoff {
        Payoff::new(
            alloc::format!("digital(b={barrier})"),
            Arc::new(move |x: &[f64]| if x[0] > barrier { 1.0 } else { 0.0 }),
        )
    }

    pub fn constant(value: f64) -> Payoff {
        Payoff::new(alloc::format!("const({value})"), Arc::new(move |_: &[f64]| value))
    }
}

/// Grid geometry and seeding for a multilevel run. Levels are 1-based; the
/// first level estimates the base quantity and level l >= 2 estimates the
/// correction between grids l and l-1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlmcConfig {
    /// Grid refinement factor M between consecutive levels.
    pub refine_factor: u32,
    /// Time steps on the coarsest grid (level 1).
    pub base_steps: u32,
    /// Hard cap on the number of levels.
    pub max_level: u32,
    /// Root seed; all random streams derive from it.
    pub seed: u64,
}

impl Default for MlmcConfig {
    fn default() -> Self {
        MlmcConfig { refine_factor: 2, base_steps: 2, max_level: 16, seed: 0 }
    }
}

impl MlmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.refine_factor < 2 {
            return Err(invalid("refine_factor must be at least 2"));
        }
        if self.base_steps == 0 {
            return Err(invalid("base_steps must be positive"));
        }
        if self.max_level == 0 {
            return Err(invalid("max_level must be positive"));
        }
        // step counts must stay exactly representable
        let _ = self.checked_steps(self.max_level).ok_or_else(|| {
            invalid("base_steps * refine_factor^(max_level-1) overflows the step counter")
        })?;
        Ok(())
    }

    fn checked_steps(&self, level: u32) -> Option<u64> {
        let mut n = self.base_steps as u64;
        for _ in 1..level {
            n = n.checked_mul(self.refine_factor as u64)?;
        }
        Some(n)
    }

    /// Number of Euler steps on the fine grid of `level` (1-based).
    pub fn steps_at(&self, level: u32) -> u64 {
        assert!(level >= 1, "levels are 1-based");
        self.checked_steps(level).expect("step count overflow; validate() bounds max_level")
    }

    /// Fine-grid step size at `level` for a horizon-`t` problem.
    pub fn h_at(&self, level: u32, t: f64) -> f64 {
        t / self.steps_at(level) as f64
    }

    /// Variance-objective normalization for `level`: 1 on the first level,
    /// the reciprocal step-size gap `1/(h_{l-1} - h_l)` above it, so squared
    /// payoff differences enter the objectives on an O(1) scale.
    pub fn level_norm(&self, level: u32, t: f64) -> f64 {
        if level <= 1 {
            1.0
        } else {
            1.0 / (self.h_at(level - 1, t) - self.h_at(level, t))
        }
    }
}

/// Likelihood weight of the drift shift `theta`: for terminal Brownian value
/// `w_T` over horizon `t`, returns `exp(-<theta, w_T> - |theta|^2 t / 2)`.
/// Strictly positive; multiplying a payoff sampled under the shifted
/// dynamics by this weight restores the original expectation.
pub fn girsanov_weight(theta: &[f64], w_t: &[f64], t: f64) -> Result<f64> {
    if theta.len() != w_t.len() {
        return Err(invalid("theta and w_T must have the same dimension"));
    }
    if !(t > 0.0) || !t.is_finite() {
        return Err(invalid("horizon must be positive and finite"));
    }
    if theta.iter().chain(w_t.iter()).any(|v| !v.is_finite()) {
        return Err(invalid("girsanov_weight needs finite inputs"));
    }
    Ok(math::exp(-math::dot(theta, w_t) - 0.5 * math::norm_sq(theta) * t))
}

/// Drift of the shifted dynamics: `x -> b(x) + sigma(x) theta`, with
/// `sigma(x)` the d x q matrix of diffusion columns. `theta = 0` returns a
/// function pointwise equal to the original drift.
pub fn shifted_drift(model: &SdeModel, theta: &[f64]) -> Result<StateFn> {
    if theta.len() != model.dim_noise() {
        return Err(invalid("theta dimension must match the noise dimension"));
    }
    let theta: Vec<f64> = theta.to_vec();
    let m = model.clone();
    let d = model.dim_state();
    Ok(Arc::new(move |x: &[f64], out: &mut [f64]| {
        m.eval_drift(x, out);
        let mut col = alloc::vec![0.0; d];
        for (j, &tj) in theta.iter().enumerate() {
            m.eval_diffusion_col(j, x, &mut col);
            for i in 0..d {
                out[i] += col[i] * tj;
            }
        }
    }))
}
