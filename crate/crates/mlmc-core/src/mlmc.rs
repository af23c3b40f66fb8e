//! The multilevel driver: open pilot levels, allocate samples against the
//! variance budget, top up, test the weak-error rule, extend, repeat.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{bad_state, invalid};
use crate::exec::{chunked, Executor};
use crate::importance::ThetaSchedule;
use crate::math;
use crate::model::{MlmcConfig, Payoff, SdeModel};
use crate::paths::level_payoff_difference;
use crate::rng::{Purpose, StreamKey};
use crate::stats::{self, LevelStats, RateEstimates};
use crate::{MlmcError, Result};

/// Knobs of the driver loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    /// Samples drawn on every newly opened level.
    pub pilot: u64,
    /// Levels opened before the weak-error rule is consulted (at least 3).
    pub min_levels: u32,
    /// Cap on allocate / top-up / extend rounds.
    pub max_rounds: u32,
    /// Floor the per-level variance and |mean| estimates at half the
    /// geometric extrapolation from the previous level when allocating and
    /// testing bias. Keeps small pilots from starving deep levels whose
    /// empirical moments happen to come out near zero; the reported value
    /// and statistics stay raw.
    pub rate_guards: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { pilot: 10_000, min_levels: 3, max_rounds: 200, rate_guards: false }
    }
}

impl RunOptions {
    pub fn validate(&self) -> Result<()> {
        if self.pilot < 2 {
            return Err(invalid("pilot must be at least 2 samples per level"));
        }
        if self.min_levels == 0 || self.max_rounds == 0 {
            return Err(invalid("min_levels and max_rounds must be positive"));
        }
        Ok(())
    }
}

/// Result of a multilevel run, successful or partial.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmcEstimate {
    /// Telescoping sum of the level means.
    pub value: f64,
    /// RMS accuracy target the run was driven to.
    pub eps: f64,
    /// Per-level statistics, ordered by level.
    pub levels: Vec<LevelStats>,
    /// Exact total simulation cost (step evaluations across all samples).
    pub total_cost: f64,
    /// Decay rates fitted over the difference levels.
    pub rates: RateEstimates,
    /// Label of `levels[0]`; 1 for path estimators, 0 for nested ones.
    pub first_level: u32,
    /// Per-level drift shifts when the run used importance sampling.
    pub thetas: Option<Vec<Vec<f64>>>,
    /// Human-readable diagnostics accumulated by the driver.
    pub notes: Vec<String>,
}

impl MlmcEstimate {
    /// Standard error of `value`: sqrt of the summed per-level variances of
    /// the level means.
    pub fn std_error(&self) -> f64 {
        let var: f64 = self.levels.iter().map(|s| s.variance() / s.count as f64).sum();
        math::sqrt(var)
    }
}

/// Applies `f` to the estimate inside either the success or the
/// partial-result error path; other errors pass through.
pub(crate) fn with_estimate<F>(res: Result<MlmcEstimate>, f: F) -> Result<MlmcEstimate>
where
    F: FnOnce(&mut MlmcEstimate),
{
    match res {
        Ok(mut e) => {
            f(&mut e);
            Ok(e)
        }
        Err(MlmcError::BiasUnreachable { mut partial }) => {
            f(&mut partial);
            Err(MlmcError::BiasUnreachable { partial })
        }
        Err(e) => Err(e),
    }
}

fn assemble(levels: Vec<LevelStats>, eps: f64, mut notes: Vec<String>) -> Result<MlmcEstimate> {
    let value: f64 = levels.iter().map(|s| s.mean()).sum();
    stats::check_finite(value, "multilevel estimate")?;
    for s in &levels {
        if let Some(k) = s.kurtosis() {
            if k > 100.0 {
                notes.push(alloc::format!(
                    "kurtosis {k:.0} on level {}: variance estimate may be unreliable",
                    s.level
                ));
            }
        }
    }
    Ok(MlmcEstimate {
        value,
        eps,
        total_cost: levels.iter().map(|s| s.cost_total).sum(),
        rates: stats::fit_rates(&levels)?,
        first_level: levels[0].level,
        levels,
        thetas: None,
        notes,
    })
}

/// Generic driver loop over an abstract level sampler.
///
/// `feed(level, existing, n_new)` must draw `n_new` fresh samples for `level`
/// (replicates continuing from `existing.count`) and return the updated
/// stats. The loop: open `min_levels` pilot levels, then repeatedly allocate
/// sample counts for the variance half of the error budget, top up any
/// shortfall, and once no top-up is needed test the weak-error rule, opening
/// one more level while it fails.
pub(crate) fn drive<F>(
    eps: f64,
    first_level: u32,
    max_level: u32,
    opts: &RunOptions,
    mut feed: F,
) -> Result<MlmcEstimate>
where
    F: FnMut(u32, LevelStats, u64) -> Result<LevelStats>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(invalid("eps must be positive and finite"));
    }
    opts.validate()?;
    // bias extrapolation needs two difference levels, hence three levels
    let min_levels = opts.min_levels.max(3);
    if max_level < first_level || max_level - first_level + 1 < min_levels {
        return Err(invalid(alloc::format!(
            "max_level {max_level} leaves no room for {min_levels} levels from {first_level}"
        )));
    }

    let mut levels: Vec<LevelStats> = Vec::new();
    for i in 0..min_levels {
        let lvl = first_level + i;
        levels.push(feed(lvl, LevelStats::new(lvl), opts.pilot)?);
    }

    let mut notes: Vec<String> = Vec::new();
    let mut guards_noted = false;
    for _ in 0..opts.max_rounds {
        let mut vs: Vec<f64> = levels.iter().map(|s| s.variance()).collect();
        let cs: Vec<f64> = levels.iter().map(|s| s.cost_per_sample()).collect();
        let mut ms = stats::means(&levels);

        // weak rate for the bias rule: fitted once two difference levels are
        // regressable, floored at 1/2; plain Euler order otherwise
        let fitted = stats::fit_rates(&levels)?;
        let alpha = if levels.len() >= 4 {
            fitted.alpha.map(|a| a.max(0.5)).unwrap_or(1.0)
        } else {
            1.0
        };

        if opts.rate_guards {
            let beta = fitted.beta.map(|b| b.max(0.5)).unwrap_or(1.0);
            let fac_a = math::powf(2.0, -alpha);
            let fac_b = math::powf(2.0, -beta);
            for i in 2..levels.len() {
                vs[i] = vs[i].max(0.5 * vs[i - 1] * fac_b);
                ms[i] = if math::abs(ms[i]) > 0.5 * math::abs(ms[i - 1]) * fac_a {
                    ms[i]
                } else {
                    0.5 * math::abs(ms[i - 1]) * fac_a
                };
            }
            if !guards_noted {
                notes.push(String::from(
                    "rate guards active: allocation and bias test use extrapolation-floored moments",
                ));
                guards_noted = true;
            }
        }

        let targets = stats::allocate_from_moments(&vs, &cs, eps);
        let mut topped_up = false;
        for (i, &target) in targets.iter().enumerate() {
            if target > levels[i].count {
                let n_new = target - levels[i].count;
                let lvl = levels[i].level;
                let cur = core::mem::replace(&mut levels[i], LevelStats::new(lvl));
                levels[i] = feed(lvl, cur, n_new)?;
                topped_up = true;
            }
        }
        if topped_up {
            // moments moved; re-allocate before judging bias
            continue;
        }

        if stats::bias_converged(&ms, eps, alpha)? {
            return assemble(levels, eps, notes);
        }
        let next = levels.last().unwrap().level + 1;
        if next > max_level {
            notes.push(alloc::format!(
                "level cap {max_level} reached with the weak-error target unmet"
            ));
            let partial = assemble(levels, eps, notes)?;
            return Err(MlmcError::BiasUnreachable { partial: Box::new(partial) });
        }
        levels.push(feed(next, LevelStats::new(next), opts.pilot)?);
    }
    Err(bad_state(alloc::format!(
        "driver did not settle within {} rounds",
        opts.max_rounds
    )))
}

/// Draws `n_new` coupled samples for `level` under the drift shift `theta_l`
/// and folds the weighted payoff differences into `existing`. Replicate
/// indices continue from `existing.count`, so repeated calls never reuse a
/// random stream.
pub fn accumulate_level<E: Executor>(
    model: &SdeModel,
    payoff: &Payoff,
    cfg: &MlmcConfig,
    theta_l: &[f64],
    level: u32,
    n_new: u64,
    existing: LevelStats,
    exec: &E,
) -> Result<LevelStats> {
    if existing.level != level {
        return Err(invalid(alloc::format!(
            "existing stats are for level {}, not {level}",
            existing.level
        )));
    }
    let fresh = chunked(
        exec,
        existing.count,
        n_new,
        |range| {
            let mut s = LevelStats::new(level);
            for r in range {
                let key = StreamKey::new(cfg.seed, Purpose::Estimation, level, r);
                let ls = level_payoff_difference(model, payoff, cfg, theta_l, key)?;
                s.push(ls.fine - ls.coarse.unwrap_or(0.0), ls.cost);
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
}

pub(crate) fn merge_stats(a: Result<LevelStats>, b: Result<LevelStats>) -> Result<LevelStats> {
    match (a, b) {
        (Ok(mut x), Ok(y)) => {
            x.merge(&y);
            Ok(x)
        }
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

/// Core path-estimator loop shared by the plain and importance-sampled
/// runners: `theta_for(level)` supplies the shift used on each level, and the
/// shifts actually used are recorded on the estimate.
pub(crate) fn run_weighted<E, F>(
    model: &SdeModel,
    payoff: &Payoff,
    cfg: &MlmcConfig,
    eps: f64,
    opts: &RunOptions,
    exec: &E,
    mut theta_for: F,
) -> Result<MlmcEstimate>
where
    E: Executor,
    F: FnMut(u32) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let mut used: Vec<Vec<f64>> = Vec::new();
    let res = drive(eps, 1, cfg.max_level, opts, |level, existing, n_new| {
        let idx = (level - 1) as usize;
        if used.len() == idx {
            // levels open in order, so the shift is fixed on first contact
            used.push(theta_for(level)?);
        }
        let theta = used[idx].clone();
        accumulate_level(model, payoff, cfg, &theta, level, n_new, existing, exec)
    });
    with_estimate(res, |e| e.thetas = Some(core::mem::take(&mut used)))
}

/// Multilevel estimate of `E[G(X_T)]` to RMS accuracy `eps`.
///
/// With `schedule = None` every level runs under the nominal measure. A
/// schedule applies its per-level drift shift instead; levels beyond the
/// schedule reuse its last entry (noted on the estimate).
pub fn run_mlmc<E: Executor>(
    model: &SdeModel,
    payoff: &Payoff,
    cfg: &MlmcConfig,
    eps: f64,
    schedule: Option<&ThetaSchedule>,
    opts: &RunOptions,
    exec: &E,
) -> Result<MlmcEstimate> {
    match schedule {
        None => {
            let q = model.dim_noise();
            let res =
                run_weighted(model, payoff, cfg, eps, opts, exec, |_| Ok(alloc::vec![0.0; q]));
            with_estimate(res, |e| e.thetas = None)
        }
        Some(s) => {
            s.check_dim(model.dim_noise())?;
            let last = s.last_level();
            let mut extended = false;
            let res = run_weighted(model, payoff, cfg, eps, opts, exec, |level| {
                if level > last {
                    extended = true;
                }
                Ok(s.theta_for(level).to_vec())
            });
            with_estimate(res, |e| {
                if extended {
                    e.notes.push(alloc::format!(
                        "schedule ends at level {last}; deeper levels reuse its last shift"
                    ));
                }
            })
        }
    }
}

/// Fixed-size statistics of levels `1..=max_level`, `n_per_level` coupled
/// samples each, under an optional shift schedule. A rate-study helper, not
/// an estimator: it spends the same effort everywhere so the level decays
/// are visible.
pub fn measure_levels<E: Executor>(
    model: &SdeModel,
    payoff: &Payoff,
    cfg: &MlmcConfig,
    schedule: Option<&ThetaSchedule>,
    max_level: u32,
    n_per_level: u64,
    exec: &E,
) -> Result<Vec<LevelStats>> {
    cfg.validate()?;
    if n_per_level < 2 {
        return Err(invalid("need at least 2 samples per level"));
    }
    if max_level == 0 || max_level > cfg.max_level {
        return Err(invalid("max_level must lie in [1, cfg.max_level]"));
    }
    let q = model.dim_noise();
    if let Some(s) = schedule {
        s.check_dim(q)?;
    }
    (1..=max_level)
        .map(|level| {
            let theta = match schedule {
                Some(s) => s.theta_for(level).to_vec(),
                None => alloc::vec![0.0; q],
            };
            accumulate_level(model, payoff, cfg, &theta, level, n_per_level, LevelStats::new(level), exec)
        })
        .collect()
}
