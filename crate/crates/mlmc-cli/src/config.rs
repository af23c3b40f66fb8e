//! JSON experiment configuration: strict parsing (unknown fields are
//! errors), then a validation pass that names the offending field.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use mlmc_core::importance::{RmConfig, SAA_MAX_ITER, SAA_TOL};
use mlmc_core::mlmc::RunOptions;
use mlmc_core::model::{MlmcConfig, Payoff, SdeModel};
use mlmc_core::risk::{AdaptiveConfig, MomentMode, RiskProblem};

/// Configuration rejection; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// Plain multilevel price.
    Price,
    /// Price under a precomputed per-level drift shift schedule.
    PriceIs,
    /// Price with the shift adapted inside the run.
    PriceIsAdaptive,
    /// Fixed-size per-level statistics and fitted decay rates.
    LevelRates,
    /// Large-loss probability.
    RiskEta,
    /// Quantile and tail mean of the loss distribution.
    RiskVarCvar,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Price => "price",
            Experiment::PriceIs => "price_is",
            Experiment::PriceIsAdaptive => "price_is_adaptive",
            Experiment::LevelRates => "level_rates",
            Experiment::RiskEta => "risk_eta",
            Experiment::RiskVarCvar => "risk_var_cvar",
        }
    }

    fn is_pricing(&self) -> bool {
        matches!(
            self,
            Experiment::Price
                | Experiment::PriceIs
                | Experiment::PriceIsAdaptive
                | Experiment::LevelRates
        )
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Gbm { x0: f64, mu: f64, sigma: f64, horizon: f64 },
    GbmBasket { dim: usize, x0: f64, mu: f64, sigma: f64, rho: f64, horizon: f64 },
}

impl ModelConfig {
    pub fn build(&self) -> anyhow::Result<SdeModel> {
        let model = match *self {
            ModelConfig::Gbm { x0, mu, sigma, horizon } => SdeModel::gbm(x0, mu, sigma, horizon),
            ModelConfig::GbmBasket { dim, x0, mu, sigma, rho, horizon } => {
                SdeModel::gbm_basket(dim, x0, mu, sigma, rho, horizon)
            }
        };
        model.map_err(|e| bad(format!("model: {e}")))
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelConfig::Gbm { .. } => 1,
            ModelConfig::GbmBasket { dim, .. } => *dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoffName {
    Call,
    Put,
    BasketCall,
    Digital,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PayoffConfig {
    pub name: PayoffName,
    pub strike: f64,
}

impl PayoffConfig {
    pub fn build(&self) -> Payoff {
        match self.name {
            PayoffName::Call => Payoff::call(self.strike),
            PayoffName::Put => Payoff::put(self.strike),
            PayoffName::BasketCall => Payoff::basket_call(self.strike),
            PayoffName::Digital => Payoff::digital(self.strike),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlmcSection {
    pub refine_factor: u32,
    pub base_steps: u32,
    pub max_level: u32,
    pub pilot: u64,
    pub min_levels: u32,
    pub max_rounds: u32,
    pub rate_guards: bool,
}

impl Default for MlmcSection {
    fn default() -> Self {
        MlmcSection {
            refine_factor: 2,
            base_steps: 2,
            max_level: 20,
            pilot: 10_000,
            min_levels: 3,
            max_rounds: 200,
            rate_guards: false,
        }
    }
}

impl MlmcSection {
    pub fn mlmc_config(&self, seed: u64) -> MlmcConfig {
        MlmcConfig {
            refine_factor: self.refine_factor,
            base_steps: self.base_steps,
            max_level: self.max_level,
            seed,
        }
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            pilot: self.pilot,
            min_levels: self.min_levels,
            max_rounds: self.max_rounds,
            rate_guards: self.rate_guards,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IsMethod {
    Saa,
    RobbinsMonro,
    Zero,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmSection {
    pub radius: f64,
    pub gamma0: f64,
    pub n0: f64,
    pub iterations: u64,
    pub warm_pilot: u64,
    pub averaging: bool,
}

impl Default for RmSection {
    fn default() -> Self {
        let c = RmConfig::default();
        RmSection {
            radius: c.radius,
            gamma0: c.gamma0,
            n0: c.n0,
            iterations: c.iterations,
            warm_pilot: c.warm_pilot,
            averaging: c.averaging,
        }
    }
}

impl RmSection {
    pub fn rm_config(&self) -> RmConfig {
        RmConfig {
            radius: self.radius,
            gamma0: self.gamma0,
            n0: self.n0,
            iterations: self.iterations,
            warm_pilot: self.warm_pilot,
            averaging: self.averaging,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct IsSection {
    pub method: IsMethod,
    /// Pilot paths per level for the sample-average objective.
    pub pilot: u64,
    /// Depth of the precomputed schedule; deeper levels reuse the last shift.
    pub levels: u32,
    pub saa_tol: f64,
    pub saa_max_iter: u32,
    pub rm: RmSection,
}

impl Default for IsSection {
    fn default() -> Self {
        IsSection {
            method: IsMethod::Saa,
            pilot: 10_000,
            levels: 6,
            saa_tol: SAA_TOL,
            saa_max_iter: SAA_MAX_ITER,
            rm: RmSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskProblemName {
    Gaussian,
    GaussianPortfolio,
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskMethod {
    NestedMc,
    Uniform,
    Adaptive,
}

impl RiskMethod {
    pub fn name(&self) -> &'static str {
        match self {
            RiskMethod::NestedMc => "nested_mc",
            RiskMethod::Uniform => "uniform",
            RiskMethod::Adaptive => "adaptive",
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveSection {
    pub confidence_const: f64,
    pub exponent_r: f64,
    pub moment_q: f64,
    pub eps_cap_const: f64,
    pub oracle_moments: bool,
}

impl Default for AdaptiveSection {
    fn default() -> Self {
        let c = AdaptiveConfig::default();
        AdaptiveSection {
            confidence_const: c.confidence_const,
            exponent_r: c.exponent_r,
            moment_q: c.moment_q,
            eps_cap_const: c.eps_cap_const,
            oracle_moments: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiskSection {
    pub problem: RiskProblemName,
    pub threshold: f64,
    /// Constituents of the portfolio problem; also the cost multiplier.
    pub portfolio_size: u32,
    pub method: RiskMethod,
    /// Tail level for the VaR/CVaR experiment.
    pub quantile: f64,
    pub n0_inner: u64,
    pub max_level: u32,
    /// Plain nested MC sizes its scenario count as `ceil(outer_coeff/eps^2)`
    /// and its inner count as `ceil(inner_coeff/eps)`.
    pub outer_coeff: f64,
    pub inner_coeff: f64,
    pub adaptive: AdaptiveSection,
}

impl Default for RiskSection {
    fn default() -> Self {
        RiskSection {
            problem: RiskProblemName::Gaussian,
            threshold: 1.0,
            portfolio_size: 1,
            method: RiskMethod::Adaptive,
            quantile: 0.05,
            n0_inner: 16,
            max_level: 20,
            outer_coeff: 0.5,
            inner_coeff: 0.5,
            adaptive: AdaptiveSection::default(),
        }
    }
}

impl RiskSection {
    pub fn build_problem(&self) -> anyhow::Result<RiskProblem> {
        let p = match self.problem {
            RiskProblemName::Gaussian => Ok(RiskProblem::gaussian(self.threshold)),
            RiskProblemName::GaussianPortfolio => {
                RiskProblem::gaussian_portfolio(self.threshold, self.portfolio_size)
            }
            RiskProblemName::Degenerate => Ok(RiskProblem::degenerate(self.threshold)),
        };
        p.map_err(|e| bad(format!("risk.problem: {e}")))
    }

    pub fn adaptive_config(&self) -> AdaptiveConfig {
        AdaptiveConfig {
            confidence_const: self.adaptive.confidence_const,
            exponent_r: self.adaptive.exponent_r,
            moment_q: self.adaptive.moment_q,
            eps_cap_const: self.adaptive.eps_cap_const,
            n0_inner: self.n0_inner,
            mode: if self.adaptive.oracle_moments {
                MomentMode::Oracle
            } else {
                MomentMode::Estimated
            },
        }
    }
}

fn default_replicates() -> u32 {
    1
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payoff: Option<PayoffConfig>,
    /// Accuracy targets; `run` uses the first entry, `sweep` all of them.
    pub eps: Vec<f64>,
    #[serde(default)]
    pub mlmc: MlmcSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is: Option<IsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk: Option<RiskSection>,
    pub seed: u64,
    #[serde(default = "default_replicates")]
    pub replicates: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.eps.is_empty() {
            return Err(bad("eps: at least one accuracy target is required"));
        }
        for (i, e) in self.eps.iter().enumerate() {
            if !(*e > 0.0) || !e.is_finite() {
                return Err(bad(format!("eps[{i}]: must be positive and finite, got {e}")));
            }
        }
        if self.replicates == 0 {
            return Err(bad("replicates: must be at least 1"));
        }
        if self.experiment.is_pricing() {
            let model = self
                .model
                .as_ref()
                .ok_or_else(|| bad(format!("model: required for experiment {}", self.experiment.name())))?;
            let payoff = self
                .payoff
                .as_ref()
                .ok_or_else(|| bad(format!("payoff: required for experiment {}", self.experiment.name())))?;
            if !payoff.strike.is_finite() || payoff.strike <= 0.0 {
                return Err(bad("payoff.strike: must be positive and finite"));
            }
            if payoff.name == PayoffName::BasketCall && model.dim() == 1 {
                // legal (a basket of one), just suspicious enough to reject
                return Err(bad("payoff.name: basket_call needs a multi-asset model"));
            }
            model.build()?;
            self.mlmc
                .mlmc_config(self.seed)
                .validate()
                .map_err(|e| bad(format!("mlmc: {e}")))?;
            self.mlmc.run_options().validate().map_err(|e| bad(format!("mlmc: {e}")))?;
            if let Some(is) = &self.is {
                if is.levels == 0 || is.levels > self.mlmc.max_level {
                    return Err(bad("is.levels: must lie in [1, mlmc.max_level]"));
                }
                is.rm.rm_config().validate().map_err(|e| bad(format!("is.rm: {e}")))?;
                if !(is.saa_tol > 0.0) {
                    return Err(bad("is.saa_tol: must be positive"));
                }
                if is.pilot < 2 {
                    return Err(bad("is.pilot: must be at least 2"));
                }
            }
        } else {
            let risk = self
                .risk
                .as_ref()
                .ok_or_else(|| bad(format!("risk: required for experiment {}", self.experiment.name())))?;
            risk.build_problem()?;
            risk.adaptive_config().validate().map_err(|e| bad(format!("risk.adaptive: {e}")))?;
            if !(risk.quantile > 0.0 && risk.quantile < 1.0) {
                return Err(bad("risk.quantile: must lie strictly between 0 and 1"));
            }
            if !(risk.outer_coeff > 0.0) || !(risk.inner_coeff > 0.0) {
                return Err(bad("risk.outer_coeff / risk.inner_coeff: must be positive"));
            }
            self.mlmc.run_options().validate().map_err(|e| bad(format!("mlmc: {e}")))?;
        }
        Ok(())
    }

    /// FNV-1a over the canonical JSON encoding; identifies the config in
    /// reports without dragging the whole document along.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

pub fn load(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(|e| bad(format!("{e:#}")))?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}
