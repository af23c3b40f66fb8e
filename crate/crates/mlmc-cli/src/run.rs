//! Experiment dispatch: configuration in, report records out.

use anyhow::Context;

use mlmc_core::analytic;
use mlmc_core::importance::{
    robbins_monro_schedule, run_adaptive_is_mlmc, saa_schedule, ThetaSchedule,
};
use mlmc_core::mlmc::{measure_levels, run_mlmc, MlmcEstimate};
use mlmc_core::model::{MlmcConfig, Payoff, SdeModel};
use mlmc_core::risk::{nested_mc, nested_mlmc_adaptive, nested_mlmc_uniform, var_cvar};
use mlmc_core::stats::fit_rates;

use crate::config::{
    Experiment, ExperimentConfig, IsMethod, IsSection, ModelConfig, PayoffName, RiskMethod,
    RiskProblemName, RiskSection,
};
use crate::exec::RayonExecutor;
use crate::report::{
    level_rows_from_estimate, level_rows_from_risk, var_cvar_row, LevelRow, Meta, RatesRow,
    ReferenceRow, Report,
};

fn count_from(x: f64) -> u64 {
    (x.ceil() as u64).max(1)
}

fn closed_form_price(model: &ModelConfig, payoff_name: PayoffName, strike: f64) -> Option<(String, f64)> {
    match (model, payoff_name) {
        (&ModelConfig::Gbm { x0, mu, sigma, .. }, PayoffName::Call) => Some((
            "closed_form_call".into(),
            analytic::bs_call(x0, strike, mu, sigma, horizon_of(model)),
        )),
        (&ModelConfig::Gbm { x0, mu, sigma, .. }, PayoffName::Put) => Some((
            "closed_form_put".into(),
            analytic::bs_put(x0, strike, mu, sigma, horizon_of(model)),
        )),
        _ => None,
    }
}

fn horizon_of(model: &ModelConfig) -> f64 {
    match *model {
        ModelConfig::Gbm { horizon, .. } => horizon,
        ModelConfig::GbmBasket { horizon, .. } => horizon,
    }
}

fn reference_row(name: String, value: f64, estimate: f64) -> ReferenceRow {
    ReferenceRow { name, value, abs_error: (estimate - value).abs() }
}

fn build_schedule(
    model: &SdeModel,
    payoff: &Payoff,
    mc: &MlmcConfig,
    is: &IsSection,
    exec: &RayonExecutor,
) -> anyhow::Result<ThetaSchedule> {
    let schedule = match is.method {
        IsMethod::Saa => {
            saa_schedule(model, payoff, mc, is.levels, is.pilot, is.saa_tol, is.saa_max_iter, exec)?
        }
        IsMethod::RobbinsMonro => {
            robbins_monro_schedule(model, payoff, mc, is.levels, &is.rm.rm_config())?
        }
        IsMethod::Zero => ThetaSchedule::zero(model.dim_noise(), is.levels)?,
    };
    Ok(schedule)
}

struct ReportParts {
    value: f64,
    std_error: f64,
    total_cost: f64,
    levels: Vec<LevelRow>,
    rates: Option<RatesRow>,
    reference: Option<ReferenceRow>,
    notes: Vec<String>,
}

fn price_report_parts(cfg: &ExperimentConfig, est: &MlmcEstimate) -> ReportParts {
    let reference = cfg.payoff.as_ref().and_then(|p| {
        closed_form_price(cfg.model.as_ref().unwrap(), p.name, p.strike)
            .map(|(name, v)| reference_row(name, v, est.value))
    });
    ReportParts {
        value: est.value,
        std_error: est.std_error(),
        total_cost: est.total_cost,
        levels: level_rows_from_estimate(est),
        rates: Some(RatesRow::from(&est.rates)),
        reference,
        notes: est.notes.clone(),
    }
}

fn risk_reference(section: &RiskSection, experiment: Experiment, estimate: f64) -> Option<ReferenceRow> {
    // every built-in problem has a standard normal conditional mean
    match section.problem {
        RiskProblemName::Gaussian | RiskProblemName::GaussianPortfolio | RiskProblemName::Degenerate => {
            match experiment {
                Experiment::RiskEta => Some(reference_row(
                    "closed_form_eta".into(),
                    analytic::gaussian_eta(section.threshold),
                    estimate,
                )),
                Experiment::RiskVarCvar => Some(reference_row(
                    "closed_form_var".into(),
                    analytic::gaussian_var(section.quantile),
                    estimate,
                )),
                _ => None,
            }
        }
    }
}

/// Runs one experiment instance. The replicate index offsets the seed, so
/// replicates are independent and the pair (config, replicate) pins every
/// random stream in the run.
pub fn run_one(cfg: &ExperimentConfig, eps: f64, replicate: u32) -> anyhow::Result<Report> {
    let exec = RayonExecutor;
    let seed = cfg.seed.wrapping_add(replicate as u64);
    let experiment = cfg.experiment;

    let (value, std_error, total_cost, levels, rates, reference, vc, mut notes);
    match experiment {
        Experiment::Price | Experiment::PriceIs | Experiment::PriceIsAdaptive | Experiment::LevelRates => {
            let model = cfg.model.as_ref().expect("validated").build()?;
            let payoff = cfg.payoff.as_ref().expect("validated").build();
            let mc = cfg.mlmc.mlmc_config(seed);
            let opts = cfg.mlmc.run_options();
            vc = None;
            if experiment == Experiment::LevelRates {
                let stats =
                    measure_levels(&model, &payoff, &mc, None, cfg.mlmc.max_level, cfg.mlmc.pilot, &exec)
                        .context("level rate study")?;
                let fitted = fit_rates(&stats)?;
                value = stats.iter().map(|s| s.mean()).sum();
                std_error =
                    stats.iter().map(|s| s.variance() / s.count as f64).sum::<f64>().sqrt();
                total_cost = stats.iter().map(|s| s.cost_total).sum();
                levels = stats
                    .iter()
                    .map(|s| LevelRow {
                        level: s.level,
                        n: s.count,
                        mean: s.mean(),
                        variance: s.variance(),
                        cost_per_sample: s.cost_per_sample(),
                        kurtosis: s.kurtosis(),
                        theta_norm: None,
                        avg_inner: None,
                    })
                    .collect();
                rates = Some(RatesRow::from(&fitted));
                reference = cfg.payoff.as_ref().and_then(|p| {
                    closed_form_price(cfg.model.as_ref().unwrap(), p.name, p.strike)
                        .map(|(name, v)| reference_row(name, v, value))
                });
                notes = vec![format!(
                    "{} samples per level on levels 1..={}",
                    cfg.mlmc.pilot, cfg.mlmc.max_level
                )];
            } else {
                let est = match experiment {
                    Experiment::Price => run_mlmc(&model, &payoff, &mc, eps, None, &opts, &exec)?,
                    Experiment::PriceIs => {
                        let is = cfg.is.clone().unwrap_or_default();
                        let schedule = build_schedule(&model, &payoff, &mc, &is, &exec)?;
                        run_mlmc(&model, &payoff, &mc, eps, Some(&schedule), &opts, &exec)?
                    }
                    Experiment::PriceIsAdaptive => {
                        let is = cfg.is.clone().unwrap_or_default();
                        run_adaptive_is_mlmc(&model, &payoff, &mc, eps, &is.rm.rm_config(), &opts, &exec)?
                    }
                    _ => unreachable!(),
                };
                let parts = price_report_parts(cfg, &est);
                value = parts.value;
                std_error = parts.std_error;
                total_cost = parts.total_cost;
                levels = parts.levels;
                rates = parts.rates;
                reference = parts.reference;
                notes = parts.notes;
                if experiment == Experiment::PriceIs {
                    let is = cfg.is.clone().unwrap_or_default();
                    notes.push(format!(
                        "shift schedule: {:?} over levels 1..={}",
                        is.method, is.levels
                    ));
                }
            }
        }
        Experiment::RiskEta | Experiment::RiskVarCvar => {
            let section = cfg.risk.clone().expect("validated");
            let problem = section.build_problem()?;
            let opts = cfg.mlmc.run_options();
            let est = match experiment {
                Experiment::RiskEta => match section.method {
                    RiskMethod::NestedMc => {
                        let m = count_from(section.outer_coeff / (eps * eps));
                        let n = count_from(section.inner_coeff / eps).max(2);
                        nested_mc(&problem, m, n, seed, &exec)?
                    }
                    RiskMethod::Uniform => nested_mlmc_uniform(
                        &problem,
                        eps,
                        section.n0_inner,
                        &opts,
                        section.max_level,
                        seed,
                        &exec,
                    )?,
                    RiskMethod::Adaptive => nested_mlmc_adaptive(
                        &problem,
                        eps,
                        &section.adaptive_config(),
                        &opts,
                        section.max_level,
                        seed,
                        &exec,
                    )?,
                },
                Experiment::RiskVarCvar => var_cvar(
                    &problem,
                    section.quantile,
                    eps,
                    &section.adaptive_config(),
                    &opts,
                    section.max_level,
                    seed,
                    &exec,
                )?,
                _ => unreachable!(),
            };
            vc = var_cvar_row(&est);
            value = match &vc {
                Some(row) => row.var,
                None => est.eta,
            };
            std_error = est.std_error;
            total_cost = est.total_inner_samples;
            levels = level_rows_from_risk(&est);
            rates = est.rates.as_ref().map(RatesRow::from);
            reference = risk_reference(&section, experiment, value);
            notes = match section.method {
                RiskMethod::NestedMc if experiment == Experiment::RiskEta => vec![format!(
                    "nested_mc sized from eps: {} scenarios x {} inner",
                    est.levels[0].stats.count, est.levels[0].avg_inner
                )],
                _ => vec![],
            };
            if let (Some(row), RiskProblemName::Gaussian | RiskProblemName::GaussianPortfolio | RiskProblemName::Degenerate) =
                (&vc, section.problem)
            {
                let cv = analytic::gaussian_cvar(section.quantile);
                notes.push(format!(
                    "closed-form cvar {cv:.6}, abs err {:.3e}",
                    (row.cvar - cv).abs()
                ));
            }
        }
    }

    Ok(Report {
        meta: Meta::new(cfg.hash()),
        experiment: experiment.name().to_string(),
        replicate,
        seed,
        eps,
        value,
        std_error,
        total_cost,
        levels,
        rates,
        reference,
        var_cvar: vc,
        notes,
    })
}

/// All replicates at all requested accuracies, replicate-major so one
/// replicate's eps ladder stays contiguous in the output.
pub fn execute(cfg: &ExperimentConfig, eps_list: &[f64]) -> anyhow::Result<Vec<Report>> {
    let mut out = Vec::new();
    for replicate in 0..cfg.replicates {
        for &eps in eps_list {
            out.push(run_one(cfg, eps, replicate)?);
        }
    }
    Ok(out)
}
