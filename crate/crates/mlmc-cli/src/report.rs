//! Report records and the JSON/CSV writers. Everything outside `meta` is a
//! pure function of the configuration, so two runs of the same config can
//! be compared byte-for-byte after dropping that one key.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use mlmc_core::mlmc::MlmcEstimate;
use mlmc_core::risk::{RiskEstimate, VarStop};
use mlmc_core::stats::RateEstimates;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub tool_version: &'static str,
    pub config_hash: String,
    pub created_unix: u64,
}

impl Meta {
    pub fn new(config_hash: String) -> Meta {
        let created_unix =
            SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Meta { tool_version: TOOL_VERSION, config_hash, created_unix }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelRow {
    pub level: u32,
    pub n: u64,
    pub mean: f64,
    pub variance: f64,
    pub cost_per_sample: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kurtosis: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_inner: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RatesRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub fit_levels: (u32, u32),
}

impl From<&RateEstimates> for RatesRow {
    fn from(r: &RateEstimates) -> Self {
        RatesRow { alpha: r.alpha, beta: r.beta, gamma: r.gamma, fit_levels: r.fit_levels }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReferenceRow {
    pub name: String,
    pub value: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VarCvarRow {
    pub quantile: f64,
    pub var: f64,
    pub cvar: f64,
    pub eta_tol: f64,
    pub eta_at_var: f64,
    pub bisections: u32,
    pub stop: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub meta: Meta,
    pub experiment: String,
    pub replicate: u32,
    pub seed: u64,
    pub eps: f64,
    /// Headline number: price for pricing runs, eta for risk runs, VaR for
    /// the quantile search.
    pub value: f64,
    pub std_error: f64,
    pub total_cost: f64,
    pub levels: Vec<LevelRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rates: Option<RatesRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub var_cvar: Option<VarCvarRow>,
    pub notes: Vec<String>,
}

impl Report {
    pub fn summary_line(&self) -> String {
        let mut s = format!(
            "{} replicate {} eps {:.6}: value {:.6} se {:.3e} cost {:.4e}",
            self.experiment, self.replicate, self.eps, self.value, self.std_error, self.total_cost
        );
        if let Some(r) = &self.reference {
            s.push_str(&format!(" | {} {:.6} abs_err {:.3e}", r.name, r.value, r.abs_error));
        }
        if let Some(v) = &self.var_cvar {
            s.push_str(&format!(
                " | var {:.5} cvar {:.5} ({} bisections, stop {})",
                v.var, v.cvar, v.bisections, v.stop
            ));
        }
        s
    }
}

pub fn level_rows_from_estimate(est: &MlmcEstimate) -> Vec<LevelRow> {
    est.levels
        .iter()
        .enumerate()
        .map(|(i, s)| LevelRow {
            level: s.level,
            n: s.count,
            mean: s.mean(),
            variance: s.variance(),
            cost_per_sample: s.cost_per_sample(),
            kurtosis: s.kurtosis(),
            theta_norm: est.thetas.as_ref().and_then(|ts| {
                ts.get(i).map(|t| t.iter().map(|x| x * x).sum::<f64>().sqrt())
            }),
            avg_inner: None,
        })
        .collect()
}

pub fn level_rows_from_risk(est: &RiskEstimate) -> Vec<LevelRow> {
    est.levels
        .iter()
        .map(|l| LevelRow {
            level: l.stats.level,
            n: l.stats.count,
            mean: l.stats.mean(),
            variance: l.stats.variance(),
            cost_per_sample: l.stats.cost_per_sample(),
            kurtosis: l.stats.kurtosis(),
            theta_norm: None,
            avg_inner: Some(l.avg_inner),
        })
        .collect()
}

pub fn var_cvar_row(est: &RiskEstimate) -> Option<VarCvarRow> {
    est.var_cvar.as_ref().map(|v| VarCvarRow {
        quantile: v.quantile,
        var: v.var,
        cvar: v.cvar,
        eta_tol: v.eta_tol,
        eta_at_var: v.eta_at_var,
        bisections: v.bisections,
        stop: match v.stop {
            VarStop::BracketWidth => "bracket_width",
            VarStop::CiContainsTarget => "ci_contains_target",
        },
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// `report.json`, `summary.csv` and `levels.csv` under `dir`.
pub fn write_outputs(dir: &Path, reports: &[Report]) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(reports)?;
    fs::write(dir.join("report.json"), json)?;

    let mut summary = String::new();
    summary.push_str(&format!("# mlmc {TOOL_VERSION} run summary\n"));
    summary.push_str("experiment,replicate,eps,value,std_error,total_cost,reference,abs_error,var,cvar\n");
    for r in reports {
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.experiment,
            r.replicate,
            r.eps,
            r.value,
            r.std_error,
            r.total_cost,
            opt(r.reference.as_ref().map(|x| x.value)),
            opt(r.reference.as_ref().map(|x| x.abs_error)),
            opt(r.var_cvar.as_ref().map(|x| x.var)),
            opt(r.var_cvar.as_ref().map(|x| x.cvar)),
        ));
    }
    let mut f = fs::File::create(dir.join("summary.csv"))?;
    f.write_all(summary.as_bytes())?;

    let mut levels = String::new();
    levels.push_str(&format!("# mlmc {TOOL_VERSION} level table\n"));
    levels.push_str(
        "experiment,replicate,eps,level,n,mean,variance,cost_per_sample,kurtosis,theta_norm,avg_inner\n",
    );
    for r in reports {
        for l in &r.levels {
            levels.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.experiment,
                r.replicate,
                r.eps,
                l.level,
                l.n,
                l.mean,
                l.variance,
                l.cost_per_sample,
                opt(l.kurtosis),
                opt(l.theta_norm),
                opt(l.avg_inner),
            ));
        }
    }
    let mut f = fs::File::create(dir.join("levels.csv"))?;
    f.write_all(levels.as_bytes())?;
    Ok(())
}
