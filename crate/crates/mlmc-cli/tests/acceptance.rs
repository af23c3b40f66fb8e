//! Acceptance regression suite. Each test drives one end-to-end contract of
//! the estimator stack at its stated tolerance and prints a single
//! `ACCEPTANCE <n> ...: PASS/FAIL` verdict line (visible with --nocapture).

use mlmc_cli::config::ExperimentConfig;
use mlmc_cli::exec::RayonExecutor;
use mlmc_cli::{run, sweep};
use mlmc_core::importance::{
    self, RmConfig, SaaProblem, ThetaSchedule, SAA_MAX_ITER, SAA_TOL,
};
use mlmc_core::math;
use mlmc_core::mlmc::{measure_levels, run_mlmc, MlmcEstimate, RunOptions};
use mlmc_core::model::{MlmcConfig, Payoff, SdeModel};
use mlmc_core::risk::{
    measure_nested_levels, nested_mc, nested_mlmc_adaptive, var_cvar, AdaptiveConfig, InnerScheme,
    RiskLevel, RiskProblem,
};
use mlmc_core::stats::fit_rates;

// scipy.stats.norm frozen references
const BS_CALL_ATM: f64 = 0.10986396449700797;
const PHI_MINUS_ONE: f64 = 0.15865525393145707;
const NORMAL_Q95: f64 = 1.6448536269514722;
const NORMAL_CVAR_05: f64 = 2.0627128075074275;

fn verdict(n: u32, what: &str, ok: bool, detail: &str) {
    let v = if ok { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {n} {what}: {v} [{detail}]");
    assert!(ok, "ACCEPTANCE {n} {what}: FAIL [{detail}]");
}

fn gbm_call(strike: f64) -> (SdeModel, Payoff) {
    (SdeModel::gbm(1.0, 0.05, 0.2, 1.0).unwrap(), Payoff::call(strike))
}

fn cfg_with_seed(seed: u64) -> MlmcConfig {
    MlmcConfig { seed, ..MlmcConfig::default() }
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn acceptance_1_pricing_rms_against_closed_form() {
    let exec = RayonExecutor;
    let (model, payoff) = gbm_call(1.0);
    let opts = RunOptions::default();
    let mut ok = true;
    let mut detail = String::new();
    for &eps in &[0.02, 0.01, 0.005] {
        let mut sq = 0.0;
        for i in 0..50u64 {
            let cfg = cfg_with_seed(1000 + i);
            let est = run_mlmc(&model, &payoff, &cfg, eps, None, &opts, &exec).unwrap();
            sq += (est.value - BS_CALL_ATM) * (est.value - BS_CALL_ATM);
        }
        let rms = (sq / 50.0).sqrt();
        ok &= rms <= 1.25 * eps;
        detail.push_str(&format!("eps {eps}: rms {rms:.3e}; "));
    }
    verdict(1, "50-seed pricing RMS <= 1.25 eps at each accuracy", ok, detail.trim_end());
}

#[test]
fn acceptance_2_euler_rate_fits() {
    let exec = RayonExecutor;
    let (model, payoff) = gbm_call(1.0);
    let cfg = cfg_with_seed(10);
    let stats = measure_levels(&model, &payoff, &cfg, None, 7, 100_000, &exec).unwrap();
    let rates = fit_rates(&stats).unwrap();
    let (alpha, beta, gamma) =
        (rates.alpha.unwrap(), rates.beta.unwrap(), rates.gamma.unwrap());
    let ok = rates.fit_levels == (2, 7)
        && (0.7..=1.3).contains(&alpha)
        && (0.7..=1.3).contains(&beta)
        && (0.9..=1.1).contains(&gamma);
    let detail = format!("alpha {alpha:.3}, beta {beta:.3}, gamma {gamma:.3}, fit over levels 2..7");
    verdict(2, "weak/variance/cost decay rates in their windows", ok, &detail);
}

#[test]
fn acceptance_3_cost_scaling_regimes() {
    let exec = RayonExecutor;
    let (model, payoff) = gbm_call(1.0);
    let opts = RunOptions { pilot: 200, rate_guards: true, ..RunOptions::default() };
    let mut pts = Vec::new();
    for &eps in &[0.002, 0.001, 0.0005, 0.00025] {
        let cfg = cfg_with_seed(17);
        let est = run_mlmc(&model, &payoff, &cfg, eps, None, &opts, &exec).unwrap();
        pts.push((eps, est.total_cost));
    }
    let multilevel = sweep::fit_cost_slope(&pts).unwrap();

    // plain nested benchmark: scenarios ~ eps^-2, inner samples ~ eps^-1
    let problem = RiskProblem::gaussian(1.0);
    let mut npts = Vec::new();
    for &eps in &[0.04f64, 0.02, 0.01, 0.005] {
        let m = (0.5 / (eps * eps)).ceil() as u64;
        let n = ((0.5 / eps).ceil() as u64).max(2);
        let est = nested_mc(&problem, m, n, 23, &exec).unwrap();
        npts.push((eps, est.total_inner_samples));
    }
    let nested = sweep::fit_cost_slope(&npts).unwrap();

    let ok = (-2.6..=-1.8).contains(&multilevel) && (-3.4..=-2.7).contains(&nested);
    let detail = format!("multilevel slope {multilevel:.2}, plain nested slope {nested:.2}");
    verdict(3, "log cost vs log eps slopes", ok, &detail);
}

fn fingerprint(est: &MlmcEstimate) -> Vec<u64> {
    let mut v = vec![
        est.value.to_bits(),
        est.total_cost.to_bits(),
        est.first_level as u64,
        est.levels.len() as u64,
    ];
    for s in &est.levels {
        v.extend([s.count, s.sum.to_bits(), s.sum_sq.to_bits(), s.cost_total.to_bits()]);
    }
    v
}

#[test]
fn acceptance_4_zero_shift_neutrality_across_pools() {
    let (model, payoff) = gbm_call(1.0);
    let cfg = cfg_with_seed(42);
    let opts = RunOptions::default();
    let schedule = ThetaSchedule::zero(1, 3).unwrap();
    let mut prints = Vec::new();
    for threads in [1usize, 2, 8] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let (plain, shifted) = pool.install(|| {
            let exec = RayonExecutor;
            let p = run_mlmc(&model, &payoff, &cfg, 0.01, None, &opts, &exec).unwrap();
            let s = importance::run_is_mlmc(&model, &payoff, &cfg, 0.01, &schedule, &opts, &exec)
                .unwrap();
            (p, s)
        });
        prints.push(fingerprint(&plain));
        prints.push(fingerprint(&shifted));
    }
    let ok = prints.iter().all(|p| *p == prints[0]);
    let detail = format!(
        "6 runs (plain/zero-shift x 1/2/8 threads), value {:.6e}",
        f64::from_bits(prints[0][0])
    );
    verdict(4, "zero-shift estimator bit-identical to plain", ok, &detail);
}

#[test]
fn acceptance_5_deep_otm_shift_quality() {
    let exec = RayonExecutor;
    let (model, payoff) = gbm_call(2.0);
    let cfg = cfg_with_seed(5);
    let problem = SaaProblem::from_pilot(&model, &payoff, &cfg, 1, 4_000_000, &exec).unwrap();
    let sol = importance::solve_saa(&problem, SAA_TOL, SAA_MAX_ITER).unwrap();

    // held-out variance at the Newton shift vs no shift
    let held = cfg_with_seed(6);
    let v_shift = importance::measure_level_variance(&model, &payoff, &held, &sol.theta, 1, 100_000, &exec)
        .unwrap()
        .variance();
    let v_plain = importance::measure_level_variance(&model, &payoff, &held, &[0.0], 1, 100_000, &exec)
        .unwrap()
        .variance();

    // analytic gradient against central differences at a generic point
    let (_, grad, _) = importance::saa_objective(&problem, &[1.5]).unwrap();
    let h = 1e-4;
    let (vp, _, _) = importance::saa_objective(&problem, &[1.5 + h]).unwrap();
    let (vm, _, _) = importance::saa_objective(&problem, &[1.5 - h]).unwrap();
    let grad_rel = ((vp - vm) / (2.0 * h) / grad[0] - 1.0).abs();

    // the projected recursion lands near the Newton solution
    let rm_cfg = cfg_with_seed(15);
    let rmc = RmConfig { iterations: 10_000, warm_pilot: 20_000, averaging: true, ..RmConfig::default() };
    let (theta_rm, _) = importance::rm_optimize_level(&model, &payoff, &rm_cfg, 1, &rmc).unwrap();
    let gap = (theta_rm[0] - sol.theta[0]).abs();

    let ok = v_shift <= 0.5 * v_plain && grad_rel <= 1e-5 && gap <= 0.1;
    let detail = format!(
        "variance {v_shift:.3e} vs plain {v_plain:.3e}, grad rel err {grad_rel:.1e}, theta saa {:.3} rm {:.3}",
        sol.theta[0], theta_rm[0]
    );
    verdict(5, "deep-OTM shift halves variance, gradient exact, RM near SAA", ok, &detail);
}

#[test]
fn acceptance_6_adaptive_shift_unbiased() {
    let exec = RayonExecutor;
    let (model, payoff) = gbm_call(2.0);
    let eps = 2e-5;
    let opts = RunOptions { pilot: 10_000, rate_guards: true, ..RunOptions::default() };
    let rmc = RmConfig { warm_pilot: 20_000, iterations: 5_000, ..RmConfig::default() };
    let plain: Vec<f64> = (0..50u64)
        .map(|i| {
            let cfg = cfg_with_seed(3000 + i);
            run_mlmc(&model, &payoff, &cfg, eps, None, &opts, &exec).unwrap().value
        })
        .collect();
    let shifted: Vec<f64> = (0..50u64)
        .map(|i| {
            let cfg = cfg_with_seed(4000 + i);
            importance::run_adaptive_is_mlmc(&model, &payoff, &cfg, eps, &rmc, &opts, &exec)
                .unwrap()
                .value
        })
        .collect();
    let (mp, sp) = mean_and_se(&plain);
    let (ms, ss) = mean_and_se(&shifted);
    let gap = (mp - ms).abs();
    let combined = (sp * sp + ss * ss).sqrt();
    let ok = gap <= 3.0 * combined;
    let detail = format!("plain {mp:.4e}, adaptive {ms:.4e}, gap {gap:.2e} vs 3se {:.2e}", 3.0 * combined);
    verdict(6, "adaptive-shift mean within 3 se of plain mean over 50 seeds", ok, &detail);
}

#[test]
fn acceptance_7_nested_variance_decay() {
    let exec = RayonExecutor;
    let problem = RiskProblem::gaussian(1.0);
    let uni = measure_nested_levels(&problem, InnerScheme::Uniform { n0: 16 }, 6, 100_000, 101, &exec)
        .unwrap();
    let scheme = InnerScheme::Adaptive { cfg: AdaptiveConfig::default(), eps: 1e-5 };
    let ada = measure_nested_levels(&problem, scheme, 6, 100_000, 202, &exec).unwrap();
    // fit past the preasymptotic head
    let slope = |rows: &[RiskLevel]| {
        let xs: Vec<f64> = (2..=6u32).map(f64::from).collect();
        let ys: Vec<f64> = rows[2..=6].iter().map(|r| r.stats.variance().log2()).collect();
        math::ols_fit(&xs, &ys).unwrap().1
    };
    let su = slope(&uni);
    let sa = slope(&ada);
    let ok = (-0.7..=-0.3).contains(&su) && sa <= -0.8 && sa <= su - 0.25;
    let detail = format!("uniform slope {su:.2}, adaptive slope {sa:.2}");
    verdict(7, "log2 correction-variance slopes: uniform ~ -1/2, adaptive steeper", ok, &detail);
}

#[test]
fn acceptance_8_risk_oracles() {
    let exec = RayonExecutor;
    let acfg = AdaptiveConfig::default();
    let opts = RunOptions::default();
    let mut ok = true;
    let mut detail = String::new();
    for (threshold, truth, seed) in [(0.0, 0.5, 11u64), (1.0, PHI_MINUS_ONE, 12)] {
        let problem = RiskProblem::gaussian(threshold);
        let est = nested_mlmc_adaptive(&problem, 0.005, &acfg, &opts, 20, seed, &exec).unwrap();
        let err = (est.eta - truth).abs();
        ok &= err <= 3.0 * est.std_error;
        detail.push_str(&format!("eta({threshold}) err {err:.2e} vs 3se {:.2e}; ", 3.0 * est.std_error));
    }
    let problem = RiskProblem::gaussian(1.0);
    let est = var_cvar(&problem, 0.05, 0.02, &acfg, &opts, 20, 13, &exec).unwrap();
    let vc = est.var_cvar.unwrap();
    let var_err = (vc.var - NORMAL_Q95).abs();
    let cvar_err = (vc.cvar - NORMAL_CVAR_05).abs();
    ok &= var_err <= 0.02 && cvar_err <= 0.02;
    detail.push_str(&format!("var err {var_err:.2e}, cvar err {cvar_err:.2e} vs 0.02"));
    verdict(8, "tail probability, VaR and CVaR against normal closed forms", ok, &detail);
}

#[test]
fn acceptance_9_report_determinism_across_worker_counts() {
    let price: ExperimentConfig = serde_json::from_str(
        r#"{
            "experiment": "price",
            "model": {"kind": "gbm", "x0": 1.0, "mu": 0.05, "sigma": 0.2, "horizon": 1.0},
            "payoff": {"name": "call", "strike": 1.0},
            "eps": [0.02],
            "mlmc": {"pilot": 2000, "max_level": 12},
            "seed": 31
        }"#,
    )
    .unwrap();
    price.validate().unwrap();
    let risk: ExperimentConfig = serde_json::from_str(
        r#"{
            "experiment": "risk_eta",
            "eps": [0.01],
            "risk": {"threshold": 1.0, "max_level": 12},
            "seed": 32
        }"#,
    )
    .unwrap();
    risk.validate().unwrap();

    let render = |cfg: &ExperimentConfig, eps: f64, threads: usize| -> serde_json::Value {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let rep = pool.install(|| run::run_one(cfg, eps, 0)).unwrap();
        let mut v = serde_json::to_value(&rep).unwrap();
        // meta carries the wall-clock timestamp; everything else must be stable
        v.as_object_mut().unwrap().remove("meta");
        v
    };
    let mut ok = true;
    for (cfg, eps) in [(&price, 0.02), (&risk, 0.01)] {
        let one = render(cfg, eps, 1);
        ok &= one == render(cfg, eps, 2) && one == render(cfg, eps, 8);
    }
    verdict(9, "price and risk reports bit-identical on 1/2/8-thread pools", ok, "2 experiments x 3 pools");
}
