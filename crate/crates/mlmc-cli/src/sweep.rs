//! Accuracy sweeps: group per-eps reports and fit the empirical cost
//! exponent from a log-log regression.

use serde::Serialize;

use crate::report::Report;

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub eps: f64,
    pub mean_value: f64,
    pub mean_cost: f64,
    pub replicates: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    /// Slope of log cost against log eps; `None` when the sweep is too
    /// small or too narrow to support a fit.
    pub cost_slope: Option<f64>,
}

/// Least-squares slope of `ln cost` on `ln eps`. Requires at least three
/// distinct accuracies spanning a factor of four, else the fit would be
/// dominated by noise.
pub fn fit_cost_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 3 {
        return None;
    }
    let min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max = points.iter().map(|p| p.0).fold(0.0, f64::max);
    if !(min > 0.0) || max / min < 4.0 {
        return None;
    }
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(eps, cost) in points {
        if !(cost > 0.0) {
            return None;
        }
        let x = eps.ln();
        let y = cost.ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        return None;
    }
    Some((n * sxy - sx * sy) / denom)
}

/// Collapses reports into one row per accuracy (mean over replicates, in
/// first-seen eps order) and fits the cost exponent.
pub fn summarize(reports: &[Report]) -> SweepSummary {
    let mut rows: Vec<SweepRow> = Vec::new();
    for r in reports {
        match rows.iter_mut().find(|row| row.eps == r.eps) {
            Some(row) => {
                let k = row.replicates as f64;
                row.mean_value = (row.mean_value * k + r.value) / (k + 1.0);
                row.mean_cost = (row.mean_cost * k + r.total_cost) / (k + 1.0);
                row.replicates += 1;
            }
            None => rows.push(SweepRow {
                eps: r.eps,
                mean_value: r.value,
                mean_cost: r.total_cost,
                replicates: 1,
            }),
        }
    }
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.eps, r.mean_cost)).collect();
    SweepSummary { cost_slope: fit_cost_slope(&points), rows }
}
