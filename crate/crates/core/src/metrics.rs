//! Evaluation of simulated trajectories against ground truth.
//!
//! Multi-covariate errors are pooled in normalized units: each covariate's
//! error is divided by a per-covariate scale (the training-split standard
//! deviation) before squaring, so no single covariate dominates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{CovariateKind, CovariateSchema, Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::gcomp::{quantile, simulate_mc, ConditionalDensityEstimator, ResidualBank, SimulationConfig, SimulationResult, TreatmentRegime};
use crate::gtransformer::PolicyModel;

/// Fewest draws for which empirical quantiles are accepted.
pub const MIN_CALIBRATION_DRAWS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub regime_id: String,
    /// Covariate row index of each value.
    pub times: Vec<usize>,
    pub values: Vec<f64>,
    /// Cells contributing to each value.
    pub counts: Vec<usize>,
    pub aggregate: f64,
    /// How `aggregate` is formed from the per-time values.
    pub aggregation: String,
    pub config_hash: String,
    #[serde(default)]
    pub notes: Vec<String>,
    /// Per-covariate aggregate in raw units, when meaningful.
    #[serde(default)]
    pub breakdown: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,regime,time,value,count\n");
        for ((t, v), c) in self.times.iter().zip(&self.values).zip(&self.counts) {
            let _ = writeln!(s, "{},{},{t},{v},{c}", self.metric, self.regime_id);
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-step and pooled percent RMSE of a single outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentRmse {
    pub per_step: Vec<f64>,
    pub overall: f64,
}

/// RMSE of `predicted` against `truth` (both `units x steps`), divided by
/// `scale` and expressed in percent. `overall` pools the squared errors of
/// all steps.
pub fn percent_rmse(predicted: &[f64], truth: &[f64], steps: usize, scale: f64) -> Result<PercentRmse> {
    if steps == 0 || predicted.len() != truth.len() || predicted.len() % steps != 0 {
        return Err(Error::data(format!(
            "horizon mismatch: {} predictions, {} truths, {steps} steps",
            predicted.len(),
            truth.len()
        )));
    }
    let units = predicted.len() / steps;
    if units == 0 {
        return Err(Error::data("no units to evaluate"));
    }
    let mut per = vec![0.0; steps];
    for (i, (p, t)) in predicted.iter().zip(truth).enumerate() {
        per[i % steps] += (p - t).powi(2);
    }
    let total: f64 = per.iter().sum();
    Ok(PercentRmse {
        per_step: per.iter().map(|s| 100.0 * (s / units as f64).sqrt() / scale).collect(),
        overall: 100.0 * (total / (units * steps) as f64).sqrt() / scale,
    })
}

/// Normalized errors `(mean - truth) / scale`, `units x steps x columns`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCube {
    pub units: usize,
    pub steps: usize,
    pub width: usize,
    pub start: usize,
    pub data: Vec<f64>,
}

impl ErrorCube {
    fn at(&self, u: usize, s: usize, k: usize) -> f64 {
        self.data[(u * self.steps + s) * self.width + k]
    }
}

fn truth_for<'a>(truth: &'a Dataset, id: u64) -> Result<&'a Trajectory> {
    truth
        .find(id)
        .ok_or_else(|| Error::data(format!("unit {id} missing from the truth dataset")))
}

/// Aligns simulated means with the truth on covariate `columns`.
pub fn error_cube(results: &SimulationResult, truth: &Dataset, columns: &[usize], scales: &[f64]) -> Result<ErrorCube> {
    if columns.len() != scales.len() {
        return Err(Error::config("one scale per column expected"));
    }
    let (steps, d_l) = (results.steps(), results.num_covariates);
    let mut data = Vec::with_capacity(results.units.len() * steps * columns.len());
    for sim in &results.units {
        let u = truth_for(truth, sim.unit_id)?;
        if u.steps < results.end {
            return Err(Error::data(format!("truth for unit {} ends before row {}", u.id, results.end)));
        }
        for s in 0..steps {
            for (&c, &sc) in columns.iter().zip(scales) {
                data.push((sim.mean[s * d_l + c] - u.covariate(results.start + s, c)) / sc);
            }
        }
    }
    Ok(ErrorCube {
        units: results.units.len(),
        steps,
        width: columns.len(),
        start: results.start,
        data,
    })
}

/// Mean over units of each unit's RMSE over its (time, covariate) cells.
pub fn individual_rmse(cube: &ErrorCube) -> Result<f64> {
    if cube.units == 0 || cube.steps * cube.width == 0 {
        return Err(Error::data("no cells to evaluate"));
    }
    let cells = (cube.steps * cube.width) as f64;
    let per_unit = cube
        .data
        .chunks(cube.steps * cube.width)
        .map(|c| (c.iter().map(|e| e * e).sum::<f64>() / cells).sqrt());
    Ok(per_unit.sum::<f64>() / cube.units as f64)
}

/// RMSE between the unit-averaged predicted and true trajectories.
pub fn population_rmse(cube: &ErrorCube) -> Result<f64> {
    if cube.units == 0 || cube.steps * cube.width == 0 {
        return Err(Error::data("no cells to evaluate"));
    }
    let mut sq = 0.0;
    for s in 0..cube.steps {
        for k in 0..cube.width {
            let mean = (0..cube.units).map(|u| cube.at(u, s, k)).sum::<f64>() / cube.units as f64;
            sq += mean * mean;
        }
    }
    Ok((sq / (cube.steps * cube.width) as f64).sqrt())
}

/// Individual-level RMSE per time step: for each step, the mean over units
/// of the RMSE over that step's covariates.
pub fn rmse_over_time(cube: &ErrorCube) -> Vec<f64> {
    (0..cube.steps)
        .map(|s| {
            (0..cube.units)
                .map(|u| ((0..cube.width).map(|k| cube.at(u, s, k).powi(2)).sum::<f64>() / cube.width as f64).sqrt())
                .sum::<f64>()
                / cube.units as f64
        })
        .collect()
}

/// Per-step fraction of `(unit, covariate)` cells whose truth lies in the
/// closed interval between the `q_low` and `q_high` quantiles of the draws.
/// Uses kept draws when present, otherwise the stored quantiles (which must
/// match the request).
pub fn calibration(
    results: &SimulationResult,
    truth: &Dataset,
    columns: &[usize],
    q_low: f64,
    q_high: f64,
) -> Result<Vec<f64>> {
    let m = results.draws_per_unit;
    if m < MIN_CALIBRATION_DRAWS {
        return Err(Error::config(format!(
            "calibration needs at least {MIN_CALIBRATION_DRAWS} draws per unit, got {m}"
        )));
    }
    if !(0.0..=1.0).contains(&q_low) || !(0.0..=1.0).contains(&q_high) || q_low > q_high {
        return Err(Error::config("quantiles must satisfy 0 <= low <= high <= 1"));
    }
    let (steps, d_l) = (results.steps(), results.num_covariates);
    let mut hits = vec![0usize; steps];
    let mut col = vec![0.0; m];
    for sim in &results.units {
        let u = truth_for(truth, sim.unit_id)?;
        for s in 0..steps {
            for &c in columns {
                let (lo, hi) = match &sim.draws {
                    Some(d) => {
                        for (r, v) in col.iter_mut().enumerate() {
                            *v = d[(r * steps + s) * d_l + c];
                        }
                        col.sort_by(f64::total_cmp);
                        (quantile(&col, q_low), quantile(&col, q_high))
                    }
                    None if results.quantiles == (q_low, q_high) => (sim.q_low[s * d_l + c], sim.q_high[s * d_l + c]),
                    None => {
                        return Err(Error::config(
                            "requested quantiles differ from the stored ones and draws were not kept",
                        ))
                    }
                };
                let v = u.covariate(results.start + s, c);
                if lo <= v && v <= hi {
                    hits[s] += 1;
                }
            }
        }
    }
    let cells = (results.units.len() * columns.len()).max(1) as f64;
    Ok(hits.iter().map(|&h| h as f64 / cells).collect())
}

/// Per-unit fraction of draws in which binary covariate `name` equals 1 at
/// any row in `window`.
pub fn event_probability(
    results: &SimulationResult,
    schema: &CovariateSchema,
    name: &str,
    window: std::ops::Range<usize>,
) -> Result<Vec<(u64, f64)>> {
    let c = schema
        .index_of(name)
        .ok_or_else(|| Error::Schema(format!("unknown covariate `{name}`")))?;
    if schema.covariates[c].kind != (CovariateKind::Categorical { classes: 2 }) {
        return Err(Error::Schema(format!("covariate `{name}` is not binary")));
    }
    if window.start < results.start || window.end > results.end || window.is_empty() {
        return Err(Error::config(format!(
            "event window {window:?} outside simulated rows {}..{}",
            results.start, results.end
        )));
    }
    let (steps, d_l, m) = (results.steps(), results.num_covariates, results.draws_per_unit);
    results
        .units
        .iter()
        .map(|sim| {
            let draws = sim
                .draws
                .as_ref()
                .ok_or_else(|| Error::config("event probabilities need kept draws"))?;
            let events = (0..m)
                .filter(|r| window.clone().any(|t| draws[(r * steps + t - results.start) * d_l + c] == 1.0))
                .count();
            Ok((sim.unit_id, events as f64 / m as f64))
        })
        .collect()
}

/// Everything needed to turn a simulation into reports.
pub struct Evaluation<'a> {
    pub results: &'a SimulationResult,
    pub truth: &'a Dataset,
    pub columns: Vec<usize>,
    pub scales: Vec<f64>,
    pub config_hash: String,
}

impl Evaluation<'_> {
    fn report(&self, metric: &str, values: Vec<f64>, counts: Vec<usize>, aggregate: f64, aggregation: &str) -> MetricReport {
        MetricReport {
            metric: metric.into(),
            regime_id: self.results.regime_id.clone(),
            times: (self.results.start..self.results.end).collect(),
            values,
            counts,
            aggregate,
            aggregation: aggregation.into(),
            config_hash: self.config_hash.clone(),
            notes: vec!["covariates pooled in normalized units (training-split standard deviations)".into()],
            breakdown: BTreeMap::new(),
        }
    }

    /// Individual RMSE (with RMSE over time as its series), population RMSE
    /// and calibration.
    pub fn standard_reports(&self, names: &[String]) -> Result<Vec<MetricReport>> {
        let cube = error_cube(self.results, self.truth, &self.columns, &self.scales)?;
        let n = cube.units * cube.width;
        let counts = vec![n; cube.steps];
        let mut ind = self.report(
            "individual_rmse",
            rmse_over_time(&cube),
            counts.clone(),
            individual_rmse(&cube)?,
            "mean over units of per-unit RMSE over all (time, covariate) cells; values are per-time individual RMSE",
        );
        for (k, name) in names.iter().enumerate() {
            let raw = ErrorCube {
                width: 1,
                data: (0..cube.units * cube.steps)
                    .map(|i| cube.data[i * cube.width + k] * self.scales[k])
                    .collect(),
                ..cube.clone()
            };
            ind.breakdown.insert(name.clone(), individual_rmse(&raw)?);
        }
        let per_time_pop: Vec<f64> = (0..cube.steps)
            .map(|s| {
                let one = ErrorCube {
                    steps: 1,
                    start: cube.start + s,
                    data: (0..cube.units)
                        .flat_map(|u| (0..cube.width).map(move |k| (u, k)))
                        .map(|(u, k)| cube.at(u, s, k))
                        .collect(),
                    ..cube.clone()
                };
                population_rmse(&one).unwrap_or(0.0)
            })
            .collect();
        let pop = self.report(
            "population_rmse",
            per_time_pop,
            counts.clone(),
            population_rmse(&cube)?,
            "RMSE over (time, covariate) cells of the unit-averaged error",
        );
        let mut reports = vec![ind, pop];
        if self.results.draws_per_unit >= MIN_CALIBRATION_DRAWS {
            let (lo, hi) = self.results.quantiles;
            let cov = calibration(self.results, self.truth, &self.columns, lo, hi)?;
            let mean = cov.iter().sum::<f64>() / cov.len().max(1) as f64;
            let mut r = self.report("calibration", cov, counts, mean, "mean over time of per-time coverage");
            r.notes.push(format!("interval [q{lo}, q{hi}], boundary inclusive, nominal {}", hi - lo));
            reports.push(r);
        }
        Ok(reports)
    }
}

/// Simulates held-out units under the fitted observational policy from row
/// `start` and scores the simulation against their observed trajectories.
#[allow(clippy::too_many_arguments)]
pub fn predictive_check(
    est: &dyn ConditionalDensityEstimator,
    policy: Arc<PolicyModel>,
    bank: &ResidualBank,
    test: &Dataset,
    start: usize,
    end: usize,
    draws: usize,
    seed: u64,
    config_hash: &str,
) -> Result<Vec<MetricReport>> {
    if start >= end {
        return Ok(Vec::new());
    }
    let regime = TreatmentRegime::policy("observational_policy", policy);
    let mut cfg = SimulationConfig::new(draws, start, end, seed);
    cfg.validate()?;
    cfg.quantiles = (0.05, 0.95);
    let results = simulate_mc(est, &test.units, &regime, bank, &cfg)?;
    let schema = est.schema();
    let (columns, scales, note) = scored_columns(schema, &est.continuous_scale());
    let names = columns.iter().map(|&c| schema.covariates[c].name.clone()).collect::<Vec<_>>();
    let mut reports = Evaluation {
        results: &results,
        truth: test,
        columns,
        scales,
        config_hash: config_hash.into(),
    }
    .standard_reports(&names)?;
    if let Some(n) = note {
        reports.iter_mut().for_each(|r| r.notes.push(n.clone()));
    }
    Ok(reports)
}

/// Columns scored and their scales: continuous covariates in normalized
/// units, or every covariate on its raw class index when there are none.
pub fn scored_columns(schema: &CovariateSchema, scale: &[f64]) -> (Vec<usize>, Vec<f64>, Option<String>) {
    let co = schema.continuous();
    if co.is_empty() {
        let all: Vec<usize> = (0..schema.num_covariates()).collect();
        let n = all.len();
        (all, vec![1.0; n], Some("no continuous covariates; class indices scored directly".into()))
    } else {
        (co, scale.to_vec(), None)
    }
}

/// Minimal static SVG line chart.
pub fn line_chart_svg(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{0}" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, escape(x_label));
    for (v, anchor, x, y) in [
        (x0, "middle", sx(x0), H - PAD + 15.0),
        (x1, "middle", sx(x1), H - PAD + 15.0),
        (y0, "end", PAD - 5.0, sy(y0)),
        (y1, "end", PAD - 5.0, sy(y1)),
    ] {
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}">{}</text>"#, format_tick(v));
    }
    for (i, (name, p)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = p
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        let ly = PAD + 15.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{color}" text-anchor="end">{}</text>"#,
            W - PAD,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Covariate, CovariateSchema, DatasetMeta, Treatment, TreatmentKind};
    use crate::gcomp::UnitSimulation;
    use proptest::prelude::*;

    fn schema(d: usize) -> CovariateSchema {
        CovariateSchema {
            covariates: (0..d).map(|k| Covariate::continuous(&format!("c{k}"))).collect(),
            treatments: vec![Treatment::new("a", TreatmentKind::Binary)],
            outcome: 0,
            statics: vec![],
        }
    }

    /// Truth dataset and a result whose means are `truth + err`.
    fn setup(units: usize, steps: usize, d: usize, truth: &[f64], err: &[f64]) -> (SimulationResult, Dataset) {
        let start = 1;
        let rows = start + steps;
        let mut us = Vec::new();
        let mut sims = Vec::new();
        for u in 0..units {
            let mut cov = vec![0.0; d];
            let mut mean = Vec::new();
            for s in 0..steps {
                for k in 0..d {
                    let i = (u * steps + s) * d + k;
                    cov.push(truth[i]);
                    mean.push(truth[i] + err[i]);
                }
            }
            us.push(Trajectory::new(u as u64, vec![], cov, vec![0.0; rows], rows));
            sims.push(UnitSimulation {
                unit_id: u as u64,
                q_low: mean.clone(),
                q_high: mean.clone(),
                mean,
                action_mean: vec![0.0; steps],
                draws: None,
            });
        }
        let res = SimulationResult {
            regime_id: "r".into(),
            seed: 0,
            start,
            end: rows,
            draws_per_unit: 1,
            quantiles: (0.05, 0.95),
            num_covariates: d,
            num_treatments: 1,
            units: sims,
        };
        (res, Dataset::new(schema(d), DatasetMeta::default(), us))
    }

    #[test]
    fn percent_rmse_examples() {
        let t = [100.0, 200.0, 300.0, 400.0];
        let r = percent_rmse(&t, &t, 2, 1150.0).unwrap();
        assert_eq!(r.overall, 0.0);
        let p: Vec<f64> = t.iter().map(|v| v + 11.5).collect();
        let r = percent_rmse(&p, &t, 2, 1150.0).unwrap();
        assert!((r.overall - 1.0).abs() < 1e-12);
        assert!(percent_rmse(&p, &t[..3], 2, 1150.0).is_err());
    }

    #[test]
    fn overall_pools_squared_errors() {
        // 3 units x 2 steps, brute force
        let truth = [0.0; 6];
        let pred = [1.0, 4.0, 2.0, 0.0, 3.0, 5.0];
        let r = percent_rmse(&pred, &truth, 2, 1.0).unwrap();
        let pooled = 100.0 * ((1.0 + 16.0 + 4.0 + 0.0 + 9.0 + 25.0) / 6.0f64).sqrt();
        assert!((r.overall - pooled).abs() < 1e-12);
        let step0 = 100.0 * ((1.0 + 4.0 + 9.0) / 3.0f64).sqrt();
        let step1 = 100.0 * ((16.0 + 0.0 + 25.0) / 3.0f64).sqrt();
        assert!((r.per_step[0] - step0).abs() < 1e-12);
        assert!((r.per_step[1] - step1).abs() < 1e-12);
        assert!((r.overall - (step0 + step1) / 2.0).abs() > 1e-3);
    }

    #[test]
    fn individual_rmse_examples() {
        let (res, truth) = setup(1, 2, 1, &[1.0, 2.0], &[3.0, 4.0]);
        let cube = error_cube(&res, &truth, &[0], &[1.0]).unwrap();
        assert!((individual_rmse(&cube).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert!((population_rmse(&cube).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        let (res, truth) = setup(2, 1, 1, &[1.0, 1.0], &[2.0, -2.0]);
        let cube = error_cube(&res, &truth, &[0], &[1.0]).unwrap();
        assert_eq!(population_rmse(&cube).unwrap(), 0.0);
        assert_eq!(individual_rmse(&cube).unwrap(), 2.0);
        let (res, truth) = setup(2, 1, 1, &[1.0, 1.0], &[0.0, 0.0]);
        let cube = error_cube(&res, &truth, &[0], &[1.0]).unwrap();
        assert_eq!(individual_rmse(&cube).unwrap(), 0.0);
    }

    #[test]
    fn missing_unit_is_an_error() {
        let (res, mut truth) = setup(2, 1, 1, &[1.0, 1.0], &[0.0, 0.0]);
        truth.units.pop();
        assert!(error_cube(&res, &truth, &[0], &[1.0]).is_err());
    }

    #[test]
    fn over_time_examples() {
        let (res, truth) = setup(2, 3, 2, &[0.0; 12], &[0.7; 12]);
        let cube = error_cube(&res, &truth, &[0, 1], &[1.0, 1.0]).unwrap();
        for v in rmse_over_time(&cube) {
            assert!((v - 0.7).abs() < 1e-12);
        }
        // one covariate: unit RMSE pools the per-step squared series
        let err = [1.0, 2.0, 3.0, 0.5, 0.0, 4.0];
        let (res, truth) = setup(2, 3, 1, &[0.0; 6], &err);
        let cube = error_cube(&res, &truth, &[0], &[1.0]).unwrap();
        let series = rmse_over_time(&cube);
        assert_eq!(series, vec![0.75, 1.0, 3.5]);
        let pooled: f64 = err
            .chunks(3)
            .map(|c| (c.iter().map(|e| e * e).sum::<f64>() / 3.0).sqrt())
            .sum::<f64>()
            / 2.0;
        assert!((individual_rmse(&cube).unwrap() - pooled).abs() < 1e-12);
    }

    fn with_draws(draws: Vec<f64>, m: usize, steps: usize, truth_v: f64) -> (SimulationResult, Dataset) {
        let (mut res, mut truth) = setup(1, steps, 1, &vec![truth_v; steps], &vec![0.0; steps]);
        res.draws_per_unit = m;
        res.units[0].draws = Some(draws);
        truth.units[0].covariates = vec![truth_v; steps + 1];
        (res, truth)
    }

    #[test]
    fn calibration_boundaries() {
        let (res, truth) = with_draws(vec![5.0; 20], 20, 1, 5.0);
        assert_eq!(calibration(&res, &truth, &[0], 0.05, 0.95).unwrap(), vec![1.0]);
        let (res, truth) = with_draws((0..20).map(f64::from).collect(), 20, 1, 100.0);
        assert_eq!(calibration(&res, &truth, &[0], 0.05, 0.95).unwrap(), vec![0.0]);
        let (res, truth) = with_draws(vec![5.0; 10], 10, 1, 5.0);
        assert!(calibration(&res, &truth, &[0], 0.05, 0.95).is_err());
    }

    #[test]
    fn self_calibration_oracle() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = Normal::new(0.0, 1.0).unwrap();
        let (units, m) = (2000, 100);
        let mut hits = 0.0;
        for _ in 0..units {
            let draws: Vec<f64> = (0..m).map(|_| n.sample(&mut rng)).collect();
            let (res, truth) = with_draws(draws, m, 1, n.sample(&mut rng));
            hits += calibration(&res, &truth, &[0], 0.05, 0.95).unwrap()[0];
        }
        let cov = hits / units as f64;
        assert!((cov - 0.9).abs() < 0.03, "{cov}");
    }

    #[test]
    fn event_probability_counts() {
        let mut s = schema(1);
        s.covariates.push(Covariate::categorical("flag", 2));
        let steps = 3;
        let m = 100;
        let mut draws = vec![0.0; m * steps * 2];
        for r in 0..37 {
            draws[(r * steps + 2) * 2 + 1] = 1.0;
        }
        for r in 37..50 {
            draws[(r * steps) * 2 + 1] = 1.0;
        }
        let res = SimulationResult {
            regime_id: "r".into(),
            seed: 0,
            start: 1,
            end: 4,
            draws_per_unit: m,
            quantiles: (0.05, 0.95),
            num_covariates: 2,
            num_treatments: 1,
            units: vec![UnitSimulation {
                unit_id: 0,
                mean: vec![0.0; 6],
                q_low: vec![0.0; 6],
                q_high: vec![0.0; 6],
                action_mean: vec![0.0; 3],
                draws: Some(draws),
            }],
        };
        assert_eq!(event_probability(&res, &s, "flag", 3..4).unwrap()[0].1, 0.37);
        assert_eq!(event_probability(&res, &s, "flag", 1..4).unwrap()[0].1, 0.5);
        assert!(event_probability(&res, &s, "c0", 1..4).is_err());
        let mut all = res.clone();
        all.units[0].draws = Some(vec![1.0; m * steps * 2]);
        assert_eq!(event_probability(&all, &s, "flag", 2..3).unwrap()[0].1, 1.0);
    }

    #[test]
    fn svg_is_well_formed() {
        let svg = line_chart_svg("a < b", "time", &[("x".into(), vec![(0.0, 1.0), (1.0, 2.0)])]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a &lt; b"));
    }

    proptest! {
        #[test]
        fn population_never_exceeds_individual(
            err in prop::collection::vec(-5.0f64..5.0, 24),
            scale in 0.1f64..10.0,
        ) {
            let (res, truth) = setup(4, 3, 2, &[0.0; 24], &err);
            let cube = error_cube(&res, &truth, &[0, 1], &[1.0, 1.0]).unwrap();
            let (i, p) = (individual_rmse(&cube).unwrap(), population_rmse(&cube).unwrap());
            prop_assert!(p <= i + 1e-12);
            // homogeneity
            let scaled: Vec<f64> = err.iter().map(|e| e * scale).collect();
            let (res2, truth2) = setup(4, 3, 2, &[0.0; 24], &scaled);
            let cube2 = error_cube(&res2, &truth2, &[0, 1], &[1.0, 1.0]).unwrap();
            prop_assert!((population_rmse(&cube2).unwrap() - scale * p).abs() < 1e-9);
            // unit ordering and covariate ordering
            let mut rev = res.clone();
            rev.units.reverse();
            let cube3 = error_cube(&rev, &truth, &[1, 0], &[1.0, 1.0]).unwrap();
            prop_assert!((individual_rmse(&cube3).unwrap() - i).abs() < 1e-12);
            prop_assert!((population_rmse(&cube3).unwrap() - p).abs() < 1e-12);
        }

        #[test]
        fn event_probability_grows_with_window(bits in prop::collection::vec(0u8..2, 40), a in 1usize..5, b in 1usize..5) {
            let mut s = schema(0);
            s.covariates.push(Covariate::categorical("flag", 2));
            let draws: Vec<f64> = bits.iter().map(|&v| f64::from(v)).collect();
            let res = SimulationResult {
                regime_id: "r".into(), seed: 0, start: 1, end: 5, draws_per_unit: 10, quantiles: (0.05, 0.95),
                num_covariates: 1, num_treatments: 1,
                units: vec![UnitSimulation { unit_id: 0, mean: vec![0.0; 4], q_low: vec![0.0; 4], q_high: vec![0.0; 4], action_mean: vec![0.0; 4], draws: Some(draws) }],
            };
            let (lo, hi) = (a.min(b), a.max(b));
            let small = event_probability(&res, &s, "flag", lo..lo + 1).unwrap()[0].1;
            let big = event_probability(&res, &s, "flag", 1..hi + 1).unwrap()[0].1;
            prop_assert!(big >= small || lo > hi);
        }
    }
}
