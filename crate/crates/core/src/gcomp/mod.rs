//! Monte Carlo g-computation.
//!
//! A [`ConditionalDensityEstimator`] supplies the factorized one-step
//! conditionals: categorical covariates first, then continuous covariates
//! given the sampled categorical block. Continuous draws add a residual from a
//! [`ResidualBank`] to the predicted mean. Rollouts start from an observed
//! history `L_0..L_{m-1}, A_0..A_{m-2}`; the regime chooses `A_{m-1}` onward
//! and `L_m..L_{K-1}` are simulated.

pub mod linear;
pub mod regime;
pub mod residual;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CovariateKind, CovariateSchema, Trajectory};
use crate::error::{Error, Result};
use crate::seed;

pub use linear::{fit_linear_gcomp, LinearConfig, LinearGcomp};
pub use regime::{LinearScore, RegimeKind, RegimeState, Term, Transform, TreatmentRegime, TreatmentRule};
pub use residual::{build_residual_bank, ResidualBank, ResidualMode};

/// Predicts `p(L_{t+1} | history)` factor by factor.
pub trait ConditionalDensityEstimator {
    fn schema(&self) -> &CovariateSchema;

    /// Scale of each continuous covariate (schema continuous order); residual
    /// pools are stored in these units.
    fn continuous_scale(&self) -> Vec<f64>;

    /// Starts `rows` identical rollouts conditioned on the observed history
    /// `L_0..L_{start-1}, A_0..A_{start-2}` of `unit`.
    fn rollout<'a>(&'a self, unit: &Trajectory, start: usize, rows: usize) -> Result<Box<dyn Rollout + 'a>>;
}

/// Incremental conditional evaluation for a batch of rollouts that advance
/// in lockstep. Each step calls `categorical`, `continuous`, then `commit`.
pub trait Rollout {
    /// Class probabilities (rows x total classes) of the categorical block of
    /// the next covariate row, given the action just taken (rows x d_A).
    fn categorical(&mut self, actions: &[f64]) -> Result<Vec<f64>>;

    /// Conditional means (rows x D_co, raw units) of the continuous block,
    /// given the sampled categorical classes (rows x D_ca).
    fn continuous(&mut self, classes: &[usize]) -> Result<Vec<f64>>;

    /// Appends the completed covariate row (rows x d_L).
    fn commit(&mut self, covariates: &[f64]) -> Result<()>;
}

/// Draw from a categorical distribution by inverse CDF.
pub fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> Result<usize> {
    if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::numerical(format!("invalid class probabilities {probs:?}")));
    }
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last = k;
            acc += p;
            if u < acc {
                return Ok(k);
            }
        }
    }
    Ok(last)
}

/// `mean + residual` with an optional clip to `[lo, hi]`.
pub fn sample_continuous(
    mean: &[f64],
    bank: &ResidualBank,
    scale: &[f64],
    clip: &[Option<(f64, f64)>],
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let eps = bank.draw(rng);
    mean.iter()
        .enumerate()
        .map(|(j, m)| {
            let v = m + eps[j] * scale[j];
            match clip.get(j).copied().flatten() {
                Some((lo, hi)) => v.clamp(lo, hi),
                None => v,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    /// Monte Carlo draws per unit.
    pub draws: usize,
    /// First simulated covariate row `m`.
    pub start: usize,
    /// Number of covariate rows `K`; rows `m..K` are simulated.
    pub end: usize,
    pub seed: u64,
    /// Per continuous covariate (schema continuous order).
    #[serde(default)]
    pub clip: Vec<Option<(f64, f64)>>,
    pub quantiles: (f64, f64),
    #[serde(default)]
    pub keep_draws: bool,
}

impl SimulationConfig {
    pub fn new(draws: usize, start: usize, end: usize, seed: u64) -> Self {
        Self {
            draws,
            start,
            end,
            seed,
            clip: Vec::new(),
            quantiles: (0.05, 0.95),
            keep_draws: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 {
            return Err(Error::config("draws must be at least 1"));
        }
        if self.start == 0 || self.start > self.end {
            return Err(Error::config(format!(
                "invalid simulation window {}..{}",
                self.start, self.end
            )));
        }
        let (lo, hi) = self.quantiles;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::config("quantiles must satisfy 0 <= low <= high <= 1"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.end - self.start
    }
}

/// Summary of one unit's draws. Arrays are `steps x width`, row `s` holding
/// time `start + s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSimulation {
    pub unit_id: u64,
    pub mean: Vec<f64>,
    pub q_low: Vec<f64>,
    pub q_high: Vec<f64>,
    /// Mean action `A_{t-1}` that led to row `t`.
    pub action_mean: Vec<f64>,
    /// `draws x steps x d_L` when kept.
    #[serde(default)]
    pub draws: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub regime_id: String,
    pub seed: u64,
    pub start: usize,
    pub end: usize,
    pub draws_per_unit: usize,
    pub quantiles: (f64, f64),
    pub num_covariates: usize,
    pub num_treatments: usize,
    pub units: Vec<UnitSimulation>,
}

impl SimulationResult {
    pub fn steps(&self) -> usize {
        self.end - self.start
    }

    pub fn find(&self, id: u64) -> Option<&UnitSimulation> {
        self.units.iter().find(|u| u.unit_id == id)
    }
}

/// Empirical quantile with linear interpolation between order statistics.
/// `sorted` must be ascending and nonempty.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Lockstep simulation state for `rows` rollouts of one unit.
struct Simulator<'a> {
    schema: &'a CovariateSchema,
    rollout: Box<dyn Rollout + 'a>,
    regime: RegimeState<'a>,
    bank: &'a ResidualBank,
    scale: Vec<f64>,
    clip: &'a [Option<(f64, f64)>],
    cat: Vec<usize>,
    classes: Vec<usize>,
    co: Vec<usize>,
    current: Vec<f64>,
    rows: usize,
    t: usize,
}

impl<'a> Simulator<'a> {
    fn new(
        est: &'a dyn ConditionalDensityEstimator,
        unit: &Trajectory,
        regime: &'a TreatmentRegime,
        bank: &'a ResidualBank,
        clip: &'a [Option<(f64, f64)>],
        start: usize,
        rows: usize,
    ) -> Result<Self> {
        let schema = est.schema();
        unit.check(schema)?;
        if start == 0 || start > unit.steps {
            return Err(Error::data(format!(
                "unit {} has {} rows, cannot start simulation at {start}",
                unit.id, unit.steps
            )));
        }
        let co = schema.continuous();
        if !co.is_empty() && bank.width() != co.len() {
            return Err(Error::Schema(format!(
                "residual bank has width {}, schema has {} continuous covariates",
                bank.width(),
                co.len()
            )));
        }
        let row = unit.covariate_row(start - 1);
        Ok(Self {
            schema,
            rollout: est.rollout(unit, start, rows)?,
            regime: regime.start(schema, unit, start, rows)?,
            bank,
            scale: est.continuous_scale(),
            clip,
            cat: schema.categorical(),
            classes: schema.class_counts(),
            co,
            current: (0..rows).flat_map(|_| row.iter().copied()).collect(),
            rows,
            t: start - 1,
        })
    }

    /// Chooses `A_t`, samples `L_{t+1}` and advances. Returns the actions.
    fn step(&mut self, rngs: &mut [ChaCha8Rng]) -> Result<Vec<f64>> {
        let d_l = self.schema.num_covariates();
        let actions = self.regime.act(self.t, &self.current, rngs)?;
        if actions.iter().any(|a| !a.is_finite()) {
            return Err(Error::numerical(format!("regime produced a non-finite action at t={}", self.t)));
        }
        let probs = self.rollout.categorical(&actions)?;
        let total: usize = self.classes.iter().sum();
        let mut sampled = vec![0usize; self.rows * self.cat.len()];
        for r in 0..self.rows {
            let mut off = r * total;
            for (k, &c) in self.classes.iter().enumerate() {
                sampled[r * self.cat.len() + k] = sample_categorical(&probs[off..off + c], &mut rngs[r])?;
                off += c;
            }
        }
        let means = self.rollout.continuous(&sampled)?;
        let d_co = self.co.len();
        let mut next = vec![0.0; self.rows * d_l];
        for r in 0..self.rows {
            for (k, &c) in self.cat.iter().enumerate() {
                next[r * d_l + c] = sampled[r * self.cat.len() + k] as f64;
            }
            if d_co > 0 {
                let m = &means[r * d_co..(r + 1) * d_co];
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numerical(format!(
                        "estimator produced a non-finite mean at t={}",
                        self.t + 1
                    )));
                }
                let v = sample_continuous(m, self.bank, &self.scale, self.clip, &mut rngs[r]);
                for (k, &c) in self.co.iter().enumerate() {
                    next[r * d_l + c] = v[k];
                }
            }
        }
        self.rollout.commit(&next)?;
        self.current = next;
        self.t += 1;
        Ok(actions)
    }
}

/// One step of Algorithm-2 style simulation from the observed history of
/// `unit` up to covariate row `t`: returns `(A_t, L_{t+1})`.
pub fn simulate_one_step(
    est: &dyn ConditionalDensityEstimator,
    unit: &Trajectory,
    t: usize,
    regime: &TreatmentRegime,
    bank: &ResidualBank,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut sim = Simulator::new(est, unit, regime, bank, &[], t + 1, 1)?;
    let mut rngs = [rng.clone()];
    let a = sim.step(&mut rngs)?;
    *rng = rngs[0].clone();
    Ok((a, sim.current))
}

/// Runs `cfg.draws` rollouts for one unit. Each draw owns an RNG stream
/// derived from `(seed, unit id, draw index)`.
pub fn simulate_unit(
    est: &dyn ConditionalDensityEstimator,
    unit: &Trajectory,
    regime: &TreatmentRegime,
    bank: &ResidualBank,
    cfg: &SimulationConfig,
) -> Result<UnitSimulation> {
    cfg.validate()?;
    let schema = est.schema();
    let (d_l, d_a) = (schema.num_covariates(), schema.num_treatments());
    let (m, steps) = (cfg.draws, cfg.steps());
    let mut rngs: Vec<ChaCha8Rng> = (0..m as u64).map(|d| seed::rng(cfg.seed, "draw", unit.id, d)).collect();
    let mut draws = vec![0.0; m * steps * d_l];
    let mut action_mean = vec![0.0; steps * d_a];
    if steps > 0 {
        let mut sim = Simulator::new(est, unit, regime, bank, &cfg.clip, cfg.start, m)?;
        for s in 0..steps {
            let a = sim.step(&mut rngs).map_err(|e| match e {
                Error::Numerical(msg) => Error::numerical(format!("unit {}: {msg}", unit.id)),
                other => other,
            })?;
            for r in 0..m {
                draws[(r * steps + s) * d_l..(r * steps + s + 1) * d_l]
                    .copy_from_slice(&sim.current[r * d_l..(r + 1) * d_l]);
                for j in 0..d_a {
                    action_mean[s * d_a + j] += a[r * d_a + j];
                }
            }
        }
        for v in &mut action_mean {
            *v /= m as f64;
        }
    }
    let mut mean = vec![0.0; steps * d_l];
    let mut q_low = vec![0.0; steps * d_l];
    let mut q_high = vec![0.0; steps * d_l];
    let mut col = vec![0.0; m];
    for s in 0..steps {
        for c in 0..d_l {
            for r in 0..m {
                col[r] = draws[(r * steps + s) * d_l + c];
            }
            mean[s * d_l + c] = col.iter().sum::<f64>() / m as f64;
            col.sort_by(f64::total_cmp);
            q_low[s * d_l + c] = quantile(&col, cfg.quantiles.0);
            q_high[s * d_l + c] = quantile(&col, cfg.quantiles.1);
        }
    }
    Ok(UnitSimulation {
        unit_id: unit.id,
        mean,
        q_low,
        q_high,
        action_mean,
        draws: cfg.keep_draws.then_some(draws),
    })
}

/// Monte Carlo estimate of the counterfactual trajectory distribution of
/// every unit under `regime`.
pub fn simulate_mc(
    est: &dyn ConditionalDensityEstimator,
    units: &[Trajectory],
    regime: &TreatmentRegime,
    bank: &ResidualBank,
    cfg: &SimulationConfig,
) -> Result<SimulationResult> {
    cfg.validate()?;
    let schema = est.schema();
    let units = units
        .iter()
        .map(|u| simulate_unit(est, u, regime, bank, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulationResult {
        regime_id: regime.id.clone(),
        seed: cfg.seed,
        start: cfg.start,
        end: cfg.end,
        draws_per_unit: cfg.draws,
        quantiles: cfg.quantiles,
        num_covariates: schema.num_covariates(),
        num_treatments: schema.num_treatments(),
        units,
    })
}

/// Categorical class of `value` for covariate `c`, validated.
pub(crate) fn class_of(schema: &CovariateSchema, c: usize, value: f64) -> Result<usize> {
    match schema.covariates[c].kind {
        CovariateKind::Categorical { classes } if value >= 0.0 && (value as usize) < classes => Ok(value as usize),
        _ => Err(Error::data(format!("invalid class {value} for `{}`", schema.covariates[c].name))),
    }
}


#[cfg(test)]
mod tests {
    use super::testutil::{unit, Toy};
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn categorical_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_categorical(&[1.0, 0.0, 0.0], &mut rng).unwrap(), 0);
        }
        let n = 100_000;
        let zeros = (0..n)
            .filter(|_| sample_categorical(&[0.5, 0.5], &mut rng).unwrap() == 0)
            .count();
        assert!((zeros as f64 / n as f64 - 0.5).abs() < 0.01);
        let ones = (0..n)
            .filter(|_| sample_categorical(&[0.7, 0.3], &mut rng).unwrap() == 1)
            .count() as f64
            / n as f64;
        // 4 standard errors of a binomial proportion
        assert!((ones - 0.3).abs() < 4.0 * (0.3f64 * 0.7 / n as f64).sqrt());
        assert!(sample_categorical(&[f64::NAN, 1.0], &mut rng).is_err());
    }

    #[test]
    fn continuous_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zero = ResidualBank::new(vec![0.0], 1, ResidualMode::Independent).unwrap();
        assert_eq!(sample_continuous(&[4.2], &zero, &[3.0], &[], &mut rng), vec![4.2]);
        let pm = ResidualBank::new(vec![-1.0, 1.0], 1, ResidualMode::Independent).unwrap();
        let n = 40_000;
        let mean: f64 = (0..n)
            .map(|_| sample_continuous(&[2.0], &pm, &[1.0], &[], &mut rng)[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - 2.0).abs() < 4.0 / (n as f64).sqrt());
        let clip = [Some((1.5, 2.5))];
        for _ in 0..100 {
            let v = sample_continuous(&[2.0], &pm, &[3.0], &clip, &mut rng)[0];
            assert!((1.5..=2.5).contains(&v));
        }
    }

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.0), 1.0);
        assert_eq!(quantile(&s, 1.0), 5.0);
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert!((quantile(&s, 0.05) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn withhold_action_is_zero_and_degenerate_rollout_is_deterministic() {
        let mut toy = Toy::new();
        toy.p0 = 0.0;
        let bank = ResidualBank::new(vec![0.0], 1, ResidualMode::Independent).unwrap();
        let regime = TreatmentRegime::withhold("none");
        let u = unit(6);
        let mut cfg = SimulationConfig::new(5, 2, 6, 9);
        cfg.keep_draws = true;
        let res = simulate_mc(&toy, &[u], &regime, &bank, &cfg).unwrap();
        let us = &res.units[0];
        assert!(us.action_mean.iter().all(|&a| a == 0.0));
        // x: 1 -> 0.5 -> 0.25 -> 0.125 -> 0.0625
        let expect = [0.5, 0.25, 0.125, 0.0625];
        for s in 0..4 {
            assert_eq!(us.mean[s * 2], 0.0);
            assert!((us.mean[s * 2 + 1] - expect[s]).abs() < 1e-15);
            assert_eq!(us.q_low[s * 2 + 1], us.q_high[s * 2 + 1]);
        }
    }

    #[test]
    fn results_are_reproducible_and_summaries_consistent() {
        let toy = Toy::new();
        let bank = ResidualBank::new(vec![-0.5, 0.1, 0.4], 1, ResidualMode::Independent).unwrap();
        let regime = TreatmentRegime::static_sequence("treat", vec![vec![1.0]]);
        let u = unit(8);
        let mut cfg = SimulationConfig::new(40, 3, 8, 11);
        cfg.keep_draws = true;
        let a = simulate_mc(&toy, std::slice::from_ref(&u), &regime, &bank, &cfg).unwrap();
        let b = simulate_mc(&toy, std::slice::from_ref(&u), &regime, &bank, &cfg).unwrap();
        assert_eq!(a, b);
        let us = &a.units[0];
        let draws = us.draws.as_ref().unwrap();
        let steps = 5;
        for s in 0..steps {
            for c in 0..2 {
                let col: Vec<f64> = (0..40).map(|r| draws[(r * steps + s) * 2 + c]).collect();
                let mean = col.iter().sum::<f64>() / 40.0;
                assert_eq!(mean, us.mean[s * 2 + c]);
                assert!(us.q_low[s * 2 + c] <= us.q_high[s * 2 + c]);
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert!(lo <= us.q_low[s * 2 + c] && us.q_high[s * 2 + c] <= hi);
            }
        }
        assert!(us.action_mean.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_draw_matches_one_step_chain() {
        let toy = Toy::new();
        let bank = ResidualBank::new(vec![-0.3, 0.2, 0.9], 1, ResidualMode::Independent).unwrap();
        let regime = TreatmentRegime::withhold("none");
        let u = unit(4);
        let mut cfg = SimulationConfig::new(1, 3, 4, 5);
        cfg.keep_draws = true;
        let res = simulate_mc(&toy, std::slice::from_ref(&u), &regime, &bank, &cfg).unwrap();
        let mut rng = seed::rng(5, "draw", u.id, 0);
        let (a, l) = simulate_one_step(&toy, &u, 2, &regime, &bank, &mut rng).unwrap();
        assert_eq!(a, vec![0.0]);
        assert_eq!(res.units[0].draws.as_ref().unwrap(), &l);
    }

    #[test]
    fn one_step_frequencies_match_conditionals() {
        let toy = Toy::new();
        let bank = ResidualBank::new(vec![0.0], 1, ResidualMode::Independent).unwrap();
        let regime = TreatmentRegime::static_sequence("treat", vec![vec![1.0]]);
        let u = unit(3);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 100_000;
        let mut ones = 0;
        for _ in 0..n {
            let (_, l) = simulate_one_step(&toy, &u, 1, &regime, &bank, &mut rng).unwrap();
            ones += l[0] as usize;
            assert_eq!(l[1], 0.5 + 2.0 * l[0] + 1.0);
        }
        let f = ones as f64 / n as f64;
        assert!((f - 0.7).abs() < 3.0 * (0.21f64 / n as f64).sqrt() + 1e-3);
    }

    #[test]
    fn draw_permutation_leaves_summaries_unchanged() {
        let toy = Toy::new();
        let bank = ResidualBank::new(vec![-1.0, 0.0, 2.0], 1, ResidualMode::Independent).unwrap();
        let regime = TreatmentRegime::withhold("none");
        let u = unit(5);
        let mut cfg = SimulationConfig::new(30, 2, 5, 3);
        cfg.keep_draws = true;
        let res = simulate_mc(&toy, std::slice::from_ref(&u), &regime, &bank, &cfg).unwrap();
        let us = &res.units[0];
        let draws = us.draws.as_ref().unwrap();
        let steps = 3;
        for s in 0..steps {
            let mut col: Vec<f64> = (0..30).rev().map(|r| draws[(r * steps + s) * 2 + 1]).collect();
            let mean_rev = col.iter().rev().sum::<f64>() / 30.0;
            assert!((mean_rev - us.mean[s * 2 + 1]).abs() < 1e-12);
            col.sort_by(f64::total_cmp);
            assert_eq!(quantile(&col, 0.05), us.q_low[s * 2 + 1]);
        }
    }

    #[test]
    fn invalid_window_is_rejected() {
        let toy = Toy::new();
        let bank = ResidualBank::new(vec![0.0], 1, ResidualMode::Independent).unwrap();
        let regime = TreatmentRegime::withhold("none");
        let cfg = SimulationConfig::new(0, 2, 5, 3);
        assert!(simulate_mc(&toy, &[unit(5)], &regime, &bank, &cfg).is_err());
        let cfg = SimulationConfig::new(2, 7, 9, 3);
        assert!(simulate_mc(&toy, &[unit(5)], &regime, &bank, &cfg).is_err());
    }
}
