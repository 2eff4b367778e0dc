//! Small discrete Markov system whose counterfactual distributions can be
//! computed exactly by enumerating covariate paths.
//!
//! The joint state is the tuple of at most two categorical covariates. Given
//! the state `s` and binary treatment `a` at row `t`, each covariate of row
//! `t + 1` is drawn independently from `transition[j][2 s + a]`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{config_hash, uniform};
use crate::data::{Covariate, CovariateSchema, Dataset, DatasetMeta, Trajectory, Treatment, TreatmentKind};
use crate::error::{Error, Result};
use crate::gcomp::{sample_categorical, ConditionalDensityEstimator, Rollout, TreatmentRegime};
use crate::seed;

/// Upper bound on enumerated covariate paths.
pub const MAX_PATHS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleMdpConfig {
    pub classes: Vec<usize>,
    pub steps: usize,
    pub num_units: usize,
    /// Distribution of the initial joint state.
    pub initial: Vec<f64>,
    /// `transition[j][2 s + a]` is the distribution of covariate `j` at the
    /// next row given joint state `s` and treatment `a`.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// Observational probability of treating in each joint state.
    pub policy: Vec<f64>,
    pub seed: u64,
}

impl OracleMdpConfig {
    /// Random system with covariates of `classes` classes and a treatment
    /// that shifts each covariate toward its lowest class.
    pub fn random(classes: &[usize], steps: usize, num_units: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, "oracle-system", 0, 0);
        let states: usize = classes.iter().product();
        let simplex = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let w: Vec<f64> = (0..n).map(|_| -uniform(rng).max(1e-12).ln()).collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|v| v / s).collect()
        };
        let initial = simplex(states, &mut rng);
        let transition = classes
            .iter()
            .map(|&c| {
                (0..2 * states)
                    .map(|k| {
                        let mut p = simplex(c, &mut rng);
                        if k % 2 == 1 {
                            p.iter_mut().for_each(|v| *v *= 0.5);
                            p[0] += 0.5;
                        }
                        p
                    })
                    .collect()
            })
            .collect();
        let policy = (0..states).map(|_| 0.2 + 0.6 * uniform(&mut rng)).collect();
        Self {
            classes: classes.to_vec(),
            steps,
            num_units,
            initial,
            transition,
            policy,
            seed,
        }
    }
}

impl Default for OracleMdpConfig {
    fn default() -> Self {
        Self::random(&[3, 2], 5, 1000, 0)
    }
}

/// Validated tabular system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleMdp {
    pub config: OracleMdpConfig,
    pub schema: CovariateSchema,
}

fn is_simplex(p: &[f64]) -> bool {
    p.iter().all(|v| v.is_finite() && *v >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9
}

impl OracleMdp {
    pub fn new(config: OracleMdpConfig) -> Result<Self> {
        let c = &config;
        if c.classes.is_empty() || c.classes.len() > 2 || c.classes.iter().any(|&k| !(2..=3).contains(&k)) {
            return Err(Error::config("oracle system needs 1-2 covariates with 2-3 classes"));
        }
        if c.steps < 2 || c.steps > 5 {
            return Err(Error::config("oracle horizon must be 2-5 rows"));
        }
        let states: usize = c.classes.iter().product();
        if c.initial.len() != states || !is_simplex(&c.initial) {
            return Err(Error::config("initial distribution is not a simplex over joint states"));
        }
        if c.transition.len() != c.classes.len() {
            return Err(Error::config("one transition table per covariate expected"));
        }
        for (j, table) in c.transition.iter().enumerate() {
            if table.len() != 2 * states || table.iter().any(|p| p.len() != c.classes[j] || !is_simplex(p)) {
                return Err(Error::config(format!("transition rows of covariate {j} are not simplices")));
            }
        }
        if c.policy.len() != states || c.policy.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("policy must give a probability per joint state"));
        }
        let schema = CovariateSchema {
            covariates: c
                .classes
                .iter()
                .enumerate()
                .map(|(j, &k)| Covariate::categorical(&format!("s{j}"), k))
                .collect(),
            treatments: vec![Treatment::new("a", TreatmentKind::Binary)],
            outcome: 0,
            statics: vec![],
        };
        Ok(Self { config, schema })
    }

    pub fn num_states(&self) -> usize {
        self.config.classes.iter().product()
    }

    pub fn encode(&self, row: &[f64]) -> usize {
        let mut s = 0;
        for (j, &k) in self.config.classes.iter().enumerate() {
            s = s * k + row[j] as usize;
        }
        s
    }

    pub fn decode(&self, mut s: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.config.classes.len()];
        for (j, &k) in self.config.classes.iter().enumerate().rev() {
            row[j] = (s % k) as f64;
            s /= k;
        }
        row
    }

    /// Joint next-state distribution from state `s` under action `a`.
    pub fn joint_next(&self, s: usize, a: usize) -> Vec<f64> {
        (0..self.num_states())
            .map(|n| {
                let row = self.decode(n);
                self.config
                    .transition
                    .iter()
                    .enumerate()
                    .map(|(j, table)| table[2 * s + a][row[j] as usize])
                    .product()
            })
            .collect()
    }
}

/// Samples the observational dataset.
pub fn gen_oracle_mdp(config: &OracleMdpConfig) -> Result<(Dataset, OracleMdp)> {
    let mdp = OracleMdp::new(config.clone())?;
    let c = &mdp.config;
    let units = (0..c.num_units as u64)
        .map(|id| {
            let mut rng = seed::rng(c.seed, "oracle", id, 0);
            let mut s = sample_categorical(&c.initial, &mut rng)?;
            let (mut cov, mut treat) = (Vec::new(), Vec::new());
            for t in 0..c.steps {
                cov.extend(mdp.decode(s));
                let a = usize::from(uniform(&mut rng) < c.policy[s]);
                treat.push(a as f64);
                if t + 1 < c.steps {
                    let mut next = Vec::with_capacity(c.classes.len());
                    for table in &c.transition {
                        next.push(sample_categorical(&table[2 * s + a], &mut rng)? as f64);
                    }
                    s = mdp.encode(&next);
                }
            }
            Ok(Trajectory::new(id, vec![], cov, treat, c.steps))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = DatasetMeta {
        generator: "oracle".into(),
        config_hash: config_hash(c),
        seed: c.seed,
        regime_id: "g_o".into(),
        switch_time: None,
        split: "train".into(),
        extra: Default::default(),
    };
    Ok((Dataset::new(mdp.schema.clone(), meta, units), mdp))
}

/// Exact distribution of the joint state at row `t` when `unit`'s history
/// up to row `start - 1` is observed and `regime` chooses every action from
/// `A_{start-1}` on. Sums over all covariate paths between `start` and `t`.
pub fn exact_gformula(
    mdp: &OracleMdp,
    unit: &Trajectory,
    start: usize,
    regime: &TreatmentRegime,
    t: usize,
) -> Result<Vec<f64>> {
    if regime.is_stochastic() {
        return Err(Error::config("exact g-formula supports deterministic regimes only"));
    }
    if start == 0 || t < start || start > unit.steps || t >= mdp.config.steps {
        return Err(Error::config(format!("invalid target row {t} for start {start}")));
    }
    let n = mdp.num_states();
    let depth = t - start + 1;
    let paths = n.checked_pow(depth as u32).unwrap_or(usize::MAX);
    if paths > MAX_PATHS {
        return Err(Error::config(format!("{paths} covariate paths exceed the enumeration limit {MAX_PATHS}")));
    }
    let mut state = regime.start(&mdp.schema, unit, start, 1)?;
    let mut rngs = [seed::rng(0, "unused", 0, 0)];
    let mut out = vec![0.0; n];
    // Depth-first over paths l_start..l_t, each weighted by its probability.
    let mut stack = vec![(start - 1, mdp.encode(unit.covariate_row(start - 1)), 1.0)];
    while let Some((r, s, w)) = stack.pop() {
        if r == t {
            out[s] += w;
            continue;
        }
        let a = state.act(r, &mdp.decode(s), &mut rngs)?[0];
        if a != 0.0 && a != 1.0 {
            return Err(Error::config(format!("regime action {a} is not binary")));
        }
        for (next, p) in mdp.joint_next(s, a as usize).into_iter().enumerate() {
            if p > 0.0 {
                stack.push((r + 1, next, w * p));
            }
        }
    }
    Ok(out)
}

/// Conditional density estimator backed by transition tables.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularEstimator {
    pub mdp: OracleMdp,
}

impl TabularEstimator {
    /// Uses the true transition tables.
    pub fn exact(mdp: &OracleMdp) -> Self {
        Self { mdp: mdp.clone() }
    }

    /// Empirical transition frequencies of `data`; unseen `(state, action)`
    /// pairs get uniform rows.
    pub fn fit(mdp: &OracleMdp, data: &Dataset) -> Result<Self> {
        if data.schema != mdp.schema {
            return Err(Error::Schema("dataset does not match the oracle schema".into()));
        }
        let n = mdp.num_states();
        let classes = &mdp.config.classes;
        let mut counts: Vec<Vec<Vec<f64>>> = classes.iter().map(|&k| vec![vec![0.0; k]; 2 * n]).collect();
        for u in &data.units {
            for t in 0..u.steps.saturating_sub(1) {
                let s = mdp.encode(u.covariate_row(t));
                let a = u.treatment_row(t)[0] as usize;
                for (j, table) in counts.iter_mut().enumerate() {
                    table[2 * s + a][u.covariate(t + 1, j) as usize] += 1.0;
                }
            }
        }
        for table in &mut counts {
            for row in table.iter_mut() {
                let total: f64 = row.iter().sum();
                let k = row.len() as f64;
                row.iter_mut().for_each(|v| *v = if total > 0.0 { *v / total } else { 1.0 / k });
            }
        }
        let config = OracleMdpConfig {
            transition: counts,
            ..mdp.config.clone()
        };
        Ok(Self {
            mdp: OracleMdp::new(config)?,
        })
    }
}

struct TabularRollout<'a> {
    mdp: &'a OracleMdp,
    states: Vec<usize>,
}

impl ConditionalDensityEstimator for TabularEstimator {
    fn schema(&self) -> &CovariateSchema {
        &self.mdp.schema
    }

    fn continuous_scale(&self) -> Vec<f64> {
        Vec::new()
    }

    fn rollout<'a>(&'a self, unit: &Trajectory, start: usize, rows: usize) -> Result<Box<dyn Rollout + 'a>> {
        if start == 0 || start > unit.steps {
            return Err(Error::data(format!("cannot roll out unit {} from {start}", unit.id)));
        }
        let s = self.mdp.encode(unit.covariate_row(start - 1));
        Ok(Box::new(TabularRollout {
            mdp: &self.mdp,
            states: vec![s; rows],
        }))
    }
}

impl Rollout for TabularRollout<'_> {
    fn categorical(&mut self, actions: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for (r, &s) in self.states.iter().enumerate() {
            let a = actions[r];
            if a != 0.0 && a != 1.0 {
                return Err(Error::data(format!("action {a} is not binary")));
            }
            for table in &self.mdp.config.transition {
                out.extend_from_slice(&table[2 * s + a as usize]);
            }
        }
        Ok(out)
    }

    fn continuous(&mut self, _classes: &[usize]) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }

    fn commit(&mut self, covariates: &[f64]) -> Result<()> {
        let d = self.mdp.config.classes.len();
        for (r, s) in self.states.iter_mut().enumerate() {
            *s = self.mdp.encode(&covariates[r * d..(r + 1) * d]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gcomp::{simulate_mc, LinearScore, ResidualBank, SimulationConfig, Term, Transform, TreatmentRule};

    fn rule() -> TreatmentRegime {
        TreatmentRegime::rule_based(
            "treat-high",
            vec![TreatmentRule {
                treatment: "a".into(),
                trigger: LinearScore {
                    intercept: -0.5,
                    terms: vec![Term {
                        covariate: "s0".into(),
                        coef: 1.0,
                        transform: Transform::Identity,
                    }],
                },
                dose: None,
            }],
        )
    }

    #[test]
    fn invalid_rows_are_rejected() {
        let mut c = OracleMdpConfig::default();
        c.transition[0][3][0] += 0.1;
        assert!(OracleMdp::new(c).is_err());
        let c = OracleMdpConfig {
            classes: vec![4],
            ..OracleMdpConfig::default()
        };
        assert!(OracleMdp::new(c).is_err());
    }

    #[test]
    fn deterministic_system_repeats() {
        let mut c = OracleMdpConfig::random(&[3], 5, 20, 1);
        c.initial = vec![0.0, 1.0, 0.0];
        for (k, row) in c.transition[0].iter_mut().enumerate() {
            *row = vec![0.0; 3];
            row[(k / 2 + 1) % 3] = 1.0;
        }
        let (d, _) = gen_oracle_mdp(&c).unwrap();
        assert!(d.units.iter().all(|u| u.covariates == d.units[0].covariates));
        assert_eq!(d.units[0].covariates, vec![1.0, 2.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn empirical_transitions_match_tables() {
        let c = OracleMdpConfig {
            num_units: 25_000,
            ..OracleMdpConfig::default()
        };
        let (d, mdp) = gen_oracle_mdp(&c).unwrap();
        let fit = TabularEstimator::fit(&mdp, &d).unwrap();
        let mut counts = vec![0.0; 2 * mdp.num_states()];
        for u in &d.units {
            for t in 0..u.steps - 1 {
                counts[2 * mdp.encode(u.covariate_row(t)) + u.treatment_row(t)[0] as usize] += 1.0;
            }
        }
        for (j, table) in mdp.config.transition.iter().enumerate() {
            for (k, row) in table.iter().enumerate() {
                let n = counts[k];
                for (c, &p) in row.iter().enumerate() {
                    let sigma = (p * (1.0 - p) / n).sqrt();
                    let est = fit.mdp.config.transition[j][k][c];
                    assert!((est - p).abs() <= 3.0 * sigma + 1e-12, "{j} {k} {c}: {est} vs {p} (n={n})");
                }
            }
        }
    }

    #[test]
    fn zero_policy_never_treats() {
        let c = OracleMdpConfig {
            policy: vec![0.0; 6],
            ..OracleMdpConfig::default()
        };
        let (d, _) = gen_oracle_mdp(&c).unwrap();
        assert!(d.units.iter().all(|u| u.treatments.iter().all(|&a| a == 0.0)));
    }

    #[test]
    fn one_step_target_reads_the_tables() {
        let (d, mdp) = gen_oracle_mdp(&OracleMdpConfig::default()).unwrap();
        let u = &d.units[3];
        for regime in [TreatmentRegime::withhold("none"), rule()] {
            let p = exact_gformula(&mdp, u, 2, &regime, 2).unwrap();
            let s = mdp.encode(u.covariate_row(1));
            let a = if matches!(regime.kind, crate::gcomp::RegimeKind::Withhold) {
                0
            } else {
                usize::from(u.covariate(1, 0) >= 1.0)
            };
            let expect = mdp.joint_next(s, a);
            for (x, y) in p.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-15);
            }
            for t in 2..5 {
                let q = exact_gformula(&mdp, u, 2, &regime, t).unwrap();
                assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(q.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn treatment_insensitive_system_matches_observational_marginal() {
        let mut c = OracleMdpConfig::default();
        for table in &mut c.transition {
            for k in (0..table.len()).step_by(2) {
                table[k + 1] = table[k].clone();
            }
        }
        let (d, mdp) = gen_oracle_mdp(&c).unwrap();
        let u = &d.units[0];
        // observational marginal by forward propagation with the policy mixed in
        let mut dist = vec![0.0; mdp.num_states()];
        dist[mdp.encode(u.covariate_row(0))] = 1.0;
        for _ in 0..3 {
            let mut next = vec![0.0; dist.len()];
            for (s, &w) in dist.iter().enumerate() {
                let pa = mdp.config.policy[s];
                for (n, (p0, p1)) in mdp.joint_next(s, 0).iter().zip(mdp.joint_next(s, 1)).enumerate() {
                    next[n] += w * ((1.0 - pa) * p0 + pa * p1);
                }
            }
            dist = next;
        }
        let exact = exact_gformula(&mdp, u, 1, &TreatmentRegime::withhold("none"), 3).unwrap();
        for (x, y) in exact.iter().zip(&dist) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn enumeration_guard() {
        let c = OracleMdpConfig::random(&[3, 3], 5, 5, 2);
        let (d, mdp) = gen_oracle_mdp(&c).unwrap();
        // the largest allowed system enumerates 9^4 paths at the longest horizon
        let p = exact_gformula(&mdp, &d.units[0], 1, &rule(), 4).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(exact_gformula(&mdp, &d.units[0], 1, &rule(), 5).is_err());
    }

    #[test]
    fn monte_carlo_agrees_with_enumeration() {
        let (d, mdp) = gen_oracle_mdp(&OracleMdpConfig::default()).unwrap();
        let est = TabularEstimator::exact(&mdp);
        let mut cfg = SimulationConfig::new(20_000, 2, 5, 9);
        cfg.keep_draws = true;
        let res = simulate_mc(&est, &d.units[..2], &rule(), &ResidualBank::empty(), &cfg).unwrap();
        for (u, sim) in d.units[..2].iter().zip(&res.units) {
            let draws = sim.draws.as_ref().unwrap();
            for t in [3, 4] {
                let exact = exact_gformula(&mdp, u, 2, &rule(), t).unwrap();
                let mut freq = vec![0.0; mdp.num_states()];
                for r in 0..cfg.draws {
                    let off = (r * 3 + t - 2) * 2;
                    freq[mdp.encode(&draws[off..off + 2])] += 1.0 / cfg.draws as f64;
                }
                let tv: f64 = exact.iter().zip(&freq).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
                assert!(tv < 0.03, "tv {tv}");
            }
        }
    }
}
