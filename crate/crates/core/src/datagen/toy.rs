//! Linear-Gaussian system with a known conditional mean:
//! `x_{t+1} = coef x_t + effect a_t + noise_sd e_t`, where `a_t` is drawn
//! with probability `sigmoid(policy_slope x_t)`.

use serde::{Deserialize, Serialize};

use super::{config_hash, normal, sigmoid, uniform};
use crate::data::{Covariate, CovariateSchema, Dataset, DatasetMeta, Trajectory, Treatment, TreatmentKind};
use crate::error::{Error, Result};
use crate::gcomp::{ConditionalDensityEstimator, Rollout};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub num_units: usize,
    pub steps: usize,
    pub coef: f64,
    pub effect: f64,
    pub noise_sd: f64,
    pub policy_slope: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            num_units: 500,
            steps: 10,
            coef: 0.8,
            effect: 1.0,
            noise_sd: 0.5,
            policy_slope: 1.0,
            seed: 0,
        }
    }
}

/// The system itself, usable as an exact conditional density estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianToy {
    pub config: ToyConfig,
    pub schema: CovariateSchema,
}

impl LinearGaussianToy {
    pub fn new(config: ToyConfig) -> Result<Self> {
        if config.steps < 2 || !(config.noise_sd > 0.0) {
            return Err(Error::config("toy needs at least 2 steps and positive noise"));
        }
        Ok(Self {
            config,
            schema: CovariateSchema {
                covariates: vec![Covariate::continuous("x")],
                treatments: vec![Treatment::new("a", TreatmentKind::Binary)],
                outcome: 0,
                statics: vec![],
            },
        })
    }

    pub fn mean(&self, x: f64, a: f64) -> f64 {
        self.config.coef * x + self.config.effect * a
    }

    /// Observational units with ids starting at `first_id`.
    pub fn generate(&self, first_id: u64, n: usize, split: &str) -> Dataset {
        let c = &self.config;
        let units = (first_id..first_id + n as u64)
            .map(|id| {
                let mut rng = seed::rng(c.seed, "toy", id, 0);
                let mut x = normal(&mut rng);
                let (mut cov, mut treat) = (Vec::new(), Vec::new());
                for _ in 0..c.steps {
                    cov.push(x);
                    let a = f64::from(u8::from(uniform(&mut rng) < sigmoid(c.policy_slope * x)));
                    treat.push(a);
                    x = self.mean(x, a) + c.noise_sd * normal(&mut rng);
                }
                Trajectory::new(id, vec![], cov, treat, c.steps)
            })
            .collect();
        let meta = DatasetMeta {
            generator: "toy".into(),
            config_hash: config_hash(c),
            seed: c.seed,
            regime_id: "g_o".into(),
            switch_time: None,
            split: split.into(),
            extra: Default::default(),
        };
        Dataset::new(self.schema.clone(), meta, units)
    }
}

struct ToyRollout<'a> {
    toy: &'a LinearGaussianToy,
    current: Vec<f64>,
    actions: Vec<f64>,
}

impl ConditionalDensityEstimator for LinearGaussianToy {
    fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    fn continuous_scale(&self) -> Vec<f64> {
        vec![self.config.noise_sd]
    }

    fn rollout<'a>(&'a self, unit: &Trajectory, start: usize, rows: usize) -> Result<Box<dyn Rollout + 'a>> {
        if start == 0 || start > unit.steps {
            return Err(Error::data(format!("cannot roll out unit {} from {start}", unit.id)));
        }
        Ok(Box::new(ToyRollout {
            toy: self,
            current: vec![unit.covariate(start - 1, 0); rows],
            actions: Vec::new(),
        }))
    }
}

impl Rollout for ToyRollout<'_> {
    fn categorical(&mut self, actions: &[f64]) -> Result<Vec<f64>> {
        self.actions = actions.to_vec();
        Ok(Vec::new())
    }

    fn continuous(&mut self, _classes: &[usize]) -> Result<Vec<f64>> {
        Ok(self
            .current
            .iter()
            .zip(&self.actions)
            .map(|(&x, &a)| self.toy.mean(x, a))
            .collect())
    }

    fn commit(&mut self, covariates: &[f64]) -> Result<()> {
        self.current.copy_from_slice(covariates);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gcomp::{build_residual_bank, ResidualMode};

    #[test]
    fn residual_pool_is_scaled_noise() {
        let toy = LinearGaussianToy::new(ToyConfig::default()).unwrap();
        let d = toy.generate(0, 400, "val");
        let bank = build_residual_bank(&toy, &d.units, 1, ResidualMode::Independent).unwrap();
        assert_eq!(bank.len(), 400 * 9);
        let p = bank.pool(0);
        let n = p.len() as f64;
        let mean = p.iter().sum::<f64>() / n;
        let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 4.0 / n.sqrt());
        assert!((var - 1.0).abs() < 0.1);
    }
}
