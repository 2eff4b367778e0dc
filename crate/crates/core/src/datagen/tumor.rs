//! Discrete-time PK/PD tumor growth under chemotherapy and radiotherapy.
//!
//! Volume follows a Gompertz law with per-patient growth and treatment
//! sensitivities:
//!
//! ```text
//! V_{t+1} = V_t (1 + rho ln(K / V_t) - beta_c C_t - (alpha_r d_t + beta_r d_t^2) + e_t)
//! C_t     = decay C_{t-1} + chemo_dose * chemo_t
//! d_t     = radio_dose * radio_t
//! ```
//!
//! clamped to `[0, max_volume]`. Under the observational policy each
//! treatment is given with probability `sigmoid(gamma (D - delta) / D_max)`,
//! where `D` is the diameter of the mean volume over the last few steps, so
//! larger tumors are treated more often (time-varying confounding).

use serde::{Deserialize, Serialize};

use super::{config_hash, normal, sigmoid, uniform};
use crate::data::{Covariate, CovariateSchema, Dataset, DatasetMeta, Trajectory, Treatment, TreatmentKind};
use crate::error::{Error, Result};
use crate::gcomp::TreatmentRegime;
use crate::seed;

pub const MAX_VOLUME: f64 = 1150.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TumorSimConfig {
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    /// Covariate rows per trajectory.
    pub steps: usize,
    /// Final steps under the counterfactual regime.
    pub window: usize,
    pub max_volume: f64,
    pub initial_log_volume_mean: f64,
    pub initial_log_volume_sd: f64,
    pub growth_mean: f64,
    pub growth_sd: f64,
    pub chemo_dose: f64,
    pub chemo_decay: f64,
    pub chemo_effect_mean: f64,
    pub chemo_effect_sd: f64,
    pub radio_dose: f64,
    pub radio_effect_mean: f64,
    pub radio_effect_sd: f64,
    /// `beta_r = alpha_r * radio_beta_ratio`.
    pub radio_beta_ratio: f64,
    pub noise_sd: f64,
    pub policy_gamma: f64,
    /// Diameter (cm) at which treatment probability is one half.
    pub policy_threshold: f64,
    /// Steps averaged for the policy's volume summary.
    pub policy_history: usize,
    pub seed: u64,
}

impl Default for TumorSimConfig {
    fn default() -> Self {
        Self {
            num_train: 10_000,
            num_val: 1_000,
            num_test: 1_000,
            steps: 24,
            window: 4,
            max_volume: MAX_VOLUME,
            initial_log_volume_mean: 3.5,
            initial_log_volume_sd: 0.8,
            growth_mean: 0.06,
            growth_sd: 0.02,
            chemo_dose: 5.0,
            chemo_decay: 0.5,
            chemo_effect_mean: 0.028,
            chemo_effect_sd: 0.007,
            radio_dose: 2.0,
            radio_effect_mean: 0.0398,
            radio_effect_sd: 0.0168,
            radio_beta_ratio: 0.1,
            noise_sd: 0.01,
            policy_gamma: 10.0,
            policy_threshold: 6.5,
            policy_history: 3,
            seed: 0,
        }
    }
}

impl TumorSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window >= self.steps {
            return Err(Error::config("tumor window must be in [1, steps)"));
        }
        if self.max_volume <= 0.0 || self.policy_history == 0 {
            return Err(Error::config("tumor max_volume and policy_history must be positive"));
        }
        Ok(())
    }

    /// First counterfactual covariate row `m`.
    pub fn switch_time(&self) -> usize {
        self.steps - self.window
    }

    pub fn max_diameter(&self) -> f64 {
        diameter(self.max_volume)
    }
}

fn diameter(volume: f64) -> f64 {
    (6.0 * volume / std::f64::consts::PI).cbrt()
}

/// The four static regimes applied over the counterfactual window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TumorRegime {
    Radio,
    Chemo,
    Both,
    None,
}

impl TumorRegime {
    pub const ALL: [TumorRegime; 4] = [TumorRegime::Radio, TumorRegime::Chemo, TumorRegime::Both, TumorRegime::None];

    pub fn id(self) -> &'static str {
        match self {
            TumorRegime::Radio => "radio",
            TumorRegime::Chemo => "chemo",
            TumorRegime::Both => "both",
            TumorRegime::None => "none",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.id() == id)
            .ok_or_else(|| Error::MissingRegime(id.to_string()))
    }

    /// `(chemo, radio)` action.
    pub fn action(self) -> [f64; 2] {
        match self {
            TumorRegime::Radio => [0.0, 1.0],
            TumorRegime::Chemo => [1.0, 0.0],
            TumorRegime::Both => [1.0, 1.0],
            TumorRegime::None => [0.0, 0.0],
        }
    }

    pub fn regime(self) -> TreatmentRegime {
        TreatmentRegime::static_sequence(self.id(), vec![self.action().to_vec()])
    }
}

pub fn tumor_schema() -> CovariateSchema {
    CovariateSchema {
        covariates: vec![Covariate::continuous("volume")],
        treatments: vec![
            Treatment::new("chemo", TreatmentKind::Binary),
            Treatment::new("radio", TreatmentKind::Binary),
        ],
        outcome: 0,
        statics: vec![],
    }
}

/// Simulates unit `id`. With `regime`, actions from row `switch - 1` on are
/// overridden by the regime's action.
fn simulate(cfg: &TumorSimConfig, id: u64, regime: Option<(usize, [f64; 2])>) -> Trajectory {
    let mut rng = seed::rng(cfg.seed, "tumor", id, 0);
    let v0 = (cfg.initial_log_volume_mean + cfg.initial_log_volume_sd * normal(&mut rng)).exp();
    let rho = (cfg.growth_mean + cfg.growth_sd * normal(&mut rng)).max(0.0);
    let beta_c = (cfg.chemo_effect_mean + cfg.chemo_effect_sd * normal(&mut rng)).max(0.0);
    let alpha_r = (cfg.radio_effect_mean + cfg.radio_effect_sd * normal(&mut rng)).max(0.0);
    let beta_r = alpha_r * cfg.radio_beta_ratio;
    let k = cfg.max_volume;
    let d_max = cfg.max_diameter();
    let mut volumes = vec![v0.clamp(0.0, k)];
    let mut treatments = Vec::with_capacity(cfg.steps * 2);
    let mut conc = 0.0;
    for t in 0..cfg.steps {
        let (u_c, u_r, e) = (uniform(&mut rng), uniform(&mut rng), cfg.noise_sd * normal(&mut rng));
        let lo = (t + 1).saturating_sub(cfg.policy_history);
        let mean_v = volumes[lo..=t].iter().sum::<f64>() / (t + 1 - lo) as f64;
        let p = sigmoid(cfg.policy_gamma * (diameter(mean_v) - cfg.policy_threshold) / d_max);
        let action = match regime {
            Some((switch, a)) if t + 1 >= switch => a,
            _ => [f64::from(u8::from(u_c < p)), f64::from(u8::from(u_r < p))],
        };
        treatments.extend(action);
        if t + 1 < cfg.steps {
            conc = cfg.chemo_decay * conc + cfg.chemo_dose * action[0];
            let dose = cfg.radio_dose * action[1];
            let v = volumes[t];
            let growth = rho * (k / v.max(1e-6)).ln();
            let next = v * (1.0 + growth - beta_c * conc - (alpha_r * dose + beta_r * dose * dose) + e);
            volumes.push(next.clamp(0.0, k));
        }
    }
    Trajectory::new(id, vec![], volumes, treatments, cfg.steps)
}

fn meta(cfg: &TumorSimConfig, split: &str, regime: &str) -> DatasetMeta {
    DatasetMeta {
        generator: "tumor".into(),
        config_hash: config_hash(cfg),
        seed: cfg.seed,
        regime_id: regime.into(),
        switch_time: Some(cfg.switch_time()),
        split: split.into(),
        extra: Default::default(),
    }
}

fn dataset(cfg: &TumorSimConfig, ids: std::ops::Range<u64>, split: &str, regime: Option<TumorRegime>) -> Dataset {
    let over = regime.map(|r| (cfg.switch_time(), r.action()));
    let units = ids.map(|id| simulate(cfg, id, over)).collect();
    let rid = regime.map_or("observational", TumorRegime::id);
    Dataset::new(tumor_schema(), meta(cfg, split, rid), units)
}

fn split_ids(cfg: &TumorSimConfig) -> [std::ops::Range<u64>; 3] {
    let (a, b, c) = (cfg.num_train as u64, cfg.num_val as u64, cfg.num_test as u64);
    [0..a, a..a + b, a + b..a + b + c]
}

/// Observational train, validation and test splits.
pub fn gen_tumor_observational(cfg: &TumorSimConfig) -> Result<[Dataset; 3]> {
    cfg.validate()?;
    let [tr, va, te] = split_ids(cfg);
    Ok([
        dataset(cfg, tr, "train", None),
        dataset(cfg, va, "val", None),
        dataset(cfg, te, "test", None),
    ])
}

/// Test units regenerated with `regime` over the final window, sharing each
/// unit's noise with its observational twin.
pub fn gen_tumor_counterfactual(cfg: &TumorSimConfig, regime: &str) -> Result<Dataset> {
    cfg.validate()?;
    let r = TumorRegime::from_id(regime)?;
    let [_, _, te] = split_ids(cfg);
    Ok(dataset(cfg, te, "test", Some(r)))
}

#[derive(Debug, Clone)]
pub struct TumorData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub counterfactual: Vec<(TumorRegime, Dataset)>,
}

pub fn gen_tumor(cfg: &TumorSimConfig) -> Result<TumorData> {
    let [train, val, test] = gen_tumor_observational(cfg)?;
    let counterfactual = TumorRegime::ALL
        .into_iter()
        .map(|r| Ok((r, gen_tumor_counterfactual(cfg, r.id())?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TumorData {
        train,
        val,
        test,
        counterfactual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TumorSimConfig {
        TumorSimConfig {
            num_train: 300,
            num_val: 50,
            num_test: 50,
            ..TumorSimConfig::default()
        }
    }

    #[test]
    fn zero_growth_without_treatment_is_constant() {
        let cfg = TumorSimConfig {
            growth_mean: 0.0,
            growth_sd: 0.0,
            noise_sd: 0.0,
            ..small()
        };
        let d = gen_tumor_counterfactual(&cfg, "none").unwrap();
        for u in &d.units {
            // rows up to the switch may have been treated; afterwards nothing
            // changes except chemo wash-out, which never raises volume.
            let m = cfg.switch_time();
            let v: Vec<f64> = (0..cfg.steps).map(|t| u.covariate(t, 0)).collect();
            assert!(v[m..].windows(2).all(|w| w[1] <= w[0]));
        }
        let cfg = TumorSimConfig {
            policy_threshold: 1e9,
            ..cfg
        };
        let [d, _, _] = gen_tumor_observational(&cfg).unwrap();
        for u in &d.units {
            assert!(u.treatments.iter().all(|&a| a == 0.0));
            let v0 = u.covariate(0, 0);
            assert!((0..cfg.steps).all(|t| u.covariate(t, 0) == v0));
        }
    }

    #[test]
    fn volumes_stay_in_range() {
        let cfg = TumorSimConfig {
            num_train: 10_000,
            num_val: 0,
            num_test: 0,
            ..TumorSimConfig::default()
        };
        let [d, _, _] = gen_tumor_observational(&cfg).unwrap();
        assert!(d.units.iter().all(|u| u.covariates.iter().all(|&v| (0.0..=MAX_VOLUME).contains(&v))));
    }

    #[test]
    fn treatment_is_confounded_by_volume() {
        let [d, _, _] = gen_tumor_observational(&small()).unwrap();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for u in &d.units {
            for t in 1..u.steps {
                xs.push(u.covariate(t - 1, 0));
                ys.push(u.treatment_row(t)[0]);
            }
        }
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        assert!(cov > 0.0);
        assert!((0.1..0.9).contains(&my), "treated fraction {my}");
    }

    #[test]
    fn counterfactual_window_and_twins() {
        let cfg = small();
        let m = cfg.switch_time();
        let [_, _, obs] = gen_tumor_observational(&cfg).unwrap();
        let none = gen_tumor_counterfactual(&cfg, "none").unwrap();
        let both = gen_tumor_counterfactual(&cfg, "both").unwrap();
        for ((o, n), b) in obs.units.iter().zip(&none.units).zip(&both.units) {
            assert_eq!(o.id, n.id);
            assert_eq!(o.covariates[..m], n.covariates[..m]);
            assert_eq!(o.treatments[..2 * (m - 1)], n.treatments[..2 * (m - 1)]);
            assert!(n.treatments[2 * (m - 1)..].iter().all(|&a| a == 0.0));
            for t in m..cfg.steps {
                assert!(b.covariate(t, 0) <= n.covariate(t, 0));
            }
        }
        assert!(matches!(gen_tumor_counterfactual(&cfg, "surgery"), Err(Error::MissingRegime(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_tumor(&small()).unwrap();
        let b = gen_tumor(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.counterfactual[1].1, b.counterfactual[1].1);
    }
}
