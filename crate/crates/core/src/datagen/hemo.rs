//! Lumped-compartment hemodynamic surrogate with fluid and vasopressor
//! treatments.
//!
//! Latent state per step: total blood volume (TBV), red cell volume, total
//! peripheral resistance (TPR), heart rate, lactate, creatinine, temperature
//! and ventilation status. Per-patient parameters set the bleed rate, the
//! (vasodilated) resting TPR, contractility and baseline heart rate.
//!
//! ```text
//! CVP = 2 + 10 sigmoid((TBV - 4600) / 350)
//! SV  = 100 c CVP / (CVP + 6)                  Frank-Starling
//! CO  = HR SV / 1000
//! MAP = CO TPR + CVP
//! TBV' = TBV (1 - loss) + 0.8 fluid             loss > 0 every step
//! TPR' = TPR + 0.15 (TPR_rest - TPR) + 10 vaso + noise
//! HR'  = HR + 0.3 (HR_0 + max(85 - MAP, 0) - HR) + noise   baroreflex
//! ```
//!
//! Sixteen continuous covariates and two binary ones are emitted with
//! measurement noise. Under the observational policy each treatment is given
//! with probability `sigmoid(trigger(L_t))`, a logistic function decreasing
//! in MAP and CVP, with a normally distributed dose whose mean is a sum of
//! reciprocals of MAP and CVP. Only emitted covariates drive treatment.

use serde::{Deserialize, Serialize};

use super::{config_hash, normal, sigmoid, uniform};
use crate::data::{Covariate, CovariateSchema, Dataset, DatasetMeta, Trajectory, Treatment, TreatmentKind};
use crate::error::{Error, Result};
use crate::gcomp::{LinearScore, Term, Transform, TreatmentRegime, TreatmentRule};
use crate::seed;

pub const CONTINUOUS: [&str; 16] = [
    "tbv",
    "tpr",
    "map",
    "cvp",
    "hr",
    "co",
    "sv",
    "sbp",
    "dbp",
    "lactate",
    "hb",
    "urine",
    "creatinine",
    "rr",
    "spo2",
    "temp",
];

const MAP: usize = 2;
const SPO2: usize = 14;

pub fn hemo_schema() -> CovariateSchema {
    let mut covariates: Vec<Covariate> = CONTINUOUS.iter().map(|n| Covariate::continuous(n)).collect();
    covariates.push(Covariate::categorical("hypotension", 2));
    covariates.push(Covariate::categorical("ventilated", 2));
    CovariateSchema {
        covariates,
        treatments: vec![
            Treatment::new("fluid", TreatmentKind::Dose),
            Treatment::new("vasopressor", TreatmentKind::Dose),
        ],
        outcome: MAP,
        statics: vec![],
    }
}

fn term(name: &str, coef: f64, transform: Transform) -> Term {
    Term {
        covariate: name.into(),
        coef,
        transform,
    }
}

/// Trigger logit and dose mean of one treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DosePolicy {
    pub trigger: LinearScore,
    pub dose: LinearScore,
    pub dose_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HemoSimConfig {
    /// Observational units, split into train and validation.
    pub num_observational: usize,
    pub train_fraction: f64,
    /// Test units generated under the observational and both counterfactual
    /// regimes.
    pub num_counterfactual: usize,
    pub steps: usize,
    pub switch_time: usize,
    pub fluid: DosePolicy,
    pub vasopressor: DosePolicy,
    /// Multiplier on every measurement-noise standard deviation.
    pub measurement_noise: f64,
    /// Multiplier on every process-noise standard deviation.
    pub process_noise: f64,
    pub seed: u64,
}

impl Default for HemoSimConfig {
    fn default() -> Self {
        Self {
            num_observational: 12_000,
            train_fraction: 0.8,
            num_counterfactual: 1_000,
            steps: 66,
            switch_time: 34,
            fluid: DosePolicy {
                trigger: LinearScore {
                    intercept: 10.5,
                    terms: vec![
                        term("map", -0.12, Transform::Identity),
                        term("cvp", -0.3, Transform::Identity),
                    ],
                },
                dose: LinearScore {
                    intercept: 0.0,
                    terms: vec![
                        term("map", 6000.0, Transform::Reciprocal),
                        term("cvp", 300.0, Transform::Reciprocal),
                    ],
                },
                dose_sd: 20.0,
            },
            vasopressor: DosePolicy {
                trigger: LinearScore {
                    intercept: 9.0,
                    terms: vec![
                        term("map", -0.13, Transform::Identity),
                        term("cvp", -0.1, Transform::Identity),
                    ],
                },
                dose: LinearScore {
                    intercept: 0.0,
                    terms: vec![
                        term("map", 8.0, Transform::Reciprocal),
                        term("cvp", 0.4, Transform::Reciprocal),
                    ],
                },
                dose_sd: 0.02,
            },
            measurement_noise: 1.0,
            process_noise: 1.0,
            seed: 0,
        }
    }
}

impl HemoSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.switch_time == 0 || self.switch_time >= self.steps {
            return Err(Error::config("hemo switch_time must be in [1, steps)"));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::config("train_fraction must be in [0, 1]"));
        }
        let schema = hemo_schema();
        for p in [&self.fluid, &self.vasopressor] {
            p.trigger.evaluate(&schema, &[1.0; 18])?;
            p.dose.evaluate(&schema, &[1.0; 18])?;
        }
        Ok(())
    }

    pub fn num_train(&self) -> usize {
        (self.num_observational as f64 * self.train_fraction).round() as usize
    }

    /// Deterministic version of the observational policy: treat when the
    /// logit is positive, at the mean dose.
    pub fn regime_c1(&self) -> TreatmentRegime {
        let rule = |name: &str, p: &DosePolicy| TreatmentRule {
            treatment: name.into(),
            trigger: p.trigger.clone(),
            dose: Some(p.dose.clone()),
        };
        TreatmentRegime::rule_based(
            "g_c1",
            vec![rule("fluid", &self.fluid), rule("vasopressor", &self.vasopressor)],
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HemoRegime {
    /// Deterministic threshold version of the observational policy.
    C1,
    /// Treatment always withheld.
    C2,
}

impl HemoRegime {
    pub fn id(self) -> &'static str {
        match self {
            HemoRegime::C1 => "g_c1",
            HemoRegime::C2 => "g_c2",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "g_c1" | "c1" => Ok(HemoRegime::C1),
            "g_c2" | "c2" => Ok(HemoRegime::C2),
            _ => Err(Error::MissingRegime(id.to_string())),
        }
    }

    pub fn regime(self, cfg: &HemoSimConfig) -> TreatmentRegime {
        match self {
            HemoRegime::C1 => cfg.regime_c1(),
            HemoRegime::C2 => TreatmentRegime::withhold("g_c2"),
        }
    }
}

struct Patient {
    bleed: f64,
    tpr_rest: f64,
    contractility: f64,
    hr0: f64,
    lung: f64,
    temp0: f64,
}

struct Latent {
    tbv: f64,
    rcv: f64,
    tpr: f64,
    hr: f64,
    lactate: f64,
    creatinine: f64,
    temp: f64,
    ventilated: bool,
}

struct Hemodynamics {
    cvp: f64,
    sv: f64,
    co: f64,
    map: f64,
    pp: f64,
    urine: f64,
}

fn hemodynamics(p: &Patient, s: &Latent) -> Hemodynamics {
    let cvp = 2.0 + 10.0 * sigmoid((s.tbv - 4600.0) / 350.0);
    let sv = 100.0 * p.contractility * cvp / (cvp + 6.0);
    let co = s.hr * sv / 1000.0;
    let map = co * s.tpr + cvp;
    Hemodynamics {
        cvp,
        sv,
        co,
        map,
        pp: sv / 1.5,
        urine: 0.8 * (map - 55.0).max(0.0) * s.tbv / 5000.0,
    }
}

/// Simulates unit `id`. With `switch`, actions from row `m - 1` on come
/// from the given regime instead of the observational policy. Also returns
/// the latent TBV path.
fn simulate(cfg: &HemoSimConfig, id: u64, switch: Option<(usize, &TreatmentRegime)>) -> Result<(Trajectory, Vec<f64>)> {
    let schema = hemo_schema();
    let mut rng = seed::rng(cfg.seed, "hemo", id, 0);
    let (mn, pn) = (cfg.measurement_noise, cfg.process_noise);
    let p = Patient {
        bleed: 0.01 + 0.02 * uniform(&mut rng),
        tpr_rest: 18.0 * (0.55 + 0.35 * uniform(&mut rng)),
        contractility: 1.0 + 0.1 * normal(&mut rng),
        hr0: 80.0 + 8.0 * normal(&mut rng),
        lung: 4.0 * uniform(&mut rng),
        temp0: 38.0 + 0.5 * normal(&mut rng),
    };
    let tbv = 5000.0 + 300.0 * normal(&mut rng);
    let mut s = Latent {
        tbv,
        rcv: 0.4 * tbv,
        tpr: 18.0 + 2.0 * normal(&mut rng),
        hr: p.hr0,
        lactate: 1.0 + 0.5 * uniform(&mut rng),
        creatinine: 0.9 + 0.2 * uniform(&mut rng),
        temp: p.temp0,
        ventilated: uniform(&mut rng) < 0.1,
    };
    let mut regime_state = match switch {
        Some((m, r)) => {
            let dummy = Trajectory::new(id, vec![], vec![0.0; 18], vec![0.0; 2], 1);
            Some((m, r.start(&schema, &dummy, 1, 1)?))
        }
        None => None,
    };
    let mut rngs = [seed::rng(cfg.seed, "hemo-regime", id, 0)];
    let mut covariates = Vec::with_capacity(cfg.steps * 18);
    let mut treatments = Vec::with_capacity(cfg.steps * 2);
    let mut tbv_path = Vec::with_capacity(cfg.steps);
    for t in 0..cfg.steps {
        let h = hemodynamics(&p, &s);
        let mut e = [0.0; 16];
        e.iter_mut().for_each(|v| *v = mn * normal(&mut rng));
        let map = h.map + 2.0 * e[2];
        let lactate = (s.lactate + 0.1 * e[9]).max(0.0);
        let rr = 14.0 + 2.0 * (s.lactate - 1.0) + e[13];
        let row = [
            s.tbv + 50.0 * e[0],
            s.tpr + 0.3 * e[1],
            map,
            h.cvp + 0.5 * e[3],
            s.hr + 2.0 * e[4],
            h.co + 0.2 * e[5],
            h.sv + 2.0 * e[6],
            h.map + 2.0 / 3.0 * h.pp + 2.0 * e[7],
            h.map - h.pp / 3.0 + 2.0 * e[8],
            lactate,
            34.0 * s.rcv / s.tbv + 0.2 * e[10],
            (h.urine + 2.0 * e[11]).max(0.0),
            s.creatinine + 0.05 * e[12],
            rr,
            (97.0 - p.lung + 2.0 * f64::from(u8::from(s.ventilated)) - 0.2 * (rr - 14.0) + 0.5 * e[14]).min(100.0),
            s.temp + 0.1 * e[15],
        ];
        let start = covariates.len();
        covariates.extend(row);
        covariates.push(f64::from(u8::from(map < 65.0)));
        covariates.push(f64::from(u8::from(s.ventilated)));
        let l = &covariates[start..];
        tbv_path.push(s.tbv);

        let u_vent = uniform(&mut rng);
        let (u_f, u_v, z_f, z_v) = (uniform(&mut rng), uniform(&mut rng), normal(&mut rng), normal(&mut rng));
        let observational = |pol: &DosePolicy, u: f64, z: f64| -> Result<f64> {
            if u < sigmoid(pol.trigger.evaluate(&schema, l)?) {
                Ok((pol.dose.evaluate(&schema, l)? + pol.dose_sd * z).max(0.0))
            } else {
                Ok(0.0)
            }
        };
        let action = match &mut regime_state {
            Some((m, state)) if t + 1 >= *m => {
                let a = state.act(t, l, &mut rngs)?;
                [a[0], a[1]]
            }
            _ => [observational(&cfg.fluid, u_f, z_f)?, observational(&cfg.vasopressor, u_v, z_v)?],
        };
        treatments.extend(action);

        let n: [f64; 6] = std::array::from_fn(|_| pn * normal(&mut rng));
        if !s.ventilated && row[SPO2] < 92.0 && u_vent < 0.3 {
            s.ventilated = true;
        }
        let loss = p.bleed * (0.3 * n[0] - 0.045).exp();
        s.tbv = s.tbv * (1.0 - loss) + 0.8 * action[0];
        s.rcv *= 1.0 - loss;
        s.tpr = (s.tpr + 0.15 * (p.tpr_rest - s.tpr) + 10.0 * action[1] + 0.3 * n[1]).clamp(5.0, 40.0);
        s.hr = (s.hr + 0.3 * (p.hr0 + (85.0 - h.map).max(0.0) - s.hr) + 2.0 * n[2]).clamp(40.0, 180.0);
        s.lactate = (s.lactate + 0.02 * (65.0 - h.map).max(0.0) - 0.1 * (s.lactate - 1.0) + 0.05 * n[3]).max(0.3);
        s.creatinine =
            (s.creatinine + 0.03 * (1.0 - (h.urine / 30.0).min(1.0)) - 0.01 * (s.creatinine - 0.9) + 0.01 * n[4]).max(0.3);
        s.temp = p.temp0 + 0.9 * (s.temp - p.temp0) + 0.1 * n[5];
    }
    debug_assert!(covariates.iter().all(|v| v.is_finite()));
    Ok((Trajectory::new(id, vec![], covariates, treatments, cfg.steps), tbv_path))
}

fn meta(cfg: &HemoSimConfig, split: &str, regime: &str) -> DatasetMeta {
    DatasetMeta {
        generator: "hemo".into(),
        config_hash: config_hash(cfg),
        seed: cfg.seed,
        regime_id: regime.into(),
        switch_time: Some(cfg.switch_time),
        split: split.into(),
        extra: Default::default(),
    }
}

fn dataset(
    cfg: &HemoSimConfig,
    ids: std::ops::Range<u64>,
    split: &str,
    regime: Option<&TreatmentRegime>,
) -> Result<Dataset> {
    let units = ids
        .map(|id| Ok(simulate(cfg, id, regime.map(|r| (cfg.switch_time, r)))?.0))
        .collect::<Result<Vec<_>>>()?;
    let rid = regime.map_or("g_o", |r| r.id.as_str());
    Ok(Dataset::new(hemo_schema(), meta(cfg, split, rid), units))
}

fn test_ids(cfg: &HemoSimConfig) -> std::ops::Range<u64> {
    let n = cfg.num_observational as u64;
    n..n + cfg.num_counterfactual as u64
}

/// Observational train and validation splits, plus the observational twins
/// of the counterfactual test units.
pub fn gen_hemo_observational(cfg: &HemoSimConfig) -> Result<[Dataset; 3]> {
    cfg.validate()?;
    let n_train = cfg.num_train() as u64;
    Ok([
        dataset(cfg, 0..n_train, "train", None)?,
        dataset(cfg, n_train..cfg.num_observational as u64, "val", None)?,
        dataset(cfg, test_ids(cfg), "test", None)?,
    ])
}

/// Test units following the observational policy before `switch_time` and
/// `which` from then on, sharing noise with their observational twins.
pub fn gen_hemo_counterfactual(cfg: &HemoSimConfig, which: HemoRegime) -> Result<Dataset> {
    cfg.validate()?;
    dataset(cfg, test_ids(cfg), "test", Some(&which.regime(cfg)))
}

#[derive(Debug, Clone)]
pub struct HemoData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub c1: Dataset,
    pub c2: Dataset,
}

pub fn gen_hemo(cfg: &HemoSimConfig) -> Result<HemoData> {
    let [train, val, test] = gen_hemo_observational(cfg)?;
    Ok(HemoData {
        train,
        val,
        test,
        c1: gen_hemo_counterfactual(cfg, HemoRegime::C1)?,
        c2: gen_hemo_counterfactual(cfg, HemoRegime::C2)?,
    })
}
