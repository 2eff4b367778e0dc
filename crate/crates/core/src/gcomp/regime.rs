//! Treatment regimes: functions from history to the next action.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CovariateSchema, Trajectory, TreatmentKind};
use crate::error::{Error, Result};
use crate::gtransformer::{PolicyModel, PolicySession};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    Identity,
    /// `1 / max(x, 1e-3)`.
    Reciprocal,
}

impl Transform {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Reciprocal => 1.0 / x.max(1e-3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub covariate: String,
    pub coef: f64,
    #[serde(default)]
    pub transform: Transform,
}

/// `intercept + sum(coef * transform(L_t[covariate]))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearScore {
    pub intercept: f64,
    #[serde(default)]
    pub terms: Vec<Term>,
}

impl LinearScore {
    /// Score of the covariate row `l` under `schema`.
    pub fn evaluate(&self, schema: &CovariateSchema, l: &[f64]) -> Result<f64> {
        Ok(score(&(self.intercept, self.resolve(schema)?), l))
    }

    fn resolve(&self, schema: &CovariateSchema) -> Result<Vec<(usize, f64, Transform)>> {
        self.terms
            .iter()
            .map(|t| {
                schema
                    .index_of(&t.covariate)
                    .map(|i| (i, t.coef, t.transform))
                    .ok_or_else(|| Error::Schema(format!("regime references unknown covariate `{}`", t.covariate)))
            })
            .collect()
    }
}

/// Threshold rule for one treatment column: treat when the trigger score is
/// positive. Dose treatments then receive `max(dose score, 0)` (1 when no dose
/// score is given); binary treatments receive 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentRule {
    pub treatment: String,
    pub trigger: LinearScore,
    #[serde(default)]
    pub dose: Option<LinearScore>,
}

#[derive(Debug, Clone)]
pub enum RegimeKind {
    /// Always the zero action.
    Withhold,
    /// `actions[k]` is applied at the `k`-th simulated decision; the last
    /// entry repeats when the rollout is longer.
    StaticSequence(Vec<Vec<f64>>),
    RuleBased(Vec<TreatmentRule>),
    /// Treatments sampled from a fitted observational policy.
    StochasticPolicy(Arc<PolicyModel>),
}

#[derive(Debug, Clone)]
pub struct TreatmentRegime {
    pub id: String,
    pub kind: RegimeKind,
}

impl TreatmentRegime {
    pub fn withhold(id: &str) -> Self {
        Self {
            id: id.to_string(),
            kind: RegimeKind::Withhold,
        }
    }

    pub fn static_sequence(id: &str, actions: Vec<Vec<f64>>) -> Self {
        Self {
            id: id.to_string(),
            kind: RegimeKind::StaticSequence(actions),
        }
    }

    pub fn rule_based(id: &str, rules: Vec<TreatmentRule>) -> Self {
        Self {
            id: id.to_string(),
            kind: RegimeKind::RuleBased(rules),
        }
    }

    pub fn policy(id: &str, model: Arc<PolicyModel>) -> Self {
        Self {
            id: id.to_string(),
            kind: RegimeKind::StochasticPolicy(model),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self.kind, RegimeKind::StochasticPolicy(_))
    }

    /// Prepares `rows` parallel evaluations of the regime for one unit whose
    /// first regime-chosen action is `A_{start-1}`.
    pub fn start<'a>(
        &'a self,
        schema: &CovariateSchema,
        unit: &Trajectory,
        start: usize,
        rows: usize,
    ) -> Result<RegimeState<'a>> {
        let d_a = schema.num_treatments();
        match &self.kind {
            RegimeKind::Withhold => Ok(RegimeState::Constant { d_a, rows }),
            RegimeKind::StaticSequence(actions) => {
                if actions.is_empty() || actions.iter().any(|a| a.len() != d_a) {
                    return Err(Error::config(format!(
                        "static regime `{}` needs non-empty actions of width {d_a}",
                        self.id
                    )));
                }
                Ok(RegimeState::Static {
                    actions,
                    first: start.saturating_sub(1),
                    rows,
                })
            }
            RegimeKind::RuleBased(rules) => {
                let mut compiled = Vec::with_capacity(rules.len());
                for r in rules {
                    let col = schema
                        .treatments
                        .iter()
                        .position(|t| t.name == r.treatment)
                        .ok_or_else(|| Error::Schema(format!("rule references unknown treatment `{}`", r.treatment)))?;
                    compiled.push(CompiledRule {
                        col,
                        kind: schema.treatments[col].kind,
                        trigger: (r.trigger.intercept, r.trigger.resolve(schema)?),
                        dose: match &r.dose {
                            Some(d) => Some((d.intercept, d.resolve(schema)?)),
                            None => None,
                        },
                    });
                }
                Ok(RegimeState::Rules { rules: compiled, d_a, rows })
            }
            RegimeKind::StochasticPolicy(model) => {
                if model.schema != *schema {
                    return Err(Error::Schema("policy schema differs from estimator schema".into()));
                }
                Ok(RegimeState::Policy(Box::new(model.session(unit, start, rows)?)))
            }
        }
    }
}

type Score = (f64, Vec<(usize, f64, Transform)>);

fn score(s: &Score, l: &[f64]) -> f64 {
    s.0 + s.1.iter().map(|&(i, c, tr)| c * tr.apply(l[i])).sum::<f64>()
}

#[derive(Debug)]
pub struct CompiledRule {
    col: usize,
    kind: TreatmentKind,
    trigger: Score,
    dose: Option<Score>,
}

impl CompiledRule {
    fn value(&self, l: &[f64]) -> f64 {
        if score(&self.trigger, l) <= 0.0 {
            return 0.0;
        }
        match (self.kind, &self.dose) {
            (TreatmentKind::Binary, _) | (TreatmentKind::Dose, None) => 1.0,
            (TreatmentKind::Dose, Some(d)) => score(d, l).max(0.0),
        }
    }
}

/// Per-unit evaluation state of a regime.
pub enum RegimeState<'a> {
    Constant { d_a: usize, rows: usize },
    Static { actions: &'a [Vec<f64>], first: usize, rows: usize },
    Rules { rules: Vec<CompiledRule>, d_a: usize, rows: usize },
    Policy(Box<PolicySession<'a>>),
}

impl RegimeState<'_> {
    /// Actions `A_t` (rows x d_A) given the current covariates `L_t`
    /// (rows x d_L).
    pub fn act(&mut self, t: usize, covariates: &[f64], rngs: &mut [ChaCha8Rng]) -> Result<Vec<f64>> {
        match self {
            RegimeState::Constant { d_a, rows } => Ok(vec![0.0; *d_a * *rows]),
            RegimeState::Static { actions, first, rows } => {
                let k = t.saturating_sub(*first).min(actions.len() - 1);
                Ok((0..*rows).flat_map(|_| actions[k].iter().copied()).collect())
            }
            RegimeState::Rules { rules, d_a, rows } => {
                let d_l = covariates.len() / (*rows).max(1);
                let mut out = vec![0.0; *d_a * *rows];
                for r in 0..*rows {
                    let l = &covariates[r * d_l..(r + 1) * d_l];
                    for rule in rules.iter() {
                        out[r * *d_a + rule.col] = rule.value(l);
                    }
                }
                Ok(out)
            }
            RegimeState::Policy(s) => s.act(covariates, rngs),
        }
    }
}
