//! Trajectories, covariate schemas and feature encoding.
//!
//! Time is discrete and 0-indexed. Within a step the causal ordering is
//! covariates `L_t`, then treatment `A_t`; the outcome of step `t` lives in
//! `L_{t+1}`. Categorical covariate values are stored as class indices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateKind {
    Continuous,
    Categorical { classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    #[serde(flatten)]
    pub kind: CovariateKind,
}

impl Covariate {
    pub fn continuous(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: CovariateKind::Continuous,
        }
    }

    pub fn categorical(name: &str, classes: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: CovariateKind::Categorical { classes },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentKind {
    /// 0/1 indicator.
    Binary,
    /// Nonnegative amount, zero when not treated.
    Dose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Treatment {
    pub name: String,
    pub kind: TreatmentKind,
}

impl Treatment {
    pub fn new(name: &str, kind: TreatmentKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
        }
    }
}

/// Column layout shared by every trajectory of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSchema {
    pub covariates: Vec<Covariate>,
    pub treatments: Vec<Treatment>,
    /// Index of the outcome covariate.
    pub outcome: usize,
    #[serde(default)]
    pub statics: Vec<String>,
}

impl CovariateSchema {
    pub fn validate(&self) -> Result<()> {
        if self.covariates.is_empty() {
            return Err(Error::Schema("no covariates".into()));
        }
        if self.outcome >= self.covariates.len() {
            return Err(Error::Schema(format!(
                "outcome index {} out of range",
                self.outcome
            )));
        }
        let mut names: Vec<&str> = self
            .covariates
            .iter()
            .map(|c| c.name.as_str())
            .chain(self.treatments.iter().map(|t| t.name.as_str()))
            .collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Schema("duplicate column names".into()));
        }
        for c in &self.covariates {
            if let CovariateKind::Categorical { classes } = c.kind {
                if classes < 2 {
                    return Err(Error::Schema(format!(
                        "categorical covariate `{}` needs at least 2 classes",
                        c.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_covariates(&self) -> usize {
        self.covariates.len()
    }

    pub fn num_treatments(&self) -> usize {
        self.treatments.len()
    }

    /// Indices of categorical covariates, in schema order.
    pub fn categorical(&self) -> Vec<usize> {
        (0..self.covariates.len())
            .filter(|&i| matches!(self.covariates[i].kind, CovariateKind::Categorical { .. }))
            .collect()
    }

    /// Indices of continuous covariates, in schema order.
    pub fn continuous(&self) -> Vec<usize> {
        (0..self.covariates.len())
            .filter(|&i| self.covariates[i].kind == CovariateKind::Continuous)
            .collect()
    }

    /// Class counts of the categorical covariates.
    pub fn class_counts(&self) -> Vec<usize> {
        self.covariates
            .iter()
            .filter_map(|c| match c.kind {
                CovariateKind::Categorical { classes } => Some(classes),
                CovariateKind::Continuous => None,
            })
            .collect()
    }

    pub fn onehot_width(&self) -> usize {
        self.class_counts().iter().sum()
    }

    /// Order in which covariates of one step are simulated: the categorical
    /// block first, then the continuous block.
    pub fn simulation_order(&self) -> Vec<usize> {
        let mut order = self.categorical();
        order.extend(self.continuous());
        order
    }

    /// Width of one encoded `(L_t, A_t, statics)` feature row.
    pub fn feature_width(&self) -> usize {
        self.onehot_width() + self.continuous().len() + self.treatments.len() + self.statics.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c.name == name)
    }
}

/// One unit's time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    pub statics: Vec<f64>,
    /// `steps x num_covariates`, row-major.
    pub covariates: Vec<f64>,
    /// `steps x num_treatments`, row-major.
    pub treatments: Vec<f64>,
    pub steps: usize,
}

impl Trajectory {
    pub fn new(
        id: u64,
        statics: Vec<f64>,
        covariates: Vec<f64>,
        treatments: Vec<f64>,
        steps: usize,
    ) -> Self {
        Self {
            id,
            statics,
            covariates,
            treatments,
            steps,
        }
    }

    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    pub fn cov_width(&self) -> usize {
        if self.steps == 0 {
            0
        } else {
            self.covariates.len() / self.steps
        }
    }

    pub fn treat_width(&self) -> usize {
        if self.steps == 0 {
            0
        } else {
            self.treatments.len() / self.steps
        }
    }

    pub fn covariate_row(&self, t: usize) -> &[f64] {
        let w = self.cov_width();
        &self.covariates[t * w..(t + 1) * w]
    }

    pub fn treatment_row(&self, t: usize) -> &[f64] {
        let w = self.treat_width();
        &self.treatments[t * w..(t + 1) * w]
    }

    pub fn covariate(&self, t: usize, c: usize) -> f64 {
        self.covariates[t * self.cov_width() + c]
    }

    pub fn check(&self, schema: &CovariateSchema) -> Result<()> {
        let (d, a) = (schema.num_covariates(), schema.num_treatments());
        if self.covariates.len() != self.steps * d
            || self.treatments.len() != self.steps * a
            || self.statics.len() != schema.statics.len()
        {
            return Err(Error::data(format!(
                "unit {} does not match schema widths",
                self.id
            )));
        }
        if !self.covariates.iter().chain(&self.treatments).chain(&self.statics).all(|v| v.is_finite()) {
            return Err(Error::data(format!("unit {} has non-finite values", self.id)));
        }
        for (c, cov) in schema.covariates.iter().enumerate() {
            if let CovariateKind::Categorical { classes } = cov.kind {
                for t in 0..self.steps {
                    let v = self.covariate(t, c);
                    if v < 0.0 || v.fract() != 0.0 || v as usize >= classes {
                        return Err(Error::data(format!(
                            "unit {} covariate `{}` has invalid class {v} at t={t}",
                            self.id, cov.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub config_hash: String,
    pub seed: u64,
    pub regime_id: String,
    /// First covariate row produced under the counterfactual regime.
    pub switch_time: Option<usize>,
    pub split: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: CovariateSchema,
    pub meta: DatasetMeta,
    pub units: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(schema: CovariateSchema, meta: DatasetMeta, units: Vec<Trajectory>) -> Self {
        Self {
            schema,
            meta,
            units,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        for u in &self.units {
            u.check(&self.schema)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn max_steps(&self) -> usize {
        self.units.iter().map(|u| u.steps).max().unwrap_or(0)
    }

    /// Contiguous unit range as a new dataset sharing schema and metadata.
    pub fn slice(&self, range: std::ops::Range<usize>, split: &str) -> Dataset {
        let mut meta = self.meta.clone();
        meta.split = split.to_string();
        Dataset::new(self.schema.clone(), meta, self.units[range].to_vec())
    }

    pub fn find(&self, id: u64) -> Option<&Trajectory> {
        self.units.iter().find(|u| u.id == id)
    }
}

/// Mean and standard deviation of one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub sd: f64,
}

impl ColumnStats {
    fn from_values(values: impl Iterator<Item = f64>) -> Self {
        let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
        for v in values {
            n += 1.0;
            sum += v;
            sq += v * v;
        }
        if n == 0.0 {
            return Self { mean: 0.0, sd: 1.0 };
        }
        let mean = sum / n;
        let var = (sq / n - mean * mean).max(0.0);
        let sd = var.sqrt();
        Self {
            mean,
            sd: if sd < 1e-12 { 1.0 } else { sd },
        }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

/// Z-score statistics from a training split, plus one-hot encoding of the
/// categorical block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub schema: CovariateSchema,
    /// Indexed by covariate; categorical entries are unused placeholders.
    pub covariates: Vec<ColumnStats>,
    pub treatments: Vec<ColumnStats>,
    pub statics: Vec<ColumnStats>,
}

impl Normalizer {
    pub fn fit(data: &Dataset) -> Self {
        let schema = &data.schema;
        let covariates = (0..schema.num_covariates())
            .map(|c| match schema.covariates[c].kind {
                CovariateKind::Categorical { .. } => ColumnStats { mean: 0.0, sd: 1.0 },
                CovariateKind::Continuous => ColumnStats::from_values(
                    data.units
                        .iter()
                        .flat_map(|u| (0..u.steps).map(move |t| u.covariate(t, c))),
                ),
            })
            .collect();
        let treatments = (0..schema.num_treatments())
            .map(|a| {
                ColumnStats::from_values(
                    data.units
                        .iter()
                        .flat_map(|u| (0..u.steps).map(move |t| u.treatment_row(t)[a])),
                )
            })
            .collect();
        let statics = (0..schema.statics.len())
            .map(|s| ColumnStats::from_values(data.units.iter().map(|u| u.statics[s])))
            .collect();
        Self {
            schema: schema.clone(),
            covariates,
            treatments,
            statics,
        }
    }

    /// Standard deviations of the continuous covariates, in schema order.
    pub fn continuous_scale(&self) -> Vec<f64> {
        self.schema
            .continuous()
            .iter()
            .map(|&c| self.covariates[c].sd)
            .collect()
    }

    pub fn feature_width(&self) -> usize {
        self.schema.feature_width()
    }

    /// Encodes `(L_t, A_t, statics)` as `[one-hot categorical | z continuous |
    /// z treatments | z statics]`, appending to `out`.
    pub fn encode_row(&self, covariates: &[f64], treatments: &[f64], statics: &[f64], out: &mut Vec<f64>) {
        self.encode_categorical(covariates, out);
        for c in self.schema.continuous() {
            out.push(self.covariates[c].normalize(covariates[c]));
        }
        for (a, v) in treatments.iter().enumerate() {
            out.push(self.treatments[a].normalize(*v));
        }
        for (s, v) in statics.iter().enumerate() {
            out.push(self.statics[s].normalize(*v));
        }
    }

    /// One-hot block for the categorical covariates of a full covariate row.
    pub fn encode_categorical(&self, covariates: &[f64], out: &mut Vec<f64>) {
        for (c, cov) in self.schema.covariates.iter().enumerate() {
            if let CovariateKind::Categorical { classes } = cov.kind {
                let k = covariates[c] as usize;
                out.extend((0..classes).map(|j| if j == k { 1.0 } else { 0.0 }));
            }
        }
    }

    /// One-hot block from class indices of the categorical covariates only.
    pub fn encode_classes(&self, classes: &[usize], out: &mut Vec<f64>) {
        for (k, &c) in classes.iter().zip(&self.schema.class_counts()) {
            out.extend((0..c).map(|j| if j == *k { 1.0 } else { 0.0 }));
        }
    }

    pub fn normalize_continuous(&self, covariates: &[f64]) -> Vec<f64> {
        self.schema
            .continuous()
            .iter()
            .map(|&c| self.covariates[c].normalize(covariates[c]))
            .collect()
    }
}
