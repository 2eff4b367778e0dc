//! Generalized-linear g-computation baseline.
//!
//! Every covariate of `L_{t+1}` gets its own GLM on a fixed window of `W`
//! lagged `(L, A)` rows (zero padded before time 0) plus statics. Continuous
//! covariates use least squares and additionally condition on the current
//! categorical block; categorical covariates use multinomial logistic
//! regression fitted by damped Newton iterations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{class_of, ConditionalDensityEstimator, Rollout};
use crate::data::{CovariateSchema, Dataset, Normalizer, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearConfig {
    /// Number of lagged `(L, A)` rows in the design.
    pub window: usize,
    /// L2 penalty for the logistic models.
    pub logistic_ridge: f64,
    pub max_newton_iters: usize,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self {
            window: 3,
            logistic_ridge: 1e-4,
            max_newton_iters: 50,
        }
    }
}

/// Multinomial logistic model with class 0 as reference. `coef` holds
/// `(classes - 1) x features` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub classes: usize,
    pub coef: Vec<f64>,
    pub iterations: usize,
}

impl LogisticModel {
    fn probs(&self, x: &[f64], out: &mut Vec<f64>) {
        let p = x.len();
        let mut logits = vec![0.0; self.classes];
        for k in 1..self.classes {
            logits[k] = self.coef[(k - 1) * p..k * p].iter().zip(x).map(|(b, v)| b * v).sum();
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for l in &mut logits {
            *l = (*l - max).exp();
            s += *l;
        }
        out.extend(logits.iter().map(|v| v / s));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGcomp {
    pub schema: CovariateSchema,
    pub normalizer: Normalizer,
    pub config: LinearConfig,
    /// One model per categorical covariate, schema order.
    pub categorical: Vec<LogisticModel>,
    /// `features_co x D_co` least-squares coefficients on normalized targets.
    pub continuous: Vec<f64>,
    /// Ridge added to the normal equations when they were singular (0 if none).
    pub ridge_used: f64,
}

impl LinearGcomp {
    fn block_width(&self) -> usize {
        let s = &self.schema;
        s.onehot_width() + s.continuous().len() + s.num_treatments()
    }

    /// Width of the categorical design (lags, statics, intercept).
    pub fn features_cat(&self) -> usize {
        self.config.window * self.block_width() + self.schema.statics.len() + 1
    }

    pub fn features_co(&self) -> usize {
        self.features_cat() + self.schema.onehot_width()
    }

    fn block(&self, l: &[f64], a: &[f64], out: &mut Vec<f64>) {
        self.normalizer.encode_row(l, a, &[], out);
    }

    /// Design row for predicting `L_{t+1}` from lag blocks ordered most recent
    /// first.
    fn design(&self, lags: &[Vec<f64>], statics: &[f64], out: &mut Vec<f64>) {
        let bw = self.block_width();
        for k in 0..self.config.window {
            match lags.get(k) {
                Some(b) => out.extend_from_slice(b),
                None => out.extend(std::iter::repeat_n(0.0, bw)),
            }
        }
        for (s, v) in statics.iter().enumerate() {
            out.push(self.normalizer.statics[s].normalize(*v));
        }
        out.push(1.0);
    }

    /// Calls `f(design_cat, onehot of L^{ca}_{t+1}, L_{t+1})` for every
    /// one-step target of every unit.
    fn for_each_row(&self, units: &[Trajectory], mut f: impl FnMut(&[f64], &[f64], &[f64])) {
        let mut x = Vec::new();
        let mut oh = Vec::new();
        for u in units {
            let mut lags: Vec<Vec<f64>> = Vec::new();
            for t in 0..u.steps.saturating_sub(1) {
                let mut b = Vec::new();
                self.block(u.covariate_row(t), u.treatment_row(t), &mut b);
                lags.insert(0, b);
                lags.truncate(self.config.window);
                x.clear();
                self.design(&lags, &u.statics, &mut x);
                oh.clear();
                self.normalizer.encode_categorical(u.covariate_row(t + 1), &mut oh);
                f(&x, &oh, u.covariate_row(t + 1));
            }
        }
    }
}

fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok((ch.solve(b), 0.0));
    }
    let n = a.nrows();
    let scale = (a.trace() / n.max(1) as f64).max(1e-12);
    let mut lambda = 1e-10 * scale;
    for _ in 0..20 {
        let reg = a + DMatrix::identity(n, n) * lambda;
        if let Some(ch) = reg.cholesky() {
            return Ok((ch.solve(b), lambda));
        }
        lambda *= 10.0;
    }
    Err(Error::numerical("normal equations could not be regularized"))
}

fn fit_logistic(
    model: &LinearGcomp,
    units: &[Trajectory],
    c: usize,
    classes: usize,
) -> Result<LogisticModel> {
    let p = model.features_cat();
    let q = (classes - 1) * p;
    let ridge = model.config.logistic_ridge;
    let mut lm = LogisticModel {
        classes,
        coef: vec![0.0; q],
        iterations: 0,
    };
    let schema = &model.schema;
    let objective = |lm: &LogisticModel| -> Result<f64> {
        let mut nll = 0.0;
        let mut n = 0.0f64;
        let mut pr = Vec::with_capacity(classes);
        let mut err = None;
        model.for_each_row(units, |x, _, y| {
            pr.clear();
            lm.probs(x, &mut pr);
            match class_of(schema, c, y[c]) {
                Ok(k) => nll -= pr[k].max(1e-300).ln(),
                Err(e) => err = Some(e),
            }
            n += 1.0;
        });
        if let Some(e) = err {
            return Err(e);
        }
        let pen: f64 = lm.coef.iter().map(|b| b * b).sum::<f64>() * 0.5 * ridge;
        Ok(nll / n.max(1.0) + pen)
    };
    let mut current = objective(&lm)?;
    for it in 0..model.config.max_newton_iters {
        let mut grad = vec![0.0; q];
        let mut hess = vec![0.0; q * q];
        let mut n = 0.0f64;
        let mut pr = Vec::with_capacity(classes);
        model.for_each_row(units, |x, _, y| {
            pr.clear();
            lm.probs(x, &mut pr);
            let k_obs = y[c] as usize;
            for k in 1..classes {
                let r = pr[k] - if k == k_obs { 1.0 } else { 0.0 };
                for i in 0..p {
                    grad[(k - 1) * p + i] += r * x[i];
                }
                for l in 1..classes {
                    let w = pr[k] * (if k == l { 1.0 } else { 0.0 } - pr[l]);
                    if w == 0.0 {
                        continue;
                    }
                    for i in 0..p {
                        let wi = w * x[i];
                        if wi == 0.0 {
                            continue;
                        }
                        let row = ((k - 1) * p + i) * q + (l - 1) * p;
                        for j in 0..p {
                            hess[row + j] += wi * x[j];
                        }
                    }
                }
            }
            n += 1.0;
        });
        let n = n.max(1.0);
        let g = DVector::from_iterator(q, grad.iter().zip(&lm.coef).map(|(g, b)| g / n + ridge * b));
        let mut h = DMatrix::from_row_slice(q, q, &hess) / n;
        for i in 0..q {
            h[(i, i)] += ridge;
        }
        let (step, _) = solve_spd(&h, &DMatrix::from_column_slice(q, 1, g.as_slice()))?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = LogisticModel {
                classes,
                coef: lm.coef.iter().enumerate().map(|(i, b)| b - t * step[i]).collect(),
                iterations: it + 1,
            };
            let obj = objective(&trial)?;
            if obj <= current {
                let delta = t * step.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                lm = trial;
                let improvement = current - obj;
                current = obj;
                accepted = true;
                if delta < 1e-8 || improvement < 1e-13 {
                    return Ok(lm);
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(lm)
}

/// Fits the baseline on `train`.
pub fn fit_linear_gcomp(train: &Dataset, config: &LinearConfig) -> Result<LinearGcomp> {
    train.validate()?;
    if train.is_empty() {
        return Err(Error::data("cannot fit on an empty dataset"));
    }
    if config.window == 0 {
        return Err(Error::config("lag window must be at least 1"));
    }
    let schema = train.schema.clone();
    let mut model = LinearGcomp {
        normalizer: Normalizer::fit(train),
        schema,
        config: config.clone(),
        categorical: Vec::new(),
        continuous: Vec::new(),
        ridge_used: 0.0,
    };
    let co = model.schema.continuous();
    if !co.is_empty() {
        let p = model.features_co();
        let d = co.len();
        let mut xtx = vec![0.0; p * p];
        let mut xty = vec![0.0; p * d];
        let mut z = vec![0.0; p];
        let norm = model.normalizer.clone();
        model.for_each_row(&train.units, |x, oh, y| {
            z[..x.len()].copy_from_slice(x);
            z[x.len()..].copy_from_slice(oh);
            for i in 0..p {
                let zi = z[i];
                if zi == 0.0 {
                    continue;
                }
                for j in i..p {
                    xtx[i * p + j] += zi * z[j];
                }
                for (k, &c) in co.iter().enumerate() {
                    xty[i * d + k] += zi * norm.covariates[c].normalize(y[c]);
                }
            }
        });
        for i in 0..p {
            for j in 0..i {
                xtx[i * p + j] = xtx[j * p + i];
            }
        }
        let a = DMatrix::from_row_slice(p, p, &xtx);
        let b = DMatrix::from_row_slice(p, d, &xty);
        let (sol, lambda) = solve_spd(&a, &b)?;
        model.ridge_used = lambda;
        model.continuous = (0..p).flat_map(|i| (0..d).map(move |k| (i, k))).map(|(i, k)| sol[(i, k)]).collect();
    }
    let cats: Vec<(usize, usize)> = model
        .schema
        .categorical()
        .into_iter()
        .zip(model.schema.class_counts())
        .collect();
    for (c, classes) in cats {
        let lm = fit_logistic(&model, &train.units, c, classes)?;
        model.categorical.push(lm);
    }
    Ok(model)
}

pub struct LinearRollout<'a> {
    model: &'a LinearGcomp,
    rows: usize,
    statics: Vec<f64>,
    lags: Vec<Vec<Vec<f64>>>,
    current: Vec<Vec<f64>>,
    design: Vec<Vec<f64>>,
}

impl ConditionalDensityEstimator for LinearGcomp {
    fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    fn continuous_scale(&self) -> Vec<f64> {
        self.normalizer.continuous_scale()
    }

    fn rollout<'a>(&'a self, unit: &Trajectory, start: usize, rows: usize) -> Result<Box<dyn Rollout + 'a>> {
        if start == 0 || start > unit.steps {
            return Err(Error::data(format!("cannot roll out unit {} from {start}", unit.id)));
        }
        let mut lags = Vec::new();
        for t in (0..start - 1).rev().take(self.config.window.saturating_sub(1)) {
            let mut b = Vec::new();
            self.block(unit.covariate_row(t), unit.treatment_row(t), &mut b);
            lags.push(b);
        }
        Ok(Box::new(LinearRollout {
            model: self,
            rows,
            statics: unit.statics.clone(),
            lags: vec![lags; rows],
            current: vec![unit.covariate_row(start - 1).to_vec(); rows],
            design: vec![Vec::new(); rows],
        }))
    }
}

impl Rollout for LinearRollout<'_> {
    fn categorical(&mut self, actions: &[f64]) -> Result<Vec<f64>> {
        let m = self.model;
        let d_a = m.schema.num_treatments();
        let mut out = Vec::with_capacity(self.rows * m.schema.onehot_width());
        for r in 0..self.rows {
            let mut b = Vec::new();
            m.block(&self.current[r], &actions[r * d_a..(r + 1) * d_a], &mut b);
            self.lags[r].insert(0, b);
            self.lags[r].truncate(m.config.window);
            let x = &mut self.design[r];
            x.clear();
            m.design(&self.lags[r], &self.statics, x);
            for lm in &m.categorical {
                lm.probs(x, &mut out);
            }
        }
        Ok(out)
    }

    fn continuous(&mut self, classes: &[usize]) -> Result<Vec<f64>> {
        let m = self.model;
        let co = m.schema.continuous();
        let d = co.len();
        let n_cat = m.categorical.len();
        let mut out = Vec::with_capacity(self.rows * d);
        let p = m.features_co();
        for r in 0..self.rows {
            let mut z = self.design[r].clone();
            m.normalizer.encode_classes(&classes[r * n_cat..(r + 1) * n_cat], &mut z);
            debug_assert_eq!(z.len(), p);
            for (k, &c) in co.iter().enumerate() {
                let mut v = 0.0;
                for i in 0..p {
                    v += z[i] * m.continuous[i * d + k];
                }
                out.push(m.normalizer.covariates[c].denormalize(v));
            }
        }
        Ok(out)
    }

    fn commit(&mut self, covariates: &[f64]) -> Result<()> {
        let d_l = self.model.schema.num_covariates();
        for r in 0..self.rows {
            self.current[r].copy_from_slice(&covariates[r * d_l..(r + 1) * d_l]);
        }
        Ok(())
    }
}
