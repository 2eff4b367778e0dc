//! Two-encoder G-Transformer: a categorical encoder predicting the class
//! probabilities of the categorical block of `L_{t+1}`, and a continuous
//! encoder predicting the continuous block given the same history plus the
//! observed (teacher-forced) categorical block of `L_{t+1}`.
//!
//! Encoder position `t` consumes `(L_t, A_t)` and predicts `L_{t+1}`. One
//! causally masked pass over a padded batch produces every prefix prediction
//! at once; [`GTransformer::forward_teacher_forced`] runs the literal
//! prefix-by-prefix computation for comparison.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CovariateSchema, Dataset, Normalizer, Trajectory, TreatmentKind};
use crate::encoder::{Encoder, EncoderConfig, EncoderParams, EncoderSession, HeadKind};
use crate::error::{Error, Result};
use crate::gcomp::{sample_categorical, ConditionalDensityEstimator, Rollout};
use crate::seed;
use crate::tensor::{adam_step, AdamState, LrSchedule, Tape, Tensor, Var};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub feedforward_dim: usize,
    #[serde(default)]
    pub dropout: f64,
    pub max_sequence_length: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 4,
            feedforward_dim: 128,
            dropout: 0.0,
            max_sequence_length: 128,
        }
    }
}

impl ModelConfig {
    fn encoder(&self, input_dim: usize, output_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            feedforward_dim: self.feedforward_dim,
            max_sequence_length: self.max_sequence_length,
            output_dim,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eta_min: f64,
    pub restart_period: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
    /// First covariate row used as a prediction target.
    pub first_target: usize,
    /// Covariate rows at or beyond this index are never targets.
    #[serde(default)]
    pub horizon: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            patience: 10,
            batch_size: 16,
            learning_rate: 1e-4,
            eta_min: 1e-5,
            restart_period: 10.0,
            weight_decay: 0.0,
            seed: 0,
            first_target: 1,
            horizon: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience > self.max_epochs {
            return Err(Error::config("patience exceeds max_epochs"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.first_target == 0 {
            return Err(Error::config("first_target must be at least 1"));
        }
        if let Some(k) = self.horizon {
            if self.first_target >= k {
                return Err(Error::config("first_target must be below horizon"));
            }
        }
        if !(self.learning_rate > 0.0 && self.eta_min >= 0.0 && self.eta_min <= self.learning_rate) {
            return Err(Error::config("learning rates must satisfy 0 <= eta_min <= learning_rate"));
        }
        if self.restart_period <= 0.0 {
            return Err(Error::config("restart_period must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.learning_rate, self.eta_min, self.restart_period)
    }

    fn end(&self) -> usize {
        self.horizon.unwrap_or(usize::MAX)
    }
}

/// Sum and count of one loss over valid cells.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub sum: f64,
    pub count: f64,
    /// Cells whose true-class probability was below [`PROB_FLOOR`].
    pub clamped: u64,
}

impl LossTerm {
    pub fn mean(&self) -> f64 {
        if self.count > 0.0 {
            self.sum / self.count
        } else {
            0.0
        }
    }

    pub fn merge(&mut self, other: LossTerm) {
        self.sum += other.sum;
        self.count += other.count;
        self.clamped += other.clamped;
    }
}

/// Cross-entropy of grouped class probabilities against one-hot labels,
/// averaged over valid rows and covariates. `probs` and `labels` are
/// `rows x sum(classes)`; `mask[r]` is 1 for rows that count.
pub fn loss_ce(probs: &[f64], labels: &[f64], classes: &[usize], mask: &[f64]) -> LossTerm {
    let width: usize = classes.iter().sum();
    let mut term = LossTerm::default();
    if width == 0 {
        return term;
    }
    for (r, &m) in mask.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for c in 0..width {
            let y = labels[r * width + c];
            if y != 0.0 {
                let p = probs[r * width + c];
                if p < PROB_FLOOR {
                    term.clamped += 1;
                }
                term.sum -= y * p.max(PROB_FLOOR).ln();
            }
        }
        term.count += classes.len() as f64;
    }
    term
}

/// Squared error averaged over valid rows and columns.
pub fn loss_mse(pred: &[f64], target: &[f64], width: usize, mask: &[f64]) -> Result<LossTerm> {
    if pred.len() != target.len() || pred.len() != mask.len() * width {
        return Err(Error::Schema(format!(
            "mse shapes differ: {} predictions, {} targets, {} rows of width {width}",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    let mut term = LossTerm::default();
    for (r, &m) in mask.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for c in 0..width {
            let d = pred[r * width + c] - target[r * width + c];
            term.sum += d * d;
        }
        term.count += width as f64;
    }
    Ok(term)
}

/// Padded training batch. Row `b * seq + t` holds position `t` of unit `b`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub x_cat: Vec<f64>,
    pub x_co: Vec<f64>,
    pub labels: Vec<f64>,
    pub targets: Vec<f64>,
    pub mask: Vec<f64>,
}

/// Outputs for a single target row across units.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherForced {
    /// `units x total classes`.
    pub probabilities: Vec<f64>,
    /// `units x D_co`, normalized units.
    pub continuous: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GTransformer {
    pub schema: CovariateSchema,
    pub normalizer: Normalizer,
    pub model_config: ModelConfig,
    /// Absent when the schema has no categorical covariates.
    pub categorical: Option<Encoder>,
    /// Absent when the schema has no continuous covariates.
    pub continuous: Option<Encoder>,
}

impl GTransformer {
    pub fn new(normalizer: Normalizer, config: &ModelConfig, seed: u64) -> Result<Self> {
        let schema = normalizer.schema.clone();
        schema.validate()?;
        let f = schema.feature_width();
        let oh = schema.onehot_width();
        let d_co = schema.continuous().len();
        let categorical = if oh > 0 {
            let mut rng = seed::rng(seed, "init", 0, 0);
            Some(Encoder::new(
                config.encoder(f, oh),
                HeadKind::Categorical {
                    classes: schema.class_counts(),
                },
                &mut rng,
            )?)
        } else {
            None
        };
        let continuous = if d_co > 0 {
            let mut rng = seed::rng(seed, "init", 1, 0);
            Some(Encoder::new(config.encoder(f + oh, d_co), HeadKind::Continuous, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            schema,
            normalizer,
            model_config: config.clone(),
            categorical,
            continuous,
        })
    }

    pub fn categorical_input_width(&self) -> usize {
        self.schema.feature_width()
    }

    pub fn continuous_input_width(&self) -> usize {
        self.schema.feature_width() + self.schema.onehot_width()
    }

    /// Builds the padded batch for `units`; covariate row `r` is a target
    /// when `first_target <= r < end`.
    pub fn make_batch(&self, units: &[&Trajectory], first_target: usize, end: usize) -> Result<Batch> {
        let seq = units.iter().map(|u| u.steps).max().unwrap_or(0).saturating_sub(1).max(1);
        let (f, oh) = (self.schema.feature_width(), self.schema.onehot_width());
        let co = self.schema.continuous();
        let d_co = co.len();
        let rows = units.len() * seq;
        let mut b = Batch {
            batch: units.len(),
            seq,
            x_cat: Vec::with_capacity(rows * f),
            x_co: Vec::with_capacity(rows * (f + oh)),
            labels: Vec::with_capacity(rows * oh),
            targets: Vec::with_capacity(rows * d_co),
            mask: Vec::with_capacity(rows),
        };
        let mut row = Vec::with_capacity(f);
        for u in units {
            u.check(&self.schema)?;
            for t in 0..seq {
                if t + 1 < u.steps {
                    row.clear();
                    self.normalizer
                        .encode_row(u.covariate_row(t), u.treatment_row(t), &u.statics, &mut row);
                    b.x_cat.extend_from_slice(&row);
                    b.x_co.extend_from_slice(&row);
                    let next = u.covariate_row(t + 1);
                    self.normalizer.encode_categorical(next, &mut b.x_co);
                    self.normalizer.encode_categorical(next, &mut b.labels);
                    b.targets.extend(self.normalizer.normalize_continuous(next));
                    let valid = t + 1 >= first_target && t + 1 < end;
                    b.mask.push(if valid { 1.0 } else { 0.0 });
                } else {
                    b.x_cat.extend(std::iter::repeat_n(0.0, f));
                    b.x_co.extend(std::iter::repeat_n(0.0, f + oh));
                    b.labels.extend(std::iter::repeat_n(0.0, oh));
                    b.targets.extend(std::iter::repeat_n(0.0, d_co));
                    b.mask.push(0.0);
                }
            }
        }
        Ok(b)
    }

    /// Records both losses for `batch` on `tape`. Returns the summed total
    /// (each loss already normalized by its own count) and the raw terms.
    fn tape_losses(
        &self,
        tape: &mut Tape,
        params: &[EncoderParams<Var>],
        batch: &Batch,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Option<Var>, LossTerm, LossTerm)> {
        let rows = batch.batch * batch.seq;
        let mut k = 0;
        let mut total: Option<Var> = None;
        let (mut ce_term, mut mse_term) = (LossTerm::default(), LossTerm::default());
        if let Some(enc) = &self.categorical {
            let p = &params[k];
            k += 1;
            let x = tape.constant(Tensor::new(vec![rows, enc.config.input_dim], batch.x_cat.clone())?);
            let out = enc.forward_tape(tape, p, x, batch.batch, batch.seq, dropout.as_deref_mut())?;
            let probs = tape.value(out.output).data().to_vec();
            ce_term = loss_ce(&probs, &batch.labels, &self.schema.class_counts(), &batch.mask);
            let oh = self.schema.onehot_width();
            let w: Vec<f64> = batch
                .labels
                .iter()
                .enumerate()
                .map(|(i, y)| y * batch.mask[i / oh])
                .collect();
            let w = tape.constant(Tensor::new(vec![rows, oh], w)?);
            let logp = tape.log_clamped(out.output, PROB_FLOOR);
            let prod = tape.mul(logp, w)?;
            let s = tape.sum(prod);
            let ce = tape.scale(s, -1.0 / ce_term.count.max(1.0));
            total = Some(ce);
        }
        if let Some(enc) = &self.continuous {
            let p = &params[k];
            let d = enc.config.output_dim;
            let x = tape.constant(Tensor::new(vec![rows, enc.config.input_dim], batch.x_co.clone())?);
            let out = enc.forward_tape(tape, p, x, batch.batch, batch.seq, dropout.as_deref_mut())?;
            let pred = tape.value(out.output).data().to_vec();
            mse_term = loss_mse(&pred, &batch.targets, d, &batch.mask)?;
            let y = tape.constant(Tensor::new(vec![rows, d], batch.targets.clone())?);
            let mask: Vec<f64> = (0..rows * d).map(|i| batch.mask[i / d]).collect();
            let m = tape.constant(Tensor::new(vec![rows, d], mask)?);
            let diff = tape.sub(out.output, y)?;
            let dm = tape.mul(diff, m)?;
            let sq = tape.mul(dm, dm)?;
            let s = tape.sum(sq);
            let mse = tape.scale(s, 1.0 / mse_term.count.max(1.0));
            total = Some(match total {
                Some(ce) => tape.add(ce, mse)?,
                None => mse,
            });
        }
        Ok((total, ce_term, mse_term))
    }

    /// Losses from one causally masked pass per batch.
    pub fn masked_losses(&self, units: &[Trajectory], first_target: usize, end: usize, batch_size: usize) -> Result<(LossTerm, LossTerm)> {
        let (mut ce, mut mse) = (LossTerm::default(), LossTerm::default());
        for chunk in units.chunks(batch_size.max(1)) {
            let refs: Vec<&Trajectory> = chunk.iter().collect();
            let b = self.make_batch(&refs, first_target, end)?;
            let mut tape = Tape::new();
            let params: Vec<_> = self.encoders().iter().map(|e| e.bind_constant(&mut tape)).collect();
            let (_, c, m) = self.tape_losses(&mut tape, &params, &b, None)?;
            ce.merge(c);
            mse.merge(m);
        }
        Ok((ce, mse))
    }

    /// Predictions for covariate row `t` of every unit computed from the
    /// literal prefix `0..t` alone. The continuous prediction is teacher
    /// forced on the observed categorical block of row `t`.
    pub fn forward_teacher_forced(&self, units: &[&Trajectory], t: usize, first_target: usize) -> Result<TeacherForced> {
        if t < first_target.max(1) || units.iter().any(|u| t >= u.steps) {
            return Err(Error::config(format!("target row {t} outside [{first_target}, K)")));
        }
        let prefix: Vec<Trajectory> = units
            .iter()
            .map(|u| {
                let (dl, da) = (u.cov_width(), u.treat_width());
                Trajectory::new(
                    u.id,
                    u.statics.clone(),
                    u.covariates[..(t + 1) * dl].to_vec(),
                    u.treatments[..(t + 1) * da].to_vec(),
                    t + 1,
                )
            })
            .collect();
        let refs: Vec<&Trajectory> = prefix.iter().collect();
        let b = self.make_batch(&refs, t, t + 1)?;
        let n = units.len();
        let last = |out: &[f64], width: usize| -> Vec<f64> {
            (0..n)
                .flat_map(|u| out[(u * b.seq + t - 1) * width..(u * b.seq + t) * width].to_vec())
                .collect()
        };
        let mut tf = TeacherForced {
            probabilities: Vec::new(),
            continuous: Vec::new(),
        };
        if let Some(enc) = &self.categorical {
            let (_, out) = enc.forward(&b.x_cat, n, b.seq)?;
            tf.probabilities = last(&out, enc.config.output_dim);
        }
        if let Some(enc) = &self.continuous {
            let (_, out) = enc.forward(&b.x_co, n, b.seq)?;
            tf.continuous = last(&out, enc.config.output_dim);
        }
        Ok(tf)
    }

    /// Losses accumulated from [`forward_teacher_forced`] over every target
    /// row, i.e. the iterative per-prefix procedure.
    pub fn per_prefix_losses(&self, units: &[Trajectory], first_target: usize, end: usize) -> Result<(LossTerm, LossTerm)> {
        let (mut ce, mut mse) = (LossTerm::default(), LossTerm::default());
        let steps = units.iter().map(|u| u.steps).max().unwrap_or(0);
        let classes = self.schema.class_counts();
        let d_co = self.schema.continuous().len();
        for t in first_target..steps.min(end) {
            let live: Vec<&Trajectory> = units.iter().filter(|u| t < u.steps).collect();
            if live.is_empty() {
                continue;
            }
            let tf = self.forward_teacher_forced(&live, t, first_target)?;
            let mask = vec![1.0; live.len()];
            if self.categorical.is_some() {
                let mut labels = Vec::new();
                for u in &live {
                    self.normalizer.encode_categorical(u.covariate_row(t), &mut labels);
                }
                ce.merge(loss_ce(&tf.probabilities, &labels, &classes, &mask));
            }
            if self.continuous.is_some() {
                let targets: Vec<f64> = live
                    .iter()
                    .flat_map(|u| self.normalizer.normalize_continuous(u.covariate_row(t)))
                    .collect();
                mse.merge(loss_mse(&tf.continuous, &targets, d_co, &mask)?);
            }
        }
        Ok((ce, mse))
    }

    fn encoders(&self) -> Vec<&Encoder> {
        self.categorical.iter().chain(self.continuous.iter()).collect()
    }

    fn encoders_mut(&mut self) -> Vec<&mut Encoder> {
        self.categorical.iter_mut().chain(self.continuous.iter_mut()).collect()
    }
}

/// Per-epoch record of a training run. For the observational policy the
/// `ce` columns hold the treatment-indicator loss and the `mse` columns the
/// dose loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_ce: f64,
    pub train_mse: f64,
    pub val_ce: f64,
    pub val_mse: f64,
    pub val_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_val_total: f64,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (`None` when no epoch improved on
    /// the initial parameters).
    pub best_epoch: Option<usize>,
    pub best_val_total: f64,
    pub stopped_early: bool,
    pub clamped_probabilities: u64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,learning_rate,train_ce,train_mse,val_ce,val_mse,val_total\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.epoch, e.learning_rate, e.train_ce, e.train_mse, e.val_ce, e.val_mse, e.val_total
            ));
        }
        s
    }
}

/// Models trained by [`fit`]: a list of encoders and a batch loss.
trait Objective {
    fn encoders(&self) -> Vec<&Encoder>;
    fn encoders_mut(&mut self) -> Vec<&mut Encoder>;
    fn batch_loss(
        &self,
        tape: &mut Tape,
        params: &[EncoderParams<Var>],
        units: &[&Trajectory],
        cfg: &TrainConfig,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Option<Var>, LossTerm, LossTerm)>;
}

impl Objective for GTransformer {
    fn encoders(&self) -> Vec<&Encoder> {
        GTransformer::encoders(self)
    }

    fn encoders_mut(&mut self) -> Vec<&mut Encoder> {
        GTransformer::encoders_mut(self)
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        params: &[EncoderParams<Var>],
        units: &[&Trajectory],
        cfg: &TrainConfig,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Option<Var>, LossTerm, LossTerm)> {
        let b = self.make_batch(units, cfg.first_target, cfg.end())?;
        self.tape_losses(tape, params, &b, dropout)
    }
}

fn evaluate<M: Objective>(model: &M, units: &[Trajectory], cfg: &TrainConfig) -> Result<(LossTerm, LossTerm)> {
    let (mut ce, mut mse) = (LossTerm::default(), LossTerm::default());
    for chunk in units.chunks(cfg.batch_size) {
        let refs: Vec<&Trajectory> = chunk.iter().collect();
        let mut tape = Tape::new();
        let params: Vec<_> = model.encoders().iter().map(|e| e.bind_constant(&mut tape)).collect();
        let (_, c, m) = model.batch_loss(&mut tape, &params, &refs, cfg, None)?;
        ce.merge(c);
        mse.merge(m);
    }
    Ok((ce, mse))
}

fn fit<M: Objective>(
    model: &mut M,
    train: &[Trajectory],
    val: &[Trajectory],
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    let schedule = cfg.schedule();
    let mut states: Vec<AdamState> = model
        .encoders()
        .iter()
        .map(|e| AdamState::new(&e.params.iter()).with_weight_decay(cfg.weight_decay))
        .collect();
    let val_total = |m: &M| -> Result<(f64, LossTerm, LossTerm)> {
        if val.is_empty() {
            return Ok((0.0, LossTerm::default(), LossTerm::default()));
        }
        let (c, s) = evaluate(m, val, cfg)?;
        Ok((c.mean() + s.mean(), c, s))
    };
    let (initial, _, _) = val_total(model)?;
    let mut log = TrainLog {
        initial_val_total: initial,
        epochs: Vec::new(),
        best_epoch: None,
        best_val_total: initial,
        stopped_early: false,
        clamped_probabilities: 0,
    };
    let mut best: Vec<EncoderParams<Tensor>> = model.encoders().iter().map(|e| e.params.clone()).collect();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batches = train.len().div_ceil(cfg.batch_size);
    for epoch in 0..cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(cfg.seed, "shuffle", epoch as u64, 0));
        let (mut tr_ce, mut tr_mse) = (LossTerm::default(), LossTerm::default());
        let lr_start = schedule.lr_at(epoch as f64);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let lr = schedule.lr_at(epoch as f64 + step as f64 / batches as f64);
            let refs: Vec<&Trajectory> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let params: Vec<_> = model.encoders().iter().map(|e| e.bind(&mut tape)).collect();
            let mut drop_rng = seed::rng(cfg.seed, "dropout", epoch as u64, step as u64);
            let (total, c, m) = model.batch_loss(&mut tape, &params, &refs, cfg, Some(&mut drop_rng))?;
            let Some(total) = total else {
                return Err(Error::Schema("model has no encoders".into()));
            };
            let value = tape.value(total).data()[0];
            if !value.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite training loss at epoch {epoch}, step {step}"
                )));
            }
            log.clamped_probabilities += c.clamped;
            tr_ce.merge(c);
            tr_mse.merge(m);
            let grads = tape.backward(total)?;
            for ((enc, p), state) in model.encoders_mut().into_iter().zip(&params).zip(&mut states) {
                let g: Vec<Tensor> = p.iter().into_iter().map(|v| grads.wrt(*v)).collect();
                adam_step(&mut enc.params.iter_mut(), &g, state, lr)?;
                if !enc.params.is_finite() {
                    return Err(Error::numerical(format!(
                        "non-finite parameters after epoch {epoch}, step {step}"
                    )));
                }
            }
        }
        let (vt, vc, vm) = val_total(model)?;
        let entry = EpochLog {
            epoch,
            learning_rate: lr_start,
            train_ce: tr_ce.mean(),
            train_mse: tr_mse.mean(),
            val_ce: vc.mean(),
            val_mse: vm.mean(),
            val_total: vt,
        };
        progress(&entry);
        log.epochs.push(entry);
        if val.is_empty() || vt < log.best_val_total {
            log.best_val_total = vt;
            log.best_epoch = Some(epoch);
            best = model.encoders().iter().map(|e| e.params.clone()).collect();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    for (enc, p) in model.encoders_mut().into_iter().zip(best) {
        enc.params = p;
    }
    Ok(log)
}

/// Trains `model` on `train` with early stopping on `val`, leaving the
/// best-validation parameters in place.
pub fn train(model: &mut GTransformer, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    train_with_progress(model, train, val, cfg, &mut |_| {})
}

pub fn train_with_progress(
    model: &mut GTransformer,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainLog> {
    if train.schema != model.schema || val.schema != model.schema {
        return Err(Error::Schema("dataset schema differs from model schema".into()));
    }
    fit(model, &train.units, &val.units, cfg, progress)
}

pub struct GtRollout<'a> {
    model: &'a GTransformer,
    rows: usize,
    cat: Option<EncoderSession<'a>>,
    co: Option<EncoderSession<'a>>,
    statics: Vec<f64>,
    current: Vec<f64>,
    pending: Vec<f64>,
}

impl ConditionalDensityEstimator for GTransformer {
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
        let mut cat = self.categorical.as_ref().map(|e| e.session(1));
        let mut co = self.continuous.as_ref().map(|e| e.session(1));
        let mut row = Vec::new();
        for t in 0..start - 1 {
            row.clear();
            self.normalizer
                .encode_row(unit.covariate_row(t), unit.treatment_row(t), &unit.statics, &mut row);
            if let Some(s) = &mut cat {
                s.push(&row)?;
            }
            if let Some(s) = &mut co {
                self.normalizer.encode_categorical(unit.covariate_row(t + 1), &mut row);
                s.push(&row)?;
            }
        }
        let current = unit.covariate_row(start - 1);
        Ok(Box::new(GtRollout {
            model: self,
            rows,
            cat: cat.map(|s| s.fork(0, rows)),
            co: co.map(|s| s.fork(0, rows)),
            statics: unit.statics.clone(),
            current: (0..rows).flat_map(|_| current.iter().copied()).collect(),
            pending: Vec::new(),
        }))
    }
}

impl Rollout for GtRollout<'_> {
    fn categorical(&mut self, actions: &[f64]) -> Result<Vec<f64>> {
        let m = self.model;
        let (d_l, d_a) = (m.schema.num_covariates(), m.schema.num_treatments());
        self.pending.clear();
        for r in 0..self.rows {
            m.normalizer.encode_row(
                &self.current[r * d_l..(r + 1) * d_l],
                &actions[r * d_a..(r + 1) * d_a],
                &self.statics,
                &mut self.pending,
            );
        }
        match &mut self.cat {
            Some(s) => s.push_output(&self.pending),
            None => Ok(Vec::new()),
        }
    }

    fn continuous(&mut self, classes: &[usize]) -> Result<Vec<f64>> {
        let m = self.model;
        let Some(s) = &mut self.co else {
            return Ok(Vec::new());
        };
        let f = m.schema.feature_width();
        let n_cat = m.schema.categorical().len();
        let mut x = Vec::with_capacity(self.rows * (f + m.schema.onehot_width()));
        for r in 0..self.rows {
            x.extend_from_slice(&self.pending[r * f..(r + 1) * f]);
            m.normalizer.encode_classes(&classes[r * n_cat..(r + 1) * n_cat], &mut x);
        }
        let z = s.push_output(&x)?;
        let co = m.schema.continuous();
        let d = co.len();
        Ok(z.iter()
            .enumerate()
            .map(|(i, v)| m.normalizer.covariates[co[i % d]].denormalize(*v))
            .collect())
    }

    fn commit(&mut self, covariates: &[f64]) -> Result<()> {
        self.current.copy_from_slice(covariates);
        Ok(())
    }
}

/// Observational treatment policy: an encoder whose position `t` consumes
/// `(L_t, A_{t-1})` and predicts whether each treatment is given at `t`, plus
/// an encoder predicting the normalized dose of dose-type treatments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub schema: CovariateSchema,
    pub normalizer: Normalizer,
    pub indicator: Encoder,
    pub dose: Option<Encoder>,
    /// Treatment columns of dose type, in schema order.
    pub dose_columns: Vec<usize>,
    /// Holdout dose residuals (normalized), `len x dose_columns.len()` with
    /// NaN where the treatment was not given.
    #[serde(with = "nan_as_null")]
    pub dose_residuals: Vec<f64>,
}

impl PolicyModel {
    pub fn new(normalizer: Normalizer, config: &ModelConfig, seed: u64) -> Result<Self> {
        let schema = normalizer.schema.clone();
        schema.validate()?;
        let d_a = schema.num_treatments();
        if d_a == 0 {
            return Err(Error::Schema("policy needs at least one treatment".into()));
        }
        let f = schema.feature_width();
        let mut rng = seed::rng(seed, "policy-init", 0, 0);
        let indicator = Encoder::new(
            config.encoder(f, 2 * d_a),
            HeadKind::Categorical { classes: vec![2; d_a] },
            &mut rng,
        )?;
        let dose_columns: Vec<usize> = (0..d_a)
            .filter(|&j| schema.treatments[j].kind == TreatmentKind::Dose)
            .collect();
        let dose = if dose_columns.is_empty() {
            None
        } else {
            let mut rng = seed::rng(seed, "policy-init", 1, 0);
            Some(Encoder::new(config.encoder(f, dose_columns.len()), HeadKind::Continuous, &mut rng)?)
        };
        Ok(Self {
            schema,
            normalizer,
            indicator,
            dose,
            dose_columns,
            dose_residuals: Vec::new(),
        })
    }

    fn input_row(&self, l: &[f64], prev: &[f64], statics: &[f64], out: &mut Vec<f64>) {
        self.normalizer.encode_row(l, prev, statics, out);
    }

    fn sequence_inputs(&self, u: &Trajectory, seq: usize, out: &mut Vec<f64>) {
        let zeros = vec![0.0; self.schema.num_treatments()];
        for t in 0..seq {
            if t < u.steps {
                let prev = if t == 0 { &zeros[..] } else { u.treatment_row(t - 1) };
                self.input_row(u.covariate_row(t), prev, &u.statics, out);
            } else {
                out.extend(std::iter::repeat_n(0.0, self.schema.feature_width()));
            }
        }
    }

    /// Treat probabilities (`units x d_A`) at row `t` from the literal prefix.
    pub fn treat_probabilities(&self, units: &[&Trajectory], t: usize) -> Result<Vec<f64>> {
        let mut x = Vec::new();
        for u in units {
            if t >= u.steps {
                return Err(Error::data(format!("unit {} has no row {t}", u.id)));
            }
            self.sequence_inputs(u, t + 1, &mut x);
        }
        let (_, out) = self.indicator.forward(&x, units.len(), t + 1)?;
        let d_a = self.schema.num_treatments();
        Ok((0..units.len())
            .flat_map(|b| {
                let row = &out[(b * (t + 1) + t) * 2 * d_a..(b * (t + 1) + t + 1) * 2 * d_a];
                (0..d_a).map(move |j| row[2 * j + 1]).collect::<Vec<_>>()
            })
            .collect())
    }

    /// Starts `rows` policy evaluations whose first decision is `A_{start-1}`.
    pub fn session(&self, unit: &Trajectory, start: usize, rows: usize) -> Result<PolicySession<'_>> {
        if start == 0 || start > unit.steps {
            return Err(Error::data(format!("cannot start policy for unit {} at {start}", unit.id)));
        }
        let mut ind = self.indicator.session(1);
        let mut dose = self.dose.as_ref().map(|e| e.session(1));
        let mut x = Vec::new();
        self.sequence_inputs(unit, start - 1, &mut x);
        let f = self.schema.feature_width();
        for row in x.chunks(f) {
            ind.push(row)?;
            if let Some(s) = &mut dose {
                s.push(row)?;
            }
        }
        let d_a = self.schema.num_treatments();
        let prev = if start >= 2 {
            unit.treatment_row(start - 2).to_vec()
        } else {
            vec![0.0; d_a]
        };
        Ok(PolicySession {
            model: self,
            rows,
            indicator: ind.fork(0, rows),
            dose: dose.map(|s| s.fork(0, rows)),
            statics: unit.statics.clone(),
            prev: (0..rows).flat_map(|_| prev.iter().copied()).collect(),
        })
    }

    fn residual_rows(&self) -> usize {
        let w = self.dose_columns.len();
        if w == 0 {
            0
        } else {
            self.dose_residuals.len() / w
        }
    }
}

pub struct PolicySession<'a> {
    model: &'a PolicyModel,
    rows: usize,
    indicator: EncoderSession<'a>,
    dose: Option<EncoderSession<'a>>,
    statics: Vec<f64>,
    prev: Vec<f64>,
}

impl PolicySession<'_> {
    /// Samples `A_t` for every row given `L_t` (rows x d_L).
    pub fn act(&mut self, covariates: &[f64], rngs: &mut [ChaCha8Rng]) -> Result<Vec<f64>> {
        let m = self.model;
        let (d_l, d_a) = (m.schema.num_covariates(), m.schema.num_treatments());
        let mut x = Vec::with_capacity(self.rows * m.schema.feature_width());
        for r in 0..self.rows {
            m.input_row(
                &covariates[r * d_l..(r + 1) * d_l],
                &self.prev[r * d_a..(r + 1) * d_a],
                &self.statics,
                &mut x,
            );
        }
        let probs = self.indicator.push_output(&x)?;
        let doses = match &mut self.dose {
            Some(s) => s.push_output(&x)?,
            None => Vec::new(),
        };
        let nd = m.dose_columns.len();
        let pool = m.residual_rows();
        let mut out = vec![0.0; self.rows * d_a];
        for r in 0..self.rows {
            for j in 0..d_a {
                let treat = sample_categorical(&probs[(r * d_a + j) * 2..(r * d_a + j) * 2 + 2], &mut rngs[r])? == 1;
                if !treat {
                    continue;
                }
                out[r * d_a + j] = match m.dose_columns.iter().position(|&c| c == j) {
                    None => 1.0,
                    Some(k) => {
                        let mut eps = f64::NAN;
                        if pool > 0 {
                            // Redraw until the pooled row has a residual for this column.
                            for _ in 0..64 {
                                let v = m.dose_residuals[rng_index(&mut rngs[r], pool) * nd + k];
                                if v.is_finite() {
                                    eps = v;
                                    break;
                                }
                            }
                        }
                        let z = doses[r * nd + k] + if eps.is_finite() { eps } else { 0.0 };
                        m.normalizer.treatments[j].denormalize(z).max(0.0)
                    }
                };
            }
        }
        self.prev.copy_from_slice(&out);
        Ok(out)
    }
}

fn rng_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    use rand::Rng;
    rng.random_range(0..n)
}

impl Objective for PolicyModel {
    fn encoders(&self) -> Vec<&Encoder> {
        std::iter::once(&self.indicator).chain(self.dose.iter()).collect()
    }

    fn encoders_mut(&mut self) -> Vec<&mut Encoder> {
        std::iter::once(&mut self.indicator).chain(self.dose.iter_mut()).collect()
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        params: &[EncoderParams<Var>],
        units: &[&Trajectory],
        cfg: &TrainConfig,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Option<Var>, LossTerm, LossTerm)> {
        let seq = units.iter().map(|u| u.steps).max().unwrap_or(1).max(1);
        let d_a = self.schema.num_treatments();
        let rows = units.len() * seq;
        let end = cfg.end();
        let mut x = Vec::with_capacity(rows * self.schema.feature_width());
        let mut labels = Vec::with_capacity(rows * 2 * d_a);
        let mut mask = Vec::with_capacity(rows);
        let nd = self.dose_columns.len();
        let mut dose_t = Vec::with_capacity(rows * nd);
        let mut dose_m = Vec::with_capacity(rows * nd);
        for u in units {
            u.check(&self.schema)?;
            self.sequence_inputs(u, seq, &mut x);
            for t in 0..seq {
                let valid = t < u.steps && t < end;
                mask.push(if valid { 1.0 } else { 0.0 });
                for j in 0..d_a {
                    let given = valid && u.treatment_row(t)[j] > 0.0;
                    labels.extend(if given { [0.0, 1.0] } else if valid { [1.0, 0.0] } else { [0.0, 0.0] });
                }
                for &j in &self.dose_columns {
                    let given = valid && u.treatment_row(t)[j] > 0.0;
                    dose_m.push(if given { 1.0 } else { 0.0 });
                    dose_t.push(if given {
                        self.normalizer.treatments[j].normalize(u.treatment_row(t)[j])
                    } else {
                        0.0
                    });
                }
            }
        }
        let b = units.len();
        let xv = tape.constant(Tensor::new(vec![rows, self.schema.feature_width()], x)?);
        let out = self
            .indicator
            .forward_tape(tape, &params[0], xv, b, seq, dropout.as_deref_mut())?;
        let probs = tape.value(out.output).data().to_vec();
        let ce_term = loss_ce(&probs, &labels, &vec![2; d_a], &mask);
        let w = tape.constant(Tensor::new(vec![rows, 2 * d_a], labels)?);
        let logp = tape.log_clamped(out.output, PROB_FLOOR);
        let prod = tape.mul(logp, w)?;
        let s = tape.sum(prod);
        let mut total = tape.scale(s, -1.0 / ce_term.count.max(1.0));
        let mut mse_term = LossTerm::default();
        if let Some(enc) = &self.dose {
            let out = enc.forward_tape(tape, &params[1], xv, b, seq, dropout)?;
            let pred = tape.value(out.output).data().to_vec();
            for i in 0..rows * nd {
                if dose_m[i] != 0.0 {
                    let d = pred[i] - dose_t[i];
                    mse_term.sum += d * d;
                    mse_term.count += 1.0;
                }
            }
            let y = tape.constant(Tensor::new(vec![rows, nd], dose_t)?);
            let m = tape.constant(Tensor::new(vec![rows, nd], dose_m)?);
            let diff = tape.sub(out.output, y)?;
            let dm = tape.mul(diff, m)?;
            let sq = tape.mul(dm, dm)?;
            let s = tape.sum(sq);
            let mse = tape.scale(s, 1.0 / mse_term.count.max(1.0));
            total = tape.add(total, mse)?;
        }
        Ok((Some(total), ce_term, mse_term))
    }
}

/// Fits the observational policy on `train`, early-stopping on `val`, and
/// fills its dose residual pool from `val`.
pub fn fit_observational_policy(
    train: &Dataset,
    val: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<(PolicyModel, TrainLog)> {
    train.validate()?;
    if val.schema != train.schema {
        return Err(Error::Schema("validation schema differs from training schema".into()));
    }
    let mut model = PolicyModel::new(Normalizer::fit(train), model_cfg, cfg.seed)?;
    let log = fit(&mut model, &train.units, &val.units, cfg, progress)?;
    if let Some(enc) = &model.dose {
        let nd = model.dose_columns.len();
        let mut pool = Vec::new();
        for u in &val.units {
            let mut x = Vec::new();
            model.sequence_inputs(u, u.steps, &mut x);
            let (_, out) = enc.forward(&x, 1, u.steps)?;
            for t in 0..u.steps {
                let row: Vec<f64> = model
                    .dose_columns
                    .iter()
                    .enumerate()
                    .map(|(k, &j)| {
                        let a = u.treatment_row(t)[j];
                        if a > 0.0 {
                            model.normalizer.treatments[j].normalize(a) - out[t * nd + k]
                        } else {
                            f64::NAN
                        }
                    })
                    .collect();
                if row.iter().any(|v| v.is_finite()) {
                    pool.extend(row);
                }
            }
        }
        model.dose_residuals = pool;
    }
    Ok((model, log))
}

/// JSON has no NaN, so missing residuals travel as `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| if x.is_nan() { None } else { Some(*x) }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        let v = Vec::<Option<f64>>::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::testutil::mixed_schema;
    use crate::data::{DatasetMeta, Treatment};
    use rand::{Rng, SeedableRng};

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            feedforward_dim: 16,
            dropout: 0.0,
            max_sequence_length: 16,
        }
    }

    fn random_units(n: usize, steps: usize, seed: u64) -> Vec<Trajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut cov = Vec::new();
                let mut treat = Vec::new();
                for _ in 0..steps {
                    cov.extend([
                        rng.random_range(0..3) as f64,
                        rng.random_range(-2.0..2.0),
                        rng.random_range(0..2) as f64,
                        rng.random_range(5.0..15.0),
                    ]);
                    treat.push(if rng.random::<f64>() < 0.5 { 0.0 } else { rng.random_range(0.5..2.0) });
                }
                Trajectory::new(i as u64, vec![], cov, treat, steps)
            })
            .collect()
    }

    fn dataset(units: Vec<Trajectory>) -> Dataset {
        Dataset::new(mixed_schema(), DatasetMeta::default(), units)
    }

    fn model(seed: u64) -> (GTransformer, Dataset) {
        let d = dataset(random_units(6, 7, seed));
        let m = GTransformer::new(Normalizer::fit(&d), &tiny_model_config(), seed).unwrap();
        (m, d)
    }

    #[test]
    fn ce_examples() {
        let t = loss_ce(&[0.0, 1.0], &[0.0, 1.0], &[2], &[1.0]);
        assert_eq!(t.mean(), 0.0);
        let t = loss_ce(&[0.5, 0.5], &[1.0, 0.0], &[2], &[1.0]);
        assert!((t.mean() - 2f64.ln()).abs() < 1e-15);
        // two covariates with losses ln 2 and ln 4
        let t = loss_ce(&[0.5, 0.5, 0.25, 0.75], &[0.0, 1.0, 1.0, 0.0], &[2, 2], &[1.0]);
        assert!((t.mean() - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-15);
        let t = loss_ce(&[1.0, 0.0], &[0.0, 1.0], &[2], &[1.0]);
        assert_eq!(t.clamped, 1);
        assert!((t.mean() + PROB_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn mse_examples() {
        let p = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(loss_mse(&p, &p, 2, &[1.0, 1.0]).unwrap().mean(), 0.0);
        let shifted: Vec<f64> = p.iter().map(|v| v + 0.3).collect();
        assert!((loss_mse(&p, &shifted, 2, &[1.0, 1.0]).unwrap().mean() - 0.09).abs() < 1e-15);
        let pp: Vec<f64> = p.iter().chain(&p).copied().collect();
        let ss: Vec<f64> = shifted.iter().chain(&shifted).copied().collect();
        let a = loss_mse(&p, &shifted, 2, &[1.0, 1.0]).unwrap().mean();
        let b = loss_mse(&pp, &ss, 2, &[1.0; 4]).unwrap().mean();
        assert!((a - b).abs() < 1e-15);
        assert!(loss_mse(&p, &p[..3], 2, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn continuous_input_extends_categorical_input() {
        let (m, _) = model(1);
        assert_eq!(
            m.continuous_input_width(),
            m.categorical_input_width() + m.schema.onehot_width()
        );
        assert_eq!(m.continuous.as_ref().unwrap().config.input_dim, m.continuous_input_width());
    }

    #[test]
    fn masked_and_per_prefix_agree() {
        let (m, d) = model(2);
        let (c1, s1) = m.masked_losses(&d.units, 2, usize::MAX, 4).unwrap();
        let (c2, s2) = m.per_prefix_losses(&d.units, 2, usize::MAX).unwrap();
        assert_eq!(c1.count, c2.count);
        assert_eq!(s1.count, 6.0 * 5.0 * 2.0);
        assert!((c1.mean() - c2.mean()).abs() < 1e-8);
        assert!((s1.mean() - s2.mean()).abs() < 1e-8);
    }

    #[test]
    fn duplicating_units_leaves_losses_unchanged() {
        let (m, d) = model(3);
        let mut doubled = d.units.clone();
        doubled.extend(d.units.clone());
        let (c1, s1) = m.masked_losses(&d.units, 1, usize::MAX, 5).unwrap();
        let (c2, s2) = m.masked_losses(&doubled, 1, usize::MAX, 5).unwrap();
        assert!((c1.mean() - c2.mean()).abs() < 1e-12);
        assert!((s1.mean() - s2.mean()).abs() < 1e-12);
    }

    #[test]
    fn teacher_forcing_direction() {
        let (m, d) = model(4);
        let t = 4;
        let base = m.forward_teacher_forced(&[&d.units[0]], t, 1).unwrap();
        let mut u = d.units[0].clone();
        // change the observed categorical block of row t
        let w = u.cov_width();
        u.covariates[t * w] = (u.covariates[t * w] + 1.0) % 3.0;
        let pert = m.forward_teacher_forced(&[&u], t, 1).unwrap();
        assert_eq!(base.probabilities, pert.probabilities);
        assert_ne!(base.continuous, pert.continuous);
        assert_eq!(base.probabilities.len(), 5);
        assert_eq!(base.continuous.len(), 2);
        assert!(m.forward_teacher_forced(&[&u], 0, 1).is_err());
        assert!(m.forward_teacher_forced(&[&u], 7, 1).is_err());
    }

    #[test]
    fn rollout_matches_teacher_forced_pass() {
        let (m, d) = model(5);
        let u = &d.units[1];
        let start = 3;
        let mut r = m.rollout(u, start, 2).unwrap();
        for t in start..u.steps {
            let a: Vec<f64> = (0..2).flat_map(|_| u.treatment_row(t - 1).to_vec()).collect();
            let p = r.categorical(&a).unwrap();
            let classes = [u.covariate(t, 0) as usize, u.covariate(t, 2) as usize];
            let c: Vec<usize> = classes.iter().chain(&classes).copied().collect();
            let mean = r.continuous(&c).unwrap();
            let tf = m.forward_teacher_forced(&[u], t, 1).unwrap();
            for j in 0..5 {
                assert!((p[j] - tf.probabilities[j]).abs() < 1e-10);
                assert!((p[5 + j] - tf.probabilities[j]).abs() < 1e-10);
            }
            let expect = [
                m.normalizer.covariates[1].denormalize(tf.continuous[0]),
                m.normalizer.covariates[3].denormalize(tf.continuous[1]),
            ];
            assert!((mean[0] - expect[0]).abs() < 1e-9);
            assert!((mean[3] - expect[1]).abs() < 1e-9);
            let row: Vec<f64> = (0..2).flat_map(|_| u.covariate_row(t).to_vec()).collect();
            r.commit(&row).unwrap();
        }
    }

    #[test]
    fn one_epoch_reduces_training_loss_for_most_seeds() {
        let mut wins = 0;
        for seed in 0..10 {
            let d = dataset(random_units(2, 6, 100 + seed));
            let mut m = GTransformer::new(Normalizer::fit(&d), &tiny_model_config(), seed).unwrap();
            let cfg = TrainConfig {
                max_epochs: 1,
                patience: 0,
                batch_size: 2,
                learning_rate: 1e-2,
                eta_min: 1e-3,
                seed,
                ..TrainConfig::default()
            };
            let (c0, s0) = m.masked_losses(&d.units, 1, usize::MAX, 2).unwrap();
            let log = train(&mut m, &d, &d, &cfg).unwrap();
            let (c1, s1) = m.masked_losses(&d.units, 1, usize::MAX, 2).unwrap();
            assert_eq!(log.epochs.len(), 1);
            if c1.mean() + s1.mean() < c0.mean() + s0.mean() {
                wins += 1;
            }
        }
        assert!(wins >= 9, "{wins}");
    }

    #[test]
    fn patience_zero_stops_at_first_non_improvement() {
        let d = dataset(random_units(4, 5, 7));
        let v = dataset(random_units(4, 5, 8));
        let mut m = GTransformer::new(Normalizer::fit(&d), &tiny_model_config(), 7).unwrap();
        let cfg = TrainConfig {
            max_epochs: 40,
            patience: 0,
            batch_size: 2,
            learning_rate: 0.05,
            eta_min: 0.05,
            seed: 7,
            ..TrainConfig::default()
        };
        let log = train(&mut m, &d, &v, &cfg).unwrap();
        let n = log.epochs.len();
        if log.stopped_early {
            let last = log.epochs[n - 1].val_total;
            let prev_best = log.epochs[..n - 1]
                .iter()
                .map(|e| e.val_total)
                .fold(log.initial_val_total, f64::min);
            assert!(last >= prev_best);
            assert!(log.epochs[..n - 1].iter().all(|e| e.val_total < log.initial_val_total || e.epoch == 0));
        }
        assert!(n < 40);
        // best parameters are restored
        let (c, s) = m.masked_losses(&v.units, 1, usize::MAX, 4).unwrap();
        assert!((c.mean() + s.mean() - log.best_val_total).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let d = dataset(random_units(4, 5, 9));
        let cfg = TrainConfig {
            max_epochs: 2,
            patience: 2,
            batch_size: 3,
            seed: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = GTransformer::new(Normalizer::fit(&d), &tiny_model_config(), 3).unwrap();
            let log = train(&mut m, &d, &d, &cfg).unwrap();
            (m, log)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn constant_dataset_approaches_analytic_minimum() {
        // categorical covariate alternates 0/1 with equal frequency at every
        // step; continuous covariates are constant.
        let units: Vec<Trajectory> = (0..8)
            .map(|i| {
                let mut cov = Vec::new();
                for t in 0..5 {
                    cov.extend([((i + t) % 3) as f64, 1.0, ((i + t) % 2) as f64, 10.0]);
                }
                Trajectory::new(i as u64, vec![], cov, vec![0.0; 5], 5)
            })
            .collect();
        let d = dataset(units);
        let mut m = GTransformer::new(Normalizer::fit(&d), &tiny_model_config(), 1).unwrap();
        let cfg = TrainConfig {
            max_epochs: 200,
            patience: 200,
            batch_size: 8,
            learning_rate: 1e-2,
            eta_min: 1e-3,
            ..TrainConfig::default()
        };
        let log = train(&mut m, &d, &d, &cfg).unwrap();
        let last = log.epochs.last().unwrap();
        assert!(last.val_mse < 1e-3, "{}", last.val_mse);
        assert!(last.val_ce < log.epochs[0].val_ce);
    }

    #[test]
    fn schema_without_categoricals_skips_encoder() {
        let schema = CovariateSchema {
            covariates: vec![crate::data::Covariate::continuous("v")],
            treatments: vec![Treatment::new("a", TreatmentKind::Binary)],
            outcome: 0,
            statics: vec![],
        };
        let units = vec![Trajectory::new(0, vec![], vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 0.0], 3)];
        let d = Dataset::new(schema, DatasetMeta::default(), units);
        let m = GTransformer::new(Normalizer::fit(&d), &tiny_model_config(), 0).unwrap();
        assert!(m.categorical.is_none());
        assert_eq!(m.continuous_input_width(), m.categorical_input_width());
        let tf = m.forward_teacher_forced(&[&d.units[0]], 2, 1).unwrap();
        assert!(tf.probabilities.is_empty());
        assert_eq!(tf.continuous.len(), 1);
    }

    #[test]
    fn policy_on_untreated_data_predicts_no_treatment() {
        let mut units = random_units(8, 6, 11);
        for u in &mut units {
            u.treatments.iter_mut().for_each(|a| *a = 0.0);
        }
        let d = dataset(units);
        let cfg = TrainConfig {
            max_epochs: 30,
            patience: 30,
            batch_size: 4,
            learning_rate: 1e-2,
            eta_min: 1e-3,
            ..TrainConfig::default()
        };
        let (p, _) = fit_observational_policy(&d, &d, &tiny_model_config(), &cfg, &mut |_| {}).unwrap();
        let refs: Vec<&Trajectory> = d.units.iter().collect();
        let probs = p.treat_probabilities(&refs, 3).unwrap();
        assert!(probs.iter().all(|&q| q < 0.05), "{probs:?}");
        let mut s = p.session(&d.units[0], 3, 5).unwrap();
        let mut rngs: Vec<_> = (0..5).map(ChaCha8Rng::seed_from_u64).collect();
        let row: Vec<f64> = (0..5).flat_map(|_| d.units[0].covariate_row(2).to_vec()).collect();
        let a = s.act(&row, &mut rngs).unwrap();
        assert_eq!(a.len(), 5);
    }
}
