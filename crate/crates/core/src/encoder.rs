//! Causal transformer encoder with a categorical or continuous prediction head.
//!
//! Each position's input row is projected to `hidden_dim`, a sinusoidal
//! position code is added, and the sequence passes through pre-norm encoder
//! layers whose self-attention is causally masked, so position `t` only sees
//! positions `0..=t`. A final layer norm precedes the head.
//!
//! Two execution paths share one parameter set: a tape-recorded batched pass
//! used for training, and an untracked incremental [`EncoderSession`] with
//! cached keys and values used for Monte Carlo rollouts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, gemm};
use crate::tensor::gradcheck::{max_relative_error, random_tensor, weighted_sum};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub feedforward_dim: usize,
    pub max_sequence_length: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.hidden_dim == 0 || self.feedforward_dim == 0 || self.input_dim == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// What the head emits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    /// Linear, ReLU, then an independent softmax over each group of classes.
    Categorical { classes: Vec<usize> },
    /// Linear map to real-valued outputs.
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub w_qkv: T,
    pub b_qkv: T,
    pub w_out: T,
    pub b_out: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w_ff1: T,
    pub b_ff1: T,
    pub w_ff2: T,
    pub b_ff2: T,
}

impl<T> LayerParams<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerParams<U> {
        LayerParams {
            ln1_gain: f(&self.ln1_gain),
            ln1_bias: f(&self.ln1_bias),
            w_qkv: f(&self.w_qkv),
            b_qkv: f(&self.b_qkv),
            w_out: f(&self.w_out),
            b_out: f(&self.b_out),
            ln2_gain: f(&self.ln2_gain),
            ln2_bias: f(&self.ln2_bias),
            w_ff1: f(&self.w_ff1),
            b_ff1: f(&self.b_ff1),
            w_ff2: f(&self.w_ff2),
            b_ff2: f(&self.b_ff2),
        }
    }

    fn refs(&self) -> [&T; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_qkv,
            &self.b_qkv,
            &self.w_out,
            &self.b_out,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_ff1,
            &self.b_ff1,
            &self.w_ff2,
            &self.b_ff2,
        ]
    }

    fn refs_mut(&mut self) -> [&mut T; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_qkv,
            &mut self.b_qkv,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_ff1,
            &mut self.b_ff1,
            &mut self.w_ff2,
            &mut self.b_ff2,
        ]
    }
}

/// All trainable tensors of one encoder plus its head. Generic so the same
/// layout holds concrete tensors or their tape handles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams<T> {
    pub embed_w: T,
    pub embed_b: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_gain: T,
    pub final_bias: T,
    pub head_w: T,
    pub head_b: T,
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> EncoderParams<U> {
        EncoderParams {
            embed_w: f(&self.embed_w),
            embed_b: f(&self.embed_b),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            final_gain: f(&self.final_gain),
            final_bias: f(&self.final_bias),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
        }
    }

    /// Tensors in a fixed canonical order.
    pub fn iter(&self) -> Vec<&T> {
        let mut out = vec![&self.embed_w, &self.embed_b];
        for l in &self.layers {
            out.extend(l.refs());
        }
        out.extend([&self.final_gain, &self.final_bias, &self.head_w, &self.head_b]);
        out
    }

    pub fn iter_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.embed_w, &mut self.embed_b];
        for l in &mut self.layers {
            out.extend(l.refs_mut());
        }
        out.extend([
            &mut self.final_gain,
            &mut self.final_bias,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

impl EncoderParams<Tensor> {
    /// Xavier-uniform weights, zero biases, unit norm gains.
    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let (h, f) = (cfg.hidden_dim, cfg.feedforward_dim);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::full(&[h], 1.0),
                ln1_bias: Tensor::zeros(&[h]),
                w_qkv: xavier(h, 3 * h, rng),
                b_qkv: Tensor::zeros(&[3 * h]),
                w_out: xavier(h, h, rng),
                b_out: Tensor::zeros(&[h]),
                ln2_gain: Tensor::full(&[h], 1.0),
                ln2_bias: Tensor::zeros(&[h]),
                w_ff1: xavier(h, f, rng),
                b_ff1: Tensor::zeros(&[f]),
                w_ff2: xavier(f, h, rng),
                b_ff2: Tensor::zeros(&[h]),
            })
            .collect();
        Self {
            embed_w: xavier(cfg.input_dim, h, rng),
            embed_b: Tensor::zeros(&[h]),
            layers,
            final_gain: Tensor::full(&[h], 1.0),
            final_bias: Tensor::zeros(&[h]),
            head_w: xavier(h, cfg.output_dim, rng),
            head_b: Tensor::zeros(&[cfg.output_dim]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().iter().all(|t| t.is_finite())
    }

    pub fn num_values(&self) -> usize {
        self.iter().iter().map(|t| t.len()).sum()
    }
}

/// Outputs of a tape-recorded pass.
#[derive(Debug, Clone, Copy)]
pub struct TapeOutput {
    /// `(batch * seq) x hidden_dim` after the final layer norm.
    pub hidden: Var,
    /// `(batch * seq) x output_dim`: probabilities or point predictions.
    pub output: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub head: HeadKind,
    pub params: EncoderParams<Tensor>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, head: HeadKind, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if let HeadKind::Categorical { classes } = &head {
            if classes.iter().sum::<usize>() != config.output_dim {
                return Err(Error::config("class counts do not sum to output_dim"));
            }
        }
        let params = EncoderParams::init(&config, rng);
        Ok(Self {
            config,
            head,
            params,
        })
    }

    fn check_len(&self, seq: usize) -> Result<()> {
        if seq > self.config.max_sequence_length {
            return Err(Error::config(format!(
                "sequence length {seq} exceeds max_sequence_length {}",
                self.config.max_sequence_length
            )));
        }
        Ok(())
    }

    /// Records the parameters on `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> EncoderParams<Var> {
        self.params.map(|t| tape.param(t.clone()))
    }

    /// Records the parameters as constants.
    pub fn bind_constant(&self, tape: &mut Tape) -> EncoderParams<Var> {
        self.params.map(|t| tape.constant(t.clone()))
    }

    /// Linear projection of each input row plus the additive position code.
    /// `x` is `(batch * seq) x input_dim`, sequences laid out contiguously.
    pub fn embed(&self, tape: &mut Tape, p: &EncoderParams<Var>, x: Var, batch: usize, seq: usize) -> Result<Var> {
        let (rows, cols) = tape
            .value(x)
            .dims2()
            .ok_or_else(|| Error::data("embedding input must be a matrix"))?;
        if cols != self.config.input_dim || rows != batch * seq {
            return Err(Error::Schema(format!(
                "embedding input is {rows}x{cols}, expected {}x{}",
                batch * seq,
                self.config.input_dim
            )));
        }
        self.check_len(seq)?;
        let h = self.config.hidden_dim;
        let e = tape.matmul(x, p.embed_w)?;
        let e = tape.add_bias(e, p.embed_b)?;
        let mut pe = Vec::with_capacity(rows * h);
        for _ in 0..batch {
            for t in 0..seq {
                pe.extend((0..h).map(|i| kernels::positional_encoding(t, i, h)));
            }
        }
        let pe = tape.constant(Tensor::new(vec![rows, h], pe)?);
        Ok(tape.add(e, pe)?)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let shape = tape.value(x).shape().to_vec();
                let n = tape.value(x).len();
                let keep = 1.0 / (1.0 - p);
                let mask = (0..n)
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                let m = tape.constant(Tensor::new(shape, mask)?);
                Ok(tape.mul(x, m)?)
            }
            _ => Ok(x),
        }
    }

    /// Stacked pre-norm causal layers and the final layer norm.
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &EncoderParams<Var>,
        embedded: Var,
        batch: usize,
        seq: usize,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.check_len(seq)?;
        let mut h = embedded;
        for l in &p.layers {
            let y = tape.layer_norm(h, l.ln1_gain, l.ln1_bias)?;
            let qkv = tape.matmul(y, l.w_qkv)?;
            let qkv = tape.add_bias(qkv, l.b_qkv)?;
            let a = tape.causal_attention(qkv, batch, seq, self.config.num_heads)?;
            let o = tape.matmul(a, l.w_out)?;
            let o = tape.add_bias(o, l.b_out)?;
            let o = self.dropout(tape, o, dropout.as_deref_mut())?;
            h = tape.add(h, o)?;
            let y = tape.layer_norm(h, l.ln2_gain, l.ln2_bias)?;
            let f = tape.matmul(y, l.w_ff1)?;
            let f = tape.add_bias(f, l.b_ff1)?;
            let f = tape.relu(f);
            let f = tape.matmul(f, l.w_ff2)?;
            let f = tape.add_bias(f, l.b_ff2)?;
            let f = self.dropout(tape, f, dropout.as_deref_mut())?;
            h = tape.add(h, f)?;
        }
        Ok(tape.layer_norm(h, p.final_gain, p.final_bias)?)
    }

    pub fn head_tape(&self, tape: &mut Tape, p: &EncoderParams<Var>, hidden: Var) -> Result<Var> {
        let z = tape.matmul(hidden, p.head_w)?;
        let z = tape.add_bias(z, p.head_b)?;
        match &self.head {
            HeadKind::Categorical { classes } => {
                let r = tape.relu(z);
                Ok(tape.grouped_softmax(r, classes)?)
            }
            HeadKind::Continuous => Ok(z),
        }
    }

    /// Full tape-recorded pass over `batch` sequences of length `seq`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        p: &EncoderParams<Var>,
        x: Var,
        batch: usize,
        seq: usize,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<TapeOutput> {
        let e = self.embed(tape, p, x, batch, seq)?;
        let hidden = self.encode(tape, p, e, batch, seq, dropout)?;
        let output = self.head_tape(tape, p, hidden)?;
        Ok(TapeOutput { hidden, output })
    }

    /// Untracked masked pass; returns `(hidden, output)` row-major.
    pub fn forward(&self, x: &[f64], batch: usize, seq: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = self.bind_constant(&mut tape);
        let xv = tape.constant(Tensor::new(vec![batch * seq, self.config.input_dim], x.to_vec())?);
        let out = self.forward_tape(&mut tape, &p, xv, batch, seq, None)?;
        Ok((
            tape.value(out.hidden).data().to_vec(),
            tape.value(out.output).data().to_vec(),
        ))
    }

    /// Applies the head to `rows x hidden_dim` states.
    pub fn head(&self, hidden: &[f64], rows: usize) -> Vec<f64> {
        let (h, o) = (self.config.hidden_dim, self.config.output_dim);
        let mut z = vec![0.0; rows * o];
        gemm(rows, h, o, hidden, false, self.params.head_w.data(), false, &mut z, false);
        kernels::add_bias_rows(&mut z, self.params.head_b.data());
        if let HeadKind::Categorical { classes } = &self.head {
            kernels::relu_in_place(&mut z);
            for row in z.chunks_exact_mut(o.max(1)) {
                let mut s = 0;
                for &c in classes {
                    kernels::softmax_in_place(&mut row[s..s + c]);
                    s += c;
                }
            }
        }
        z
    }

    pub fn session(&self, rows: usize) -> EncoderSession<'_> {
        EncoderSession::new(self, rows)
    }
}

/// Incremental causal evaluation over `rows` independent sequences that all
/// advance one position per [`push`](EncoderSession::push).
#[derive(Debug, Clone)]
pub struct EncoderSession<'a> {
    enc: &'a Encoder,
    rows: usize,
    len: usize,
    /// Per layer, `rows x max_len x hidden` keys and values.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl<'a> EncoderSession<'a> {
    fn new(enc: &'a Encoder, rows: usize) -> Self {
        let size = rows * enc.config.max_sequence_length * enc.config.hidden_dim;
        Self {
            enc,
            rows,
            len: 0,
            keys: vec![vec![0.0; size]; enc.config.num_layers],
            values: vec![vec![0.0; size]; enc.config.num_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// A session with `rows` copies of row `src`'s state.
    pub fn fork(&self, src: usize, rows: usize) -> EncoderSession<'a> {
        let cfg = &self.enc.config;
        let stride = cfg.max_sequence_length * cfg.hidden_dim;
        let used = self.len * cfg.hidden_dim;
        let mut out = EncoderSession::new(self.enc, rows);
        for l in 0..cfg.num_layers {
            let ks = &self.keys[l][src * stride..src * stride + used];
            let vs = &self.values[l][src * stride..src * stride + used];
            for r in 0..rows {
                out.keys[l][r * stride..r * stride + used].copy_from_slice(ks);
                out.values[l][r * stride..r * stride + used].copy_from_slice(vs);
            }
        }
        out.len = self.len;
        out
    }

    /// Appends one position per row (`rows x input_dim`) and returns the new
    /// positions' final hidden states (`rows x hidden_dim`).
    pub fn push(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let cfg = &self.enc.config;
        let p = &self.enc.params;
        let (r, h, f, heads) = (self.rows, cfg.hidden_dim, cfg.feedforward_dim, cfg.num_heads);
        if x.len() != r * cfg.input_dim {
            return Err(Error::Schema(format!(
                "session input has {} values, expected {}",
                x.len(),
                r * cfg.input_dim
            )));
        }
        if self.len >= cfg.max_sequence_length {
            return Err(Error::config("session exceeds max_sequence_length"));
        }
        let pos = self.len;
        let mut hs = vec![0.0; r * h];
        gemm(r, cfg.input_dim, h, x, false, p.embed_w.data(), false, &mut hs, false);
        kernels::add_bias_rows(&mut hs, p.embed_b.data());
        let pe: Vec<f64> = (0..h).map(|i| kernels::positional_encoding(pos, i, h)).collect();
        kernels::add_bias_rows(&mut hs, &pe);

        let stride = cfg.max_sequence_length * h;
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut y = vec![0.0; r * h];
        let mut qkv = vec![0.0; r * 3 * h];
        let mut att = vec![0.0; r * h];
        let mut o = vec![0.0; r * h];
        let mut ff = vec![0.0; r * f];
        let mut scores = vec![0.0; pos + 1];
        for (l, lp) in p.layers.iter().enumerate() {
            for i in 0..r {
                kernels::layer_norm_row(
                    &hs[i * h..(i + 1) * h],
                    lp.ln1_gain.data(),
                    lp.ln1_bias.data(),
                    &mut y[i * h..(i + 1) * h],
                );
            }
            gemm(r, h, 3 * h, &y, false, lp.w_qkv.data(), false, &mut qkv, false);
            kernels::add_bias_rows(&mut qkv, lp.b_qkv.data());
            let (keys, values) = (&mut self.keys[l], &mut self.values[l]);
            for i in 0..r {
                let base = i * stride + pos * h;
                keys[base..base + h].copy_from_slice(&qkv[i * 3 * h + h..i * 3 * h + 2 * h]);
                values[base..base + h].copy_from_slice(&qkv[i * 3 * h + 2 * h..(i + 1) * 3 * h]);
            }
            att.fill(0.0);
            for i in 0..r {
                for hd in 0..heads {
                    let q = &qkv[i * 3 * h + hd * dh..i * 3 * h + (hd + 1) * dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let k = &keys[i * stride + j * h + hd * dh..i * stride + j * h + (hd + 1) * dh];
                        let mut acc = 0.0;
                        for d in 0..dh {
                            acc += q[d] * k[d];
                        }
                        *s = acc * scale;
                    }
                    kernels::softmax_in_place(&mut scores);
                    let out = &mut att[i * h + hd * dh..i * h + (hd + 1) * dh];
                    for (j, &pj) in scores.iter().enumerate() {
                        let v = &values[i * stride + j * h + hd * dh..i * stride + j * h + (hd + 1) * dh];
                        for d in 0..dh {
                            out[d] += pj * v[d];
                        }
                    }
                }
            }
            gemm(r, h, h, &att, false, lp.w_out.data(), false, &mut o, false);
            kernels::add_bias_rows(&mut o, lp.b_out.data());
            for (a, b) in hs.iter_mut().zip(&o) {
                *a += b;
            }
            for i in 0..r {
                kernels::layer_norm_row(
                    &hs[i * h..(i + 1) * h],
                    lp.ln2_gain.data(),
                    lp.ln2_bias.data(),
                    &mut y[i * h..(i + 1) * h],
                );
            }
            gemm(r, h, f, &y, false, lp.w_ff1.data(), false, &mut ff, false);
            kernels::add_bias_rows(&mut ff, lp.b_ff1.data());
            kernels::relu_in_place(&mut ff);
            gemm(r, f, h, &ff, false, lp.w_ff2.data(), false, &mut o, false);
            kernels::add_bias_rows(&mut o, lp.b_ff2.data());
            for (a, b) in hs.iter_mut().zip(&o) {
                *a += b;
            }
        }
        for i in 0..r {
            kernels::layer_norm_row(
                &hs[i * h..(i + 1) * h],
                p.final_gain.data(),
                p.final_bias.data(),
                &mut y[i * h..(i + 1) * h],
            );
        }
        self.len += 1;
        Ok(y)
    }

    /// Pushes one position and applies the head.
    pub fn push_output(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let hidden = self.push(x)?;
        Ok(self.enc.head(&hidden, self.rows))
    }
}

/// Worst relative error between autodiff and central finite differences over
/// every parameter and input of a one-layer encoder with a categorical head.
pub fn block_gradient_check(seed: u64) -> Result<f64> {
    let cfg = EncoderConfig {
        input_dim: 3,
        hidden_dim: 4,
        num_layers: 1,
        num_heads: 2,
        feedforward_dim: 6,
        max_sequence_length: 4,
        output_dim: 5,
        dropout: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = Encoder::new(cfg, HeadKind::Categorical { classes: vec![2, 3] }, &mut rng)?;
    for t in enc.params.iter_mut() {
        if t.rank() == 1 {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let x = random_tensor(&[6, 3], &mut rng);
    let mut inputs: Vec<Tensor> = enc.params.iter().into_iter().cloned().collect();
    inputs.push(x);
    let err = max_relative_error(&inputs, &|tape, vars| {
        let mut k = 0;
        let p = enc.params.map(|_| {
            k += 1;
            vars[k - 1]
        });
        let xv = vars[vars.len() - 1];
        let out = enc.forward_tape(tape, &p, xv, 2, 3, None).map_err(|e| match e {
            Error::Tensor(t) => t,
            _ => TensorError::NonFinite("encoder forward"),
        })?;
        weighted_sum(tape, out.output, seed.wrapping_add(1))
    })?;
    Ok(err)
}
