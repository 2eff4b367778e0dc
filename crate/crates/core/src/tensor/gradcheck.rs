//! Central finite-difference gradient verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, Var};

/// Perturbation used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Builds a scalar loss from the given parameter leaves.
pub type LossBuilder<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError> + 'a;

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between autodiff and central differences over
/// every entry of every input.
pub fn max_relative_error(inputs: &[Tensor], build: &LossBuilder) -> Result<f64, TensorError> {
    let eval = |xs: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let l = build(&mut tape, &vars)?;
        Ok(tape.value(l).data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let g = grads.wrt(*v);
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + FD_STEP;
            let fp = eval(&xs)?;
            xs[k].data_mut()[i] = orig - FD_STEP;
            let fm = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(fd, g.data()[i]));
        }
    }
    Ok(worst)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape")
}

/// Contracts an arbitrary output with fixed random weights so every entry
/// contributes to the checked gradient.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(tape.value(y).shape(), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type Unary = fn(&mut Tape, Var) -> Result<Var, TensorError>;

fn unary_cases() -> Vec<(&'static str, Vec<usize>, Unary)> {
    vec![
        ("matmul_left", vec![3, 4], |t, x| {
            let w = t.constant(Tensor::from_rows(&[
                vec![0.3, -0.2],
                vec![0.1, 0.5],
                vec![-0.7, 0.4],
                vec![0.2, 0.2],
            ]));
            t.matmul(x, w)
        }),
        ("matmul_right", vec![4, 2], |t, w| {
            let x = t.constant(Tensor::from_rows(&[vec![1.0, 2.0, -1.0, 0.5]]));
            t.matmul(x, w)
        }),
        ("transpose", vec![3, 2], |t, x| t.transpose(x)),
        ("add", vec![2, 3], |t, x| {
            let c = t.constant(Tensor::full(&[2, 3], 0.7));
            t.add(x, c)
        }),
        ("sub", vec![2, 3], |t, x| {
            let c = t.constant(Tensor::full(&[2, 3], 0.7));
            t.sub(c, x)
        }),
        ("mul", vec![2, 3], |t, x| t.mul(x, x)),
        ("add_bias", vec![3], |t, b| {
            let x = t.constant(Tensor::full(&[2, 3], 0.5));
            t.add_bias(x, b)
        }),
        ("scale", vec![2, 2], |t, x| Ok(t.scale(x, -1.7))),
        ("relu", vec![2, 3], |t, x| Ok(t.relu(x))),
        ("log", vec![2, 3], |t, x| {
            let sq = t.mul(x, x)?;
            let c = t.constant(Tensor::full(&[2, 3], 0.1));
            let p = t.add(sq, c)?;
            Ok(t.log_clamped(p, 1e-12))
        }),
        ("softmax", vec![2, 3], |t, x| t.softmax(x, 1)),
        ("softmax_inner_axis", vec![2, 3, 2], |t, x| t.softmax(x, 1)),
        ("grouped_softmax", vec![2, 5], |t, x| t.grouped_softmax(x, &[2, 3])),
        ("layer_norm_input", vec![3, 4], |t, x| {
            let g = t.constant(Tensor::new(vec![4], vec![1.0, 0.5, -1.0, 2.0])?);
            let b = t.constant(Tensor::new(vec![4], vec![0.1, 0.0, 0.3, -0.2])?);
            t.layer_norm(x, g, b)
        }),
        ("layer_norm_gain", vec![4], |t, g| {
            let x = t.constant(Tensor::from_rows(&[
                vec![0.5, -1.0, 2.0, 0.0],
                vec![1.0, 1.5, -0.5, 0.2],
            ]));
            let b = t.constant(Tensor::zeros(&[4]));
            t.layer_norm(x, g, b)
        }),
        ("causal_attention", vec![6, 12], |t, x| t.causal_attention(x, 2, 3, 2)),
        ("sum", vec![2, 3], |t, x| Ok(t.sum(x))),
        ("mean", vec![2, 3], |t, x| Ok(t.mean(x))),
        ("select_concat", vec![2, 3], |t, b| {
            let x = t.constant(Tensor::full(&[4, 3], 0.5));
            let row = t.select_cols(b, 1, 2)?;
            let x2 = t.select_cols(x, 0, 2)?;
            let rr = t.transpose(row)?;
            let m = t.matmul(x2, rr)?;
            t.concat_cols(&[m, x2])
        }),
    ]
}

/// Finite-difference check of every differentiable primitive. Returns the
/// worst relative error per primitive.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, f64)>, TensorError> {
    let mut out = Vec::new();
    for (k, (name, shape, op)) in unary_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let x = random_tensor(&shape, &mut rng);
        let wseed = seed.wrapping_add(1000 + k as u64);
        let err = max_relative_error(&[x], &|t, v| {
            let y = op(t, v[0])?;
            weighted_sum(t, y, wseed)
        })?;
        out.push((name, err));
    }
    Ok(out)
}

/// Finite-difference check of `trials` randomly composed three-op chains.
pub fn random_chain_suite(seed: u64, trials: usize) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let ops: Vec<u32> = (0..3).map(|_| rng.random_range(0..6)).collect();
        let x = random_tensor(&[3, 3], &mut rng);
        let wseed = seed.wrapping_add(trial as u64);
        let err = max_relative_error(&[x], &|t, v| {
            let mut cur = v[0];
            for &op in &ops {
                cur = match op {
                    0 => t.relu(cur),
                    1 => t.softmax(cur, 1)?,
                    2 => {
                        let w = t.constant(Tensor::from_rows(&[
                            vec![0.5, -0.3, 0.2],
                            vec![0.1, 0.9, -0.4],
                            vec![-0.6, 0.2, 0.7],
                        ]));
                        t.matmul(cur, w)?
                    }
                    3 => {
                        let g = t.constant(Tensor::full(&[3], 1.3));
                        let b = t.constant(Tensor::full(&[3], -0.1));
                        t.layer_norm(cur, g, b)?
                    }
                    4 => t.mul(cur, cur)?,
                    _ => t.transpose(cur)?,
                };
            }
            weighted_sum(t, cur, wseed)
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}
