use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

/// Moment buffers and hyperparameters for the Adam update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient before the moment updates.
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TensorError> {
    if params.len() != state.shapes.len() || grads.len() != params.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            left: vec![params.len(), grads.len()],
            right: vec![state.shapes.len()],
        });
    }
    for ((p, g), s) in params.iter().zip(grads).zip(&state.shapes) {
        if p.shape() != s.as_slice() || g.shape() != s.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        let g = grads[i].data();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j] + state.weight_decay * *w;
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::zeros(&[3]);
        let g = Tensor::new(vec![3], vec![0.3, -5.0, 1e-2]).unwrap();
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[g.clone()], &mut st, 1e-3).unwrap();
        for (w, gv) in p.data().iter().zip(g.data()) {
            // -lr * g / (|g| + eps)
            let expect = -1e-3 * gv / (gv.abs() + 1e-8);
            assert!((w - expect).abs() < 1e-18);
            assert!((w + 1e-3 * gv.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn second_step_matches_hand_recurrence() {
        // g1 = 1.0, g2 = 0.5, lr = 0.1:
        // m2 = 0.9*0.1 + 0.1*0.5 = 0.14, mhat = 0.14/0.19
        // v2 = 0.999*0.001 + 0.001*0.25 = 0.001249, vhat = 0.001249/0.001999
        let mut p = Tensor::zeros(&[1]);
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut st, 0.1).unwrap();
        let after_first = p.data()[0];
        adam_step(&mut [&mut p], &[Tensor::scalar(0.5)], &mut st, 0.1).unwrap();
        let delta2 = p.data()[0] - after_first;
        let mhat = 0.14 / 0.19;
        let vhat = 0.001249f64 / 0.001999;
        let expect = -0.1 * mhat / (vhat.sqrt() + 1e-8);
        assert!((delta2 - expect).abs() < 1e-12, "{delta2} vs {expect}");
        // Smaller second gradient shrinks the step.
        assert!(delta2.abs() < after_first.abs());

        // Identical gradients give identical bias-corrected steps.
        let mut q = Tensor::zeros(&[1]);
        let mut st = AdamState::new(&[&q]);
        adam_step(&mut [&mut q], &[Tensor::scalar(2.0)], &mut st, 0.1).unwrap();
        let d1 = q.data()[0];
        adam_step(&mut [&mut q], &[Tensor::scalar(2.0)], &mut st, 0.1).unwrap();
        let d2 = q.data()[0] - d1;
        assert!((d2 / d1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = AdamState::new(&[&p]);
        let err = adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st, 0.1);
        assert!(err.is_err());
    }
}
