use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Adam moments and schedule for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: usize,
    pub m: Matrix,
    pub v: Matrix,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    /// Linear warm-up length in steps; 0 disables warm-up.
    pub warmup_steps: usize,
}

impl AdamState {
    pub fn new(shape: (usize, usize), base_lr: f64, warmup_steps: usize) -> Self {
        Self {
            step: 0,
            m: Matrix::zeros(shape.0, shape.1),
            v: Matrix::zeros(shape.0, shape.1),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_lr,
            warmup_steps,
        }
    }

    /// Learning rate applied on update number `step` (1-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        warmup_lr(self.base_lr, self.warmup_steps, step)
    }
}

/// `base_lr · step / warmup_steps`, clamped to `base_lr`.
pub fn warmup_lr(base_lr: f64, warmup_steps: usize, step: usize) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        base_lr
    } else {
        base_lr * step as f64 / warmup_steps as f64
    }
}

/// One bias-corrected Adam update. Returns the learning rate used.
pub fn adam_step(param: &mut Matrix, grad: &Matrix, state: &mut AdamState) -> Result<f64> {
    for (what, other) in [("grad", grad), ("m", &state.m), ("v", &state.v)] {
        if other.shape() != param.shape() {
            return Err(Error::Dimension {
                op: if what == "grad" { "adam_step" } else { "adam_state" },
                left: param.shape(),
                right: other.shape(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let lr = state.lr_at(state.step);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let p = param.data_mut().iter_mut();
    let m = state.m.data_mut().iter_mut();
    let v = state.v.data_mut().iter_mut();
    for (((p, m), v), &g) in p.zip(m).zip(v).zip(grad.data()) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(lr)
}
