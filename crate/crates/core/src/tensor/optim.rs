use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adaptive moments with decoupled weight decay.
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<S = f32> {
    pub step_count: u64,
    pub first_moment: Vec<Vec<S>>,
    pub second_moment: Vec<Vec<S>>,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![S::zero(); t.len()]).collect();
        OptimState {
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !(weight_decay >= 0.0) {
            return Err(Error::Precondition(format!(
                "learning rate must be > 0 and weight decay ≥ 0 (got {learning_rate}, {weight_decay})"
            )));
        }
        Ok(Optimizer {
            kind,
            learning_rate,
            weight_decay,
        })
    }

    /// Applies one update using the gradients stored on each parameter
    /// tensor. Parameters without a gradient buffer are treated as having a
    /// zero gradient.
    pub fn step<S: Scalar>(&self, params: &mut ParamStore<S>, state: &mut OptimState<S>) -> Result<()> {
        if state.first_moment.len() != params.len() {
            return Err(Error::dim(&[params.len()], &[state.first_moment.len()], "optimizer state"));
        }
        for (name, t) in params.iter() {
            if let Some(g) = t.grad() {
                if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Training(format!(
                        "non-finite gradient in parameter `{name}` at index {pos}"
                    )));
                }
            }
        }
        state.step_count += 1;
        let lr = S::lit(self.learning_rate);
        let wd = S::lit(self.weight_decay);
        for (p, t) in params.tensors_mut().iter_mut().enumerate() {
            let grad: Vec<S> = t.grad().map(<[S]>::to_vec).unwrap_or_else(|| vec![S::zero(); t.len()]);
            if grad.len() != state.first_moment[p].len() {
                return Err(Error::dim(&[grad.len()], &[state.first_moment[p].len()], "moment buffer"));
            }
            let data = t.data_mut();
            match self.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let b1 = S::lit(beta1);
                    let b2 = S::lit(beta2);
                    let bc1 = S::lit(1.0 - beta1.powi(state.step_count as i32));
                    let bc2 = S::lit(1.0 - beta2.powi(state.step_count as i32));
                    let e = S::lit(eps);
                    let m = &mut state.first_moment[p];
                    let v = &mut state.second_moment[p];
                    for i in 0..data.len() {
                        m[i] = b1 * m[i] + (S::one() - b1) * grad[i];
                        v[i] = b2 * v[i] + (S::one() - b2) * grad[i] * grad[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        data[i] = data[i] - lr * (m_hat / (v_hat.sqrt() + e)) - lr * wd * data[i];
                    }
                }
                OptimizerKind::Sgd => {
                    for i in 0..data.len() {
                        data[i] = data[i] - lr * grad[i] - lr * wd * data[i];
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut Grads<S>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().as_f64();
    if norm > max_norm && norm.is_finite() {
        grads.scale(S::lit(max_norm / norm));
    }
    norm
}
