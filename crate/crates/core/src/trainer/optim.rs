use serde::{Deserialize, Serialize};

use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Gradient-descent state. Adam keeps first and second moments shaped like
/// the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub t: u64,
    pub m: Option<ModelParams>,
    pub v: Option<ModelParams>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, like: &ModelParams) -> Self {
        let moments = || match kind {
            OptimizerKind::Sgd => None,
            OptimizerKind::Adam => Some(ModelParams::zeros(like.dims)),
        };
        Optimizer {
            kind,
            t: 0,
            m: moments(),
            v: moments(),
        }
    }

    /// Applies one descent step of `grads` with learning rate `lr`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.t += 1;
        match (self.m.as_mut(), self.v.as_mut()) {
            (Some(m), Some(v)) => {
                let b1t = 1.0 - BETA1.powi(self.t as i32);
                let b2t = 1.0 - BETA2.powi(self.t as i32);
                for (((p, g), m), v) in params
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(m.tensors_mut())
                    .zip(v.tensors_mut())
                {
                    for i in 0..p.data.len() {
                        let gi = g.data[i];
                        m.data[i] = BETA1 * m.data[i] + (1.0 - BETA1) * gi;
                        v.data[i] = BETA2 * v.data[i] + (1.0 - BETA2) * gi * gi;
                        let mh = m.data[i] / b1t;
                        let vh = v.data[i] / b2t;
                        p.data[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
            _ => params.add_scaled(grads, -lr),
        }
    }
}

pub fn grad_norm(grads: &ModelParams) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    fn dims() -> ModelDims {
        ModelDims {
            layers: 1,
            d_model: 2,
            heads: 1,
            d_ff: 2,
            text_vocab: 3,
            kinds: 1,
            colors: 1,
            glyphs: 1,
            max_positions: 2,
        }
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = ModelParams::zeros(dims());
        let mut g = ModelParams::zeros(dims());
        g.b_out.fill(2.0);
        Optimizer::new(OptimizerKind::Sgd, &p).step(&mut p, &g, 0.1);
        assert!(p.b_out.iter().all(|x| (*x + 0.2).abs() < 1e-15));
    }

    #[test]
    fn first_adam_step_has_learning_rate_magnitude() {
        let mut p = ModelParams::zeros(dims());
        let mut g = ModelParams::zeros(dims());
        g.b_out.fill(-5.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, &p);
        opt.step(&mut p, &g, 0.01);
        assert!(p.b_out.iter().all(|x| (*x - 0.01).abs() < 1e-9));
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = ModelParams::zeros(dims());
        g.b_out.fill(4.0);
        let before = clip_grad_norm(&mut g, 1.0);
        assert!((before - 48f64.sqrt()).abs() < 1e-12);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-12);
    }
}
