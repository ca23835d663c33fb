use serde::{Deserialize, Serialize};

use super::Params;

pub const DEFAULT_RHO: f64 = 0.95;
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Adadelta with per-parameter running averages of squared gradients and
/// squared updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adadelta {
    pub rho: f64,
    pub epsilon: f64,
    pub sq_grad: Params,
    pub sq_update: Params,
}

impl Adadelta {
    pub fn new(params: &Params, rho: f64, epsilon: f64) -> Self {
        Adadelta {
            rho,
            epsilon,
            sq_grad: params.zeros_like(),
            sq_update: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        let (rho, eps) = (self.rho, self.epsilon);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.sq_grad.tensors_mut())
            .zip(self.sq_update.tensors_mut());
        for (((p, g), eg), ed) in tensors {
            for k in 0..p.data.len() {
                let grad = g.data[k];
                let acc_g = rho * eg.data[k] + (1.0 - rho) * grad * grad;
                let delta = -((ed.data[k] + eps).sqrt() / (acc_g + eps).sqrt()) * grad;
                eg.data[k] = acc_g;
                ed.data[k] = rho * ed.data[k] + (1.0 - rho) * delta * delta;
                p.data[k] += delta;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    fn params() -> Params {
        Params::zeros(&ModelDims {
            rows: 3,
            embedding: 2,
            attention: Some(2),
            hidden: 2,
            outputs: 3,
        })
    }

    #[test]
    fn first_step_formula() {
        let mut p = params();
        let mut g = p.zeros_like();
        g.output.w.set(1, 0, 0.5);
        g.embeddings.set(2, 1, -3.0);
        let mut opt = Adadelta::new(&p, DEFAULT_RHO, DEFAULT_EPSILON);
        opt.step(&mut p, &g);
        let expect = |grad: f64| -(1e-6f64).sqrt() / (0.05 * grad * grad + 1e-6).sqrt() * grad;
        assert!((p.output.w.get(1, 0) - expect(0.5)).abs() < 1e-15);
        assert!((p.embeddings.get(2, 1) - expect(-3.0)).abs() < 1e-15);
        assert_eq!(p.output.w.get(0, 0), 0.0);
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = params();
        p.output.b[0] = 1.5;
        let before = p.clone();
        let mut opt = Adadelta::new(&p, DEFAULT_RHO, DEFAULT_EPSILON);
        for _ in 0..5 {
            opt.step(&mut p, &before.zeros_like());
        }
        assert_eq!(p, before);
    }

    #[test]
    fn update_size_is_nearly_scale_free() {
        let run = |scale: f64| {
            let mut p = params();
            let mut g = p.zeros_like();
            g.output.b[2] = scale;
            let mut opt = Adadelta::new(&p, DEFAULT_RHO, DEFAULT_EPSILON);
            for _ in 0..10 {
                opt.step(&mut p, &g);
            }
            p.output.b[2].abs()
        };
        let (small, large) = (run(1.0), run(10.0));
        assert!((large - small).abs() / small < 0.05, "{small} vs {large}");
    }
}
