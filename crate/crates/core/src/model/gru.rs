use crate::linalg::sigmoid;

use super::GruParams;

/// Cached activations of one GRU step.
#[derive(Clone, Debug)]
pub struct GruStep {
    pub input: Vec<f64>,
    pub prev: Vec<f64>,
    pub update: Vec<f64>,
    pub reset: Vec<f64>,
    /// `r ⊙ h_{t-1}`
    pub gated_prev: Vec<f64>,
    pub candidate: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl GruStep {
    /// z = σ(W_z v + U_z h + b_z), r = σ(W_r v + U_r h + b_r),
    /// h̃ = tanh(W_h v + U_h (r ⊙ h) + b_h), h' = (1 − z) ⊙ h + z ⊙ h̃.
    pub fn forward(gp: &GruParams, input: &[f64], prev: &[f64]) -> Self {
        let mut update = gp.b_z.clone();
        gp.w_z.mul_vec_add(input, &mut update);
        gp.u_z.mul_vec_add(prev, &mut update);
        update.iter_mut().for_each(|v| *v = sigmoid(*v));

        let mut reset = gp.b_r.clone();
        gp.w_r.mul_vec_add(input, &mut reset);
        gp.u_r.mul_vec_add(prev, &mut reset);
        reset.iter_mut().for_each(|v| *v = sigmoid(*v));

        let gated_prev: Vec<f64> = reset.iter().zip(prev).map(|(r, h)| r * h).collect();
        let mut candidate = gp.b_h.clone();
        gp.w_h.mul_vec_add(input, &mut candidate);
        gp.u_h.mul_vec_add(&gated_prev, &mut candidate);
        candidate.iter_mut().for_each(|v| *v = v.tanh());

        let hidden = prev
            .iter()
            .zip(&update)
            .zip(&candidate)
            .map(|((h, z), c)| (1.0 - z) * h + z * c)
            .collect();
        GruStep {
            input: input.to_vec(),
            prev: prev.to_vec(),
            update,
            reset,
            gated_prev,
            candidate,
            hidden,
        }
    }

    /// Given `dL/dh_t`, accumulates parameter gradients and returns
    /// `(dL/dv_t, dL/dh_{t-1})`.
    pub fn backward(&self, gp: &GruParams, d_hidden: &[f64], grads: &mut GruParams) -> (Vec<f64>, Vec<f64>) {
        let r = d_hidden.len();
        let mut d_input = vec![0.0; self.input.len()];
        let mut d_prev: Vec<f64> = d_hidden.iter().zip(&self.update).map(|(d, z)| d * (1.0 - z)).collect();

        let d_cand_pre: Vec<f64> = (0..r)
            .map(|k| d_hidden[k] * self.update[k] * (1.0 - self.candidate[k] * self.candidate[k]))
            .collect();
        let d_update_pre: Vec<f64> = (0..r)
            .map(|k| {
                let z = self.update[k];
                d_hidden[k] * (self.candidate[k] - self.prev[k]) * z * (1.0 - z)
            })
            .collect();

        grads.w_h.add_outer(&d_cand_pre, &self.input);
        grads.u_h.add_outer(&d_cand_pre, &self.gated_prev);
        add(&mut grads.b_h, &d_cand_pre);
        gp.w_h.t_mul_vec_add(&d_cand_pre, &mut d_input);
        let mut d_gated = vec![0.0; r];
        gp.u_h.t_mul_vec_add(&d_cand_pre, &mut d_gated);

        let d_reset_pre: Vec<f64> = (0..r)
            .map(|k| {
                let rr = self.reset[k];
                d_gated[k] * self.prev[k] * rr * (1.0 - rr)
            })
            .collect();
        for k in 0..r {
            d_prev[k] += d_gated[k] * self.reset[k];
        }

        grads.w_z.add_outer(&d_update_pre, &self.input);
        grads.u_z.add_outer(&d_update_pre, &self.prev);
        add(&mut grads.b_z, &d_update_pre);
        gp.w_z.t_mul_vec_add(&d_update_pre, &mut d_input);
        gp.u_z.t_mul_vec_add(&d_update_pre, &mut d_prev);

        grads.w_r.add_outer(&d_reset_pre, &self.input);
        grads.u_r.add_outer(&d_reset_pre, &self.prev);
        add(&mut grads.b_r, &d_reset_pre);
        gp.w_r.t_mul_vec_add(&d_reset_pre, &mut d_input);
        gp.u_r.t_mul_vec_add(&d_reset_pre, &mut d_prev);

        (d_input, d_prev)
    }
}

fn add(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Runs the recurrence from `h_0 = 0` and returns `h_1..h_T`.
pub fn gru_forward(inputs: &[Vec<f64>], gp: &GruParams) -> Vec<Vec<f64>> {
    let mut h = vec![0.0; gp.hidden()];
    inputs
        .iter()
        .map(|v| {
            h = GruStep::forward(gp, v, &h).hidden;
            h.clone()
        })
        .collect()
}
