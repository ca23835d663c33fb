use crate::linalg::{axpy, dot, softmax, Matrix};
use crate::ontology::{AncestorMap, ConceptId};

use super::{AttentionParams, Params};

/// `f(e_i, e_j) = u_aᵀ tanh(W_a [e_i; e_j] + b_a)` with the child first.
pub fn compatibility(child: &[f64], ancestor: &[f64], ap: &AttentionParams) -> f64 {
    let m = child.len();
    let mut total = 0.0;
    for k in 0..ap.hidden() {
        let row = ap.w.row(k);
        let pre = dot(&row[..m], child) + dot(&row[m..], ancestor) + ap.b[k];
        total += ap.u[k] * pre.tanh();
    }
    total
}

/// Forward intermediates for one code's final representation.
#[derive(Clone, Debug)]
pub struct LeafForward {
    /// `α` over the support list, self first.
    pub weights: Vec<f64>,
    /// `tanh(W_a [e_i; e_j] + b_a)` per support entry, `|A(i)| × l`.
    pub hidden: Vec<Vec<f64>>,
    /// `g_i`.
    pub representation: Vec<f64>,
}

impl LeafForward {
    pub fn compute(params: &Params, support: &[ConceptId]) -> Self {
        let e = &params.embeddings;
        let m = e.cols();
        let child = e.row(support[0].index());
        let Some(ap) = params.attention.as_ref() else {
            debug_assert_eq!(support.len(), 1, "support beyond self needs attention parameters");
            return LeafForward {
                weights: vec![1.0],
                hidden: Vec::new(),
                representation: child.to_vec(),
            };
        };
        let l = ap.hidden();
        // The child half of W_a [e_i; e_j] + b_a is shared by every ancestor.
        let mut child_part = ap.b.clone();
        for (k, cp) in child_part.iter_mut().enumerate() {
            *cp += dot(&ap.w.row(k)[..m], child);
        }
        let mut hidden = Vec::with_capacity(support.len());
        let mut scores = Vec::with_capacity(support.len());
        for &j in support {
            let anc = e.row(j.index());
            let h: Vec<f64> = (0..l)
                .map(|k| (child_part[k] + dot(&ap.w.row(k)[m..], anc)).tanh())
                .collect();
            scores.push(dot(&ap.u, &h));
            hidden.push(h);
        }
        let weights = softmax(&scores);
        let mut representation = vec![0.0; m];
        for (&j, &a) in support.iter().zip(&weights) {
            axpy(a, e.row(j.index()), &mut representation);
        }
        LeafForward {
            weights,
            hidden,
            representation,
        }
    }

    /// Accumulates the gradients of `grad_rep · g_i` into `grads`.
    pub fn backward(&self, params: &Params, support: &[ConceptId], grad_rep: &[f64], grads: &mut Params) {
        let e = &params.embeddings;
        let m = e.cols();
        let i = support[0].index();
        let (Some(ap), Some(gap)) = (params.attention.as_ref(), grads.attention.as_mut()) else {
            axpy(1.0, grad_rep, grads.embeddings.row_mut(i));
            return;
        };
        // g = Σ α_j e_j
        let d_alpha: Vec<f64> = support.iter().map(|j| dot(grad_rep, e.row(j.index()))).collect();
        for (&j, &a) in support.iter().zip(&self.weights) {
            axpy(a, grad_rep, grads.embeddings.row_mut(j.index()));
        }
        // softmax
        let mean: f64 = self.weights.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
        let mut d_child = vec![0.0; m];
        let mut d_pre = vec![0.0; ap.hidden()];
        for (idx, &j) in support.iter().enumerate() {
            let d_score = self.weights[idx] * (d_alpha[idx] - mean);
            if d_score == 0.0 {
                continue;
            }
            let h = &self.hidden[idx];
            axpy(d_score, h, &mut gap.u);
            for (k, dp) in d_pre.iter_mut().enumerate() {
                *dp = d_score * ap.u[k] * (1.0 - h[k] * h[k]);
            }
            axpy(1.0, &d_pre, &mut gap.b);
            let anc = e.row(j.index());
            let d_anc = grads.embeddings.row_mut(j.index());
            for (k, &dp) in d_pre.iter().enumerate() {
                let (w_child, w_anc) = ap.w.row(k).split_at(m);
                let gw = gap.w.row_mut(k);
                axpy(dp, e.row(i), &mut gw[..m]);
                axpy(dp, anc, &mut gw[m..]);
                axpy(dp, w_child, &mut d_child);
                axpy(dp, w_anc, d_anc);
            }
        }
        axpy(1.0, &d_child, grads.embeddings.row_mut(i));
    }
}

/// Softmax of the compatibility scores over `A(leaf)`.
pub fn attention_weights(leaf: usize, params: &Params, amap: &AncestorMap) -> Vec<f64> {
    LeafForward::compute(params, amap.get(leaf)).weights
}

/// `g_i = Σ_{j∈A(i)} α_ij e_j`.
pub fn final_representation(leaf: usize, params: &Params, amap: &AncestorMap) -> Vec<f64> {
    LeafForward::compute(params, amap.get(leaf)).representation
}

/// All final representations; row `i` is `g_i` (the transpose of `G`).
pub fn embedding_matrix(params: &Params, amap: &AncestorMap) -> Matrix {
    let m = params.embeddings.cols();
    let mut out = Matrix::zeros(amap.len(), m);
    for (i, support) in amap.iter().enumerate() {
        out.row_mut(i)
            .copy_from_slice(&LeafForward::compute(params, support).representation);
    }
    out
}
