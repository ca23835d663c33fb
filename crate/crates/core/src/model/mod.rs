//! The trainable network: attention-combined code representations, visit
//! embedding, a single-layer GRU and the prediction head, with hand-derived
//! gradients.

mod adadelta;
mod attention;
mod gru;
mod network;
mod output;

pub use adadelta::Adadelta;
pub use attention::{
    attention_weights, compatibility, embedding_matrix, final_representation, LeafForward,
};
pub use gru::{gru_forward, GruStep};
pub use network::{
    batch_gradient, batch_loss, example_loss, predict_example, visit_representation, Example,
    StepOptions, Target,
};
pub use output::{loss, predict, PROB_CLAMP};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ehr::Task;
use crate::linalg::Matrix;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Rows of the basic embedding table (`|D|`, or the vocabulary size).
    pub rows: usize,
    /// Embedding size `m`.
    pub embedding: usize,
    /// Attention MLP hidden size `l`; `None` for a plain embedding lookup.
    pub attention: Option<usize>,
    /// GRU hidden size `r`.
    pub hidden: usize,
    /// Output size: label groups for the sequential task, 1 for binary.
    pub outputs: usize,
}

impl ModelDims {
    pub fn output_size(task: Task, num_groups: usize) -> usize {
        match task {
            Task::Sequential => num_groups,
            Task::Binary => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    /// `W_a`, `l × 2m`; the first `m` columns multiply the child embedding.
    pub w: Matrix,
    pub b: Vec<f64>,
    pub u: Vec<f64>,
}

impl AttentionParams {
    pub fn hidden(&self) -> usize {
        self.b.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_z: Matrix,
    pub u_z: Matrix,
    pub b_z: Vec<f64>,
    pub w_r: Matrix,
    pub u_r: Matrix,
    pub b_r: Vec<f64>,
    pub w_h: Matrix,
    pub u_h: Matrix,
    pub b_h: Vec<f64>,
}

impl GruParams {
    pub fn hidden(&self) -> usize {
        self.b_z.len()
    }

    pub fn input(&self) -> usize {
        self.w_z.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputParams {
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// How a tensor is treated by the L2 penalty.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Embedding,
    /// Non-recurrent weight matrix; penalized.
    Weight,
    /// GRU weights; never penalized.
    Recurrent,
    Bias,
}

pub struct Tensor<'a> {
    pub name: &'static str,
    pub kind: TensorKind,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: &'static str,
    pub kind: TensorKind,
    pub data: &'a mut [f64],
}

/// Every trainable array of the model. Gradients and optimizer accumulators
/// reuse the same layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub embeddings: Matrix,
    pub attention: Option<AttentionParams>,
    pub gru: GruParams,
    pub output: OutputParams,
}

macro_rules! tensor_list {
    ($self:ident, $ctor:ident, $as:ident, $($amp:tt)+) => {{
        use TensorKind::*;
        let mut out = vec![$ctor { name: "embeddings", kind: Embedding, data: $self.embeddings.$as() }];
        if let Some(att) = $($amp)+ $self.attention {
            out.push($ctor { name: "attention.w", kind: Weight, data: att.w.$as() });
            out.push($ctor { name: "attention.b", kind: Bias, data: $($amp)+ att.b[..] });
            out.push($ctor { name: "attention.u", kind: Weight, data: $($amp)+ att.u[..] });
        }
        let g = $($amp)+ $self.gru;
        out.push($ctor { name: "gru.w_z", kind: Recurrent, data: g.w_z.$as() });
        out.push($ctor { name: "gru.u_z", kind: Recurrent, data: g.u_z.$as() });
        out.push($ctor { name: "gru.b_z", kind: Bias, data: $($amp)+ g.b_z[..] });
        out.push($ctor { name: "gru.w_r", kind: Recurrent, data: g.w_r.$as() });
        out.push($ctor { name: "gru.u_r", kind: Recurrent, data: g.u_r.$as() });
        out.push($ctor { name: "gru.b_r", kind: Bias, data: $($amp)+ g.b_r[..] });
        out.push($ctor { name: "gru.w_h", kind: Recurrent, data: g.w_h.$as() });
        out.push($ctor { name: "gru.u_h", kind: Recurrent, data: g.u_h.$as() });
        out.push($ctor { name: "gru.b_h", kind: Bias, data: $($amp)+ g.b_h[..] });
        out.push($ctor { name: "output.w", kind: Weight, data: $self.output.w.$as() });
        out.push($ctor { name: "output.b", kind: Bias, data: $($amp)+ $self.output.b[..] });
        out
    }};
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
}

impl Params {
    pub fn zeros(dims: &ModelDims) -> Self {
        let (m, r) = (dims.embedding, dims.hidden);
        Params {
            embeddings: Matrix::zeros(dims.rows, m),
            attention: dims.attention.map(|l| AttentionParams {
                w: Matrix::zeros(l, 2 * m),
                b: vec![0.0; l],
                u: vec![0.0; l],
            }),
            gru: GruParams {
                w_z: Matrix::zeros(r, m),
                u_z: Matrix::zeros(r, r),
                b_z: vec![0.0; r],
                w_r: Matrix::zeros(r, m),
                u_r: Matrix::zeros(r, r),
                b_r: vec![0.0; r],
                w_h: Matrix::zeros(r, m),
                u_h: Matrix::zeros(r, r),
                b_h: vec![0.0; r],
            },
            output: OutputParams {
                w: Matrix::zeros(dims.outputs, r),
                b: vec![0.0; dims.outputs],
            },
        }
    }

    /// Glorot-uniform matrices and zero biases.
    pub fn random(dims: &ModelDims, rng: &mut impl Rng) -> Self {
        let (m, r) = (dims.embedding, dims.hidden);
        let mut p = Params::zeros(dims);
        p.embeddings = xavier(dims.rows, m, rng);
        if let Some(att) = &mut p.attention {
            let l = att.hidden();
            att.w = xavier(l, 2 * m, rng);
            att.u = xavier(1, l, rng).as_slice().to_vec();
        }
        let g = &mut p.gru;
        g.w_z = xavier(r, m, rng);
        g.u_z = xavier(r, r, rng);
        g.w_r = xavier(r, m, rng);
        g.u_r = xavier(r, r, rng);
        g.w_h = xavier(r, m, rng);
        g.u_h = xavier(r, r, rng);
        p.output.w = xavier(dims.outputs, r, rng);
        p
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            rows: self.embeddings.rows(),
            embedding: self.embeddings.cols(),
            attention: self.attention.as_ref().map(AttentionParams::hidden),
            hidden: self.gru.hidden(),
            outputs: self.output.b.len(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Params::zeros(&self.dims())
    }

    pub fn tensors(&self) -> Vec<Tensor<'_>> {
        tensor_list!(self, Tensor, as_slice, &)
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        tensor_list!(self, TensorMut, as_mut_slice, &mut)
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `Σ‖W‖²` over the penalized weight tensors.
    pub fn l2_norm_sq(&self) -> f64 {
        self.tensors()
            .iter()
            .filter(|t| t.kind == TensorKind::Weight)
            .map(|t| t.data.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors()
            .into_iter()
            .find(|t| t.data.iter().any(|v| !v.is_finite()))
            .map(|t| t.name)
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (t, o) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in t.data.iter_mut().zip(o.data) {
                *a += b;
            }
        }
    }
}

/// Parameters plus optimizer state: everything a checkpoint must restore.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub params: Params,
    pub optimizer: Adadelta,
}

impl ModelState {
    pub fn new(params: Params) -> Self {
        let optimizer = Adadelta::new(&params, adadelta::DEFAULT_RHO, adadelta::DEFAULT_EPSILON);
        ModelState { params, optimizer }
    }

    pub fn step(&mut self, grads: &Params) {
        self.optimizer.step(&mut self.params, grads);
    }
}
