use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ehr::Task;
use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};
use crate::ontology::AncestorMap;

use super::attention::LeafForward;
use super::gru::GruStep;
use super::output::{predict, step_bce, step_logit_grad};
use super::{Params, TensorKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Target {
    /// Sorted label groups of visits `2..=T`, one set per prediction step.
    Sequential(Vec<Vec<usize>>),
    /// Outcome predicted once, after the last visit.
    Binary(bool),
}

/// One patient in model coordinates: each visit lists row indices of the
/// input map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub visits: Vec<Vec<usize>>,
    pub target: Target,
}

const POSITIVE: [usize; 1] = [0];

impl Example {
    pub fn new(visits: Vec<Vec<usize>>, target: Target) -> Result<Self> {
        if visits.iter().any(Vec::is_empty) {
            return Err(Error::invalid("empty visit"));
        }
        match &target {
            Target::Sequential(labels) => {
                if visits.len() < 2 || labels.len() != visits.len() - 1 {
                    return Err(Error::invalid(format!(
                        "{} visits need {} label sets, got {}",
                        visits.len(),
                        visits.len().saturating_sub(1),
                        labels.len()
                    )));
                }
            }
            Target::Binary(_) if visits.is_empty() => return Err(Error::invalid("no visits")),
            Target::Binary(_) => {}
        }
        Ok(Example { visits, target })
    }

    pub fn task(&self) -> Task {
        match self.target {
            Target::Sequential(_) => Task::Sequential,
            Target::Binary(_) => Task::Binary,
        }
    }

    /// Visits fed to the GRU.
    pub fn inputs(&self) -> &[Vec<usize>] {
        match self.target {
            Target::Sequential(_) => &self.visits[..self.visits.len() - 1],
            Target::Binary(_) => &self.visits,
        }
    }

    /// `(gru step, positive outputs)` for every prediction.
    pub fn predictions(&self) -> Vec<(usize, &[usize])> {
        match &self.target {
            Target::Sequential(labels) => labels.iter().map(Vec::as_slice).enumerate().collect(),
            Target::Binary(flag) => {
                let labels: &[usize] = if *flag { &POSITIVE } else { &[] };
                vec![(self.visits.len() - 1, labels)]
            }
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Default)]
pub struct StepOptions {
    pub dropout: f64,
    pub l2: f64,
}

/// Source of final representations indexed by input row.
trait Representations {
    fn rep(&self, row: usize) -> &[f64];
}

impl Representations for Matrix {
    fn rep(&self, row: usize) -> &[f64] {
        self.row(row)
    }
}

/// Final representations of only the rows a batch touches.
struct BatchReps {
    slot: Vec<usize>,
    rows: Vec<usize>,
    forwards: Vec<LeafForward>,
}

impl BatchReps {
    fn build<'a>(params: &Params, amap: &AncestorMap, examples: impl IntoIterator<Item = &'a Example>) -> Self {
        let mut slot = vec![usize::MAX; amap.len()];
        let mut rows = Vec::new();
        for ex in examples {
            for &c in ex.inputs().iter().flatten() {
                if slot[c] == usize::MAX {
                    slot[c] = rows.len();
                    rows.push(c);
                }
            }
        }
        let forwards = rows
            .iter()
            .map(|&c| LeafForward::compute(params, amap.get(c)))
            .collect();
        BatchReps { slot, rows, forwards }
    }
}

impl Representations for BatchReps {
    fn rep(&self, row: usize) -> &[f64] {
        &self.forwards[self.slot[row]].representation
    }
}

/// `v_t = tanh(Σ g_i)` over the codes of one visit; `g` holds one row per code.
pub fn visit_representation(codes: &[usize], g: &Matrix) -> Vec<f64> {
    visit_vector(codes, g)
}

fn visit_vector(codes: &[usize], reps: &impl Representations) -> Vec<f64> {
    let mut v = reps.rep(codes[0]).to_vec();
    for &c in &codes[1..] {
        axpy(1.0, reps.rep(c), &mut v);
    }
    v.iter_mut().for_each(|x| *x = x.tanh());
    v
}

struct Trace {
    visits: Vec<Vec<f64>>,
    steps: Vec<GruStep>,
    /// Dropout mask per prediction, empty when dropout is off.
    masks: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    loss: f64,
}

fn forward<R: Rng>(
    params: &Params,
    reps: &impl Representations,
    ex: &Example,
    mut dropout: Option<(f64, &mut R)>,
) -> Trace {
    let task = ex.task();
    let visits: Vec<Vec<f64>> = ex.inputs().iter().map(|codes| visit_vector(codes, reps)).collect();
    let mut steps: Vec<GruStep> = Vec::with_capacity(visits.len());
    let mut h = vec![0.0; params.gru.hidden()];
    for v in &visits {
        let step = GruStep::forward(&params.gru, v, &h);
        h.clone_from(&step.hidden);
        steps.push(step);
    }
    let preds = ex.predictions();
    let mut masks = Vec::new();
    let mut probs = Vec::with_capacity(preds.len());
    let mut total = 0.0;
    for &(t, labels) in &preds {
        let hidden = &steps[t].hidden;
        let p = match dropout.as_mut() {
            Some((rate, rng)) => {
                let keep = 1.0 / (1.0 - *rate);
                let mask: Vec<f64> = hidden
                    .iter()
                    .map(|_| if rng.gen::<f64>() < *rate { 0.0 } else { keep })
                    .collect();
                let dropped: Vec<f64> = hidden.iter().zip(&mask).map(|(h, m)| h * m).collect();
                masks.push(mask);
                predict(&dropped, &params.output, task)
            }
            None => predict(hidden, &params.output, task),
        };
        total += step_bce(&p, labels);
        probs.push(p);
    }
    Trace {
        visits,
        steps,
        masks,
        probs,
        loss: total / preds.len() as f64,
    }
}

/// Backpropagates `scale · loss(ex)` into `grads` and the per-slot
/// representation gradients `d_reps`.
fn backward(
    params: &Params,
    reps: &BatchReps,
    ex: &Example,
    trace: &Trace,
    scale: f64,
    grads: &mut Params,
    d_reps: &mut Matrix,
) {
    let task = ex.task();
    let preds = ex.predictions();
    let step_scale = scale / preds.len() as f64;
    let r = params.gru.hidden();
    let mut d_from_output: Vec<Option<Vec<f64>>> = vec![None; trace.steps.len()];
    for (k, &(t, labels)) in preds.iter().enumerate() {
        let dz = step_logit_grad(&trace.probs[k], labels, task, step_scale);
        let hidden = &trace.steps[t].hidden;
        let mut d_h = vec![0.0; r];
        params.output.w.t_mul_vec_add(&dz, &mut d_h);
        match trace.masks.get(k) {
            Some(mask) => {
                let dropped: Vec<f64> = hidden.iter().zip(mask).map(|(h, m)| h * m).collect();
                grads.output.w.add_outer(&dz, &dropped);
                d_h.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
            }
            None => grads.output.w.add_outer(&dz, hidden),
        }
        axpy(1.0, &dz, &mut grads.output.b);
        d_from_output[t] = Some(d_h);
    }

    let mut d_next = vec![0.0; r];
    for t in (0..trace.steps.len()).rev() {
        if let Some(d) = &d_from_output[t] {
            axpy(1.0, d, &mut d_next);
        }
        let (d_v, d_prev) = trace.steps[t].backward(&params.gru, &d_next, &mut grads.gru);
        let d_pre: Vec<f64> = d_v
            .iter()
            .zip(&trace.visits[t])
            .map(|(d, v)| d * (1.0 - v * v))
            .collect();
        for &c in &ex.inputs()[t] {
            axpy(1.0, &d_pre, d_reps.row_mut(reps.slot[c]));
        }
        d_next = d_prev;
    }
}

/// Mean loss over `batch` (without the penalty) and the gradient of
/// `mean loss + l2 · Σ‖W‖²`. Dropout masks are drawn from `rng`.
pub fn batch_gradient<R: Rng>(
    params: &Params,
    amap: &AncestorMap,
    batch: &[&Example],
    opts: &StepOptions,
    rng: &mut R,
) -> Result<(f64, Params)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let reps = BatchReps::build(params, amap, batch.iter().copied());
    let mut grads = params.zeros_like();
    let mut d_reps = Matrix::zeros(reps.rows.len(), params.embeddings.cols());
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for ex in batch {
        let trace = if opts.dropout > 0.0 {
            forward(params, &reps, ex, Some((opts.dropout, &mut *rng)))
        } else {
            forward::<R>(params, &reps, ex, None)
        };
        total += trace.loss;
        backward(params, &reps, ex, &trace, scale, &mut grads, &mut d_reps);
    }
    for (s, &row) in reps.rows.iter().enumerate() {
        reps.forwards[s].backward(params, amap.get(row), d_reps.row(s), &mut grads);
    }
    if opts.l2 != 0.0 {
        for (g, p) in grads.tensors_mut().into_iter().zip(params.tensors()) {
            if g.kind == TensorKind::Weight {
                axpy(2.0 * opts.l2, p.data, g.data);
            }
        }
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    Ok((total * scale, grads))
}

/// Mean dropout-free loss over `examples`, without the penalty.
pub fn batch_loss(params: &Params, amap: &AncestorMap, examples: &[Example]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let reps = BatchReps::build(params, amap, examples);
    let total: f64 = examples
        .iter()
        .map(|ex| forward::<rand_chacha::ChaCha8Rng>(params, &reps, ex, None).loss)
        .sum();
    total / examples.len() as f64
}

/// Dropout-free loss of one patient.
pub fn example_loss(params: &Params, amap: &AncestorMap, ex: &Example) -> f64 {
    batch_loss(params, amap, std::slice::from_ref(ex))
}

/// Output probabilities at every prediction step, given the full
/// representation table (`g` row `i` is the representation of input `i`).
pub fn predict_example(params: &Params, g: &Matrix, ex: &Example) -> Vec<Vec<f64>> {
    forward::<rand_chacha::ChaCha8Rng>(params, g, ex, None).probs
}
