//! GloVe fitting of basic embeddings from a co-occurrence matrix.
//!
//! Each node has a single vector `e_i` and bias `b_i`; the loss is
//! `J = Σ_{i≠j} f(M_ij) (e_iᵀe_j + b_i + b_j − log M_ij)²` over stored
//! entries, minimized with per-parameter AdaGrad.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cooccurrence::SparseCooccurrence;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

/// GloVe weighting `(x / x_max)^alpha`, capped at 1.
pub fn glove_weight(x: f64, x_max: f64, alpha: f64) -> f64 {
    if x < x_max {
        (x / x_max).powf(alpha)
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasicEmbeddings {
    pub vectors: Matrix,
    pub biases: Vec<f64>,
}

impl BasicEmbeddings {
    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    /// `name<TAB>v1<TAB>...<TAB>vm` per row.
    pub fn to_tsv(&self, names: &[String]) -> String {
        let mut out = String::new();
        for (i, name) in names.iter().enumerate().take(self.len()) {
            out.push_str(name);
            for v in self.vectors.row(i) {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GloveConfig {
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub x_max: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for GloveConfig {
    fn default() -> Self {
        GloveConfig {
            dim: 100,
            epochs: 50,
            learning_rate: 0.05,
            x_max: 100.0,
            alpha: 0.75,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GloveFit {
    pub embeddings: BasicEmbeddings,
    /// `losses[0]` is the loss at initialization, `losses[e]` after epoch `e`.
    pub losses: Vec<f64>,
}

/// Uniform `[-0.5/m, 0.5/m]` initialization.
pub fn glove_init(num_nodes: usize, dim: usize, seed: u64) -> BasicEmbeddings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 0.5 / dim as f64;
    let vectors = Matrix::from_fn(num_nodes, dim, |_, _| rng.gen_range(-half..=half));
    let biases = (0..num_nodes).map(|_| rng.gen_range(-half..=half)).collect();
    BasicEmbeddings { vectors, biases }
}

/// The loss summed over ordered pairs, i.e. twice the stored-entry sum.
pub fn glove_loss(m: &SparseCooccurrence, emb: &BasicEmbeddings, x_max: f64, alpha: f64) -> f64 {
    let mut total = 0.0;
    for (i, j, x) in m.iter_upper() {
        let diff = dot(emb.vectors.row(i), emb.vectors.row(j)) + emb.biases[i] + emb.biases[j]
            - x.ln();
        total += glove_weight(x, x_max, alpha) * diff * diff;
    }
    2.0 * total
}

pub fn glove_fit(m: &SparseCooccurrence, config: &GloveConfig) -> Result<GloveFit> {
    if m.is_empty() {
        return Err(Error::invalid("co-occurrence matrix has no entries"));
    }
    if config.dim == 0 {
        return Err(Error::invalid("embedding dimension must be at least 1"));
    }
    let mut emb = glove_init(m.dim(), config.dim, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let entries: Vec<(usize, usize, f64, f64)> = m
        .iter_upper()
        .map(|(i, j, x)| (i, j, x.ln(), glove_weight(x, config.x_max, config.alpha)))
        .collect();
    let mut order: Vec<usize> = (0..entries.len()).collect();
    let mut sq_vec = Matrix::from_vec(m.dim(), config.dim, vec![1.0; m.dim() * config.dim]);
    let mut sq_bias = vec![1.0f64; m.dim()];
    let mut grad_i = vec![0.0; config.dim];
    let mut grad_j = vec![0.0; config.dim];

    let mut losses = Vec::with_capacity(config.epochs + 1);
    losses.push(checked_loss(m, &emb, config, 0)?);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for &k in &order {
            let (i, j, log_x, weight) = entries[k];
            let diff = dot(emb.vectors.row(i), emb.vectors.row(j)) + emb.biases[i] + emb.biases[j]
                - log_x;
            let fdiff = weight * diff;
            for d in 0..config.dim {
                grad_i[d] = fdiff * emb.vectors.get(j, d);
                grad_j[d] = fdiff * emb.vectors.get(i, d);
            }
            for (row, grad) in [(i, &grad_i), (j, &grad_j)] {
                for (d, &g) in grad.iter().enumerate() {
                    let acc = sq_vec.get(row, d);
                    let v = emb.vectors.get(row, d) - config.learning_rate * g / acc.sqrt();
                    emb.vectors.set(row, d, v);
                    sq_vec.set(row, d, acc + g * g);
                }
            }
            for row in [i, j] {
                emb.biases[row] -= config.learning_rate * fdiff / sq_bias[row].sqrt();
                sq_bias[row] += fdiff * fdiff;
            }
        }
        losses.push(checked_loss(m, &emb, config, epoch)?);
    }
    Ok(GloveFit {
        embeddings: emb,
        losses,
    })
}

fn checked_loss(
    m: &SparseCooccurrence,
    emb: &BasicEmbeddings,
    config: &GloveConfig,
    epoch: usize,
) -> Result<f64> {
    let loss = glove_loss(m, emb, config.x_max, config.alpha);
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!("GloVe loss at epoch {epoch}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn weight_examples() {
        assert_eq!(glove_weight(100.0, 100.0, 0.75), 1.0);
        assert_eq!(glove_weight(250.0, 100.0, 0.75), 1.0);
        assert_eq!(glove_weight(0.0, 100.0, 0.75), 0.0);
        // 0.5^0.75 = 2^-0.75 = 1 / (2^(1/2) * 2^(1/4))
        let expected = 1.0 / (2f64.sqrt() * 2f64.sqrt().sqrt());
        assert!((glove_weight(50.0, 100.0, 0.75) - 0.5946).abs() < 1e-4);
        assert!((glove_weight(50.0, 100.0, 0.75) - expected).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn weight_monotone_and_capped(a in 0.0f64..500.0, b in 0.0f64..500.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (wl, wh) = (glove_weight(lo, 100.0, 0.75), glove_weight(hi, 100.0, 0.75));
            prop_assert!(wl <= wh);
            prop_assert!(wh <= 1.0 && wl >= 0.0);
        }
    }

    #[test]
    fn single_entry_stationarity() {
        let m = SparseCooccurrence::from_upper(2, [(0, 1, std::f64::consts::E)]).unwrap();
        let cfg = GloveConfig {
            dim: 4,
            epochs: 4000,
            seed: 3,
            ..GloveConfig::default()
        };
        let fit = glove_fit(&m, &cfg).unwrap();
        let e = &fit.embeddings;
        let value = dot(e.vectors.row(0), e.vectors.row(1)) + e.biases[0] + e.biases[1];
        assert!((value - 1.0).abs() < 1e-2, "{value}");
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let m = SparseCooccurrence::from_upper(3, [(0, 1, 4.0), (1, 2, 9.0)]).unwrap();
        let cfg = GloveConfig {
            dim: 5,
            epochs: 0,
            seed: 8,
            ..GloveConfig::default()
        };
        let fit = glove_fit(&m, &cfg).unwrap();
        assert_eq!(fit.embeddings, glove_init(3, 5, 8));
        assert_eq!(fit.losses.len(), 1);
        let half = 0.5 / 5.0;
        assert!(fit.embeddings.vectors.as_slice().iter().all(|v| v.abs() <= half));
    }

    #[test]
    fn disjoint_pairs_loss_decreases() {
        let m = SparseCooccurrence::from_upper(4, [(0, 1, 30.0), (2, 3, 80.0)]).unwrap();
        let cfg = GloveConfig {
            dim: 3,
            epochs: 100,
            seed: 1,
            ..GloveConfig::default()
        };
        let fit = glove_fit(&m, &cfg).unwrap();
        assert!(fit.losses[100] < fit.losses[0]);
    }

    #[test]
    fn deterministic_under_seed() {
        let m = SparseCooccurrence::from_upper(5, [(0, 1, 3.0), (1, 2, 7.0), (0, 4, 12.0), (3, 4, 2.0)])
            .unwrap();
        let cfg = GloveConfig {
            dim: 4,
            epochs: 20,
            seed: 5,
            ..GloveConfig::default()
        };
        let a = glove_fit(&m, &cfg).unwrap();
        let b = glove_fit(&m, &cfg).unwrap();
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn empty_matrix_is_rejected() {
        let m = SparseCooccurrence::from_upper(3, []).unwrap();
        assert!(glove_fit(&m, &GloveConfig::default()).is_err());
    }

    #[test]
    fn tsv_export() {
        let emb = BasicEmbeddings {
            vectors: Matrix::from_vec(2, 2, vec![1.0, -0.5, 0.25, 2.0]),
            biases: vec![0.0; 2],
        };
        let tsv = emb.to_tsv(&["x".into(), "y".into()]);
        assert_eq!(tsv, "x\t1\t-0.5\ny\t0.25\t2\n");
    }
}
