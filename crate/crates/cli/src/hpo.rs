//! Random search over the five tuned hyperparameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use gram::training::TrainConfig;

use crate::error::{CliError, Result};

pub const DEFAULT_TRIALS: usize = 10;

/// Candidate values per hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub embedding_dim: Vec<usize>,
    pub hidden_dim: Vec<usize>,
    pub attention_dim: Vec<usize>,
    pub l2: Vec<f64>,
    pub dropout: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        let dims = vec![100, 200, 300, 400, 500];
        SearchSpace {
            embedding_dim: dims.clone(),
            hidden_dim: dims.clone(),
            attention_dim: dims,
            l2: vec![0.1, 0.01, 0.001, 0.0001],
            dropout: vec![0.0, 0.2, 0.4, 0.6, 0.8],
        }
    }
}

/// One sampled point of the space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub l2: f64,
    pub dropout: f64,
}

impl Trial {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            embedding_dim: self.embedding_dim,
            hidden_dim: self.hidden_dim,
            attention_dim: self.attention_dim,
            l2: self.l2,
            dropout: self.dropout,
            ..base.clone()
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("embedding_dim", self.embedding_dim.len()),
            ("hidden_dim", self.hidden_dim.len()),
            ("attention_dim", self.attention_dim.len()),
            ("l2", self.l2.len()),
            ("dropout", self.dropout.len()),
        ];
        match sizes.iter().find(|(_, n)| *n == 0) {
            Some((name, _)) => Err(CliError::Usage(format!("search space lists no values for {name}"))),
            None => Ok(()),
        }
    }

    /// `trials` points drawn uniformly and independently per hyperparameter.
    pub fn sample(&self, trials: usize, seed: u64) -> Result<Vec<Trial>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(5);
        Ok((0..trials)
            .map(|_| Trial {
                embedding_dim: *self.embedding_dim.choose(&mut rng).expect("validated"),
                hidden_dim: *self.hidden_dim.choose(&mut rng).expect("validated"),
                attention_dim: *self.attention_dim.choose(&mut rng).expect("validated"),
                l2: *self.l2.choose(&mut rng).expect("validated"),
                dropout: *self.dropout.choose(&mut rng).expect("validated"),
            })
            .collect())
    }
}

/// Outcome of one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub index: usize,
    pub trial: Trial,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
}

/// Sorts by validation loss, earlier trials first on ties.
pub fn rank(results: &mut [TrialResult]) {
    results.sort_by(|a, b| a.best_valid_loss.total_cmp(&b.best_valid_loss).then(a.index.cmp(&b.index)));
}

/// `rank,trial,embedding_dim,hidden_dim,attention_dim,l2,dropout,best_epoch,best_valid_loss`
pub fn to_csv(ranked: &[TrialResult]) -> String {
    let mut out = String::from("rank,trial,embedding_dim,hidden_dim,attention_dim,l2,dropout,best_epoch,best_valid_loss\n");
    for (k, r) in ranked.iter().enumerate() {
        let t = &r.trial;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            k + 1,
            r.index,
            t.embedding_dim,
            t.hidden_dim,
            t.attention_dim,
            t.l2,
            t.dropout,
            r.best_epoch,
            r.best_valid_loss
        ));
    }
    out
}
