//! Accuracy@k with frequency-percentile bins, AUC, and exports of final
//! representations and attention weights.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ehr::{GroupMap, PatientRecord, Task};
use crate::error::{Error, Result};
use crate::model::{predict_example, LeafForward};
use crate::training::TrainedModel;

pub const DEFAULT_KS: [usize; 4] = [5, 10, 20, 30];
pub const NUM_BINS: usize = 5;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitCount {
    pub hits: u64,
    pub trials: u64,
}

impl HitCount {
    pub fn accuracy(&self) -> f64 {
        self.hits as f64 / self.trials as f64
    }
}

/// One trial per (step, true label); a hit when fewer than `k` labels outrank
/// the true one, ties going to the lower index.
pub fn accuracy_at_k(scores: &[Vec<f64>], labels: &[Vec<usize>], k: usize) -> Result<Vec<HitCount>> {
    let num_labels = scores.first().map_or(0, Vec::len);
    let mut out = vec![HitCount::default(); num_labels];
    accumulate_hits(scores, labels, k, &mut out)?;
    Ok(out)
}

fn accumulate_hits(scores: &[Vec<f64>], labels: &[Vec<usize>], k: usize, out: &mut [HitCount]) -> Result<()> {
    let num_labels = out.len();
    if k == 0 || k > num_labels {
        return Err(Error::invalid(format!("k = {k} must lie in [1, {num_labels}]")));
    }
    if scores.len() != labels.len() {
        return Err(Error::invalid("one label set per score vector"));
    }
    for (s, truth) in scores.iter().zip(labels) {
        if s.len() != num_labels {
            return Err(Error::invalid("score vectors differ in length"));
        }
        for &i in truth {
            if i >= num_labels {
                return Err(Error::OutOfRange {
                    index: i,
                    limit: num_labels,
                });
            }
            let ahead = s
                .iter()
                .enumerate()
                .filter(|&(j, &sj)| sj > s[i] || (sj == s[i] && j < i))
                .count();
            out[i].trials += 1;
            if ahead < k {
                out[i].hits += 1;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    /// Labels in ascending training frequency.
    pub labels: Vec<usize>,
    /// Mean of the per-label accuracies.
    pub mean: f64,
}

/// Splits labels with at least one trial into five frequency quintiles,
/// rarest first. Earlier bins take the remainder.
pub fn percentile_bins(per_label: &[HitCount], train_freq: &[u64]) -> Result<Vec<Bin>> {
    if per_label.len() != train_freq.len() {
        return Err(Error::invalid("frequency table does not match the label count"));
    }
    let mut labels: Vec<usize> = (0..per_label.len()).filter(|&i| per_label[i].trials > 0).collect();
    if labels.len() < NUM_BINS {
        return Err(Error::invalid(format!(
            "percentile bins need at least {NUM_BINS} evaluated labels, found {}",
            labels.len()
        )));
    }
    labels.sort_by_key(|&i| (train_freq[i], i));
    let (base, extra) = (labels.len() / NUM_BINS, labels.len() % NUM_BINS);
    let mut bins = Vec::with_capacity(NUM_BINS);
    let mut start = 0;
    for b in 0..NUM_BINS {
        let size = base + usize::from(b < extra);
        let members = labels[start..start + size].to_vec();
        let mean = members.iter().map(|&i| per_label[i].accuracy()).sum::<f64>() / size as f64;
        bins.push(Bin { labels: members, mean });
        start += size;
    }
    Ok(bins)
}

/// Mann-Whitney AUC `(wins + ties / 2) / (P · N)`, counted exactly.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("one label per score"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count() as u128;
    let negatives = labels.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::invalid("AUC needs at least one positive and one negative"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut twice_wins, mut below) = (0u128, 0u128);
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let pos = order[start..end].iter().filter(|&&i| labels[i]).count() as u128;
        let neg = (end - start) as u128 - pos;
        twice_wins += 2 * pos * below + pos * neg;
        below += neg;
        start = end;
    }
    Ok(twice_wins as f64 / (2 * positives * negatives) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub k: usize,
    pub hits: u64,
    pub trials: u64,
    /// Pooled over all trials.
    pub accuracy: f64,
    /// Unweighted mean of the per-label accuracies.
    pub mean_label_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub k: usize,
    /// Rarest first.
    pub means: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDetail {
    pub label: usize,
    pub name: String,
    pub train_frequency: u64,
    pub trials: u64,
    /// Hits per entry of the requested `k` list.
    pub hits: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy_at_k: Vec<AccuracySummary>,
    pub bins: Vec<BinSummary>,
    pub auc: Option<f64>,
    pub label_detail: Vec<LabelDetail>,
}

impl EvalReport {
    pub fn bin_means(&self, k: usize) -> Option<&[f64]> {
        self.bins.iter().find(|b| b.k == k).map(|b| b.means.as_slice())
    }
}

/// Scores `records` with `model`. `train_freq` holds training-split label
/// frequencies for the sequential task.
pub fn evaluate(
    model: &TrainedModel,
    records: &[PatientRecord],
    groups: &GroupMap,
    flags: Option<&BTreeMap<String, bool>>,
    train_freq: &[u64],
    ks: &[usize],
) -> Result<EvalReport> {
    let task = model.task();
    let examples = model.inputs.examples(records, groups, task, flags)?;
    let g = model.representations();
    let params = model.params();
    match task {
        Task::Binary => {
            let mut scores = Vec::with_capacity(examples.len());
            let mut labels = Vec::with_capacity(examples.len());
            for ex in &examples {
                scores.push(predict_example(params, &g, ex)[0][0]);
                labels.push(ex.predictions()[0].1 == [0]);
            }
            Ok(EvalReport {
                accuracy_at_k: Vec::new(),
                bins: Vec::new(),
                auc: Some(auc(&scores, &labels)?),
                label_detail: Vec::new(),
            })
        }
        Task::Sequential => {
            let num_labels = model.dims.outputs;
            if train_freq.len() != num_labels {
                return Err(Error::invalid("frequency table does not match the label count"));
            }
            let mut counts = vec![vec![HitCount::default(); num_labels]; ks.len()];
            for ex in &examples {
                let probs = predict_example(params, &g, ex);
                let truth: Vec<Vec<usize>> = ex.predictions().into_iter().map(|(_, l)| l.to_vec()).collect();
                for (per_k, &k) in counts.iter_mut().zip(ks) {
                    accumulate_hits(&probs, &truth, k, per_k)?;
                }
            }
            let mut accuracy_at_k = Vec::with_capacity(ks.len());
            let mut bins = Vec::with_capacity(ks.len());
            for (per_label, &k) in counts.iter().zip(ks) {
                let hits: u64 = per_label.iter().map(|h| h.hits).sum();
                let trials: u64 = per_label.iter().map(|h| h.trials).sum();
                let seen: Vec<&HitCount> = per_label.iter().filter(|h| h.trials > 0).collect();
                accuracy_at_k.push(AccuracySummary {
                    k,
                    hits,
                    trials,
                    accuracy: hits as f64 / trials as f64,
                    mean_label_accuracy: seen.iter().map(|h| h.accuracy()).sum::<f64>() / seen.len() as f64,
                });
                let b = percentile_bins(per_label, train_freq)?;
                bins.push(BinSummary {
                    k,
                    means: b.iter().map(|x| x.mean).collect(),
                    counts: b.iter().map(|x| x.labels.len()).collect(),
                });
            }
            let label_detail = (0..num_labels)
                .map(|i| LabelDetail {
                    label: i,
                    name: model.label_names.get(i).cloned().unwrap_or_default(),
                    train_frequency: train_freq[i],
                    trials: counts.first().map_or(0, |c| c[i].trials),
                    hits: counts.iter().map(|c| c[i].hits).collect(),
                })
                .collect();
            Ok(EvalReport {
                accuracy_at_k,
                bins,
                auc: None,
                label_detail,
            })
        }
    }
}

/// `name<TAB>category<TAB>g_1..g_m` for every input row.
pub fn export_embeddings(model: &TrainedModel, categories: Option<&BTreeMap<String, String>>) -> String {
    let g = model.representations();
    let mut out = String::new();
    for i in 0..g.rows() {
        let name = model.inputs.input_name(i);
        let category = categories.and_then(|c| c.get(name)).map_or("", String::as_str);
        let _ = write!(out, "{name}\t{category}");
        for v in g.row(i) {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeWeight {
    pub name: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafAttention {
    pub leaf: String,
    /// Self first, then ancestors in support order.
    pub nodes: Vec<NodeWeight>,
    /// Weight removed with the root, when it was dropped.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub residual: Option<f64>,
}

pub type AttentionExport = Vec<LeafAttention>;

/// Attention over the support of each named input. With `drop_root` the root
/// entry is removed and the others are left unnormalized.
pub fn export_attention(model: &TrainedModel, leaves: &[&str], drop_root: bool) -> Result<AttentionExport> {
    let inputs = &model.inputs;
    let index: BTreeMap<&str, usize> = (0..inputs.num_inputs()).map(|i| (inputs.input_name(i), i)).collect();
    leaves
        .iter()
        .map(|&name| {
            let i = *index.get(name).ok_or_else(|| Error::UnknownCode(name.to_string()))?;
            let support = inputs.support.get(i);
            let weights = LeafForward::compute(model.params(), support).weights;
            let mut nodes = Vec::with_capacity(support.len());
            let mut residual = None;
            for (&c, &w) in support.iter().zip(&weights) {
                if drop_root && Some(c.index()) == inputs.root {
                    residual = Some(w);
                } else {
                    nodes.push(NodeWeight {
                        name: inputs.row_names[c.index()].clone(),
                        weight: w,
                    });
                }
            }
            if drop_root && residual.is_none() {
                residual = Some(0.0);
            }
            Ok(LeafAttention {
                leaf: name.to_string(),
                nodes,
                residual,
            })
        })
        .collect()
}
