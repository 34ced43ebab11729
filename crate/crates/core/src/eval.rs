//! Retrieval and classification metrics: Recall@k by cosine similarity,
//! top-k accuracy, and the fine-class probability obtained by averaging
//! instance-head columns per fine class.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{group_by_label, Dataset};
use crate::error::{invalid, Error, Result};
use crate::model::{encode, head_logits, HeadKind, ModelParams};
use crate::numerics::{dot, l2_normalize, log_softmax, Matrix};

/// Which labels the retrieval scores were computed against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Fine,
    Coarse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `k → R@k`, fractions in `[0, 1]`.
    pub recall_at: BTreeMap<usize, f64>,
    /// `k → top-k accuracy` of the coarse head against coarse labels.
    pub topk_acc: BTreeMap<usize, f64>,
    /// Min / mean over examples of `Pr{y^F | f(x), W^I}`; absent without
    /// fine labels.
    pub fine_prob_min: Option<f64>,
    pub fine_prob_mean: Option<f64>,
    /// Queries kept after dropping singleton classes.
    pub n_queries: usize,
    pub n_examples: usize,
    pub labels: LabelKind,
}

fn unit_rows(embeddings: &Matrix) -> Result<Matrix> {
    let mut out = embeddings.clone();
    for r in 0..out.rows() {
        let u = l2_normalize(embeddings.row(r))?;
        out.row_mut(r).copy_from_slice(&u);
    }
    Ok(out)
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(invalid("ks must be a nonempty list of positive integers"));
    }
    Ok(())
}

/// Position of the first same-label neighbor of each query in its ranked
/// list (similarity descending, ties by ascending index, self excluded).
/// `None` for queries whose label is a singleton.
pub fn first_hit_ranks(embeddings: &Matrix, labels: &[usize]) -> Result<Vec<Option<usize>>> {
    let n = embeddings.rows();
    if n < 2 {
        return Err(invalid("retrieval needs at least two examples"));
    }
    if labels.len() != n {
        return Err(invalid(format!("{} labels for {n} embeddings", labels.len())));
    }
    let unit = unit_rows(embeddings)?;
    let num_labels = labels.iter().max().map_or(0, |m| m + 1);
    let counts: Vec<usize> = group_by_label(labels, num_labels).iter().map(Vec::len).collect();
    let ranks = (0..n)
        .into_par_iter()
        .map(|q| {
            if counts[labels[q]] < 2 {
                return None;
            }
            let sims: Vec<f64> = (0..n).map(|j| dot(unit.row(q), unit.row(j))).collect();
            // Earliest-ranked same-label neighbor: highest similarity,
            // lowest index among ties.
            let best = (0..n)
                .filter(|&j| j != q && labels[j] == labels[q])
                .fold(None::<usize>, |acc, j| match acc {
                    Some(b) if sims[b] >= sims[j] => Some(b),
                    _ => Some(j),
                })?;
            let ahead = (0..n)
                .filter(|&j| j != q)
                .filter(|&j| sims[j] > sims[best] || (sims[j] == sims[best] && j < best))
                .count();
            Some(ahead)
        })
        .collect();
    Ok(ranks)
}

/// Recall@k over all non-singleton queries; each query searches every
/// other example.
pub fn recall_at_k(embeddings: &Matrix, labels: &[usize], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    Ok(recall_with_count(embeddings, labels, ks)?.0)
}

fn recall_with_count(
    embeddings: &Matrix,
    labels: &[usize],
    ks: &[usize],
) -> Result<(BTreeMap<usize, f64>, usize)> {
    check_ks(ks)?;
    let ranks: Vec<usize> = first_hit_ranks(embeddings, labels)?.into_iter().flatten().collect();
    if ranks.is_empty() {
        return Err(Error::NoValidQueries);
    }
    let total = ranks.len() as f64;
    let recall = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / total))
        .collect();
    Ok((recall, ranks.len()))
}

/// Fraction of rows whose label is among the `k` largest logits, ties
/// resolved in favor of the lower class index.
pub fn topk_accuracy(logits: &Matrix, labels: &[usize], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    check_ks(ks)?;
    let (n, classes) = logits.shape();
    if labels.len() != n || n == 0 {
        return Err(invalid(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&k) = ks.iter().find(|&&k| k > classes) {
        return Err(invalid(format!("k = {k} exceeds the number of classes {classes}")));
    }
    let mut ranks = Vec::with_capacity(n);
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(invalid(format!("label {y} >= {classes}")));
        }
        let row = logits.row(r);
        let ahead = (0..classes)
            .filter(|&c| row[c] > row[y] || (row[c] == row[y] && c < y))
            .count();
        ranks.push(ahead);
    }
    Ok(ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64))
        .collect())
}

/// Mean `W^I` column per fine class (`F × d`). Instance `j` has fine label
/// `fine_labels[j]`.
pub fn fine_class_means(w_instance: &Matrix, fine_labels: &[usize], num_fine: usize) -> Result<Matrix> {
    if fine_labels.len() != w_instance.rows() {
        return Err(invalid(format!(
            "{} fine labels for {} instance columns",
            fine_labels.len(),
            w_instance.rows()
        )));
    }
    if let Some(&bad) = fine_labels.iter().find(|&&s| s >= num_fine) {
        return Err(invalid(format!("fine label {bad} >= F = {num_fine}")));
    }
    let groups = group_by_label(fine_labels, num_fine);
    let mut means = Matrix::zeros(num_fine, w_instance.cols());
    for (s, members) in groups.iter().enumerate() {
        if members.is_empty() {
            return Err(invalid(format!("fine class {s} has no instances")));
        }
        let row = means.row_mut(s);
        for &j in members {
            for (m, v) in row.iter_mut().zip(w_instance.row(j)) {
                *m += v;
            }
        }
        let inv = 1.0 / members.len() as f64;
        row.iter_mut().for_each(|m| *m *= inv);
    }
    Ok(means)
}

/// `log Pr{y_i^F | f(x_i), W^I}`: log-softmax over `F` of `f(x_i)·w̄_s`.
pub fn log_fine_class_prob(
    embeddings: &Matrix,
    w_instance: &Matrix,
    fine_labels: &[usize],
    num_fine: usize,
) -> Result<Vec<f64>> {
    if embeddings.rows() != fine_labels.len() {
        return Err(invalid(format!(
            "{} embeddings for {} fine labels",
            embeddings.rows(),
            fine_labels.len()
        )));
    }
    let means = fine_class_means(w_instance, fine_labels, num_fine)?;
    let logits = embeddings.matmul_nt(&means)?;
    (0..embeddings.rows())
        .map(|i| Ok(log_softmax(logits.row(i))?[fine_labels[i]]))
        .collect()
}

/// Full per-example fine-class distribution (`n × F`).
pub fn fine_class_prob(
    embeddings: &Matrix,
    w_instance: &Matrix,
    fine_labels: &[usize],
    num_fine: usize,
) -> Result<Matrix> {
    let means = fine_class_means(w_instance, fine_labels, num_fine)?;
    let mut logits = embeddings.matmul_nt(&means)?;
    for r in 0..logits.rows() {
        let p = crate::numerics::softmax(logits.row(r))?;
        logits.row_mut(r).copy_from_slice(&p);
    }
    Ok(logits)
}

/// Embeds `data` and computes every metric. Retrieval uses the backbone
/// output and fine labels when present (coarse labels otherwise); top-k
/// accuracy uses the coarse head; `ks` larger than `C` are skipped there.
pub fn evaluate(params: &ModelParams, data: &Dataset, ks: &[usize]) -> Result<EvalReport> {
    if data.dim() != params.input_dim() {
        return Err(invalid(format!(
            "dataset dim {} does not match checkpoint input dim {}",
            data.dim(),
            params.input_dim()
        )));
    }
    let fwd = encode(params, &data.examples)?;
    let (labels, kind) = match &data.fine_labels {
        Some(f) => (f.as_slice(), LabelKind::Fine),
        None => (data.coarse_labels.as_slice(), LabelKind::Coarse),
    };
    let (recall_at, n_queries) = recall_with_count(&fwd.embedding, labels, ks)?;

    let logits = head_logits(params, &fwd.features, HeadKind::Coarse, None)?;
    let coarse_ks: Vec<usize> = ks.iter().copied().filter(|&k| k <= params.w_coarse.rows()).collect();
    let topk_acc = if coarse_ks.is_empty() {
        BTreeMap::new()
    } else {
        topk_accuracy(&logits, &data.coarse_labels, &coarse_ks)?
    };

    let (fine_prob_min, fine_prob_mean) = match &data.fine_labels {
        Some(fine) if params.w_instance.rows() == data.len() => {
            let mut scaled = fwd.features.instance.clone();
            scaled.scale(params.logit_scale());
            let logp = log_fine_class_prob(&scaled, &params.w_instance, fine, data.num_fine)?;
            let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
            let min = probs.iter().copied().fold(f64::INFINITY, f64::min);
            let mean = probs.iter().sum::<f64>() / probs.len() as f64;
            (Some(min), Some(mean))
        }
        _ => (None, None),
    };
    Ok(EvalReport {
        recall_at,
        topk_acc,
        fine_prob_min,
        fine_prob_mean,
        n_queries,
        n_examples: data.len(),
        labels: kind,
    })
}
