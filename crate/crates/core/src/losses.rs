//! Training objectives: coarse cross-entropy, full and within-coarse
//! instance classification, the instance-proxy loss, their weighted
//! combination, and the proxy margin diagnostic.
//!
//! All losses are means over the batch. Gradients are returned w.r.t. the
//! branch features the head reads and w.r.t. every head column that appears
//! in a softmax denominator. Reduction runs in ascending batch order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{Features, HeadKind, ModelParams};
use crate::numerics::{cross_entropy_with_grad, dot, sq_dist, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Gradient w.r.t. the branch features (`batch × d`).
    pub grad_embeddings: Matrix,
    /// Gradient per touched head column.
    pub grad_head_columns: BTreeMap<usize, Vec<f64>>,
    /// Number of head-column reads performed while evaluating the loss.
    pub column_reads: u64,
}

enum Columns<'a> {
    All(usize),
    Subset(&'a [usize]),
}

impl Columns<'_> {
    fn len(&self) -> usize {
        match self {
            Columns::All(k) => *k,
            Columns::Subset(s) => s.len(),
        }
    }

    fn get(&self, pos: usize) -> usize {
        match self {
            Columns::All(_) => pos,
            Columns::Subset(s) => s[pos],
        }
    }
}

/// Mean softmax cross-entropy where example `b` competes over `cols(b)` and
/// its target sits at position `target(b)` of that list.
fn softmax_ce<'a>(
    feats: &Matrix,
    head: &Matrix,
    scale: f64,
    mut example: impl FnMut(usize) -> Result<(Columns<'a>, usize)>,
) -> Result<LossValue> {
    let batch = feats.rows();
    if batch == 0 {
        return Err(invalid("empty batch"));
    }
    if feats.cols() != head.cols() {
        return Err(invalid(format!(
            "feature dim {} does not match head dim {}",
            feats.cols(),
            head.cols()
        )));
    }
    let d = feats.cols();
    let inv_b = 1.0 / batch as f64;
    let mut value = 0.0;
    let mut grad_embeddings = Matrix::zeros(batch, d);
    let mut grad_head_columns: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut column_reads = 0u64;
    let mut logits = Vec::new();
    for b in 0..batch {
        let (cols, target) = example(b)?;
        let f = feats.row(b);
        logits.clear();
        for pos in 0..cols.len() {
            logits.push(scale * dot(f, head.row(cols.get(pos))));
        }
        column_reads += cols.len() as u64;
        let (ce, g) = cross_entropy_with_grad(&logits, target)?;
        value += ce;
        let gf = grad_embeddings.row_mut(b);
        for (pos, &gp) in g.iter().enumerate() {
            let coef = scale * gp * inv_b;
            let col = cols.get(pos);
            for (acc, w) in gf.iter_mut().zip(head.row(col)) {
                *acc += coef * w;
            }
            let gw = grad_head_columns.entry(col).or_insert_with(|| vec![0.0; d]);
            for (acc, x) in gw.iter_mut().zip(f) {
                *acc += coef * x;
            }
        }
    }
    Ok(LossValue {
        value: value * inv_b,
        grad_embeddings,
        grad_head_columns,
        column_reads,
    })
}

fn check_len(what: &str, got: usize, batch: usize) -> Result<()> {
    if got != batch {
        return Err(invalid(format!("{got} {what} for a batch of {batch}")));
    }
    Ok(())
}

/// Cross-entropy of the coarse head against `labels`.
pub fn coarse_loss(params: &ModelParams, feats: &Matrix, labels: &[usize]) -> Result<LossValue> {
    check_len("labels", labels.len(), feats.rows())?;
    let k = params.w_coarse.rows();
    softmax_ce(feats, &params.w_coarse, params.logit_scale(), |b| {
        let y = labels[b];
        if y >= k {
            return Err(invalid(format!("coarse label {y} >= C = {k}")));
        }
        Ok((Columns::All(k), y))
    })
}

/// Instance classification over all `n` columns of `W^I`; example `b` is
/// instance `instance_ids[b]`.
pub fn instance_loss_full(
    params: &ModelParams,
    feats: &Matrix,
    instance_ids: &[usize],
) -> Result<LossValue> {
    check_len("instance ids", instance_ids.len(), feats.rows())?;
    let n = params.w_instance.rows();
    softmax_ce(feats, &params.w_instance, params.logit_scale(), |b| {
        let id = instance_ids[b];
        if id >= n {
            return Err(invalid(format!("instance id {id} >= n = {n}")));
        }
        Ok((Columns::All(n), id))
    })
}

/// Members of every coarse class plus each instance's position in its
/// class list.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseIndex {
    pub members: Vec<Vec<usize>>,
    position: Vec<usize>,
}

impl CoarseIndex {
    pub fn new(coarse_labels: &[usize], num_coarse: usize) -> Result<Self> {
        if let Some(&bad) = coarse_labels.iter().find(|&&c| c >= num_coarse) {
            return Err(invalid(format!("coarse label {bad} >= C = {num_coarse}")));
        }
        let members = crate::data::group_by_label(coarse_labels, num_coarse);
        let mut position = vec![0; coarse_labels.len()];
        for list in &members {
            for (p, &i) in list.iter().enumerate() {
                position[i] = p;
            }
        }
        Ok(Self { members, position })
    }

    pub fn num_instances(&self) -> usize {
        self.position.len()
    }

    /// Column reads per pass over all instances: `Σ_k n_k²`.
    pub fn within_coarse_reads(&self) -> u64 {
        self.members.iter().map(|m| (m.len() * m.len()) as u64).sum()
    }
}

/// Instance classification restricted to the instances of the example's
/// coarse class. Only those columns of `W^I` are read.
pub fn instance_loss_within_coarse(
    params: &ModelParams,
    feats: &Matrix,
    instance_ids: &[usize],
    coarse_labels: &[usize],
    index: &CoarseIndex,
) -> Result<LossValue> {
    check_len("instance ids", instance_ids.len(), feats.rows())?;
    check_len("coarse labels", coarse_labels.len(), feats.rows())?;
    if index.num_instances() != params.w_instance.rows() {
        return Err(invalid(format!(
            "coarse index covers {} instances, W_I has {}",
            index.num_instances(),
            params.w_instance.rows()
        )));
    }
    softmax_ce(feats, &params.w_instance, params.logit_scale(), |b| {
        let (id, k) = (instance_ids[b], coarse_labels[b]);
        let members = index
            .members
            .get(k)
            .ok_or_else(|| invalid(format!("coarse label {k} out of range")))?;
        let pos = *index
            .position
            .get(id)
            .ok_or_else(|| invalid(format!("instance id {id} out of range")))?;
        if members.get(pos) != Some(&id) {
            return Err(invalid(format!(
                "instance {id} is not a member of coarse class {k}"
            )));
        }
        Ok((Columns::Subset(members), pos))
    })
}

/// Cross-entropy of the proxy head against each instance's cluster.
pub fn instance_proxy_loss(
    params: &ModelParams,
    feats: &Matrix,
    instance_ids: &[usize],
) -> Result<LossValue> {
    check_len("instance ids", instance_ids.len(), feats.rows())?;
    let proxy = params
        .proxy
        .as_ref()
        .ok_or_else(|| Error::State("instance-proxy loss requested before W_P exists".into()))?;
    let assignment = &proxy.membership.assignment;
    let p = proxy.weights.rows();
    softmax_ce(feats, &proxy.weights, params.logit_scale(), |b| {
        let id = instance_ids[b];
        let cluster = *assignment
            .get(id)
            .ok_or_else(|| invalid(format!("instance id {id} has no cluster")))?;
        Ok((Columns::All(p), cluster))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceMode {
    /// Softmax over all `n` instances.
    Full,
    /// Softmax over instances of the same coarse class.
    WithinCoarse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub coarse: f64,
    pub instance: f64,
    pub proxy: f64,
    pub instance_mode: InstanceMode,
}

impl ObjectiveWeights {
    pub fn new(lambda_instance: f64, lambda_proxy: f64, instance_mode: InstanceMode) -> Self {
        Self {
            coarse: 1.0,
            instance: lambda_instance,
            proxy: lambda_proxy,
            instance_mode,
        }
    }
}

/// Labels of one mini-batch: global instance ids and the targets for the
/// coarse head.
#[derive(Clone, Copy, Debug)]
pub struct BatchLabels<'a> {
    pub instance_ids: &'a [usize],
    pub coarse_labels: &'a [usize],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub coarse: Option<LossValue>,
    pub instance: Option<LossValue>,
    pub proxy: Option<LossValue>,
    /// Weighted gradient w.r.t. both branch features.
    pub grad_features: Features,
    pub weights: ObjectiveWeights,
}

impl ObjectiveValue {
    /// Weighted gradient of one head, per touched column.
    pub fn head_grad(&self, head: HeadKind) -> BTreeMap<usize, Vec<f64>> {
        let (term, w) = match head {
            HeadKind::Coarse => (&self.coarse, self.weights.coarse),
            HeadKind::Instance => (&self.instance, self.weights.instance),
            HeadKind::Proxy => (&self.proxy, self.weights.proxy),
        };
        term.as_ref().map_or_else(BTreeMap::new, |t| {
            t.grad_head_columns
                .iter()
                .map(|(&c, g)| (c, g.iter().map(|v| w * v).collect()))
                .collect()
        })
    }
}

/// `w_C·ℓ_C + λ_I·ℓ_I + λ_P·ℓ_P`. Terms with zero weight are skipped. The
/// instance term is the full or within-coarse loss per `instance_mode`;
/// within-coarse needs `index`.
pub fn combined_objective(
    params: &ModelParams,
    feats: &Features,
    batch: BatchLabels<'_>,
    weights: &ObjectiveWeights,
    index: Option<&CoarseIndex>,
) -> Result<ObjectiveValue> {
    for (name, w) in [
        ("coarse", weights.coarse),
        ("lambda_I", weights.instance),
        ("lambda_P", weights.proxy),
    ] {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(invalid(format!("weight {name} = {w} must be finite and >= 0")));
        }
    }
    if weights.proxy > 0.0 && params.proxy.is_none() {
        return Err(Error::State("lambda_P > 0 requires W_P and a membership".into()));
    }
    let shape = feats.coarse.shape();
    let mut grad = Features {
        coarse: Matrix::zeros(shape.0, shape.1),
        instance: Matrix::zeros(shape.0, shape.1),
    };
    let mut value = 0.0;

    let coarse = if weights.coarse > 0.0 {
        let l = coarse_loss(params, &feats.coarse, batch.coarse_labels)?;
        value += weights.coarse * l.value;
        grad.coarse.add_scaled(&l.grad_embeddings, weights.coarse)?;
        Some(l)
    } else {
        None
    };
    let instance = if weights.instance > 0.0 {
        let l = match weights.instance_mode {
            InstanceMode::Full => instance_loss_full(params, &feats.instance, batch.instance_ids)?,
            InstanceMode::WithinCoarse => {
                let index = index.ok_or_else(|| invalid("within-coarse loss needs a coarse index"))?;
                instance_loss_within_coarse(
                    params,
                    &feats.instance,
                    batch.instance_ids,
                    batch.coarse_labels,
                    index,
                )?
            }
        };
        value += weights.instance * l.value;
        grad.instance.add_scaled(&l.grad_embeddings, weights.instance)?;
        Some(l)
    } else {
        None
    };
    let proxy = if weights.proxy > 0.0 {
        let l = instance_proxy_loss(params, &feats.instance, batch.instance_ids)?;
        value += weights.proxy * l.value;
        grad.instance.add_scaled(&l.grad_embeddings, weights.proxy)?;
        Some(l)
    } else {
        None
    };
    Ok(ObjectiveValue {
        value,
        coarse,
        instance,
        proxy,
        grad_features: grad,
        weights: *weights,
    })
}

/// `Σ_i (‖x_i − w_{y_i}‖² − Σ_{p≠y_i} ‖x_i − w_p‖²/(P−1))` over the proxy
/// head. Report-only; never optimized.
pub fn margin_diagnostic(params: &ModelParams, feats: &Matrix, instance_ids: &[usize]) -> Result<f64> {
    check_len("instance ids", instance_ids.len(), feats.rows())?;
    let proxy = params
        .proxy
        .as_ref()
        .ok_or_else(|| Error::State("margin diagnostic requested before W_P exists".into()))?;
    let p = proxy.weights.rows();
    let mut total = 0.0;
    for (b, &id) in instance_ids.iter().enumerate() {
        let own = *proxy
            .membership
            .assignment
            .get(id)
            .ok_or_else(|| invalid(format!("instance id {id} has no cluster")))?;
        let x = feats.row(b);
        let pull = sq_dist(x, proxy.weights.row(own));
        let push: f64 = (0..p)
            .filter(|&q| q != own)
            .map(|q| sq_dist(x, proxy.weights.row(q)))
            .sum();
        total += if p > 1 { pull - push / (p - 1) as f64 } else { pull };
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{update_proxies, Membership};
    use crate::model::{ModelConfig, ProxyHead};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(n: usize, c: usize, d: usize, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::init(
            &ModelConfig {
                input_dim: 2,
                hidden: vec![d],
                num_coarse: c,
                num_instances: n,
                cosine: false,
                temperature: 1.0,
                mlp_head: false,
            },
            &mut rng,
        )
        .unwrap();
        // spread the head columns out a bit more than the default init
        p.w_coarse.scale(2.0);
        p.w_instance.scale(2.0);
        p
    }

    fn feats(b: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(b, d, |_, _| rng.random_range(-1.5..1.5))
    }

    // Oracle: per-example −log(exp(s_y)/Σ exp(s_j)) written out directly.
    fn direct_ce(f: &[f64], cols: &[&[f64]], target: usize) -> f64 {
        let s: Vec<f64> = cols.iter().map(|w| dot(f, w)).collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        -(s[target].exp() / z).ln()
    }

    #[test]
    fn coarse_loss_examples() {
        let p = params(4, 1, 3, 1);
        let x = feats(4, 3, 2);
        assert_eq!(coarse_loss(&p, &x, &[0, 0, 0, 0]).unwrap().value, 0.0);

        let p = params(4, 5, 3, 1);
        let zero = Matrix::zeros(4, 3);
        let v = coarse_loss(&p, &zero, &[0, 1, 2, 4]).unwrap().value;
        assert!((v - 5f64.ln()).abs() < 1e-15);
        assert!(coarse_loss(&p, &zero, &[0, 1, 2, 5]).is_err());
    }

    #[test]
    fn coarse_loss_matches_direct_oracle() {
        let p = params(6, 4, 3, 3);
        let x = feats(6, 3, 4);
        let labels = [0, 3, 1, 1, 2, 0];
        let v = coarse_loss(&p, &x, &labels).unwrap().value;
        let cols: Vec<&[f64]> = (0..4).map(|k| p.w_coarse.row(k)).collect();
        let oracle: f64 = (0..6).map(|b| direct_ce(x.row(b), &cols, labels[b])).sum::<f64>() / 6.0;
        assert!((v - oracle).abs() < 1e-12);
    }

    #[test]
    fn instance_loss_examples() {
        let p = params(1, 2, 3, 5);
        assert_eq!(instance_loss_full(&p, &feats(1, 3, 6), &[0]).unwrap().value, 0.0);
        let p = params(7, 2, 3, 5);
        let v = instance_loss_full(&p, &Matrix::zeros(2, 3), &[0, 6]).unwrap().value;
        assert!((v - 7f64.ln()).abs() < 1e-15);
        assert!(instance_loss_full(&p, &Matrix::zeros(1, 3), &[7]).is_err());

        let x = feats(7, 3, 7);
        let ids: Vec<usize> = (0..7).collect();
        let cols: Vec<&[f64]> = (0..7).map(|k| p.w_instance.row(k)).collect();
        let oracle: f64 = (0..7).map(|b| direct_ce(x.row(b), &cols, b)).sum::<f64>() / 7.0;
        assert!((instance_loss_full(&p, &x, &ids).unwrap().value - oracle).abs() < 1e-12);
    }

    #[test]
    fn within_coarse_single_class_equals_full() {
        let p = params(9, 1, 4, 8);
        let x = feats(5, 4, 9);
        let ids = [3, 0, 8, 2, 5];
        let index = CoarseIndex::new(&[0; 9], 1).unwrap();
        let full = instance_loss_full(&p, &x, &ids).unwrap();
        let within = instance_loss_within_coarse(&p, &x, &ids, &[0; 5], &index).unwrap();
        assert_eq!(full.value, within.value);
        assert_eq!(full.grad_embeddings, within.grad_embeddings);
        assert_eq!(full.grad_head_columns, within.grad_head_columns);
    }

    #[test]
    fn within_coarse_singletons_are_zero() {
        let p = params(4, 4, 3, 10);
        let index = CoarseIndex::new(&[0, 1, 2, 3], 4).unwrap();
        let l = instance_loss_within_coarse(&p, &feats(4, 3, 11), &[0, 1, 2, 3], &[0, 1, 2, 3], &index)
            .unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn within_coarse_matches_direct_oracle_and_reads_only_members() {
        let labels = [0, 1, 2, 0, 1, 2, 2, 0, 1, 1];
        let p = params(10, 3, 4, 12);
        let index = CoarseIndex::new(&labels, 3).unwrap();
        let x = feats(10, 4, 13);
        let ids: Vec<usize> = (0..10).collect();
        let l = instance_loss_within_coarse(&p, &x, &ids, &labels, &index).unwrap();
        let mut oracle = 0.0;
        for i in 0..10 {
            let members: Vec<usize> = (0..10).filter(|&j| labels[j] == labels[i]).collect();
            let cols: Vec<&[f64]> = members.iter().map(|&j| p.w_instance.row(j)).collect();
            let t = members.iter().position(|&j| j == i).unwrap();
            oracle += direct_ce(x.row(i), &cols, t);
        }
        assert!((l.value - oracle / 10.0).abs() < 1e-12);
        assert_eq!(l.column_reads, index.within_coarse_reads());

        // single example: touched columns are exactly its coarse class
        for i in 0..10 {
            let one = instance_loss_within_coarse(&p, &x.select_rows(&[i]), &[i], &[labels[i]], &index)
                .unwrap();
            let touched: Vec<usize> = one.grad_head_columns.keys().copied().collect();
            assert_eq!(touched, index.members[labels[i]]);
            assert_eq!(one.column_reads, index.members[labels[i]].len() as u64);
        }
        // membership inconsistency
        assert!(instance_loss_within_coarse(&p, &x.select_rows(&[0]), &[0], &[1], &index).is_err());
    }

    fn with_proxy(mut p: ModelParams, assignment: Vec<usize>, k: usize) -> ModelParams {
        let m = Membership::from_assignment(&p.w_instance, assignment, k, false).unwrap();
        let weights = update_proxies(&p.w_instance, &m, false).unwrap();
        p.proxy = Some(ProxyHead {
            weights,
            membership: m,
        });
        p
    }

    #[test]
    fn proxy_loss_examples() {
        let p = params(5, 2, 3, 14);
        let x = feats(5, 3, 15);
        let ids: Vec<usize> = (0..5).collect();
        assert!(matches!(instance_proxy_loss(&p, &x, &ids), Err(Error::State(_))));

        let one = with_proxy(p.clone(), vec![0; 5], 1);
        assert_eq!(instance_proxy_loss(&one, &x, &ids).unwrap().value, 0.0);

        let single = with_proxy(p.clone(), ids.clone(), 5);
        let a = instance_proxy_loss(&single, &x, &ids).unwrap();
        let b = instance_loss_full(&p, &x, &ids).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);

        let assignment = vec![1, 0, 1, 2, 0];
        let clustered = with_proxy(p.clone(), assignment.clone(), 3);
        let v = instance_proxy_loss(&clustered, &x, &ids).unwrap().value;
        let w = &clustered.proxy.as_ref().unwrap().weights;
        let cols: Vec<&[f64]> = (0..3).map(|k| w.row(k)).collect();
        let oracle: f64 = (0..5).map(|b| direct_ce(x.row(b), &cols, assignment[b])).sum::<f64>() / 5.0;
        assert!((v - oracle).abs() < 1e-12);
    }

    #[test]
    fn combined_objective_examples() {
        let labels = [0, 1, 0, 1, 1, 0];
        let p = with_proxy(params(6, 2, 3, 16), vec![0, 1, 2, 0, 1, 2], 3);
        let index = CoarseIndex::new(&labels, 2).unwrap();
        let x = Features::shared(feats(6, 3, 17));
        let ids: Vec<usize> = (0..6).collect();
        let batch = BatchLabels {
            instance_ids: &ids,
            coarse_labels: &labels,
        };
        let obj = |li: f64, lp: f64| {
            combined_objective(
                &p,
                &x,
                batch,
                &ObjectiveWeights::new(li, lp, InstanceMode::WithinCoarse),
                Some(&index),
            )
            .unwrap()
        };
        let coarse = coarse_loss(&p, &x.coarse, &labels).unwrap();
        assert_eq!(obj(0.0, 0.0).value, coarse.value);

        let (f0, f1, f2) = (obj(0.0, 0.0).value, obj(0.7, 0.0).value, obj(1.4, 0.0).value);
        assert!(((f2 - f1) - (f1 - f0)).abs() < 1e-12);

        let inst = instance_loss_within_coarse(&p, &x.instance, &ids, &labels, &index).unwrap();
        let prox = instance_proxy_loss(&p, &x.instance, &ids).unwrap();
        let both = obj(0.3, 1.2);
        assert!((both.value - (coarse.value + 0.3 * inst.value + 1.2 * prox.value)).abs() < 1e-12);

        let no_proxy = params(6, 2, 3, 16);
        assert!(combined_objective(
            &no_proxy,
            &x,
            batch,
            &ObjectiveWeights::new(1.0, 1.0, InstanceMode::Full),
            None
        )
        .is_err());
    }

    #[test]
    fn margin_diagnostic_examples() {
        let mut p = with_proxy(params(2, 1, 2, 18), vec![0, 1], 2);
        let w = Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        p.proxy.as_mut().unwrap().weights = w;
        // x exactly at its proxy: contribution is −‖x − w_other‖²
        let x = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(margin_diagnostic(&p, &x, &[0]).unwrap(), -25.0);
        // equidistant point contributes 0
        let mid = Matrix::from_rows(&[vec![1.5, 2.0]]).unwrap();
        assert!(margin_diagnostic(&p, &mid, &[0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn margin_diagnostic_matches_direct_oracle() {
        let p = with_proxy(params(8, 2, 3, 19), vec![0, 1, 2, 3, 0, 1, 2, 3], 4);
        let x = feats(8, 3, 20);
        let ids: Vec<usize> = (0..8).collect();
        let w = &p.proxy.as_ref().unwrap().weights;
        let mut oracle = 0.0;
        for i in 0..8 {
            let own = i % 4;
            for q in 0..4 {
                let d2: f64 = (0..3).map(|j| (x.get(i, j) - w.get(q, j)).powi(2)).sum();
                oracle += if q == own { d2 } else { -d2 / 3.0 };
            }
        }
        assert!((margin_diagnostic(&p, &x, &ids).unwrap() - oracle).abs() < 1e-10);
    }
}
