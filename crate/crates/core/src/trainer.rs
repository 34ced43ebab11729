//! SGD with momentum and weight decay, the step learning-rate schedule, and
//! the two-phase training loop: the coarse + instance objective for the
//! first `M` epochs, then the same objective plus the instance-proxy loss
//! with the cluster membership and proxies rebuilt from `W^I` after every
//! epoch.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans, mix_seed, update_proxies, KMeansConfig};
use crate::data::{augment, shuffled_indices, Dataset};
use crate::error::{invalid, Error, Result};
use crate::losses::{combined_objective, BatchLabels, CoarseIndex, InstanceMode, ObjectiveWeights};
use crate::model::{backward, encode, Features, ModelConfig, ModelParams, ProxyHead};
use crate::numerics::{sq_dist, Matrix};

/// Centers `[0, 1]` pixel values before the first layer.
pub const IMAGE_INPUT_SHIFT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    /// Instance classification only.
    #[serde(rename = "ins")]
    Ins,
    /// Coarse cross-entropy only.
    #[serde(rename = "cos")]
    Cos,
    /// Coarse + full instance classification.
    #[serde(rename = "coins")]
    Coins,
    /// Coarse + within-coarse instance classification.
    #[serde(rename = "coins-imp")]
    CoinsImp,
    /// `coins-imp`, plus the instance-proxy loss after epoch `M`.
    #[serde(rename = "coinsP")]
    CoinsP,
    /// Cross-entropy on the fine labels (upper bound).
    #[serde(rename = "opt")]
    Opt,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Objective::Ins,
        Objective::Cos,
        Objective::Coins,
        Objective::CoinsImp,
        Objective::CoinsP,
        Objective::Opt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Ins => "ins",
            Objective::Cos => "cos",
            Objective::Coins => "coins",
            Objective::CoinsImp => "coins-imp",
            Objective::CoinsP => "coinsP",
            Objective::Opt => "opt",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                invalid(format!(
                    "unknown objective {s:?}; expected one of ins, cos, coins, coins-imp, coinsP, opt"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Total epochs `T`.
    pub epochs: usize,
    /// Epoch `M` after which the instance-proxy loss is added; `None`
    /// means `T/2`.
    pub ip_start_epoch: Option<usize>,
    pub lambda_i: f64,
    pub lambda_p: f64,
    /// Number of proxies `P`; `None` means `max(n/5, C)`.
    pub clusters: Option<usize>,
    /// Cluster inside each coarse class with a global budget of `P`.
    pub cluster_within_coarse: bool,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub cosine: bool,
    pub mlp_head: bool,
    pub temperature: f64,
    /// Encoder layer widths; the last one is the embedding dimension.
    pub hidden: Vec<usize>,
    /// Zero-padding of the random crop for image data (0 disables crops).
    pub augment_pad: usize,
    /// Random crops and mirrors for image data.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Coins,
            epochs: 30,
            ip_start_epoch: None,
            lambda_i: 1.0,
            lambda_p: 1.0,
            clusters: None,
            cluster_within_coarse: true,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 5.0,
            batch_size: 64,
            seed: 0,
            cosine: false,
            mlp_head: false,
            temperature: 0.05,
            hidden: vec![256, 128],
            augment_pad: 4,
            augment: true,
        }
    }
}

impl TrainConfig {
    /// `M`, defaulting to `T/2`.
    pub fn ip_start(&self) -> usize {
        self.ip_start_epoch.unwrap_or(self.epochs / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(invalid(format!("lr = {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum = {} must lie in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight decay must be non-negative"));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("lr decay epochs must be strictly increasing"));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(invalid("lr decay factor must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if !(self.lambda_i >= 0.0 && self.lambda_p >= 0.0) {
            return Err(invalid("loss weights must be non-negative"));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        if self.clusters == Some(0) {
            return Err(invalid("P must be positive"));
        }
        Ok(())
    }
}

/// `g' = grad + wd·param; v ← momentum·v + g'; param ← param − lr·v`.
pub fn sgd_step(
    param: &mut Matrix,
    grad: &Matrix,
    velocity: &mut Matrix,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(invalid(format!(
            "sgd shapes differ: param {:?}, grad {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    sgd_slice(
        param.as_mut_slice(),
        grad.as_slice(),
        velocity.as_mut_slice(),
        lr,
        momentum,
        weight_decay,
    );
    Ok(())
}

fn sgd_slice(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, wd: f64) {
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + wd * *p);
        *p -= lr * *v;
    }
}

/// Learning rate of the 0-based `epoch`: `lr / factor^{#decay epochs ≤ epoch}`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let decays = cfg.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.lr / cfg.lr_decay_factor.powi(decays as i32)
}

/// One line of the metrics log; losses are evaluated on the whole training
/// set without augmentation after the epoch (epoch 0 is the initial model).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_coarse: Option<f64>,
    pub loss_instance: Option<f64>,
    pub loss_proxy: Option<f64>,
    pub loss_total: f64,
    /// `mean_i ‖f(x_i) − w_i^I‖²`
    pub w_gap: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub metrics: Vec<EpochMetrics>,
    pub warnings: Vec<String>,
}

/// Objective weights in effect during 1-based `epoch`.
pub fn objective_weights(cfg: &TrainConfig, epoch: usize) -> ObjectiveWeights {
    match cfg.objective {
        Objective::Ins => ObjectiveWeights {
            coarse: 0.0,
            ..ObjectiveWeights::new(1.0, 0.0, InstanceMode::Full)
        },
        Objective::Cos | Objective::Opt => ObjectiveWeights::new(0.0, 0.0, InstanceMode::Full),
        Objective::Coins => ObjectiveWeights::new(cfg.lambda_i, 0.0, InstanceMode::Full),
        Objective::CoinsImp => ObjectiveWeights::new(cfg.lambda_i, 0.0, InstanceMode::WithinCoarse),
        Objective::CoinsP => {
            let proxy = if epoch > cfg.ip_start() { cfg.lambda_p } else { 0.0 };
            ObjectiveWeights::new(cfg.lambda_i, proxy, InstanceMode::WithinCoarse)
        }
    }
}

/// Labels fed to the `W^C` head and the head's width.
fn head_targets<'a>(cfg: &TrainConfig, data: &'a Dataset) -> Result<(&'a [usize], usize)> {
    if cfg.objective == Objective::Opt {
        let fine = data
            .fine_labels
            .as_deref()
            .ok_or_else(|| invalid("objective opt needs fine labels"))?;
        Ok((fine, data.num_fine))
    } else {
        Ok((&data.coarse_labels, data.num_coarse))
    }
}

/// `P` after applying the default.
pub fn cluster_count(cfg: &TrainConfig, data: &Dataset) -> usize {
    cfg.clusters
        .unwrap_or_else(|| (data.len() / 5).max(data.num_coarse))
        .min(data.len())
}

/// Rebuilds the membership by k-means on the rows of `W^I` and sets
/// `W^P` to the cluster means.
pub fn refresh_proxies(params: &mut ModelParams, cfg: &TrainConfig, data: &Dataset, epoch: usize) -> Result<()> {
    let p = cluster_count(cfg, data);
    let km = KMeansConfig::new(p, mix_seed(cfg.seed, 2, epoch as u64));
    let coarse = cfg.cluster_within_coarse.then_some(data.coarse_labels.as_slice());
    let (membership, _) = kmeans(&params.w_instance, &km, coarse)?;
    let weights = update_proxies(&params.w_instance, &membership, false)?;
    params.proxy = Some(ProxyHead { weights, membership });
    Ok(())
}

struct Velocity {
    encoder: Vec<(Matrix, Vec<f64>)>,
    mlp: Option<(Matrix, Matrix)>,
    coarse: Matrix,
    instance: Matrix,
}

impl Velocity {
    fn zeros(p: &ModelParams) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            encoder: p.encoder.iter().map(|l| (z(&l.weight), vec![0.0; l.bias.len()])).collect(),
            mlp: p.mlp_head.as_ref().map(|h| (z(&h.first), z(&h.second))),
            coarse: z(&p.w_coarse),
            instance: z(&p.w_instance),
        }
    }
}

fn dense_head_grad(rows: usize, cols: usize, sparse: &std::collections::BTreeMap<usize, Vec<f64>>) -> Matrix {
    let mut g = Matrix::zeros(rows, cols);
    for (&c, v) in sparse {
        g.row_mut(c).copy_from_slice(v);
    }
    g
}

/// Evaluates every loss term on the full dataset at the current parameters.
pub fn evaluate_metrics(
    params: &ModelParams,
    cfg: &TrainConfig,
    data: &Dataset,
    epoch: usize,
    lr: f64,
) -> Result<EpochMetrics> {
    let (targets, _) = head_targets(cfg, data)?;
    let weights = objective_weights(cfg, epoch.max(1));
    let index = CoarseIndex::new(&data.coarse_labels, data.num_coarse)?;
    let ids: Vec<usize> = (0..data.len()).collect();
    let fwd = encode(params, &data.examples)?;
    let obj = combined_objective(
        params,
        &fwd.features,
        BatchLabels {
            instance_ids: &ids,
            coarse_labels: targets,
        },
        &weights,
        Some(&index),
    )?;
    let w_gap = ids
        .iter()
        .map(|&i| sq_dist(fwd.features.instance.row(i), params.w_instance.row(i)))
        .sum::<f64>()
        / data.len() as f64;
    Ok(EpochMetrics {
        epoch,
        lr,
        loss_coarse: obj.coarse.map(|l| l.value),
        loss_instance: obj.instance.map(|l| l.value),
        loss_proxy: obj.proxy.map(|l| l.value),
        loss_total: obj.value,
        w_gap,
    })
}

/// Initial parameters for `cfg` on `data` (the `epochs = 0` result).
pub fn init_params(cfg: &TrainConfig, data: &Dataset) -> Result<ModelParams> {
    let (_, num_targets) = head_targets(cfg, data)?;
    let model_cfg = ModelConfig {
        input_dim: data.dim(),
        hidden: cfg.hidden.clone(),
        num_coarse: num_targets,
        num_instances: data.len(),
        cosine: cfg.cosine,
        temperature: cfg.temperature,
        mlp_head: cfg.mlp_head,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0, 0));
    let mut params = ModelParams::init(&model_cfg, &mut rng)?;
    if data.image.is_some() {
        params.input_shift = IMAGE_INPUT_SHIFT;
    }
    Ok(params)
}

/// Runs the full training procedure. Deterministic for a given config.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutput> {
    train_with(cfg, data, |_, _| Ok(()))
}

/// [`train`] with a hook called after every epoch's metrics are recorded.
pub fn train_with(
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&ModelParams, &EpochMetrics) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    data.validate()?;
    if data.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let (targets, _) = head_targets(cfg, data)?;
    let mut warnings = Vec::new();
    let m = cfg.ip_start();
    let uses_proxy = cfg.objective == Objective::CoinsP && cfg.lambda_p > 0.0 && m < cfg.epochs;
    if cfg.objective == Objective::CoinsP && m >= cfg.epochs {
        let msg = format!(
            "M = {m} >= T = {}: the instance-proxy phase never runs",
            cfg.epochs
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let mut params = init_params(cfg, data)?;
    let mut velocity = Velocity::zeros(&params);
    let index = CoarseIndex::new(&data.coarse_labels, data.num_coarse)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1, 0));
    let image = data.image.filter(|_| cfg.augment);

    if uses_proxy && m == 0 {
        refresh_proxies(&mut params, cfg, data, 0)?;
    }
    let mut metrics = vec![evaluate_metrics(&params, cfg, data, 0, lr_at(cfg, 0))?];
    on_epoch(&params, &metrics[0])?;

    for epoch in 1..=cfg.epochs {
        let lr = lr_at(cfg, epoch - 1);
        let weights = objective_weights(cfg, epoch);
        let order = shuffled_indices(data.len(), &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = data.examples.select_rows(chunk);
            if let Some(shape) = image {
                for (r, &i) in chunk.iter().enumerate() {
                    let a = augment(data.examples.row(i), shape, cfg.augment_pad, &mut rng);
                    x.row_mut(r).copy_from_slice(&a);
                }
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let fwd = encode(&params, &x)?;
            let obj = combined_objective(
                &params,
                &fwd.features,
                BatchLabels {
                    instance_ids: chunk,
                    coarse_labels: &labels,
                },
                &weights,
                Some(&index),
            )?;
            if !obj.value.is_finite() {
                return Err(Error::State(format!(
                    "training diverged at epoch {epoch}: non-finite loss (try a smaller lr)"
                )));
            }
            let grads = backward(&params, &fwd, &obj.grad_features)?;
            apply_step(&mut params, &mut velocity, &obj, grads, lr, cfg)?;
        }
        if uses_proxy && epoch >= m {
            refresh_proxies(&mut params, cfg, data, epoch)?;
        }
        let row = evaluate_metrics(&params, cfg, data, epoch, lr)?;
        if !row.loss_total.is_finite() || !row.w_gap.is_finite() || !params_finite(&params) {
            return Err(Error::State(format!(
                "training diverged at epoch {epoch}: non-finite loss (try a smaller lr)"
            )));
        }
        on_epoch(&params, &row)?;
        metrics.push(row);
    }
    Ok(TrainOutput {
        params,
        metrics,
        warnings,
    })
}

fn params_finite(p: &ModelParams) -> bool {
    p.encoder
        .iter()
        .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
        && p.mlp_head
            .as_ref()
            .is_none_or(|h| h.first.is_finite() && h.second.is_finite())
        && p.w_coarse.is_finite()
        && p.w_instance.is_finite()
        && p.proxy.as_ref().is_none_or(|h| h.weights.is_finite())
}

fn apply_step(
    params: &mut ModelParams,
    velocity: &mut Velocity,
    obj: &crate::losses::ObjectiveValue,
    grads: crate::model::ParamGrads,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let (mu, wd) = (cfg.momentum, cfg.weight_decay);
    for ((layer, (gw, gb)), (vw, vb)) in params
        .encoder
        .iter_mut()
        .zip(grads.encoder)
        .zip(velocity.encoder.iter_mut())
    {
        sgd_step(&mut layer.weight, &gw, vw, lr, mu, wd)?;
        sgd_slice(&mut layer.bias, &gb, vb, lr, mu, 0.0);
    }
    if let (Some(head), Some((g1, g2)), Some((v1, v2))) =
        (params.mlp_head.as_mut(), grads.mlp_head, velocity.mlp.as_mut())
    {
        sgd_step(&mut head.first, &g1, v1, lr, mu, wd)?;
        sgd_step(&mut head.second, &g2, v2, lr, mu, wd)?;
    }
    if obj.coarse.is_some() {
        let (r, c) = params.w_coarse.shape();
        let g = dense_head_grad(r, c, &obj.head_grad(crate::model::HeadKind::Coarse));
        sgd_step(&mut params.w_coarse, &g, &mut velocity.coarse, lr, mu, wd)?;
    }
    if obj.instance.is_some() {
        let (r, c) = params.w_instance.shape();
        let g = dense_head_grad(r, c, &obj.head_grad(crate::model::HeadKind::Instance));
        sgd_step(&mut params.w_instance, &g, &mut velocity.instance, lr, mu, wd)?;
    }
    // W^P is rebuilt from W^I after each epoch; its gradient is dropped.
    if params.cosine {
        params.normalize_heads()?;
    }
    Ok(())
}

/// Writes one JSON object per line.
pub fn write_metrics_jsonl(metrics: &[EpochMetrics], path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    for m in metrics {
        serde_json::to_writer(&mut out, m)?;
        out.push(b'\n');
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Shared-branch features of a dataset, for callers that need the raw
/// embedding without the projection head.
pub fn embed(params: &ModelParams, data: &Dataset) -> Result<Features> {
    Ok(encode(params, &data.examples)?.features)
}
