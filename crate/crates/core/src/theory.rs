//! Numerical check of the fine-class lower bounds.
//!
//! The constants `α, β, a, b, c, z, M` are measured as exact minima and
//! maxima over the data, after which the inequalities
//!
//! * Jensen: `exp(f_i·w̄_s) ≤ (1/z) Σ_{y_j^F = s} exp(f_i·w_j^I)`,
//! * `Pr{y_i^F} ≥ z·α·exp(f_i·(w̄_{y_i^F} − w_{y_i^I}))`,
//! * `Pr{y_i^F} ≥ α·z·h(c, α, β)` (full instance softmax),
//! * `Pr{y_i^F} ≥ α'·z·h(c, α', β)` (within-coarse instance softmax),
//!
//! are evaluated per example. Every quantity is carried in log space; `α`
//! and `β` enter through their log-odds `min_i (s_{y_i} − lse_{j≠y_i} s_j)`,
//! which stays exact when the probabilities round to 1.
//!
//! Embeddings passed here are the vectors whose dot products with head
//! columns are the logits (temperature already folded in).

use serde::{Deserialize, Serialize};

use crate::data::{group_by_label, Dataset};
use crate::error::{invalid, Error, Result};
use crate::eval::fine_class_means;
use crate::model::{encode, ModelParams};
use crate::numerics::{dot, log_add_exp, log_sum_exp, norm, Matrix};

/// Relative tolerance of every inequality check.
pub const CHECK_RTOL: f64 = 1e-9;

/// Square-root arguments down to `−SQRT_ATOL·max(1, 2c²)` are clamped to 0.
pub const SQRT_ATOL: f64 = 1e-12;

/// Which instance softmax the constants describe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Softmax over all `n` instance columns.
    Theorem1,
    /// Softmax over the instance columns of the example's coarse class.
    Theorem2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub mode: Mode,
    pub log_alpha: f64,
    /// `log(α/(1−α))`
    pub logodds_alpha: f64,
    pub log_beta: f64,
    pub logodds_beta: f64,
    pub log_a: f64,
    pub log_b: f64,
    pub c: f64,
    /// Examples per fine class.
    pub z: usize,
    pub num_fine: usize,
    /// Largest number of examples outside any example's coarse class.
    pub m: usize,
}

impl Constants {
    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn beta(&self) -> f64 {
        self.log_beta.exp()
    }
}

fn log_prob_from_logodds(lo: f64) -> f64 {
    -log_add_exp(0.0, -lo)
}

/// Common size of every fine class, or `Unsupported`.
pub fn uniform_class_size(fine_labels: &[usize]) -> Result<(usize, usize)> {
    let num_fine = fine_labels.iter().max().map_or(0, |m| m + 1);
    let sizes: Vec<usize> = group_by_label(fine_labels, num_fine).iter().map(Vec::len).collect();
    match sizes.first() {
        Some(&z) if z > 0 && sizes.iter().all(|&s| s == z) => Ok((z, num_fine)),
        _ => {
            let lo = sizes.iter().min().copied().unwrap_or(0);
            let hi = sizes.iter().max().copied().unwrap_or(0);
            Err(Error::Unsupported(format!(
                "fine classes must all have the same size (zF = n); found sizes from {lo} to {hi}"
            )))
        }
    }
}

/// `min_i (t_{y_i} − lse_{j≠y_i} t_j)` and `min_i lse_{j≠y_i} t_j` where
/// `t_j = x_i·w_j` ranges over `cols(i)`.
fn residual_minima<'a>(
    x: &Matrix,
    w: &Matrix,
    target: impl Fn(usize) -> usize,
    cols: impl Fn(usize) -> &'a [usize],
    what: &str,
) -> Result<(f64, f64)> {
    let mut lo_min = f64::INFINITY;
    let mut log_res_min = f64::INFINITY;
    for i in 0..x.rows() {
        let y = target(i);
        let others: Vec<f64> = cols(i)
            .iter()
            .filter(|&&j| j != y)
            .map(|&j| dot(x.row(i), w.row(j)))
            .collect();
        let log_res = log_sum_exp(&others);
        if log_res == f64::NEG_INFINITY {
            return Err(Error::Domain(format!(
                "{what} probability of example {i} is exactly 1 (no competing columns), so 1 − {what} = 0"
            )));
        }
        let lo = dot(x.row(i), w.row(y)) - log_res;
        lo_min = lo_min.min(lo);
        log_res_min = log_res_min.min(log_res);
    }
    Ok((lo_min, log_res_min))
}

fn check_shapes(
    embeddings: &Matrix,
    w_coarse: &Matrix,
    w_instance: &Matrix,
    coarse_labels: &[usize],
    fine_labels: &[usize],
) -> Result<()> {
    let n = embeddings.rows();
    if n == 0 {
        return Err(invalid("no examples"));
    }
    let d = embeddings.cols();
    if w_coarse.cols() != d || w_instance.cols() != d {
        return Err(invalid("head and embedding dimensions differ"));
    }
    if w_instance.rows() != n {
        return Err(invalid(format!(
            "W_I has {} columns for {n} examples",
            w_instance.rows()
        )));
    }
    if coarse_labels.len() != n || fine_labels.len() != n {
        return Err(invalid("label counts do not match the number of examples"));
    }
    if let Some(&bad) = coarse_labels.iter().find(|&&k| k >= w_coarse.rows()) {
        return Err(invalid(format!("coarse label {bad} >= C = {}", w_coarse.rows())));
    }
    let num_fine = fine_labels.iter().max().map_or(0, |m| m + 1);
    let mut parent = vec![None; num_fine];
    for (&s, &k) in fine_labels.iter().zip(coarse_labels) {
        match parent[s] {
            None => parent[s] = Some(k),
            Some(p) if p != k => {
                return Err(invalid(format!("fine class {s} spans coarse classes {p} and {k}")))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Measures every constant of the bounds. Instance `i` is example `i`.
pub fn measure_constants(
    embeddings: &Matrix,
    w_coarse: &Matrix,
    w_instance: &Matrix,
    coarse_labels: &[usize],
    fine_labels: &[usize],
    mode: Mode,
) -> Result<Constants> {
    check_shapes(embeddings, w_coarse, w_instance, coarse_labels, fine_labels)?;
    let (z, num_fine) = uniform_class_size(fine_labels)?;
    let n = embeddings.rows();
    let num_coarse = w_coarse.rows();
    let members = group_by_label(coarse_labels, num_coarse);
    let all: Vec<usize> = (0..n).collect();
    let all_coarse: Vec<usize> = (0..num_coarse).collect();

    let (logodds_alpha, log_a) = match mode {
        Mode::Theorem1 => residual_minima(embeddings, w_instance, |i| i, |_| &all, "instance")?,
        Mode::Theorem2 => residual_minima(
            embeddings,
            w_instance,
            |i| i,
            |i| &members[coarse_labels[i]],
            "within-coarse instance",
        )?,
    };
    let (logodds_beta, log_b) =
        residual_minima(embeddings, w_coarse, |i| coarse_labels[i], |_| &all_coarse, "coarse")?;

    let c = (0..n)
        .map(|i| norm(embeddings.row(i)))
        .chain((0..n).map(|j| norm(w_instance.row(j))))
        .chain((0..num_coarse).map(|k| norm(w_coarse.row(k))))
        .fold(0.0, f64::max);
    let m = coarse_labels
        .iter()
        .map(|&k| n - members[k].len())
        .max()
        .unwrap_or(0);
    Ok(Constants {
        mode,
        log_alpha: log_prob_from_logodds(logodds_alpha),
        logodds_alpha,
        log_beta: log_prob_from_logodds(logodds_beta),
        logodds_beta,
        log_a,
        log_b,
        c,
        z,
        num_fine,
        m,
    })
}

/// `√(2c² − 2x)` with small negative arguments clamped to 0.
fn bounded_distance(c: f64, x: f64, what: &str) -> Result<f64> {
    let arg = 2.0 * c * c - 2.0 * x;
    let tol = SQRT_ATOL * (2.0 * c * c).max(1.0);
    if arg.is_nan() || arg < -tol {
        return Err(Error::InconsistentConstants(format!(
            "2c² − 2·log({what}) = {arg:e} is negative (c = {c})"
        )));
    }
    Ok(arg.max(0.0).sqrt())
}

/// `√A + √B` with `A = 2c² − 2 log(aα/(1−α))`, `B = 2c² − 2 log(bβ/(1−β))`.
fn distance_sum(c: f64, log_a: f64, logodds_alpha: f64, log_b: f64, logodds_beta: f64) -> Result<f64> {
    Ok(bounded_distance(c, log_a + logodds_alpha, "aα/(1−α)")?
        + bounded_distance(c, log_b + logodds_beta, "bβ/(1−β)")?)
}

/// `log h(c, α, β) = −(2c(z−1)/z)(√A + √B)`, from log-space constants.
pub fn log_h_factor(
    c: f64,
    log_a: f64,
    logodds_alpha: f64,
    log_b: f64,
    logodds_beta: f64,
    z: usize,
) -> Result<f64> {
    if z == 0 {
        return Err(invalid("z must be at least 1"));
    }
    if !(c >= 0.0) {
        return Err(invalid(format!("c = {c} must be non-negative")));
    }
    let s = distance_sum(c, log_a, logodds_alpha, log_b, logodds_beta)?;
    Ok(-(2.0 * c * (z - 1) as f64 / z as f64) * s)
}

fn logodds(p: f64, name: &str) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("{name} = {p} must lie in (0, 1)")));
    }
    Ok(p.ln() - (-p).ln_1p())
}

/// `h(c, α, β)` from linear-space constants.
pub fn h_factor(c: f64, alpha: f64, beta: f64, a: f64, b: f64, z: usize) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(invalid(format!("a = {a} and b = {b} must be positive")));
    }
    let lh = log_h_factor(c, a.ln(), logodds(alpha, "alpha")?, b.ln(), logodds(beta, "beta")?, z)?;
    Ok(lh.exp())
}

/// Relaxed constants for the within-coarse instance softmax.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Relaxation {
    pub log_c_prime: f64,
    pub log_c_doubleprime: f64,
    pub log_alpha_prime: f64,
    pub logodds_alpha_prime: f64,
}

/// `c' = exp(2c(√A + √B))`, `c'' = c'·M`, `α' = 1/(1/α + (1−β)c''/β)`.
pub fn relax(k: &Constants) -> Result<Relaxation> {
    let log_c_prime = 2.0 * k.c * distance_sum(k.c, k.log_a, k.logodds_alpha, k.log_b, k.logodds_beta)?;
    let log_c_doubleprime = log_c_prime + (k.m as f64).ln();
    // log((1−β)c''/β)
    let log_k = -k.logodds_beta + log_c_doubleprime;
    Ok(Relaxation {
        log_c_prime,
        log_c_doubleprime,
        log_alpha_prime: -log_add_exp(-k.log_alpha, log_k),
        // 1/α' − 1 = (1/α − 1) + (1−β)c''/β
        logodds_alpha_prime: -log_add_exp(-k.logodds_alpha, log_k),
    })
}

/// `α'` from linear-space inputs.
pub fn alpha_prime(alpha: f64, beta: f64, c_doubleprime: f64) -> f64 {
    1.0 / (1.0 / alpha + (1.0 - beta) * c_doubleprime / beta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    /// `Pr{y_i^F | f(x_i), W^I}`
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub theorem: u8,
    pub n: usize,
    pub alpha: f64,
    pub log_alpha: f64,
    pub beta: f64,
    pub log_beta: f64,
    /// `None` when `a` overflows `f64`; see `log_a`.
    pub a: Option<f64>,
    pub log_a: f64,
    pub b: Option<f64>,
    pub log_b: f64,
    pub c: f64,
    pub z: usize,
    pub num_fine: usize,
    #[serde(rename = "M")]
    pub m: usize,
    /// How `M` is taken: the maximum over examples.
    pub m_policy: String,
    pub h: f64,
    pub log_h: f64,
    pub c_prime: Option<f64>,
    pub log_c_prime: Option<f64>,
    pub c_doubleprime: Option<f64>,
    pub log_c_doubleprime: Option<f64>,
    pub alpha_prime: Option<f64>,
    pub log_alpha_prime: Option<f64>,
    pub per_example: Vec<BoundCheck>,
    pub lhs_log: Vec<f64>,
    pub rhs_log: Vec<f64>,
    /// Every `lhs ≥ rhs·(1 − 1e-9)`, compared in log space.
    pub all_hold: bool,
    /// `min_i (lhs_i − rhs_i)`
    pub slack_min: f64,
    /// The bound underflows to 0, so it holds trivially.
    pub vacuous: bool,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn holds(lhs_log: f64, rhs_log: f64) -> bool {
    rhs_log == f64::NEG_INFINITY || lhs_log >= rhs_log + (-CHECK_RTOL).ln_1p()
}

/// Checks Theorem 1 (`which = 1`) or Theorem 2 (`which = 2`) per example.
pub fn verify_theorem(
    embeddings: &Matrix,
    w_coarse: &Matrix,
    w_instance: &Matrix,
    coarse_labels: &[usize],
    fine_labels: &[usize],
    which: u8,
) -> Result<BoundReport> {
    let mode = match which {
        1 => Mode::Theorem1,
        2 => Mode::Theorem2,
        _ => return Err(invalid(format!("theorem must be 1 or 2, got {which}"))),
    };
    let k = measure_constants(embeddings, w_coarse, w_instance, coarse_labels, fine_labels, mode)?;
    let z_ln = (k.z as f64).ln();
    let (relaxation, log_rhs) = match mode {
        Mode::Theorem1 => {
            let lh = log_h_factor(k.c, k.log_a, k.logodds_alpha, k.log_b, k.logodds_beta, k.z)?;
            (None, k.log_alpha + z_ln + lh)
        }
        Mode::Theorem2 => {
            let r = relax(&k)?;
            let lh = log_h_factor(k.c, k.log_a, r.logodds_alpha_prime, k.log_b, k.logodds_beta, k.z)?;
            (Some(r), r.log_alpha_prime + z_ln + lh)
        }
    };
    let log_h = log_rhs
        - z_ln
        - relaxation.map_or(k.log_alpha, |r| r.log_alpha_prime);

    let lhs_log = crate::eval::log_fine_class_prob(embeddings, w_instance, fine_labels, k.num_fine)?;
    let rhs = log_rhs.exp();
    let per_example: Vec<BoundCheck> = lhs_log
        .iter()
        .map(|&l| BoundCheck { lhs: l.exp(), rhs })
        .collect();
    let all_hold = lhs_log.iter().all(|&l| holds(l, log_rhs));
    let slack_min = per_example
        .iter()
        .map(|p| p.lhs - p.rhs)
        .fold(f64::INFINITY, f64::min);
    Ok(BoundReport {
        theorem: which,
        n: embeddings.rows(),
        alpha: k.alpha(),
        log_alpha: k.log_alpha,
        beta: k.beta(),
        log_beta: k.log_beta,
        a: finite(k.log_a.exp()),
        log_a: k.log_a,
        b: finite(k.log_b.exp()),
        log_b: k.log_b,
        c: k.c,
        z: k.z,
        num_fine: k.num_fine,
        m: k.m,
        m_policy: "max over examples".into(),
        h: log_h.exp(),
        log_h,
        c_prime: relaxation.and_then(|r| finite(r.log_c_prime.exp())),
        log_c_prime: relaxation.map(|r| r.log_c_prime),
        c_doubleprime: relaxation.and_then(|r| finite(r.log_c_doubleprime.exp())),
        log_c_doubleprime: relaxation.and_then(|r| finite(r.log_c_doubleprime)),
        alpha_prime: relaxation.map(|r| r.log_alpha_prime.exp()),
        log_alpha_prime: relaxation.map(|r| r.log_alpha_prime),
        rhs_log: vec![log_rhs; lhs_log.len()],
        lhs_log,
        per_example,
        all_hold,
        slack_min,
        vacuous: rhs == 0.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Check {
    /// `min_s (1 − lhs_s/rhs_s)` of the Jensen step over fine classes.
    pub jensen_slack: f64,
    pub lemma_lhs_log: f64,
    pub lemma_rhs_log: f64,
    /// `lhs/rhs − 1` of the lemma inequality.
    pub lemma_slack: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub log_alpha: f64,
    pub z: usize,
    pub per_example: Vec<Lemma1Check>,
    pub jensen_all_hold: bool,
    pub lemma_all_hold: bool,
    pub jensen_slack_min: f64,
    pub lemma_slack_min: f64,
}

/// Checks the Jensen step and the lemma inequality with `α` measured over
/// the full instance softmax.
pub fn verify_lemma1(embeddings: &Matrix, w_instance: &Matrix, fine_labels: &[usize]) -> Result<Lemma1Report> {
    let n = embeddings.rows();
    if w_instance.rows() != n || fine_labels.len() != n || w_instance.cols() != embeddings.cols() {
        return Err(invalid("embeddings, W_I and fine labels must describe the same n examples"));
    }
    let (z, num_fine) = uniform_class_size(fine_labels)?;
    let all: Vec<usize> = (0..n).collect();
    let (logodds_alpha, _) = residual_minima(embeddings, w_instance, |i| i, |_| &all, "instance")?;
    let log_alpha = log_prob_from_logodds(logodds_alpha);
    let means = fine_class_means(w_instance, fine_labels, num_fine)?;
    let groups = group_by_label(fine_labels, num_fine);
    let lhs_log = crate::eval::log_fine_class_prob(embeddings, w_instance, fine_labels, num_fine)?;
    let z_ln = (z as f64).ln();

    let per_example: Vec<Lemma1Check> = (0..n)
        .map(|i| {
            let x = embeddings.row(i);
            let jensen_slack = groups
                .iter()
                .enumerate()
                .map(|(s, members)| {
                    let lhs = dot(x, means.row(s));
                    let scores: Vec<f64> = members.iter().map(|&j| dot(x, w_instance.row(j))).collect();
                    let rhs = log_sum_exp(&scores) - z_ln;
                    -(lhs - rhs).exp_m1()
                })
                .fold(f64::INFINITY, f64::min);
            let gap = dot(x, means.row(fine_labels[i])) - dot(x, w_instance.row(i));
            let rhs = z_ln + log_alpha + gap;
            Lemma1Check {
                jensen_slack,
                lemma_lhs_log: lhs_log[i],
                lemma_rhs_log: rhs,
                lemma_slack: (lhs_log[i] - rhs).exp_m1(),
            }
        })
        .collect();
    let jensen_slack_min = per_example.iter().map(|p| p.jensen_slack).fold(f64::INFINITY, f64::min);
    let lemma_slack_min = per_example.iter().map(|p| p.lemma_slack).fold(f64::INFINITY, f64::min);
    Ok(Lemma1Report {
        log_alpha,
        z,
        jensen_all_hold: jensen_slack_min >= -CHECK_RTOL,
        lemma_all_hold: per_example.iter().all(|p| holds(p.lemma_lhs_log, p.lemma_rhs_log)),
        per_example,
        jensen_slack_min,
        lemma_slack_min,
    })
}

/// Logit-space embeddings and heads of a trained model: the temperature
/// scale is split evenly between embeddings and head columns so that the
/// dot products equal the model's logits.
pub fn model_matrices(params: &ModelParams, data: &Dataset) -> Result<(Matrix, Matrix, Matrix)> {
    if params.mlp_head.is_some() {
        return Err(Error::Unsupported(
            "bounds assume one shared embedding for both heads; the MLP projection head breaks that".into(),
        ));
    }
    if data.dim() != params.input_dim() {
        return Err(invalid(format!(
            "dataset dim {} does not match checkpoint input dim {}",
            data.dim(),
            params.input_dim()
        )));
    }
    let root = params.logit_scale().sqrt();
    let mut e = encode(params, &data.examples)?.embedding;
    if !e.is_finite() || !params.w_coarse.is_finite() || !params.w_instance.is_finite() {
        return Err(Error::DegenerateInput("model produces non-finite embeddings or heads".into()));
    }
    let mut wc = params.w_coarse.clone();
    let mut wi = params.w_instance.clone();
    e.scale(root);
    wc.scale(root);
    wi.scale(root);
    Ok((e, wc, wi))
}

/// Runs [`verify_theorem`] on a model and its training set.
pub fn verify_model(params: &ModelParams, data: &Dataset, which: u8) -> Result<BoundReport> {
    let fine = data
        .fine_labels
        .as_ref()
        .ok_or_else(|| invalid("bounds need fine labels"))?;
    uniform_class_size(fine)?;
    let (e, wc, wi) = model_matrices(params, data)?;
    verify_theorem(&e, &wc, &wi, &data.coarse_labels, fine, which)
}
