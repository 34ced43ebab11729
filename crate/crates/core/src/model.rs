//! MLP encoder with a hand-written backward pass, the coarse / instance /
//! proxy heads, and the `CFCK1` checkpoint format.
//!
//! Head matrices are stored transposed: row `k` of `w_coarse` is the column
//! `w_k^C` of the `d×C` head, so a class vector is a contiguous slice.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::Membership;
use crate::error::{invalid, Error, Result};
use crate::numerics::{l2_normalize, l2_normalize_backward, Matrix};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"CFCK1\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Coarse,
    Instance,
    Proxy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `in × out`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Two-layer projection `d → d_h → d` (ReLU in between, no biases) used on
/// the instance and proxy branches only.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpHead {
    pub first: Matrix,
    pub second: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxyHead {
    /// `P × d`, row `p` is proxy `w_p^P`.
    pub weights: Matrix,
    pub membership: Membership,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<DenseLayer>,
    pub mlp_head: Option<MlpHead>,
    pub w_coarse: Matrix,
    pub w_instance: Matrix,
    pub proxy: Option<ProxyHead>,
    pub cosine: bool,
    pub temperature: f64,
    /// Subtracted from every input value before the first layer (0.5 for
    /// images in `[0, 1]`, 0 otherwise).
    pub input_shift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Output widths of the encoder layers; the last one is `d`.
    pub hidden: Vec<usize>,
    pub num_coarse: usize,
    pub num_instances: usize,
    pub cosine: bool,
    pub temperature: f64,
    pub mlp_head: bool,
}

fn uniform(rows: usize, cols: usize, limit: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..limit))
}

fn normalize_rows(m: &mut Matrix) -> Result<()> {
    for r in 0..m.rows() {
        let unit = l2_normalize(m.row(r))?;
        m.row_mut(r).copy_from_slice(&unit);
    }
    Ok(())
}

impl ModelParams {
    /// He-uniform encoder and projection weights, zero biases, head columns
    /// uniform in `±1/√d` (unit-normalized under cosine softmax).
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.hidden.is_empty() || cfg.hidden.contains(&0) || cfg.input_dim == 0 {
            return Err(invalid("encoder needs at least one layer of nonzero width"));
        }
        if cfg.num_coarse == 0 || cfg.num_instances == 0 {
            return Err(invalid("heads need at least one column"));
        }
        if !(cfg.temperature > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        let mut encoder = Vec::with_capacity(cfg.hidden.len());
        let mut fan_in = cfg.input_dim;
        for &out in &cfg.hidden {
            let limit = (6.0 / fan_in as f64).sqrt();
            encoder.push(DenseLayer {
                weight: uniform(fan_in, out, limit, rng),
                bias: vec![0.0; out],
            });
            fan_in = out;
        }
        let d = fan_in;
        let mlp_head = cfg.mlp_head.then(|| {
            let limit = (6.0 / d as f64).sqrt();
            let first = uniform(d, d, limit, rng);
            let second = uniform(d, d, limit, rng);
            MlpHead { first, second }
        });
        let head_limit = 1.0 / (d as f64).sqrt();
        let mut w_coarse = uniform(cfg.num_coarse, d, head_limit, rng);
        let mut w_instance = uniform(cfg.num_instances, d, head_limit, rng);
        if cfg.cosine {
            normalize_rows(&mut w_coarse)?;
            normalize_rows(&mut w_instance)?;
        }
        Ok(Self {
            encoder,
            mlp_head,
            w_coarse,
            w_instance,
            proxy: None,
            cosine: cfg.cosine,
            temperature: cfg.temperature,
            input_shift: 0.0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].weight.rows()
    }

    /// Embedding dimension `d`.
    pub fn embed_dim(&self) -> usize {
        self.encoder.last().map_or(0, |l| l.weight.cols())
    }

    /// `1/temperature` under cosine softmax, otherwise 1.
    pub fn logit_scale(&self) -> f64 {
        if self.cosine {
            1.0 / self.temperature
        } else {
            1.0
        }
    }

    pub fn head(&self, kind: HeadKind) -> Result<&Matrix> {
        match kind {
            HeadKind::Coarse => Ok(&self.w_coarse),
            HeadKind::Instance => Ok(&self.w_instance),
            HeadKind::Proxy => self
                .proxy
                .as_ref()
                .map(|p| &p.weights)
                .ok_or_else(|| Error::State("proxy head W_P is not initialized".into())),
        }
    }

    /// Re-normalizes the trainable head columns (`W^C`, `W^I`) to unit norm.
    pub fn normalize_heads(&mut self) -> Result<()> {
        normalize_rows(&mut self.w_coarse)?;
        normalize_rows(&mut self.w_instance)
    }
}

/// Branch features read by the heads: `coarse` feeds `W^C`; `instance`
/// (after the optional projection) feeds `W^I` and `W^P`.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub coarse: Matrix,
    pub instance: Matrix,
}

impl Features {
    /// Both branches share the same embedding.
    pub fn shared(embedding: Matrix) -> Self {
        Self {
            coarse: embedding.clone(),
            instance: embedding,
        }
    }
}

/// Forward pass with everything the backward pass needs.
#[derive(Clone, Debug)]
pub struct Forward {
    layer_inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    mlp: Option<MlpCache>,
    /// Backbone embedding `f(x)` (unit-normalized under cosine softmax).
    pub embedding: Matrix,
    pub features: Features,
}

#[derive(Clone, Debug)]
struct MlpCache {
    hidden_pre: Matrix,
    hidden: Matrix,
    out_raw: Matrix,
}

fn relu(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

fn relu_mask(grad: &mut Matrix, pre: &Matrix) {
    for (g, &z) in grad.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
}

fn normalized_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    normalize_rows(&mut out)?;
    Ok(out)
}

fn normalize_rows_backward(raw: &Matrix, grad: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(raw.rows(), raw.cols());
    for r in 0..raw.rows() {
        let g = l2_normalize_backward(raw.row(r), grad.row(r))?;
        out.row_mut(r).copy_from_slice(&g);
    }
    Ok(out)
}

fn add_bias(m: &mut Matrix, bias: &[f64]) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Runs the encoder (ReLU between layers, none after the last), optional
/// normalization and the projection branch.
pub fn encode(params: &ModelParams, batch: &Matrix) -> Result<Forward> {
    if batch.cols() != params.input_dim() {
        return Err(invalid(format!(
            "input dim {} does not match encoder input {}",
            batch.cols(),
            params.input_dim()
        )));
    }
    let mut layer_inputs = Vec::with_capacity(params.encoder.len());
    let mut pre_activations = Vec::with_capacity(params.encoder.len());
    let mut x = batch.clone();
    if params.input_shift != 0.0 {
        x.as_mut_slice().iter_mut().for_each(|v| *v -= params.input_shift);
    }
    for (l, layer) in params.encoder.iter().enumerate() {
        let mut z = x.matmul(&layer.weight)?;
        add_bias(&mut z, &layer.bias);
        let next = if l + 1 < params.encoder.len() { relu(&z) } else { z.clone() };
        layer_inputs.push(x);
        pre_activations.push(z);
        x = next;
    }
    let embedding = if params.cosine { normalized_rows(&x)? } else { x };
    let (mlp, instance) = match &params.mlp_head {
        None => (None, embedding.clone()),
        Some(head) => {
            let hidden_pre = embedding.matmul(&head.first)?;
            let hidden = relu(&hidden_pre);
            let out_raw = hidden.matmul(&head.second)?;
            let out = if params.cosine {
                normalized_rows(&out_raw)?
            } else {
                out_raw.clone()
            };
            (
                Some(MlpCache {
                    hidden_pre,
                    hidden,
                    out_raw,
                }),
                out,
            )
        }
    };
    Ok(Forward {
        layer_inputs,
        pre_activations,
        mlp,
        features: Features {
            coarse: embedding.clone(),
            instance,
        },
        embedding,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    /// `(weight, bias)` gradient per encoder layer.
    pub encoder: Vec<(Matrix, Vec<f64>)>,
    pub mlp_head: Option<(Matrix, Matrix)>,
}

/// Back-propagates gradients w.r.t. both branch features into the encoder
/// and projection weights.
pub fn backward(params: &ModelParams, fwd: &Forward, grad: &Features) -> Result<ParamGrads> {
    let shape = fwd.embedding.shape();
    if grad.coarse.shape() != shape || grad.instance.shape() != shape {
        return Err(invalid("feature gradient shape does not match the forward pass"));
    }
    let mut grad_embedding = grad.coarse.clone();
    let mlp_grads = match (&params.mlp_head, &fwd.mlp) {
        (Some(head), Some(cache)) => {
            let g_out = if params.cosine {
                normalize_rows_backward(&cache.out_raw, &grad.instance)?
            } else {
                grad.instance.clone()
            };
            let g_second = cache.hidden.matmul_tn(&g_out)?;
            let mut g_hidden = g_out.matmul_nt(&head.second)?;
            relu_mask(&mut g_hidden, &cache.hidden_pre);
            let g_first = fwd.embedding.matmul_tn(&g_hidden)?;
            grad_embedding.add_scaled(&g_hidden.matmul_nt(&head.first)?, 1.0)?;
            Some((g_first, g_second))
        }
        (None, None) => {
            grad_embedding.add_scaled(&grad.instance, 1.0)?;
            None
        }
        _ => return Err(Error::State("forward pass does not match model head".into())),
    };
    let last = params.encoder.len() - 1;
    let mut g = if params.cosine {
        normalize_rows_backward(&fwd.pre_activations[last], &grad_embedding)?
    } else {
        grad_embedding
    };
    let mut encoder = vec![(Matrix::zeros(0, 0), Vec::new()); params.encoder.len()];
    for l in (0..params.encoder.len()).rev() {
        let gw = fwd.layer_inputs[l].matmul_tn(&g)?;
        let mut gb = vec![0.0; g.cols()];
        for r in 0..g.rows() {
            for (b, v) in gb.iter_mut().zip(g.row(r)) {
                *b += v;
            }
        }
        encoder[l] = (gw, gb);
        if l > 0 {
            let mut prev = g.matmul_nt(&params.encoder[l].weight)?;
            relu_mask(&mut prev, &fwd.pre_activations[l - 1]);
            g = prev;
        }
    }
    Ok(ParamGrads {
        encoder,
        mlp_head: mlp_grads,
    })
}

/// Logits of one head for every row of the branch features, optionally
/// restricted to `subset` columns (in the given order). Scaled by
/// `1/temperature` under cosine softmax.
pub fn head_logits(
    params: &ModelParams,
    features: &Features,
    head: HeadKind,
    subset: Option<&[usize]>,
) -> Result<Matrix> {
    let w = params.head(head)?;
    let x = match head {
        HeadKind::Coarse => &features.coarse,
        HeadKind::Instance | HeadKind::Proxy => &features.instance,
    };
    let mut logits = match subset {
        None => x.matmul_nt(w)?,
        Some(cols) => {
            if let Some(&bad) = cols.iter().find(|&&c| c >= w.rows()) {
                return Err(invalid(format!(
                    "column {bad} out of range for head with {} columns",
                    w.rows()
                )));
            }
            x.matmul_nt(&w.select_rows(cols))?
        }
    };
    logits.scale(params.logit_scale());
    Ok(logits)
}

// ---------------------------------------------------------------------------
// checkpoint format

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// `CFCK1\0`, manifest (layer shapes, flags, temperature, input shift,
/// head sizes),
/// then every parameter matrix as little-endian f64 in declaration order,
/// then the proxy membership when a proxy head exists.
pub fn encode_checkpoint(p: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, p.encoder.len());
    for l in &p.encoder {
        put_u32(&mut out, l.weight.rows());
        put_u32(&mut out, l.weight.cols());
    }
    out.push(p.cosine as u8);
    out.push(p.mlp_head.is_some() as u8);
    put_u32(&mut out, p.mlp_head.as_ref().map_or(0, |m| m.first.cols()));
    out.extend_from_slice(&p.temperature.to_le_bytes());
    out.extend_from_slice(&p.input_shift.to_le_bytes());
    put_u32(&mut out, p.w_coarse.rows());
    put_u32(&mut out, p.w_instance.rows());
    put_u32(&mut out, p.proxy.as_ref().map_or(0, |x| x.weights.rows()));
    put_u32(&mut out, p.embed_dim());
    out.push(p.proxy.as_ref().is_some_and(|x| x.membership.within_coarse) as u8);

    for l in &p.encoder {
        put_f64s(&mut out, l.weight.as_slice());
        put_f64s(&mut out, &l.bias);
    }
    if let Some(m) = &p.mlp_head {
        put_f64s(&mut out, m.first.as_slice());
        put_f64s(&mut out, m.second.as_slice());
    }
    put_f64s(&mut out, p.w_coarse.as_slice());
    put_f64s(&mut out, p.w_instance.as_slice());
    if let Some(px) = &p.proxy {
        put_f64s(&mut out, px.weights.as_slice());
        for &a in &px.membership.assignment {
            put_u32(&mut out, a);
        }
        out.extend_from_slice(&px.membership.objective.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, k: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < k {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated checkpoint while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let count = rows.checked_mul(cols).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            message: format!("{what} shape overflows"),
        })?;
        if (self.bytes.len() - self.pos) / 8 < count {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated checkpoint while reading {what}"),
            });
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(self.f64(what)?);
        }
        Matrix::from_vec(rows, cols, data)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(6, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected CFCK1".into(),
        });
    }
    let n_layers = c.u32("layer count")?;
    if n_layers == 0 {
        return Err(Error::Format {
            offset: 6,
            message: "checkpoint has no encoder layers".into(),
        });
    }
    let mut shapes = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        shapes.push((c.u32("layer rows")?, c.u32("layer cols")?));
    }
    let cosine = c.u8("cosine flag")? != 0;
    let has_mlp = c.u8("mlp flag")? != 0;
    let mlp_hidden = c.u32("mlp width")?;
    let temperature = c.f64("temperature")?;
    let input_shift = c.f64("input shift")?;
    let num_coarse = c.u32("C")?;
    let num_instances = c.u32("n")?;
    let num_proxies = c.u32("P")?;
    let d = c.u32("d")?;
    let within = c.u8("within-coarse flag")? != 0;

    let mut encoder = Vec::with_capacity(n_layers);
    for (l, &(rows, cols)) in shapes.iter().enumerate() {
        let weight = c.matrix(rows, cols, &format!("layer {l} weight"))?;
        let bias = c.matrix(1, cols, &format!("layer {l} bias"))?.into_vec();
        encoder.push(DenseLayer { weight, bias });
    }
    if shapes.last().map(|s| s.1) != Some(d) {
        return Err(Error::Format {
            offset: c.pos as u64,
            message: "embedding dim does not match last layer".into(),
        });
    }
    let mlp_head = if has_mlp {
        Some(MlpHead {
            first: c.matrix(d, mlp_hidden, "mlp first")?,
            second: c.matrix(mlp_hidden, d, "mlp second")?,
        })
    } else {
        None
    };
    let w_coarse = c.matrix(num_coarse, d, "W_C")?;
    let w_instance = c.matrix(num_instances, d, "W_I")?;
    let proxy = if num_proxies > 0 {
        let weights = c.matrix(num_proxies, d, "W_P")?;
        let mut assignment = Vec::with_capacity(num_instances);
        for _ in 0..num_instances {
            let at = c.pos as u64;
            let a = c.u32("membership")?;
            if a >= num_proxies {
                return Err(Error::Format {
                    offset: at,
                    message: format!("cluster id {a} >= P = {num_proxies}"),
                });
            }
            assignment.push(a);
        }
        let objective = c.f64("membership objective")?;
        Some(ProxyHead {
            weights,
            membership: Membership {
                assignment,
                num_clusters: num_proxies,
                within_coarse: within,
                objective,
            },
        })
    } else {
        None
    };
    if c.pos != bytes.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            message: "trailing bytes after checkpoint".into(),
        });
    }
    Ok(ModelParams {
        encoder,
        mlp_head,
        w_coarse,
        w_instance,
        proxy,
        cosine,
        temperature,
        input_shift,
    })
}

pub fn save_checkpoint(p: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(p))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    decode_checkpoint(&fs::read(path)?)
}
