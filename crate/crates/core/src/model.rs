//! The shallow transformation G, the linear classifier F, and the
//! two-stage training loop: pre-training on weighted cross-entropy,
//! then adaptation with per-epoch shift re-estimation and confident
//! pseudo-label selection.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::kernels::{median_bandwidth, FeatureSet, KernelSpec};
use crate::label_shift::{bbse_solve, plug_in_estimates, ShiftEstimate};
use crate::numerics::DenseMatrix;
use crate::objectives::{loss_du, loss_e, loss_tu, ClassWeights, LossBundle};

const CHECKPOINT_TAG: &str = "condalign-mul v1";
const MAX_HALVINGS: usize = 20;
/// Pseudo-labeled target joins the separation term once its value has
/// moved less than this relative amount for STABLE_EPOCHS epochs in a row.
const STABLE_REL_CHANGE: f64 = 0.01;
const STABLE_EPOCHS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    /// fan_in x fan_out.
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl AffineLayer {
    pub fn new(weight: DenseMatrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::DimensionMismatch(format!(
                "bias length {} for {} outputs",
                bias.len(),
                weight.cols()
            )));
        }
        if bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(0));
        }
        Ok(Self { weight, bias })
    }

    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let bias: Vec<f64> = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            weight: DenseMatrix::new(fan_in, fan_out, data).unwrap(),
            bias,
        }
    }

    fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = x.matmul(&self.weight)?;
        for i in 0..out.rows() {
            for (j, &b) in self.bias.iter().enumerate() {
                out.set(i, j, out.get(i, j) + b);
            }
        }
        Ok(out)
    }
}

/// Transformation G (affine stack, tanh between layers, linear output)
/// and classifier F (single affine layer on the transformed features).
#[derive(Debug, Clone, PartialEq)]
pub struct MulParams {
    pub g: Vec<AffineLayer>,
    pub f: AffineLayer,
}

impl MulParams {
    /// Initialize from `dims` = [d, h_1, ..., d_z] with `classes` logits,
    /// all entries uniform in +-1/sqrt(fan_in) drawn from `seed`.
    pub fn init(dims: &[usize], classes: usize, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "need at least input and output widths".into(),
            ));
        }
        if dims.iter().any(|&d| d == 0) || classes == 0 {
            return Err(Error::InvalidArgument("zero layer width".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = dims
            .windows(2)
            .map(|w| AffineLayer::init(w[0], w[1], &mut rng))
            .collect();
        let f = AffineLayer::init(dims[dims.len() - 1], classes, &mut rng);
        Ok(Self { g, f })
    }

    pub fn input_dim(&self) -> usize {
        self.g[0].weight.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.g[self.g.len() - 1].weight.cols()
    }

    pub fn class_count(&self) -> usize {
        self.f.weight.cols()
    }

    fn step(&mut self, grads: &ParamGrads, lr: f64) {
        for (layer, g) in self.g.iter_mut().chain(std::iter::once(&mut self.f)).zip(
            grads
                .g
                .iter()
                .chain(std::iter::once(&grads.f)),
        ) {
            for (w, gw) in layer.weight.data_mut().iter_mut().zip(g.weight.data()) {
                *w -= lr * gw;
            }
            for (b, gb) in layer.bias.iter_mut().zip(g.bias.iter()) {
                *b -= lr * gb;
            }
        }
    }
}

struct ParamGrads {
    g: Vec<AffineLayer>,
    f: AffineLayer,
}

impl ParamGrads {
    fn zeros(params: &MulParams) -> Self {
        let g = params
            .g
            .iter()
            .map(|l| AffineLayer {
                weight: DenseMatrix::zeros(l.weight.rows(), l.weight.cols()),
                bias: vec![0.0; l.bias.len()],
            })
            .collect();
        let f = AffineLayer {
            weight: DenseMatrix::zeros(params.f.weight.rows(), params.f.weight.cols()),
            bias: vec![0.0; params.f.bias.len()],
        };
        Self { g, f }
    }

    fn add(&mut self, other: &ParamGrads) {
        for (a, b) in self
            .g
            .iter_mut()
            .chain(std::iter::once(&mut self.f))
            .zip(other.g.iter().chain(std::iter::once(&other.f)))
        {
            for (x, y) in a.weight.data_mut().iter_mut().zip(b.weight.data()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(b.bias.iter()) {
                *x += y;
            }
        }
    }
}

struct ForwardCache {
    /// Input to each G layer; entry i feeds layer i.
    layer_inputs: Vec<DenseMatrix>,
    z: DenseMatrix,
    logits: DenseMatrix,
}

fn forward_cached(params: &MulParams, x: &DenseMatrix) -> Result<ForwardCache> {
    if x.cols() != params.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "input width {} vs first layer {}",
            x.cols(),
            params.input_dim()
        )));
    }
    let last = params.g.len() - 1;
    let mut layer_inputs = Vec::with_capacity(params.g.len());
    let mut cur = x.clone();
    let mut z = None;
    for (i, layer) in params.g.iter().enumerate() {
        let mut a = layer.apply(&cur)?;
        layer_inputs.push(cur);
        if i < last {
            for v in a.data_mut() {
                *v = v.tanh();
            }
            cur = a;
        } else {
            z = Some(a.clone());
            cur = a;
        }
    }
    let z = z.unwrap();
    let logits = params.f.apply(&z)?;
    Ok(ForwardCache {
        layer_inputs,
        z,
        logits,
    })
}

/// Transformed features and logits for a batch.
pub fn forward(params: &MulParams, x: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    let cache = forward_cached(params, x)?;
    Ok((cache.z, cache.logits))
}

/// Parameter gradients given upstream gradients on Z and on the logits.
fn backward(
    params: &MulParams,
    cache: &ForwardCache,
    d_z: Option<&DenseMatrix>,
    d_logits: Option<&DenseMatrix>,
) -> Result<ParamGrads> {
    let n = cache.z.rows();
    let dz_dim = cache.z.cols();
    let mut grads = ParamGrads::zeros(params);

    // classifier head and its contribution to dZ
    let mut d_total = match d_z {
        Some(m) => m.clone(),
        None => DenseMatrix::zeros(n, dz_dim),
    };
    if let Some(dl) = d_logits {
        grads.f.weight = cache.z.transpose().matmul(dl)?;
        for i in 0..dl.rows() {
            for (j, b) in grads.f.bias.iter_mut().enumerate() {
                *b += dl.get(i, j);
            }
        }
        let through = dl.matmul(&params.f.weight.transpose())?;
        for (a, b) in d_total.data_mut().iter_mut().zip(through.data()) {
            *a += b;
        }
    }

    // walk G backwards; tanh sits after every layer except the last
    let mut upstream = d_total;
    for i in (0..params.g.len()).rev() {
        let input = &cache.layer_inputs[i];
        grads.g[i].weight = input.transpose().matmul(&upstream)?;
        for r in 0..upstream.rows() {
            for (j, b) in grads.g[i].bias.iter_mut().enumerate() {
                *b += upstream.get(r, j);
            }
        }
        if i > 0 {
            let mut prev = upstream.matmul(&params.g[i].weight.transpose())?;
            // layer_inputs[i] holds tanh of layer i-1's preactivation
            for (v, &t) in prev.data_mut().iter_mut().zip(input.data()) {
                *v *= 1.0 - t * t;
            }
            upstream = prev;
        }
    }
    Ok(grads)
}

/// Row-wise softmax.
pub fn softmax(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row_max = out
            .row(i)
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for j in 0..out.cols() {
            let e = (out.get(i, j) - row_max).exp();
            out.set(i, j, e);
            sum += e;
        }
        for j in 0..out.cols() {
            out.set(i, j, out.get(i, j) / sum);
        }
    }
    out
}

/// Hard predictions; ties resolve to the lowest class index.
pub fn predictions(logits: &DenseMatrix) -> Vec<i64> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as i64
        })
        .collect()
}

/// Rows whose top softmax probability strictly exceeds `tau`, with their
/// argmax labels.
pub fn pseudo_label(logits: &DenseMatrix, tau: f64) -> Result<(Vec<usize>, Vec<i64>)> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence threshold {tau} outside (0,1)"
        )));
    }
    let probs = softmax(logits);
    let mut indices = Vec::new();
    let mut labels = Vec::new();
    for i in 0..probs.rows() {
        let row = probs.row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if row[best] > tau {
            indices.push(i);
            labels.push(best as i64);
        }
    }
    Ok((indices, labels))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_tu: f64,
    pub lambda_du: f64,
    pub epsilon: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub t_pre: usize,
    pub t_adapt: usize,
    pub seed: u64,
    /// Hidden widths of G; the last entry is the transformed width d_z.
    pub hidden_dims: Vec<usize>,
    pub label_kernel: KernelSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_tu: 1.0,
            lambda_du: 0.1,
            epsilon: 1e-3,
            tau: 0.8,
            learning_rate: 0.1,
            t_pre: 200,
            t_adapt: 50,
            seed: 0,
            hidden_dims: vec![256, 64],
            label_kernel: KernelSpec::gaussian(1.0).unwrap(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tau {} outside (0,1)",
                self.tau
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::InvalidArgument("need at least one G layer width".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub j_e: f64,
    pub j_tu: f64,
    pub j_du: f64,
    pub acc_s: f64,
    pub acc_t: Option<f64>,
    pub w: Vec<f64>,
    pub p_t: Vec<f64>,
    pub n_pseudo: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

fn source_labels(source: &FeatureSet) -> Result<&[i64]> {
    source
        .labels
        .as_deref()
        .ok_or(Error::Unlabeled(0))
}

/// Take a descending step on `value_of`, halving the rate until the value
/// stops increasing. Returns false when every halving was rejected.
fn safeguarded_step<F>(
    params: &mut MulParams,
    grads: &ParamGrads,
    lr: f64,
    current: f64,
    value_of: F,
) -> Result<bool>
where
    F: Fn(&MulParams) -> Result<f64>,
{
    let mut rate = lr;
    for _ in 0..=MAX_HALVINGS {
        let mut trial = params.clone();
        trial.step(grads, rate);
        let value = value_of(&trial)?;
        if value.is_finite() && value <= current {
            *params = trial;
            return Ok(true);
        }
        rate *= 0.5;
    }
    Ok(false)
}

/// Full-batch descent on the unweighted cross-entropy for `t_pre` epochs.
/// Records append to `trace` as epochs complete, so a failing run leaves
/// the finished prefix behind.
pub fn pretrain(
    params: &mut MulParams,
    source: &FeatureSet,
    cfg: &TrainConfig,
    trace: &mut TrainTrace,
) -> Result<()> {
    cfg.validate()?;
    let labels = source_labels(source)?;
    let c = params.class_count();
    let uniform = ClassWeights::uniform(c);
    let epoch0 = trace.epochs.len();

    for offset in 0..cfg.t_pre {
        let epoch = epoch0 + offset;
        let cache = forward_cached(params, &source.features)?;
        let e = loss_e(&cache.logits, labels, &uniform)?;
        if !e.value.is_finite() {
            return Err(Error::Diverged(offset));
        }
        let acc_s = accuracy(&predictions(&cache.logits), labels)?;
        trace.epochs.push(EpochRecord {
            epoch,
            j_e: e.value,
            j_tu: 0.0,
            j_du: 0.0,
            acc_s,
            acc_t: None,
            w: vec![1.0; c],
            p_t: vec![1.0 / c as f64; c],
            n_pseudo: 0,
        });

        let grads = backward(params, &cache, None, e.grad_logits.as_ref())?;
        safeguarded_step(params, &grads, cfg.learning_rate, e.value, |p| {
            let (_, logits) = forward(p, &source.features)?;
            Ok(loss_e(&logits, labels, &uniform)?.value)
        })?;
    }
    Ok(())
}

struct EpochLosses {
    e: LossBundle,
    tu: LossBundle,
    du: LossBundle,
}

impl EpochLosses {
    fn combined(&self, cfg: &TrainConfig) -> f64 {
        self.e.value + cfg.lambda_tu * self.tu.value - cfg.lambda_du * self.du.value
    }
}

#[allow(clippy::too_many_arguments)]
fn epoch_losses(
    z_s: &DenseMatrix,
    logits_s: &DenseMatrix,
    labels_s: &[i64],
    z_t: &DenseMatrix,
    pseudo_idx: &[usize],
    pseudo_labels: &[i64],
    weights: &ClassWeights,
    kz: &KernelSpec,
    cfg: &TrainConfig,
    include_pseudo_in_du: bool,
) -> Result<EpochLosses> {
    let d_z = z_s.cols();
    let source_z = FeatureSet::labeled(z_s.clone(), labels_s.to_vec())?;
    let e = loss_e(logits_s, labels_s, weights)?;

    let pseudo_set = if pseudo_idx.is_empty() {
        None
    } else {
        let mut data = Vec::with_capacity(pseudo_idx.len() * d_z);
        for &i in pseudo_idx {
            data.extend_from_slice(z_t.row(i));
        }
        Some(FeatureSet::labeled(
            DenseMatrix::new(pseudo_idx.len(), d_z, data)?,
            pseudo_labels.to_vec(),
        )?)
    };

    let tu = match (&pseudo_set, cfg.lambda_tu != 0.0) {
        (Some(pseudo), true) => loss_tu(
            &source_z,
            pseudo,
            &weights.target_prior,
            kz,
            &cfg.label_kernel,
            cfg.epsilon,
        )?,
        _ => LossBundle::zero(z_s.rows(), pseudo_idx.len(), d_z),
    };
    let du = if cfg.lambda_du != 0.0 {
        loss_du(
            &source_z,
            if include_pseudo_in_du {
                pseudo_set.as_ref()
            } else {
                None
            },
            kz,
            &cfg.label_kernel,
            cfg.epsilon,
        )?
    } else {
        LossBundle::zero(z_s.rows(), pseudo_idx.len(), d_z)
    };
    Ok(EpochLosses { e, tu, du })
}

/// Adaptation stage: per epoch, re-estimate the class shift from hard
/// predictions, re-select confident pseudo-labels, and take one descending
/// step on the combined objective. Returns the per-epoch shift estimates;
/// trace records append as epochs complete. `oracle_target_labels` feed
/// accuracy reporting only, never training.
pub fn adapt(
    params: &mut MulParams,
    source: &FeatureSet,
    target: &FeatureSet,
    cfg: &TrainConfig,
    oracle_target_labels: Option<&[i64]>,
    trace: &mut TrainTrace,
) -> Result<Vec<ShiftEstimate>> {
    cfg.validate()?;
    let labels_s = source_labels(source)?;
    if target.labels.is_some() {
        return Err(Error::InvalidArgument(
            "target labels must be stripped before adaptation".into(),
        ));
    }
    if let Some(oracle) = oracle_target_labels {
        if oracle.len() != target.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} oracle labels for {} target samples",
                oracle.len(),
                target.len()
            )));
        }
    }
    let c = params.class_count();
    let mut estimates = Vec::with_capacity(cfg.t_adapt);
    let mut include_pseudo_in_du = false;
    let mut prev_du: Option<f64> = None;
    let mut stable_run = 0usize;
    let epoch0 = trace.epochs.len();

    for offset in 0..cfg.t_adapt {
        let epoch = epoch0 + offset;
        let cache_s = forward_cached(params, &source.features)?;
        let cache_t = forward_cached(params, &target.features)?;
        let preds_s = predictions(&cache_s.logits);
        let preds_t = predictions(&cache_t.logits);

        let preds_s_idx: Vec<usize> = preds_s.iter().map(|&p| p as usize).collect();
        let preds_t_idx: Vec<usize> = preds_t.iter().map(|&p| p as usize).collect();
        let (p_s, q_t, confusion) = plug_in_estimates(&preds_s_idx, labels_s, &preds_t_idx, c)?;
        let est = bbse_solve(&q_t, &confusion, &p_s)?;
        let mut p_t = est.p_t.clone();
        let mass: f64 = p_t.iter().sum();
        for v in p_t.iter_mut() {
            *v /= mass;
        }
        let weights = ClassWeights::new(est.w.clone(), p_t.clone())?;

        // bandwidth from the pooled transformed features, constant within
        // the epoch
        let pooled = {
            let mut data = cache_s.z.data().to_vec();
            data.extend_from_slice(cache_t.z.data());
            DenseMatrix::new(
                cache_s.z.rows() + cache_t.z.rows(),
                cache_s.z.cols(),
                data,
            )?
        };
        let kz = KernelSpec::gaussian(median_bandwidth(&pooled)?)?;

        let (pseudo_idx, pseudo_labels) = pseudo_label(&cache_t.logits, cfg.tau)?;
        let losses = epoch_losses(
            &cache_s.z,
            &cache_s.logits,
            labels_s,
            &cache_t.z,
            &pseudo_idx,
            &pseudo_labels,
            &weights,
            &kz,
            cfg,
            include_pseudo_in_du,
        )?;
        let current = losses.combined(cfg);
        if !current.is_finite() {
            return Err(Error::Diverged(offset));
        }

        let acc_t = match oracle_target_labels {
            Some(oracle) => Some(accuracy(&preds_t, oracle)?),
            None => None,
        };
        trace.epochs.push(EpochRecord {
            epoch,
            j_e: losses.e.value,
            j_tu: losses.tu.value,
            j_du: losses.du.value,
            acc_s: accuracy(&preds_s, labels_s)?,
            acc_t,
            w: est.w.clone(),
            p_t: p_t.clone(),
            n_pseudo: pseudo_idx.len(),
        });

        // assemble upstream gradients: cross-entropy through the logits,
        // discrepancy terms through Z of both domains
        let mut d_zs = DenseMatrix::zeros(cache_s.z.rows(), cache_s.z.cols());
        for (a, (t, d)) in d_zs.data_mut().iter_mut().zip(
            losses
                .tu
                .grad_source_z
                .data()
                .iter()
                .zip(losses.du.grad_source_z.data()),
        ) {
            *a = cfg.lambda_tu * t - cfg.lambda_du * d;
        }
        let mut d_zt = DenseMatrix::zeros(cache_t.z.rows(), cache_t.z.cols());
        for (slot, &i) in pseudo_idx.iter().enumerate() {
            for k in 0..cache_t.z.cols() {
                let mut v = cfg.lambda_tu * losses.tu.grad_target_z.get(slot, k);
                if include_pseudo_in_du {
                    v -= cfg.lambda_du * losses.du.grad_target_z.get(slot, k);
                }
                d_zt.set(i, k, v);
            }
        }

        let mut grads = backward(params, &cache_s, Some(&d_zs), losses.e.grad_logits.as_ref())?;
        let target_grads = backward(params, &cache_t, Some(&d_zt), None)?;
        grads.add(&target_grads);

        // line search holds the epoch's weights, bandwidth, and pseudo
        // selection fixed
        safeguarded_step(params, &grads, cfg.learning_rate, current, |p| {
            let (z_s, logits_s) = forward(p, &source.features)?;
            let (z_t, _) = forward(p, &target.features)?;
            let trial = epoch_losses(
                &z_s,
                &logits_s,
                labels_s,
                &z_t,
                &pseudo_idx,
                &pseudo_labels,
                &weights,
                &kz,
                cfg,
                include_pseudo_in_du,
            )?;
            Ok(trial.combined(cfg))
        })?;

        // pseudo-labels join the separation term after its value settles
        if !include_pseudo_in_du {
            if let Some(prev) = prev_du {
                let rel = (losses.du.value - prev).abs() / prev.abs().max(1e-12);
                if rel < STABLE_REL_CHANGE {
                    stable_run += 1;
                } else {
                    stable_run = 0;
                }
                if stable_run >= STABLE_EPOCHS {
                    include_pseudo_in_du = true;
                }
            }
            prev_du = Some(losses.du.value);
        }

        estimates.push(est);
    }
    Ok(estimates)
}

/// Write MulParams as versioned text; floats use the shortest decimal
/// form, which parses back to the identical bits.
pub fn save_checkpoint(path: &Path, params: &MulParams) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{CHECKPOINT_TAG}")?;
    writeln!(out, "g {}", params.g.len())?;
    for layer in params.g.iter().chain(std::iter::once(&params.f)) {
        writeln!(out, "layer {} {}", layer.weight.rows(), layer.weight.cols())?;
        let mut first = true;
        for v in layer.weight.data() {
            if !first {
                write!(out, " ")?;
            }
            write!(out, "{v}")?;
            first = false;
        }
        writeln!(out)?;
        let mut first = true;
        for v in &layer.bias {
            if !first {
                write!(out, " ")?;
            }
            write!(out, "{v}")?;
            first = false;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MulParams> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let mut next_line = |expect: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, line)) => Ok((i + 1, line?)),
            None => Err(Error::Parse {
                line: 0,
                msg: format!("missing {expect}"),
            }),
        }
    };

    let (lineno, tag) = next_line("version tag")?;
    if tag != CHECKPOINT_TAG {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("unrecognized checkpoint tag '{tag}'"),
        });
    }
    let (lineno, header) = next_line("layer count")?;
    let g_count: usize = header
        .strip_prefix("g ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse {
            line: lineno,
            msg: "expected 'g <count>'".into(),
        })?;

    let mut layers = Vec::with_capacity(g_count + 1);
    for _ in 0..=g_count {
        let (lineno, shape) = next_line("layer header")?;
        let parts: Vec<&str> = shape.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "layer" {
            return Err(Error::Parse {
                line: lineno,
                msg: "expected 'layer <in> <out>'".into(),
            });
        }
        let rows: usize = parts[1].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad fan-in '{}'", parts[1]),
        })?;
        let cols: usize = parts[2].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad fan-out '{}'", parts[2]),
        })?;

        let (wline, wtext) = next_line("weights")?;
        let weights = parse_floats(&wtext, rows * cols, wline)?;
        let (bline, btext) = next_line("biases")?;
        let bias = parse_floats(&btext, cols, bline)?;
        layers.push(AffineLayer::new(DenseMatrix::new(rows, cols, weights)?, bias)?);
    }
    let f = layers.pop().unwrap();
    if layers.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "checkpoint has no transformation layers".into(),
        });
    }
    // shapes must chain
    for pair in layers.windows(2) {
        if pair[0].weight.cols() != pair[1].weight.rows() {
            return Err(Error::Parse {
                line: 0,
                msg: "layer shapes do not chain".into(),
            });
        }
    }
    if layers[layers.len() - 1].weight.cols() != f.weight.rows() {
        return Err(Error::Parse {
            line: 0,
            msg: "classifier input width does not match the transformation output".into(),
        });
    }
    Ok(MulParams { g: layers, f })
}

fn parse_floats(text: &str, expect: usize, lineno: usize) -> Result<Vec<f64>> {
    let vals: Result<Vec<f64>> = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad float '{t}'"),
            })
        })
        .collect();
    let vals = vals?;
    if vals.len() != expect {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected {expect} values, found {}", vals.len()),
        });
    }
    Ok(vals)
}
