//! The three loss terms of the minimum-uncertainty objective and their
//! combination: weighted cross-entropy, cross-domain conditional matching,
//! and within-domain inter-class separation.
//!
//! Gradients with respect to the transformed features flow only through
//! the feature-kernel entries K: the regularized label inverse depends on
//! labels alone, and pseudo-labels, importance weights, and priors are
//! held constant within an evaluation. Each discrepancy term is then a
//! quadratic form a^T K a with a fixed coefficient vector a, so the
//! upstream gradient on K is a sum of outer products.

use crate::embedding::fit_cme;
use crate::error::{Error, Result};
use crate::kernels::{gram, gram_backprop, FeatureSet, KernelSpec};
use crate::numerics::{dot, DenseMatrix};

const SIMPLEX_TOL: f64 = 1e-8;
const CANCELLATION_TOL: f64 = 1e-10;

/// A loss value with its gradients.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub value: f64,
    /// Gradient with respect to the transformed source features.
    pub grad_source_z: DenseMatrix,
    /// Gradient with respect to the transformed (pseudo-labeled) target
    /// features; empty when no target samples enter the loss.
    pub grad_target_z: DenseMatrix,
    pub grad_logits: Option<DenseMatrix>,
    /// Classes skipped because a domain had no samples for them.
    pub skipped_classes: Vec<usize>,
}

impl LossBundle {
    pub(crate) fn zero(n_s: usize, n_t: usize, d: usize) -> Self {
        Self {
            value: 0.0,
            grad_source_z: DenseMatrix::zeros(n_s, d),
            grad_target_z: DenseMatrix::zeros(n_t, d),
            grad_logits: None,
            skipped_classes: Vec::new(),
        }
    }
}

/// Importance weights and target prior used by the weighted losses.
#[derive(Debug, Clone)]
pub struct ClassWeights {
    pub importance: Vec<f64>,
    pub target_prior: Vec<f64>,
}

impl ClassWeights {
    pub fn new(importance: Vec<f64>, target_prior: Vec<f64>) -> Result<Self> {
        if importance.len() != target_prior.len() {
            return Err(Error::DimensionMismatch(format!(
                "importance len {} vs prior len {}",
                importance.len(),
                target_prior.len()
            )));
        }
        if importance.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidArgument(
                "importance weights must be nonnegative".into(),
            ));
        }
        check_simplex(&target_prior)?;
        Ok(Self {
            importance,
            target_prior,
        })
    }

    /// Uniform weights (no shift) over `c` classes.
    pub fn uniform(c: usize) -> Self {
        Self {
            importance: vec![1.0; c],
            target_prior: vec![1.0 / c as f64; c],
        }
    }
}

pub fn check_simplex(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL || p.iter().any(|&v| v < -1e-12) {
        return Err(Error::NotSimplex(sum));
    }
    Ok(())
}

fn present_classes(set: &FeatureSet) -> Vec<usize> {
    let c = set.class_count();
    let mut seen = vec![false; c];
    if let Some(labels) = &set.labels {
        for &l in labels {
            if l >= 0 {
                seen[l as usize] = true;
            }
        }
    }
    (0..c).filter(|&i| seen[i]).collect()
}

fn add_outer(target: &mut DenseMatrix, scale: f64, a: &[f64], b: &[f64]) {
    let cols = target.cols();
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        let row = &mut target.data_mut()[i * cols..(i + 1) * cols];
        let f = scale * ai;
        for (t, &bj) in row.iter_mut().zip(b.iter()) {
            *t += f * bj;
        }
    }
}

fn add_scaled(target: &mut DenseMatrix, scale: f64, src: &DenseMatrix) {
    for (t, &s) in target.data_mut().iter_mut().zip(src.data().iter()) {
        *t += scale * s;
    }
}

fn clamp_value(v: f64) -> Result<f64> {
    if v < -CANCELLATION_TOL {
        return Err(Error::NegativeDiscrepancy(v));
    }
    Ok(v.max(0.0))
}

/// Within-domain inter-class discrepancy: the sum over ordered class pairs
/// (i, j), i != j, of MCMD^2 between their conditional embeddings. When a
/// pseudo-labeled target subset is given, it is appended to the source set
/// with its pseudo-labels treated as constants.
pub fn loss_du(
    source: &FeatureSet,
    pseudo_target: Option<&FeatureSet>,
    kz: &KernelSpec,
    ky: &KernelSpec,
    epsilon: f64,
) -> Result<LossBundle> {
    if present_classes(source).len() < 2 {
        return Err(Error::DegenerateDu);
    }
    let n_s = source.len();
    let n_t = pseudo_target.map_or(0, |t| t.len());
    let d = source.dim();

    let pooled = pool(source, pseudo_target)?;
    let op = fit_cme(&pooled, kz, ky, epsilon)?;
    let classes = present_classes(&pooled);
    let n = pooled.len();

    let k = gram(&pooled.features, &pooled.features, kz)?;
    let mut value = 0.0;
    let mut upstream = DenseMatrix::zeros(n, n);
    for (idx, &yi) in classes.iter().enumerate() {
        for &yj in classes.iter().skip(idx + 1) {
            let pi = op.label_probe(yi)?;
            let pj = op.label_probe(yj)?;
            let diff: Vec<f64> = pi
                .column
                .iter()
                .zip(pj.column.iter())
                .map(|(a, b)| a - b)
                .collect();
            let a = op.apply_regularized_label_inverse(&diff)?;
            let ka = k.matvec(&a)?;
            // ordered pairs count each unordered pair twice
            value += 2.0 * dot(&a, &ka);
            add_outer(&mut upstream, 2.0, &a, &a);
        }
    }
    let (ga, gb) = gram_backprop(&pooled.features, &pooled.features, kz, &upstream)?;
    let mut grad_pool = ga;
    add_scaled(&mut grad_pool, 1.0, &gb);

    let mut bundle = LossBundle::zero(n_s, n_t, d);
    bundle.value = clamp_value(value)?;
    for i in 0..n_s {
        for j in 0..d {
            bundle.grad_source_z.set(i, j, grad_pool.get(i, j));
        }
    }
    for i in 0..n_t {
        for j in 0..d {
            bundle.grad_target_z.set(i, j, grad_pool.get(n_s + i, j));
        }
    }
    Ok(bundle)
}

fn pool(source: &FeatureSet, extra: Option<&FeatureSet>) -> Result<FeatureSet> {
    let Some(extra) = extra else {
        return Ok(source.clone());
    };
    if extra.is_empty() {
        return Ok(source.clone());
    }
    if extra.dim() != source.dim() {
        return Err(Error::DimensionMismatch(format!(
            "source dim {} vs appended dim {}",
            source.dim(),
            extra.dim()
        )));
    }
    let mut data = source.features.data().to_vec();
    data.extend_from_slice(extra.features.data());
    let features = DenseMatrix::new(source.len() + extra.len(), source.dim(), data)?;
    let mut labels = source
        .labels
        .clone()
        .ok_or(Error::Unlabeled(0))?;
    labels.extend_from_slice(extra.labels.as_ref().ok_or(Error::Unlabeled(0))?);
    FeatureSet::labeled(features, labels)
}

/// Cross-domain conditional matching weighted by the target prior:
/// sum_i p_t[i] * MCMD^2(source embedding of class i, target embedding of
/// class i). Classes lacking a source or pseudo-labeled target sample are
/// skipped and reported in `skipped_classes`.
pub fn loss_tu(
    source: &FeatureSet,
    pseudo_target: &FeatureSet,
    target_prior: &[f64],
    kz: &KernelSpec,
    ky: &KernelSpec,
    epsilon: f64,
) -> Result<LossBundle> {
    check_simplex(target_prior)?;
    let n_s = source.len();
    let n_t = pseudo_target.len();
    let d = source.dim();

    let mut bundle = LossBundle::zero(n_s, n_t, d);
    if n_t == 0 {
        bundle.skipped_classes = (0..target_prior.len())
            .filter(|&y| target_prior[y] > 0.0)
            .collect();
        return Ok(bundle);
    }

    let op_s = fit_cme(source, kz, ky, epsilon)?;
    let op_t = fit_cme(pseudo_target, kz, ky, epsilon)?;

    let s_present = present_classes(source);
    let t_present = present_classes(pseudo_target);
    let mut usable = Vec::new();
    for (y, &p) in target_prior.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        if s_present.contains(&y) && t_present.contains(&y) {
            usable.push(y);
        } else {
            bundle.skipped_classes.push(y);
        }
    }

    let k_ss = gram(&source.features, &source.features, kz)?;
    let k_tt = gram(&pseudo_target.features, &pseudo_target.features, kz)?;
    let k_st = gram(&source.features, &pseudo_target.features, kz)?;

    let mut value = 0.0;
    let mut up_ss = DenseMatrix::zeros(n_s, n_s);
    let mut up_tt = DenseMatrix::zeros(n_t, n_t);
    let mut up_st = DenseMatrix::zeros(n_s, n_t);
    for &y in &usable {
        let w = target_prior[y];
        let a = op_s.inverse_probe(y)?;
        let b = op_t.inverse_probe(y)?;
        value += w
            * (dot(&a, &k_ss.matvec(&a)?) + dot(&b, &k_tt.matvec(&b)?)
                - 2.0 * dot(&a, &k_st.matvec(&b)?));
        add_outer(&mut up_ss, w, &a, &a);
        add_outer(&mut up_tt, w, &b, &b);
        add_outer(&mut up_st, -2.0 * w, &a, &b);
    }
    bundle.value = clamp_value(value)?;

    let (g_ss_a, g_ss_b) = gram_backprop(&source.features, &source.features, kz, &up_ss)?;
    let (g_tt_a, g_tt_b) =
        gram_backprop(&pseudo_target.features, &pseudo_target.features, kz, &up_tt)?;
    let (g_st_a, g_st_b) = gram_backprop(&source.features, &pseudo_target.features, kz, &up_st)?;
    add_scaled(&mut bundle.grad_source_z, 1.0, &g_ss_a);
    add_scaled(&mut bundle.grad_source_z, 1.0, &g_ss_b);
    add_scaled(&mut bundle.grad_source_z, 1.0, &g_st_a);
    add_scaled(&mut bundle.grad_target_z, 1.0, &g_tt_a);
    add_scaled(&mut bundle.grad_target_z, 1.0, &g_tt_b);
    add_scaled(&mut bundle.grad_target_z, 1.0, &g_st_b);
    Ok(bundle)
}

/// Importance-weighted softmax cross-entropy, averaged over samples.
pub fn loss_e(logits: &DenseMatrix, labels: &[i64], weights: &ClassWeights) -> Result<LossBundle> {
    let n = logits.rows();
    let c = logits.cols();
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} logit rows",
            labels.len(),
            n
        )));
    }
    if weights.importance.len() != c {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} classes",
            weights.importance.len(),
            c
        )));
    }
    let mut value = 0.0;
    let mut grad = DenseMatrix::zeros(n, c);
    for i in 0..n {
        let y = labels[i];
        if y < 0 || y as usize >= c {
            return Err(Error::InvalidLabel {
                label: y,
                classes: c,
            });
        }
        let y = y as usize;
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut z = 0.0;
        for &v in row {
            z += (v - max).exp();
        }
        let log_z = z.ln() + max;
        let w = weights.importance[y];
        value += w * (log_z - row[y]);
        for j in 0..c {
            let p = (row[j] - max).exp() / z;
            let onehot = if j == y { 1.0 } else { 0.0 };
            grad.set(i, j, w * (p - onehot) / n as f64);
        }
    }
    let mut bundle = LossBundle::zero(0, 0, 0);
    bundle.value = value / n as f64;
    bundle.grad_logits = Some(grad);
    Ok(bundle)
}

/// Inputs shared by the combined objective.
#[derive(Debug)]
pub struct MulInputs<'a> {
    /// Labeled source features in the transformed space Z.
    pub source: &'a FeatureSet,
    /// Classifier logits for the source samples.
    pub logits: &'a DenseMatrix,
    /// Confident pseudo-labeled target features in Z, if any.
    pub pseudo_target: Option<&'a FeatureSet>,
    /// Whether the pseudo-labeled target joins the inter-class term.
    pub include_pseudo_in_du: bool,
    pub weights: &'a ClassWeights,
    pub kz: KernelSpec,
    pub ky: KernelSpec,
    pub epsilon: f64,
}

/// The combined objective: cross-entropy plus lambda_tu times the matching
/// term minus lambda_du times the separation term.
pub fn loss_mul(inputs: &MulInputs, lambda_tu: f64, lambda_du: f64) -> Result<LossBundle> {
    let n_s = inputs.source.len();
    let n_t = inputs.pseudo_target.map_or(0, |t| t.len());
    let d = inputs.source.dim();

    let e = loss_e(
        inputs.logits,
        inputs.source.labels.as_ref().ok_or(Error::Unlabeled(0))?,
        inputs.weights,
    )?;

    let mut bundle = LossBundle::zero(n_s, n_t, d);
    bundle.value = e.value;
    bundle.grad_logits = e.grad_logits;

    if lambda_tu != 0.0 {
        if let Some(pseudo) = inputs.pseudo_target {
            let tu = loss_tu(
                inputs.source,
                pseudo,
                &inputs.weights.target_prior,
                &inputs.kz,
                &inputs.ky,
                inputs.epsilon,
            )?;
            bundle.value += lambda_tu * tu.value;
            add_scaled(&mut bundle.grad_source_z, lambda_tu, &tu.grad_source_z);
            add_scaled(&mut bundle.grad_target_z, lambda_tu, &tu.grad_target_z);
            bundle.skipped_classes = tu.skipped_classes;
        }
    }
    if lambda_du != 0.0 {
        let du_target = if inputs.include_pseudo_in_du {
            inputs.pseudo_target
        } else {
            None
        };
        let du = loss_du(
            inputs.source,
            du_target,
            &inputs.kz,
            &inputs.ky,
            inputs.epsilon,
        )?;
        bundle.value -= lambda_du * du.value;
        add_scaled(&mut bundle.grad_source_z, -lambda_du, &du.grad_source_z);
        if inputs.include_pseudo_in_du && n_t > 0 {
            add_scaled(&mut bundle.grad_target_z, -lambda_du, &du.grad_target_z);
        }
    }
    Ok(bundle)
}
