//! Empirical conditional mean embeddings and the conditional discrepancy
//! MCMD, with three computational paths: a naive dense-solve oracle, the
//! default low-rank Woodbury route, and a random-feature approximation.
//!
//! The fitted operator is C = Phi * Ltilde^-1 * Psi^T with
//! Ltilde = eps*n*I + L, where L is the label Gram matrix. Since the labels
//! take at most c distinct values, L = B*A*B^T for the one-hot assignment
//! matrix B and the c x c class kernel A, so the rank-c factorization is
//! exact and costs O(n*c + c^3) instead of a dense eigendecomposition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernels::{gram, FeatureSet, KernelFamily, KernelSpec};
use crate::numerics::{dot, solve_spd_vec, sym_eig_truncated, DenseMatrix, EigPair};

/// Fitted empirical conditional embedding operator, stored in factored form.
#[derive(Debug, Clone)]
pub struct CmeOperator {
    features: DenseMatrix,
    labels: Vec<usize>,
    class_count: usize,
    /// c x c matrix of label-kernel values between one-hot classes.
    class_kernel: DenseMatrix,
    /// Rank-c factorization L = U diag(d) U^T with orthonormal U.
    label_factor: EigPair,
    epsilon: f64,
    kz: KernelSpec,
    ky: KernelSpec,
}

/// Label-kernel column vector for a queried condition y:
/// entry i equals k_Y(y_i, y).
#[derive(Debug, Clone)]
pub struct ConditionalMetricProbe {
    pub column: Vec<f64>,
}

/// Builds the c x c label kernel on one-hot encodings.
fn class_kernel_matrix(c: usize, ky: &KernelSpec) -> Result<DenseMatrix> {
    let onehot = {
        let mut m = DenseMatrix::zeros(c, c);
        for i in 0..c {
            m.set(i, i, 1.0);
        }
        m
    };
    gram(&onehot, &onehot, ky)
}

/// Fits the empirical conditional embedding operator on fully labeled data.
pub fn fit_cme(
    data: &FeatureSet,
    kz: &KernelSpec,
    ky: &KernelSpec,
    epsilon: f64,
) -> Result<CmeOperator> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let labels_raw = data
        .labels
        .as_ref()
        .ok_or(Error::Unlabeled(0))?;
    if let Some(pos) = labels_raw.iter().position(|&l| l < 0) {
        return Err(Error::Unlabeled(pos));
    }
    if data.is_empty() {
        return Err(Error::Empty("cannot fit CME on empty data".into()));
    }
    let labels: Vec<usize> = labels_raw.iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().copied().max().unwrap() + 1;
    let class_kernel = class_kernel_matrix(class_count, ky)?;

    let n = labels.len();
    let present: Vec<usize> = {
        let mut seen = vec![false; class_count];
        for &l in &labels {
            seen[l] = true;
        }
        (0..class_count).filter(|&c| seen[c]).collect()
    };
    let r = present.len();
    let mut counts = vec![0usize; class_count];
    for &l in &labels {
        counts[l] += 1;
    }
    // M = N^{1/2} A N^{1/2} over present classes; its eigensystem lifts to L
    let mut m = DenseMatrix::zeros(r, r);
    for (i, &ci) in present.iter().enumerate() {
        for (j, &cj) in present.iter().enumerate() {
            let v = (counts[ci] as f64).sqrt()
                * class_kernel.get(ci, cj)
                * (counts[cj] as f64).sqrt();
            m.set(i, j, v);
        }
    }
    let small = sym_eig_truncated(&m, r)?;
    // U = B N^{-1/2} V, row i picks the row of V for the class of sample i
    let mut vectors = DenseMatrix::zeros(n, r);
    let class_slot: Vec<Option<usize>> = {
        let mut slots = vec![None; class_count];
        for (i, &c) in present.iter().enumerate() {
            slots[c] = Some(i);
        }
        slots
    };
    for (i, &l) in labels.iter().enumerate() {
        let slot = class_slot[l].unwrap();
        let scale = 1.0 / (counts[l] as f64).sqrt();
        for k in 0..r {
            vectors.set(i, k, scale * small.vectors.get(slot, k));
        }
    }
    Ok(CmeOperator {
        features: data.features.clone(),
        labels,
        class_count,
        class_kernel,
        label_factor: EigPair {
            values: small.values,
            vectors,
        },
        epsilon,
        kz: *kz,
        ky: *ky,
    })
}

impl CmeOperator {
    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn kz(&self) -> &KernelSpec {
        &self.kz
    }

    pub fn ky(&self) -> &KernelSpec {
        &self.ky
    }

    pub fn label_factor(&self) -> &EigPair {
        &self.label_factor
    }

    /// Materializes the n x n label Gram matrix (naive path and tests only).
    pub fn label_gram(&self) -> DenseMatrix {
        let n = self.labels.len();
        let mut l = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                l.set(i, j, self.class_kernel.get(self.labels[i], self.labels[j]));
            }
        }
        l
    }

    /// Materializes Ltilde = eps*n*I + L (naive path and tests only).
    pub fn regularized_label_gram(&self) -> DenseMatrix {
        let mut lt = self.label_gram();
        let n = self.labels.len();
        let shift = self.epsilon * n as f64;
        for i in 0..n {
            let v = lt.get(i, i) + shift;
            lt.set(i, i, v);
        }
        lt
    }

    /// Label-kernel column vector for condition `y`.
    pub fn label_probe(&self, y: usize) -> Result<ConditionalMetricProbe> {
        if y >= self.class_count {
            return Err(Error::InvalidLabel {
                label: y as i64,
                classes: self.class_count,
            });
        }
        let column = self
            .labels
            .iter()
            .map(|&l| self.class_kernel.get(l, y))
            .collect();
        Ok(ConditionalMetricProbe { column })
    }

    /// Applies Ltilde^-1 via the low-rank Woodbury identity in O(n*c).
    pub fn apply_regularized_label_inverse(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.labels.len();
        if v.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "vector length {} vs n = {}",
                v.len(),
                n
            )));
        }
        woodbury_apply(&self.label_factor, self.epsilon * n as f64, v)
    }

    /// Ltilde^-1 * L_y, the coefficient vector of the embedding mean.
    pub fn inverse_probe(&self, y: usize) -> Result<Vec<f64>> {
        let probe = self.label_probe(y)?;
        self.apply_regularized_label_inverse(&probe.column)
    }
}

/// (shift*I + U diag(d) U^T)^-1 v for orthonormal-column U.
///
/// An empty factor means L = 0 and the inverse is v / shift.
pub fn woodbury_apply(factor: &EigPair, shift: f64, v: &[f64]) -> Result<Vec<f64>> {
    let r = factor.values.len();
    let mut out = v.to_vec();
    if r > 0 {
        if factor.vectors.rows() != v.len() {
            return Err(Error::DimensionMismatch(format!(
                "factor has {} rows, vector {}",
                factor.vectors.rows(),
                v.len()
            )));
        }
        // coeffs = diag(d/(d+shift)) U^T v
        let mut coeffs = vec![0.0; r];
        for k in 0..r {
            let mut acc = 0.0;
            for i in 0..v.len() {
                acc += factor.vectors.get(i, k) * v[i];
            }
            coeffs[k] = acc * factor.values[k] / (factor.values[k] + shift);
        }
        for i in 0..v.len() {
            let mut acc = 0.0;
            for k in 0..r {
                acc += factor.vectors.get(i, k) * coeffs[k];
            }
            out[i] -= acc;
        }
    }
    for o in out.iter_mut() {
        *o /= shift;
    }
    Ok(out)
}

const CANCELLATION_TOL: f64 = 1e-10;

fn clamp_discrepancy(v: f64) -> Result<f64> {
    if v < -CANCELLATION_TOL {
        return Err(Error::NegativeDiscrepancy(v));
    }
    Ok(v.max(0.0))
}

/// MCMD^2 between two conditions within a single fitted operator,
/// the quadratic form (L_yi - L_yj)^T M (L_yi - L_yj) with
/// M = Ltilde^-1 K Ltilde^-1.
pub fn mcmd_squared_within(op: &CmeOperator, yi: usize, yj: usize) -> Result<f64> {
    if yi == yj {
        // probe vectors coincide, the quadratic form is exactly zero
        op.label_probe(yi)?;
        return Ok(0.0);
    }
    let pi = op.label_probe(yi)?;
    let pj = op.label_probe(yj)?;
    let diff: Vec<f64> = pi
        .column
        .iter()
        .zip(pj.column.iter())
        .map(|(a, b)| a - b)
        .collect();
    let a = op.apply_regularized_label_inverse(&diff)?;
    let k = gram(&op.features, &op.features, &op.kz)?;
    let ka = k.matvec(&a)?;
    clamp_discrepancy(dot(&a, &ka))
}

/// MCMD^2 between condition `yi` under `op_s` and `yj` under `op_t`.
pub fn mcmd_squared_cross(
    op_s: &CmeOperator,
    op_t: &CmeOperator,
    yi: usize,
    yj: usize,
) -> Result<f64> {
    if op_s.kz != op_t.kz || op_s.ky != op_t.ky {
        return Err(Error::KernelSpecMismatch);
    }
    let a = op_s.inverse_probe(yi)?;
    let b = op_t.inverse_probe(yj)?;
    let k_ss = gram(&op_s.features, &op_s.features, &op_s.kz)?;
    let k_tt = gram(&op_t.features, &op_t.features, &op_s.kz)?;
    let k_st = gram(&op_s.features, &op_t.features, &op_s.kz)?;
    let term_ss = dot(&a, &k_ss.matvec(&a)?);
    let term_tt = dot(&b, &k_tt.matvec(&b)?);
    let term_st = dot(&a, &k_st.matvec(&b)?);
    clamp_discrepancy(term_ss + term_tt - 2.0 * term_st)
}

/// Random-feature projection approximating a Gaussian kernel.
///
/// Features come in cos/sin pairs so self-similarity is exactly 1 and the
/// approximation is unbiased: E[S^T S] = K.
#[derive(Debug, Clone)]
pub struct RffProjection {
    /// r x d frequency matrix drawn from N(0, sigma^-2).
    pub frequencies: DenseMatrix,
    pub bandwidth: f64,
    pub seed: u64,
}

/// Draws `r` frequencies for a `d`-dimensional Gaussian kernel of
/// bandwidth `sigma`. The feature map has dimension 2r.
pub fn rff_build(d: usize, r: usize, sigma: f64, seed: u64) -> Result<RffProjection> {
    if r == 0 {
        return Err(Error::InvalidArgument("rff rank must be >= 1".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rff bandwidth must be positive, got {sigma}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut freq = DenseMatrix::zeros(r, d);
    for v in freq.data_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = z / sigma;
    }
    Ok(RffProjection {
        frequencies: freq,
        bandwidth: sigma,
        seed,
    })
}

/// Projects samples (rows of `a`) into the random feature space.
/// Returns the 2r x n feature matrix S with K ~= S^T S.
pub fn rff_features(proj: &RffProjection, a: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != proj.frequencies.cols() {
        return Err(Error::DimensionMismatch(format!(
            "sample dim {} vs projection dim {}",
            a.cols(),
            proj.frequencies.cols()
        )));
    }
    let r = proj.frequencies.rows();
    let n = a.rows();
    let scale = (1.0 / r as f64).sqrt();
    let mut s = DenseMatrix::zeros(2 * r, n);
    for j in 0..n {
        let x = a.row(j);
        for i in 0..r {
            let wx = dot(proj.frequencies.row(i), x);
            s.set(2 * i, j, scale * wx.cos());
            s.set(2 * i + 1, j, scale * wx.sin());
        }
    }
    Ok(s)
}

/// Which route computes quadratic forms in the feature Gram matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComputePath {
    /// Dense Cholesky solve of Ltilde; cubic in n. Test oracle.
    Naive,
    /// Low-rank Woodbury inverse; quadratic in n. Default.
    Woodbury,
    /// Random Fourier features; linear in n, approximate.
    Rff { rank: usize, seed: u64 },
}

/// MCMD^2 within one operator on the requested compute path.
pub fn mcmd_squared_within_path(
    op: &CmeOperator,
    yi: usize,
    yj: usize,
    path: ComputePath,
) -> Result<f64> {
    match path {
        ComputePath::Woodbury => mcmd_squared_within(op, yi, yj),
        ComputePath::Naive => naive::mcmd_squared_within(op, yi, yj),
        ComputePath::Rff { rank, seed } => {
            if op.kz.family != KernelFamily::Gaussian {
                return Err(Error::InvalidArgument(
                    "rff path requires a gaussian feature kernel".into(),
                ));
            }
            if yi == yj {
                op.label_probe(yi)?;
                return Ok(0.0);
            }
            let pi = op.label_probe(yi)?;
            let pj = op.label_probe(yj)?;
            let diff: Vec<f64> = pi
                .column
                .iter()
                .zip(pj.column.iter())
                .map(|(a, b)| a - b)
                .collect();
            let a = op.apply_regularized_label_inverse(&diff)?;
            let proj = rff_build(op.features.cols(), rank, op.kz.bandwidth, seed)?;
            let s = rff_features(&proj, &op.features)?;
            // a^T K a ~= ||S a||^2
            let sa = s.matvec(&a)?;
            clamp_discrepancy(dot(&sa, &sa))
        }
    }
}

/// Naive cubic-time reference computations kept as test and benchmark
/// oracles; they materialize Ltilde and solve it densely.
pub mod naive {
    use super::*;

    /// Ltilde^-1 v by dense Cholesky solve.
    pub fn apply_regularized_label_inverse(op: &CmeOperator, v: &[f64]) -> Result<Vec<f64>> {
        let lt = op.regularized_label_gram();
        solve_spd_vec(&lt, v)
    }

    pub fn mcmd_squared_within(op: &CmeOperator, yi: usize, yj: usize) -> Result<f64> {
        if yi == yj {
            op.label_probe(yi)?;
            return Ok(0.0);
        }
        let pi = op.label_probe(yi)?;
        let pj = op.label_probe(yj)?;
        let diff: Vec<f64> = pi
            .column
            .iter()
            .zip(pj.column.iter())
            .map(|(a, b)| a - b)
            .collect();
        let a = apply_regularized_label_inverse(op, &diff)?;
        let k = gram(op.features(), op.features(), op.kz())?;
        let ka = k.matvec(&a)?;
        super::clamp_discrepancy(dot(&a, &ka))
    }

    pub fn mcmd_squared_cross(
        op_s: &CmeOperator,
        op_t: &CmeOperator,
        yi: usize,
        yj: usize,
    ) -> Result<f64> {
        if op_s.kz() != op_t.kz() || op_s.ky() != op_t.ky() {
            return Err(Error::KernelSpecMismatch);
        }
        let ps = op_s.label_probe(yi)?;
        let pt = op_t.label_probe(yj)?;
        let a = apply_regularized_label_inverse(op_s, &ps.column)?;
        let b = apply_regularized_label_inverse(op_t, &pt.column)?;
        let k_ss = gram(op_s.features(), op_s.features(), op_s.kz())?;
        let k_tt = gram(op_t.features(), op_t.features(), op_s.kz())?;
        let k_st = gram(op_s.features(), op_t.features(), op_s.kz())?;
        let v = dot(&a, &k_ss.matvec(&a)?) + dot(&b, &k_tt.matvec(&b)?)
            - 2.0 * dot(&a, &k_st.matvec(&b)?);
        super::clamp_discrepancy(v)
    }
}
