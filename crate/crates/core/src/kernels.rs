//! Kernel functions, Gram matrices, and the reverse-mode derivative of
//! Gram entries with respect to the inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    Laplacian,
    Linear,
}

/// A kernel family plus bandwidth. Bandwidth is ignored for the linear kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, bandwidth)
    }

    pub fn laplacian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Laplacian, bandwidth)
    }

    pub fn linear() -> Self {
        Self {
            family: KernelFamily::Linear,
            bandwidth: 1.0,
        }
    }

    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if family != KernelFamily::Linear && !(bandwidth > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(Self { family, bandwidth })
    }
}

/// A sample of feature vectors with optional integer labels.
///
/// Label -1 means unlabeled; labeled entries lie in `[0, class_count)`.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub features: DenseMatrix,
    pub labels: Option<Vec<i64>>,
}

impl FeatureSet {
    pub fn unlabeled(features: DenseMatrix) -> Self {
        Self {
            features,
            labels: None,
        }
    }

    pub fn labeled(features: DenseMatrix, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} samples",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l < -1) {
            return Err(Error::InvalidLabel {
                label: bad,
                classes: 0,
            });
        }
        Ok(Self {
            features,
            labels: Some(labels),
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Largest label + 1, counting only labeled entries.
    pub fn class_count(&self) -> usize {
        match &self.labels {
            Some(ls) => ls.iter().copied().filter(|&l| l >= 0).max().map_or(0, |m| m as usize + 1),
            None => 0,
        }
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

#[inline]
fn l1_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += (x - y).abs();
    }
    acc
}

/// Gram matrix K with K[i][j] = k(a_i, b_j).
pub fn gram(a: &DenseMatrix, b: &DenseMatrix, spec: &KernelSpec) -> Result<DenseMatrix> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch(format!(
            "feature dims {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let mut k = DenseMatrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ra = a.row(i);
        for j in 0..b.rows() {
            let rb = b.row(j);
            let v = match spec.family {
                KernelFamily::Gaussian => {
                    (-sq_dist(ra, rb) / (2.0 * spec.bandwidth * spec.bandwidth)).exp()
                }
                KernelFamily::Laplacian => (-l1_dist(ra, rb) / spec.bandwidth).exp(),
                KernelFamily::Linear => crate::numerics::dot(ra, rb),
            };
            k.set(i, j, v);
        }
    }
    Ok(k)
}

/// Median of the n(n-1)/2 pairwise Euclidean distances.
pub fn median_bandwidth(a: &DenseMatrix) -> Result<f64> {
    let n = a.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "median bandwidth needs at least 2 samples".into(),
        ));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(sq_dist(a.row(i), a.row(j)).sqrt());
        }
    }
    dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if median <= 0.0 {
        return Err(Error::DegenerateBandwidth);
    }
    Ok(median)
}

/// Reverse-mode derivative of `sum_ij upstream[i][j] * K[i][j]` with
/// respect to A and B.
///
/// The Laplacian kernel is non-differentiable at zero coordinate distance;
/// the subgradient 0 is used there.
pub fn gram_backprop(
    a: &DenseMatrix,
    b: &DenseMatrix,
    spec: &KernelSpec,
    upstream: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix)> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch(format!(
            "feature dims {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    if upstream.rows() != a.rows() || upstream.cols() != b.rows() {
        return Err(Error::DimensionMismatch(format!(
            "upstream {}x{} vs gram {}x{}",
            upstream.rows(),
            upstream.cols(),
            a.rows(),
            b.rows()
        )));
    }
    let d = a.cols();
    let mut grad_a = DenseMatrix::zeros(a.rows(), d);
    let mut grad_b = DenseMatrix::zeros(b.rows(), d);
    for i in 0..a.rows() {
        let ra = a.row(i);
        for j in 0..b.rows() {
            let u = upstream.get(i, j);
            if u == 0.0 {
                continue;
            }
            let rb = b.row(j);
            match spec.family {
                KernelFamily::Gaussian => {
                    let s2 = spec.bandwidth * spec.bandwidth;
                    let k = (-sq_dist(ra, rb) / (2.0 * s2)).exp();
                    let coef = u * k / s2;
                    for t in 0..d {
                        let diff = rb[t] - ra[t];
                        grad_a.data_mut()[i * d + t] += coef * diff;
                        grad_b.data_mut()[j * d + t] -= coef * diff;
                    }
                }
                KernelFamily::Laplacian => {
                    let k = (-l1_dist(ra, rb) / spec.bandwidth).exp();
                    let coef = u * k / spec.bandwidth;
                    for t in 0..d {
                        let diff = ra[t] - rb[t];
                        let sign = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        grad_a.data_mut()[i * d + t] -= coef * sign;
                        grad_b.data_mut()[j * d + t] += coef * sign;
                    }
                }
                KernelFamily::Linear => {
                    for t in 0..d {
                        grad_a.data_mut()[i * d + t] += u * rb[t];
                        grad_b.data_mut()[j * d + t] += u * ra[t];
                    }
                }
            }
        }
    }
    Ok((grad_a, grad_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sym_eig_truncated;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, d: &[f64]) -> DenseMatrix {
        DenseMatrix::new(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn gram_zero_distance() {
        let a = mat(2, 1, &[0.0, 0.0]);
        let k = gram(&a, &a, &KernelSpec::gaussian(1.0).unwrap()).unwrap();
        for &v in k.data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gram_gaussian_closed_form() {
        let a = mat(2, 1, &[0.0, 1.0]);
        let k = gram(&a, &a, &KernelSpec::gaussian(1.0).unwrap()).unwrap();
        let expected = (-0.5f64).exp();
        assert!((k.get(0, 1) - expected).abs() < 1e-12);
        assert!((k.get(1, 0) - expected).abs() < 1e-12);
        assert!((expected - 0.606531).abs() < 1e-6);
    }

    #[test]
    fn gram_linear_orthonormal() {
        let a = mat(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let k = gram(&a, &a, &KernelSpec::linear()).unwrap();
        assert!(k.max_abs_diff(&DenseMatrix::identity(2)) < 1e-15);
    }

    #[test]
    fn gram_dimension_mismatch() {
        let a = mat(1, 2, &[0.0, 0.0]);
        let b = mat(1, 3, &[0.0, 0.0, 0.0]);
        assert!(gram(&a, &b, &KernelSpec::linear()).is_err());
    }

    #[test]
    fn median_bandwidth_enumeration() {
        let a = mat(3, 1, &[0.0, 1.0, 3.0]);
        // pairwise distances {1, 2, 3}
        assert!((median_bandwidth(&a).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn median_bandwidth_single_pair() {
        let a = mat(2, 1, &[0.0, 5.0]);
        assert!((median_bandwidth(&a).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn median_bandwidth_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100;
        let mut a = DenseMatrix::zeros(n, 2);
        for v in a.data_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let mut all = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let mut s = 0.0;
                for t in 0..2 {
                    let d = a.get(i, t) - a.get(j, t);
                    s += d * d;
                }
                all.push(s.sqrt());
            }
        }
        all.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let m = all.len();
        let expected = if m % 2 == 1 {
            all[m / 2]
        } else {
            0.5 * (all[m / 2 - 1] + all[m / 2])
        };
        assert_eq!(median_bandwidth(&a).unwrap(), expected);
    }

    #[test]
    fn median_bandwidth_degenerate() {
        let a = mat(3, 1, &[2.0, 2.0, 2.0]);
        assert!(matches!(
            median_bandwidth(&a),
            Err(Error::DegenerateBandwidth)
        ));
    }

    #[test]
    fn backprop_zero_upstream() {
        let a = mat(2, 2, &[0.0, 1.0, 2.0, 3.0]);
        let up = DenseMatrix::zeros(2, 2);
        let (ga, gb) = gram_backprop(&a, &a, &KernelSpec::gaussian(1.0).unwrap(), &up).unwrap();
        assert_eq!(ga.max_abs(), 0.0);
        assert_eq!(gb.max_abs(), 0.0);
    }

    #[test]
    fn backprop_single_point_stationary() {
        let a = mat(1, 2, &[0.3, -0.7]);
        let up = mat(1, 1, &[1.0]);
        let (ga, gb) = gram_backprop(&a, &a, &KernelSpec::gaussian(1.0).unwrap(), &up).unwrap();
        assert_eq!(ga.max_abs(), 0.0);
        assert_eq!(gb.max_abs(), 0.0);
    }

    fn finite_diff_check(spec: &KernelSpec, seed: u64, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (na, nb, d) = (5, 4, 3);
        let mut a = DenseMatrix::zeros(na, d);
        let mut b = DenseMatrix::zeros(nb, d);
        let mut up = DenseMatrix::zeros(na, nb);
        for v in a.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for v in b.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for v in up.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let objective = |a: &DenseMatrix, b: &DenseMatrix| {
            let k = gram(a, b, spec).unwrap();
            let mut s = 0.0;
            for (u, kv) in up.data().iter().zip(k.data().iter()) {
                s += u * kv;
            }
            s
        };
        let (ga, gb) = gram_backprop(&a, &b, spec, &up).unwrap();
        let h = 1e-5;
        let scale = ga.max_abs().max(gb.max_abs()).max(1e-8);
        for idx in 0..na * d {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap.data_mut()[idx] += h;
            am.data_mut()[idx] -= h;
            let fd = (objective(&ap, &b) - objective(&am, &b)) / (2.0 * h);
            assert!(
                (fd - ga.data()[idx]).abs() <= tol * scale,
                "gradA[{idx}]: fd={fd} analytic={}",
                ga.data()[idx]
            );
        }
        for idx in 0..nb * d {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp.data_mut()[idx] += h;
            bm.data_mut()[idx] -= h;
            let fd = (objective(&a, &bp) - objective(&a, &bm)) / (2.0 * h);
            assert!(
                (fd - gb.data()[idx]).abs() <= tol * scale,
                "gradB[{idx}]: fd={fd} analytic={}",
                gb.data()[idx]
            );
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        for seed in 0..20 {
            finite_diff_check(&KernelSpec::gaussian(0.8).unwrap(), seed, 1e-4);
            finite_diff_check(&KernelSpec::linear(), seed + 100, 1e-4);
            finite_diff_check(&KernelSpec::laplacian(1.2).unwrap(), seed + 200, 1e-4);
        }
    }

    #[test]
    fn gram_self_is_psd_and_strictly_pd_for_distinct_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let n = 15;
            let mut a = DenseMatrix::zeros(n, 3);
            for v in a.data_mut() {
                *v = rng.gen_range(-2.0..2.0);
            }
            for spec in [
                KernelSpec::gaussian(1.0).unwrap(),
                KernelSpec::laplacian(1.0).unwrap(),
                KernelSpec::linear(),
            ] {
                let k = gram(&a, &a, &spec).unwrap();
                let e = sym_eig_truncated(&k, n).unwrap();
                let min = e.values.last().copied().unwrap();
                assert!(min >= -1e-10, "{spec:?} min eig {min}");
                if spec.family != KernelFamily::Linear {
                    assert!(min > 0.0, "{spec:?} should be strictly PD, min eig {min}");
                }
            }
        }
    }
}
