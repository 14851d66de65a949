//! Evaluation metrics: accuracy, class-scatter discriminability statistics,
//! prototype distance matrices, and prior-estimation error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// Metrics emitted by the experiment harness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub j_b: f64,
    pub j_w: f64,
    pub discriminability: f64,
    pub prior_error_linf: f64,
    pub prior_error_l1: f64,
    /// Squared distances between unit-normalized class prototypes,
    /// source rows by target columns. None marks an empty class.
    pub d_st: Vec<Vec<Option<f64>>>,
}

/// Fraction of exact matches.
pub fn accuracy(preds: &[i64], labels: &[i64]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Empty("accuracy of an empty batch".into()));
    }
    let hits = preds.iter().zip(labels.iter()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Between-class scatter, within-class scatter, and their ratio.
///
/// j_b = (1/c) sum_i ||mean_i - mean||^2, j_w = (1/n) sum_j ||z_j - mean_{y_j}||^2.
pub fn discriminability(z: &DenseMatrix, labels: &[i64]) -> Result<(f64, f64, f64)> {
    let n = z.rows();
    let d = z.cols();
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} samples",
            labels.len(),
            n
        )));
    }
    if n == 0 {
        return Err(Error::Empty("discriminability of an empty batch".into()));
    }
    let c = labels
        .iter()
        .copied()
        .max()
        .filter(|&m| m >= 0)
        .ok_or_else(|| Error::Empty("no labeled samples".into()))? as usize
        + 1;

    let mut counts = vec![0usize; c];
    let mut means = vec![vec![0.0; d]; c];
    let mut global = vec![0.0; d];
    for (i, &y) in labels.iter().enumerate() {
        if y < 0 || y as usize >= c {
            return Err(Error::InvalidLabel { label: y, classes: c });
        }
        let y = y as usize;
        counts[y] += 1;
        for (k, &v) in z.row(i).iter().enumerate() {
            means[y][k] += v;
            global[k] += v;
        }
    }
    let present = counts.iter().filter(|&&k| k > 0).count();
    if present < 2 {
        return Err(Error::Empty("discriminability needs at least 2 classes".into()));
    }
    if counts.iter().any(|&k| k == 0) {
        return Err(Error::Empty("discriminability with an empty class".into()));
    }
    for (m, &k) in means.iter_mut().zip(counts.iter()) {
        for v in m.iter_mut() {
            *v /= k as f64;
        }
    }
    for v in global.iter_mut() {
        *v /= n as f64;
    }

    let j_b = means
        .iter()
        .map(|m| m.iter().zip(global.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / c as f64;
    let mut j_w = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let m = &means[y as usize];
        j_w += z
            .row(i)
            .iter()
            .zip(m.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    j_w /= n as f64;

    if j_w == 0.0 {
        return Err(Error::InvalidArgument(
            "within-class scatter is zero; discriminability undefined".into(),
        ));
    }
    Ok((j_b, j_w, j_b / j_w))
}

fn class_prototypes(z: &DenseMatrix, labels: &[i64], c: usize) -> Result<Vec<Option<Vec<f64>>>> {
    let d = z.cols();
    let mut counts = vec![0usize; c];
    let mut sums = vec![vec![0.0; d]; c];
    for (i, &y) in labels.iter().enumerate() {
        if y < 0 {
            continue;
        }
        if y as usize >= c {
            return Err(Error::InvalidLabel { label: y, classes: c });
        }
        let row = z.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidArgument(
                "cannot unit-normalize a zero sample".into(),
            ));
        }
        counts[y as usize] += 1;
        for (k, &v) in row.iter().enumerate() {
            sums[y as usize][k] += v / norm;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, k)| {
            if k == 0 {
                None
            } else {
                Some(s.into_iter().map(|v| v / k as f64).collect())
            }
        })
        .collect())
}

/// Squared distances between class prototypes across domains, after each
/// sample is scaled to unit l2 norm. Entry (i, j) compares source class i
/// with target class j; None marks a class empty in that domain.
pub fn prototype_distance_matrix(
    zs: &DenseMatrix,
    ys: &[i64],
    zt: &DenseMatrix,
    yt: &[i64],
) -> Result<Vec<Vec<Option<f64>>>> {
    if ys.len() != zs.rows() || yt.len() != zt.rows() {
        return Err(Error::DimensionMismatch("labels vs samples".into()));
    }
    if zs.cols() != zt.cols() {
        return Err(Error::DimensionMismatch(format!(
            "feature widths {} vs {}",
            zs.cols(),
            zt.cols()
        )));
    }
    let c = ys
        .iter()
        .chain(yt.iter())
        .copied()
        .max()
        .filter(|&m| m >= 0)
        .ok_or_else(|| Error::Empty("no labeled samples".into()))? as usize
        + 1;
    let ps = class_prototypes(zs, ys, c)?;
    let pt = class_prototypes(zt, yt, c)?;
    let mut out = vec![vec![None; c]; c];
    for (i, a) in ps.iter().enumerate() {
        for (j, b) in pt.iter().enumerate() {
            if let (Some(a), Some(b)) = (a, b) {
                out[i][j] = Some(
                    a.iter()
                        .zip(b.iter())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum(),
                );
            }
        }
    }
    Ok(out)
}

/// Max and sum of componentwise absolute errors between two priors.
pub fn prior_error(p_hat: &[f64], p_true: &[f64]) -> Result<(f64, f64)> {
    if p_hat.len() != p_true.len() {
        return Err(Error::DimensionMismatch(format!(
            "prior lengths {} vs {}",
            p_hat.len(),
            p_true.len()
        )));
    }
    let mut linf = 0.0f64;
    let mut l1 = 0.0;
    for (a, b) in p_hat.iter().zip(p_true.iter()) {
        let e = (a - b).abs();
        linf = linf.max(e);
        l1 += e;
    }
    Ok((linf, l1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, d: &[f64]) -> DenseMatrix {
        DenseMatrix::new(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn accuracy_direct_counts() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2, 3], &[0, 0, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 0, 2, 3], &[1, 0, 2, 0]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[], &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn discriminability_point_masses() {
        // two point-mass classes at +-1: j_b = 1, j_w = 0 -> ratio errors
        let z = mat(4, 1, &[1.0, 1.0, -1.0, -1.0]);
        let labels = [0, 0, 1, 1];
        assert!(discriminability(&z, &labels).is_err());
    }

    #[test]
    fn discriminability_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40;
        let d = 3;
        let c = 4;
        let labels: Vec<i64> = (0..n).map(|i| (i % c) as i64).collect();
        let data: Vec<f64> = (0..n * d)
            .map(|i| rng.gen_range(-1.0..1.0) + (labels[i / d] as f64))
            .collect();
        let z = mat(n, d, &data);
        let (j_b, j_w, ratio) = discriminability(&z, &labels).unwrap();

        // direct two-loop recomputation
        let mut means = vec![vec![0.0; d]; c];
        let mut global = vec![0.0; d];
        for i in 0..n {
            for k in 0..d {
                means[labels[i] as usize][k] += z.get(i, k) / (n / c) as f64;
                global[k] += z.get(i, k) / n as f64;
            }
        }
        let want_jb: f64 = means
            .iter()
            .map(|m| m.iter().zip(&global).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum::<f64>()
            / c as f64;
        let mut want_jw = 0.0;
        for i in 0..n {
            for k in 0..d {
                let dlt = z.get(i, k) - means[labels[i] as usize][k];
                want_jw += dlt * dlt / n as f64;
            }
        }
        assert!((j_b - want_jb).abs() < 1e-10);
        assert!((j_w - want_jw).abs() < 1e-10);
        assert!((ratio - want_jb / want_jw).abs() < 1e-10);
    }

    #[test]
    fn discriminability_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 30;
        let labels: Vec<i64> = (0..n).map(|i| (i % 3) as i64).collect();
        let data: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z = mat(n, 2, &data);
        let shifted = mat(n, 2, &data.iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { 5.0 } else { -3.0 }).collect::<Vec<_>>());
        let (b1, w1, _) = discriminability(&z, &labels).unwrap();
        let (b2, w2, _) = discriminability(&shifted, &labels).unwrap();
        assert!((b1 - b2).abs() < 1e-9);
        assert!((w1 - w2).abs() < 1e-9);
    }

    #[test]
    fn prototypes_identical_domains_zero_diagonal() {
        let z = mat(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 1.0]);
        let y = [0, 0, 1, 1];
        let d = prototype_distance_matrix(&z, &y, &z, &y).unwrap();
        assert!(d[0][0].unwrap().abs() < 1e-12);
        assert!(d[1][1].unwrap().abs() < 1e-12);
    }

    #[test]
    fn prototypes_orthogonal_units() {
        let zs = mat(1, 2, &[3.0, 0.0]); // normalizes to e0
        let zt = mat(1, 2, &[0.0, 0.5]); // normalizes to e1
        let ys = [0];
        let yt = [0];
        let d = prototype_distance_matrix(&zs, &ys, &zt, &yt).unwrap();
        assert!((d[0][0].unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn prototypes_missing_class_flagged() {
        let zs = mat(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let ys = [0, 1];
        let zt = mat(1, 2, &[1.0, 0.0]);
        let yt = [0];
        let d = prototype_distance_matrix(&zs, &ys, &zt, &yt).unwrap();
        assert!(d[0][0].is_some());
        assert!(d[0][1].is_none());
        assert!(d[1][0].is_some());
    }

    #[test]
    fn prototypes_match_direct_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 24;
        let c = 3;
        let labels: Vec<i64> = (0..n).map(|i| (i % c) as i64).collect();
        let data: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(0.5..2.0)).collect();
        let z = mat(n, 2, &data);
        let got = prototype_distance_matrix(&z, &labels, &z, &labels).unwrap();

        let mut protos = vec![vec![0.0; 2]; c];
        for i in 0..n {
            let r = z.row(i);
            let nrm = (r[0] * r[0] + r[1] * r[1]).sqrt();
            protos[labels[i] as usize][0] += r[0] / nrm / (n / c) as f64;
            protos[labels[i] as usize][1] += r[1] / nrm / (n / c) as f64;
        }
        for i in 0..c {
            for j in 0..c {
                let want = (protos[i][0] - protos[j][0]).powi(2) + (protos[i][1] - protos[j][1]).powi(2);
                assert!((got[i][j].unwrap() - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn prior_error_arithmetic() {
        assert_eq!(prior_error(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), (0.0, 0.0));
        let (linf, l1) = prior_error(&[0.6, 0.4], &[0.5, 0.5]).unwrap();
        assert!((linf - 0.1).abs() < 1e-12);
        assert!((l1 - 0.2).abs() < 1e-12);
        assert!(prior_error(&[0.5], &[0.5, 0.5]).is_err());
    }
}
