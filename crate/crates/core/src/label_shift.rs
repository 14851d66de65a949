//! Black-box shift estimation: class priors and importance weights are
//! recovered from a classifier's hard predictions by solving the
//! constrained least-squares problem
//!   min ||q_t - C w||^2  s.t.  w >= 0,  w^T p_s = 1,
//! followed by the prior recovery p_t = w (.) p_s.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sym_eig_truncated, DenseMatrix};
use crate::objectives::check_simplex;

/// Output of BBSE.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftEstimate {
    /// Importance weights w[j] ~ p_t[j] / p_s[j], nonnegative.
    pub w: Vec<f64>,
    /// Source class prior.
    pub p_s: Vec<f64>,
    /// Estimated target class prior, w (.) p_s.
    pub p_t: Vec<f64>,
    /// Joint frequency of (predicted, true) classes on the source;
    /// row = predicted class, column = true class.
    pub confusion: Vec<Vec<f64>>,
    /// QP objective value at the solution.
    pub residual: f64,
}

/// Plug-in frequency estimates: source prior, target prediction
/// frequencies, and the joint (predicted, true) confusion matrix.
pub fn plug_in_estimates(
    preds_s: &[usize],
    labels_s: &[i64],
    preds_t: &[usize],
    class_count: usize,
) -> Result<(Vec<f64>, Vec<f64>, DenseMatrix)> {
    if preds_s.is_empty() || preds_t.is_empty() {
        return Err(Error::Empty("plug-in estimates need predictions".into()));
    }
    if preds_s.len() != labels_s.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} source predictions vs {} labels",
            preds_s.len(),
            labels_s.len()
        )));
    }
    let n_s = preds_s.len() as f64;
    let n_t = preds_t.len() as f64;
    let mut p_s = vec![0.0; class_count];
    let mut q_t = vec![0.0; class_count];
    let mut confusion = DenseMatrix::zeros(class_count, class_count);
    for (&pred, &label) in preds_s.iter().zip(labels_s.iter()) {
        if label < 0 || label as usize >= class_count || pred >= class_count {
            return Err(Error::InvalidLabel {
                label,
                classes: class_count,
            });
        }
        p_s[label as usize] += 1.0 / n_s;
        let v = confusion.get(pred, label as usize) + 1.0 / n_s;
        confusion.set(pred, label as usize, v);
    }
    for &pred in preds_t {
        if pred >= class_count {
            return Err(Error::InvalidLabel {
                label: pred as i64,
                classes: class_count,
            });
        }
        q_t[pred] += 1.0 / n_t;
    }
    Ok((p_s, q_t, confusion))
}

/// Spectral norm of C^T C via the Jacobi eigensolver; C is c x c, tiny.
fn lipschitz_step(ctc: &DenseMatrix) -> f64 {
    let top = sym_eig_truncated(ctc, 1)
        .map(|e| e.values[0])
        .unwrap_or(1.0);
    if top > 0.0 {
        1.0 / top
    } else {
        1.0
    }
}

const QP_TOL: f64 = 1e-10;
const QP_MAX_ITERS: usize = 100_000;

/// Euclidean projection onto {w >= 0, w^T p = 1} for p >= 0.
///
/// KKT gives w_j = max(0, v_j - mu * p_j); the multiplier mu is located
/// by sorting the breakpoints v_j / p_j. Entries with p[j] = 0 are pinned
/// at 0 (classes absent from the source are excluded from the program).
fn project_feasible(w: &mut [f64], p: &[f64], active: &[bool]) {
    let mut order: Vec<usize> = (0..w.len()).filter(|&j| active[j]).collect();
    order.sort_by(|&a, &b| {
        let ra = w[a] / p[a];
        let rb = w[b] / p[b];
        rb.partial_cmp(&ra).unwrap()
    });
    let mut dot_pv = 0.0;
    let mut dot_pp = 0.0;
    let mut mu = 0.0;
    for &j in order.iter() {
        dot_pv += p[j] * w[j];
        dot_pp += p[j] * p[j];
        let candidate = (dot_pv - 1.0) / dot_pp;
        // the optimal active set is the largest prefix whose smallest
        // breakpoint still exceeds the multiplier it induces
        if w[j] / p[j] > candidate {
            mu = candidate;
        }
    }
    for (j, v) in w.iter_mut().enumerate() {
        if !active[j] {
            *v = 0.0;
        } else {
            *v = (*v - mu * p[j]).max(0.0);
        }
    }
}

/// Solves the BBSE quadratic program by projected gradient descent.
pub fn bbse_solve(q_t: &[f64], confusion: &DenseMatrix, p_s: &[f64]) -> Result<ShiftEstimate> {
    let c = p_s.len();
    if q_t.len() != c || confusion.rows() != c || confusion.cols() != c {
        return Err(Error::DimensionMismatch(format!(
            "priors len {}, q len {}, confusion {}x{}",
            c,
            q_t.len(),
            confusion.rows(),
            confusion.cols()
        )));
    }
    check_simplex(p_s)?;
    let active: Vec<bool> = p_s.iter().map(|&v| v > 0.0).collect();

    let ctc = confusion.transpose().matmul(confusion)?;
    let ctq = confusion.transpose().matvec(q_t)?;
    let step = lipschitz_step(&ctc);

    let residual_of = |w: &[f64]| -> f64 {
        let cw = confusion.matvec(w).unwrap();
        cw.iter()
            .zip(q_t.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };

    // start from the no-shift point
    let mut w = vec![1.0; c];
    project_feasible(&mut w, p_s, &active);

    // accelerated projected gradient with function-value restart; plain
    // projected gradient crawls on near-singular confusion matrices
    let mut y = w.clone();
    let mut t = 1.0f64;
    let mut prev_residual = residual_of(&w);
    let mut iters = 0;
    loop {
        // gradient of (1/2)||q - C w||^2, so the 1/||C^T C|| step is 1/L
        let grad = {
            let mut g = ctc.matvec(&y)?;
            for (gj, &cq) in g.iter_mut().zip(ctq.iter()) {
                *gj -= cq;
            }
            g
        };
        let mut next = y.clone();
        for (nj, &gj) in next.iter_mut().zip(grad.iter()) {
            *nj -= step * gj;
        }
        project_feasible(&mut next, p_s, &active);

        let residual = residual_of(&next);
        let delta = next
            .iter()
            .zip(w.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        // a near-zero step taken from y = w (fresh restart, no momentum)
        // means w is a fixed point of the projected-gradient map
        if t == 1.0 && delta < QP_TOL {
            w = next;
            break;
        }
        if residual > prev_residual {
            if t == 1.0 {
                // a plain 1/L step can only fail to descend at the
                // floating-point floor of the objective; w is optimal
                break;
            }
            // momentum overshot; restart from the last good iterate
            y = w.clone();
            t = 1.0;
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            y = next
                .iter()
                .zip(w.iter())
                .map(|(a, b)| a + beta * (a - b))
                .collect();
            t = t_next;
            w = next;
            prev_residual = residual;
            if delta < QP_TOL {
                break;
            }
        }
        iters += 1;
        if iters >= QP_MAX_ITERS {
            return Err(Error::QpNonConvergence {
                iters,
                residual: residual_of(&w),
            });
        }
    }

    let p_t: Vec<f64> = w.iter().zip(p_s.iter()).map(|(a, b)| a * b).collect();
    let residual = residual_of(&w);
    let confusion_rows = (0..c).map(|i| confusion.row(i).to_vec()).collect();
    Ok(ShiftEstimate {
        w,
        p_s: p_s.to_vec(),
        p_t,
        confusion: confusion_rows,
        residual,
    })
}

/// l1 distance between two label distributions; lies in [0, 2].
pub fn l1_label_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(format!(
            "lengths {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(p.iter().zip(q.iter()).map(|(a, b)| (a - b).abs()).sum())
}
