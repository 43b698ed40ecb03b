//! Training objectives with analytic gradients.
//!
//! Reductions: NLL sums over axes and averages over landmarks; the skeleton
//! term sums over edges; both average over the batch.

use serde::{Deserialize, Serialize};

use crate::anatomy::{SkeletonTemplate, LANDMARKS};
use crate::error::{Error, Result};
use crate::regressor::{clamp_logvar, GaussianPrediction, LOGVAR_MAX, LOGVAR_MIN, MEAN_OUTPUTS, OUTPUTS};
use crate::scalar::Real;
use crate::tensor::Matrix;

pub type Vec3s<T> = [[T; 3]; LANDMARKS];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub beta: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { beta: 1.0, lambda: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0 && self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "beta and lambda must be finite and nonnegative, got {} / {}",
                self.beta, self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllValue<T> {
    pub value: T,
    pub grad_mean: Vec3s<T>,
    /// Gradient with respect to `log sigma^2`.
    pub grad_log_variance: Vec3s<T>,
}

/// Gaussian NLL of one sample, constant term omitted:
/// `mean_k sum_i 1/2 (beta log s2 + (t - mu)^2 / s2)`.
pub fn nll_loss<T: Real>(pred: &GaussianPrediction<T>, targets: &Vec3s<T>, beta: T) -> Result<NllValue<T>> {
    let half = T::c(0.5);
    let per_landmark = T::one() / T::from_usize_exact(LANDMARKS);
    let mut out = NllValue {
        value: T::zero(),
        grad_mean: [[T::zero(); 3]; LANDMARKS],
        grad_log_variance: [[T::zero(); 3]; LANDMARKS],
    };
    for k in 0..LANDMARKS {
        for a in 0..3 {
            let s2 = pred.variance[k][a];
            if !(s2 > T::zero()) {
                return Err(Error::InvalidArgument(format!(
                    "non-positive variance {s2} at landmark {} axis {a}",
                    k + 1
                )));
            }
            let r = targets[k][a] - pred.mean[k][a];
            let ratio = r * r / s2;
            out.value += half * (beta * s2.ln() + ratio);
            out.grad_mean[k][a] = -r / s2 * per_landmark;
            out.grad_log_variance[k][a] = half * (beta - ratio) * per_landmark;
        }
    }
    out.value *= per_landmark;
    Ok(out)
}

/// Mean of [`nll_loss`] over a set of predictions.
pub fn mean_nll<T: Real>(preds: &[GaussianPrediction<T>], targets: &[Vec3s<T>], beta: T) -> Result<T> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut total = T::zero();
    for (p, t) in preds.iter().zip(targets) {
        total += nll_loss(p, t, beta)?.value;
    }
    Ok(total / T::from_usize_exact(preds.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonValue<T> {
    pub value: T,
    pub grad_positions: Vec3s<T>,
}

fn sub3<T: Real>(a: &[T; 3], b: &[T; 3]) -> [T; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm3<T: Real>(v: &[T; 3]) -> T {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// `sum over edges |d(pred_i, pred_j) - d(true_i, true_j)|`.
///
/// Subgradients: `sign(0) = 0` at matching lengths, and a zero direction when
/// the two predicted endpoints coincide.
pub fn skeleton_pose_loss<T: Real>(
    predicted: &Vec3s<T>,
    truth: &Vec3s<T>,
    graph: &SkeletonTemplate,
) -> SkeletonValue<T> {
    let mut value = T::zero();
    let mut grad = [[T::zero(); 3]; LANDMARKS];
    for &(a, b) in &graph.edges {
        let (i, j) = (a.slot(), b.slot());
        let diff = sub3(&predicted[i], &predicted[j]);
        let d_pred = norm3(&diff);
        let d_true = norm3(&sub3(&truth[i], &truth[j]));
        let gap = d_pred - d_true;
        value += gap.abs();
        let sign = if gap > T::zero() {
            T::one()
        } else if gap < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        if sign != T::zero() && d_pred > T::zero() {
            for ax in 0..3 {
                let g = sign * diff[ax] / d_pred;
                grad[i][ax] += g;
                grad[j][ax] -= g;
            }
        }
    }
    SkeletonValue {
        value,
        grad_positions: grad,
    }
}

pub fn total_loss<T: Real>(nll: T, skeleton: T, lambda: T) -> T {
    nll + lambda * skeleton
}

#[derive(Debug, Clone)]
pub struct BatchObjective<T> {
    pub total: T,
    pub nll: T,
    pub skeleton: T,
    /// Gradient of `total` with respect to the raw `batch x 84` outputs.
    pub grad_raw: Matrix<T>,
}

/// Full training objective on raw network outputs. Gradients through the
/// log-variance clamp are zero wherever the clamp is active.
pub fn batch_objective<T: Real>(
    raw: &Matrix<T>,
    poses: &Matrix<T>,
    targets: &[Vec3s<T>],
    cfg: &LossConfig,
    graph: &SkeletonTemplate,
) -> Result<BatchObjective<T>> {
    let n = raw.rows();
    if n == 0 || raw.cols() != OUTPUTS || targets.len() != n || poses.rows() != n {
        return Err(Error::Dimension("objective inputs disagree in batch size".into()));
    }
    let inv_n = T::one() / T::from_usize_exact(n);
    let (beta, lambda) = (T::c(cfg.beta), T::c(cfg.lambda));
    let (lo, hi) = (T::c(LOGVAR_MIN), T::c(LOGVAR_MAX));
    let mut grad_raw = Matrix::zeros(n, OUTPUTS);
    let (mut nll_sum, mut skel_sum) = (T::zero(), T::zero());
    for b in 0..n {
        let row = raw.row(b);
        let pred = GaussianPrediction::from_raw(row);
        let nll = nll_loss(&pred, &targets[b], beta)?;
        nll_sum += nll.value;
        let g = grad_raw.row_mut(b);
        for k in 0..LANDMARKS {
            for a in 0..3 {
                g[3 * k + a] = nll.grad_mean[k][a] * inv_n;
                let l = row[MEAN_OUTPUTS + 3 * k + a];
                if l > lo && l < hi {
                    g[MEAN_OUTPUTS + 3 * k + a] = nll.grad_log_variance[k][a] * inv_n;
                }
                debug_assert!(clamp_logvar(l) == l || g[MEAN_OUTPUTS + 3 * k + a] == T::zero());
            }
        }
        if cfg.lambda > 0.0 {
            let pose = poses.row(b);
            let place = |d: &[T; 3]| [pose[0] + d[0], pose[1] + d[1], pose[2] + d[2]];
            let predicted = pred.mean.map(|m| place(&m));
            let truth = targets[b].map(|t| place(&t));
            let skel = skeleton_pose_loss(&predicted, &truth, graph);
            skel_sum += skel.value;
            for k in 0..LANDMARKS {
                for a in 0..3 {
                    g[3 * k + a] += lambda * skel.grad_positions[k][a] * inv_n;
                }
            }
        }
    }
    let nll = nll_sum * inv_n;
    let skeleton = skel_sum * inv_n;
    let total = total_loss(nll, skeleton, lambda);
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {total}")));
    }
    Ok(BatchObjective {
        total,
        nll,
        skeleton,
        grad_raw,
    })
}
