//! Split conformal calibration with uncertainty-scaled scores.
//!
//! Score: `s = |pred - truth| / sigma2_total`. Region: the closed ball around
//! the predicted displacement with radius `sigma2_total * Q`, where `Q` is the
//! `ceil((n + 1)(1 - alpha))`-th smallest calibration score (or `+inf` when
//! that rank exceeds `n`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::anatomy::{LandmarkId, LANDMARKS};
use crate::error::{Error, Result};
use crate::regressor::McdEstimate;
use crate::scalar::Real;

pub const SCORE_DEFINITION_VERSION: u32 = 1;
pub const DEFAULT_ALPHAS: [f64; 3] = [0.1, 0.05, 0.03];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonconformityScore<T> {
    pub value: T,
    pub landmark: LandmarkId,
    pub sample_id: usize,
}

fn distance<T: Real>(a: &[T; 3], b: &[T; 3]) -> T {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

pub fn nonconformity_score<T: Real>(pred: &[T; 3], truth: &[T; 3], sigma2_total: T) -> Result<T> {
    if !(sigma2_total > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "total variance must be positive, got {sigma2_total}"
        )));
    }
    Ok(distance(pred, truth) / sigma2_total)
}

pub fn validate_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// 1-based rank `ceil((n + 1)(1 - alpha))`, or `None` when it exceeds `n`.
pub fn conformal_rank(n: usize, alpha: f64) -> Option<usize> {
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    // absorb representation error in products such as 10 * 0.9
    let rank = (x - 1e-9 * x.max(1.0)).ceil().max(1.0) as usize;
    (rank <= n).then_some(rank)
}

/// Smallest calibration size with a finite quantile at level `alpha`.
pub fn min_calibration_size(alpha: f64) -> usize {
    (1..).find(|&n| conformal_rank(n, alpha).is_some()).expect("alpha < 1")
}

/// Finite-sample conformal quantile; `+inf` when the rank exceeds `n`.
pub fn conformal_quantile<T: Real>(scores: &[T], alpha: f64) -> T {
    match conformal_rank(scores.len(), alpha) {
        None => T::infinity(),
        Some(rank) => {
            let mut sorted = scores.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
            sorted[rank - 1]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationPolicy {
    /// Reject landmarks with fewer than `ceil(1 / min alpha)` scores.
    RequireFinite,
    /// Accept any size; small sets yield the `+inf` sentinel.
    AllowInfinite,
}

/// Per-landmark, per-alpha conformal quantiles.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable<T> {
    pub alphas: Vec<f64>,
    /// `quantiles[landmark_slot][alpha_index]`
    pub quantiles: Vec<Vec<T>>,
    pub n: [usize; LANDMARKS],
    /// Mean NLL on the calibration set, when computed by the pipeline.
    pub calibration_nll: Option<f64>,
}

impl<T: Real> CalibrationTable<T> {
    pub fn alpha_index(&self, alpha: f64) -> Option<usize> {
        self.alphas.iter().position(|&a| (a - alpha).abs() < 1e-12)
    }

    pub fn quantile(&self, landmark: LandmarkId, alpha: f64) -> Option<T> {
        self.alpha_index(alpha).map(|i| self.quantiles[landmark.slot()][i])
    }
}

/// Builds the table from per-landmark score lists (index = landmark slot).
pub fn calibrate<T: Real>(scores: &[Vec<T>], alphas: &[f64], policy: CalibrationPolicy) -> Result<CalibrationTable<T>> {
    if scores.len() != LANDMARKS {
        return Err(Error::Dimension(format!(
            "expected score lists for {LANDMARKS} landmarks, got {}",
            scores.len()
        )));
    }
    if alphas.is_empty() {
        return Err(Error::InvalidArgument("no alpha levels requested".into()));
    }
    for &a in alphas {
        validate_alpha(a)?;
    }
    let min_alpha = alphas.iter().copied().fold(f64::INFINITY, f64::min);
    let need = (1.0 / min_alpha).ceil() as usize;
    let mut n = [0; LANDMARKS];
    let mut quantiles = Vec::with_capacity(LANDMARKS);
    for (k, list) in scores.iter().enumerate() {
        if policy == CalibrationPolicy::RequireFinite && list.len() < need {
            return Err(Error::InsufficientCalibration {
                landmark: k + 1,
                have: list.len(),
                need,
            });
        }
        if list.iter().any(|s| !s.is_finite() || *s < T::zero()) {
            return Err(Error::NonFinite(format!("invalid score for landmark {}", k + 1)));
        }
        n[k] = list.len();
        let mut sorted = list.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        quantiles.push(
            alphas
                .iter()
                .map(|&a| match conformal_rank(sorted.len(), a) {
                    Some(r) => sorted[r - 1],
                    None => T::infinity(),
                })
                .collect(),
        );
    }
    Ok(CalibrationTable {
        alphas: alphas.to_vec(),
        quantiles,
        n,
        calibration_nll: None,
    })
}

/// Per-landmark scores of MC-dropout estimates against true displacements.
pub fn score_estimates<T: Real>(estimates: &[McdEstimate<T>], targets: &[[[T; 3]; LANDMARKS]]) -> Result<Vec<Vec<T>>> {
    if estimates.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} estimates for {} targets",
            estimates.len(),
            targets.len()
        )));
    }
    let mut out: Vec<Vec<T>> = (0..LANDMARKS).map(|_| Vec::with_capacity(estimates.len())).collect();
    for (est, tgt) in estimates.iter().zip(targets) {
        for k in 0..LANDMARKS {
            out[k].push(nonconformity_score(&est.mean[k], &tgt[k], est.scalar_total[k])?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionRegion<T> {
    pub center: [T; 3],
    pub radius: T,
}

pub fn prediction_region<T: Real>(center: [T; 3], sigma2_total: T, quantile: T) -> Result<PredictionRegion<T>> {
    if !(quantile >= T::zero()) || !(sigma2_total > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "region needs Q >= 0 and sigma2 > 0, got {quantile} / {sigma2_total}"
        )));
    }
    Ok(PredictionRegion {
        center,
        radius: sigma2_total * quantile,
    })
}

impl<T: Real> PredictionRegion<T> {
    /// Closed-ball membership.
    pub fn contains(&self, point: &[T; 3]) -> bool {
        distance(&self.center, point) <= self.radius
    }
}

pub fn contains<T: Real>(region: &PredictionRegion<T>, point: &[T; 3]) -> bool {
    region.contains(point)
}

// ---- persistence ----

#[derive(Serialize, Deserialize)]
struct TableJson {
    score_definition_version: u32,
    score: String,
    alphas: Vec<f64>,
    n: BTreeMap<u8, usize>,
    /// landmark -> alpha -> quantile (`null` = +inf)
    quantiles: BTreeMap<u8, BTreeMap<String, Option<f64>>>,
    calibration_nll: Option<f64>,
}

fn alpha_key(a: f64) -> String {
    format!("{a}")
}

impl<T: Real> Serialize for CalibrationTable<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let landmark = |k: usize| LandmarkId::from_slot(k).index();
        TableJson {
            score_definition_version: SCORE_DEFINITION_VERSION,
            score: "euclidean_distance / mean_axis_total_variance".into(),
            alphas: self.alphas.clone(),
            n: (0..LANDMARKS).map(|k| (landmark(k), self.n[k])).collect(),
            quantiles: (0..LANDMARKS)
                .map(|k| {
                    let per_alpha = self
                        .alphas
                        .iter()
                        .zip(&self.quantiles[k])
                        .map(|(&a, &q)| (alpha_key(a), q.is_finite().then(|| q.as_f64())))
                        .collect();
                    (landmark(k), per_alpha)
                })
                .collect(),
            calibration_nll: self.calibration_nll,
        }
        .serialize(s)
    }
}

impl<'de, T: Real> Deserialize<'de> for CalibrationTable<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let json = TableJson::deserialize(d)?;
        if json.score_definition_version != SCORE_DEFINITION_VERSION {
            return Err(D::Error::custom(format!(
                "unsupported score definition version {}",
                json.score_definition_version
            )));
        }
        let mut n = [0; LANDMARKS];
        let mut quantiles = Vec::with_capacity(LANDMARKS);
        for k in 0..LANDMARKS {
            let idx = LandmarkId::from_slot(k).index();
            n[k] = *json
                .n
                .get(&idx)
                .ok_or_else(|| D::Error::custom(format!("missing n for landmark {idx}")))?;
            let row = json
                .quantiles
                .get(&idx)
                .ok_or_else(|| D::Error::custom(format!("missing quantiles for landmark {idx}")))?;
            let mut qs = Vec::with_capacity(json.alphas.len());
            for &a in &json.alphas {
                let q = row
                    .get(&alpha_key(a))
                    .ok_or_else(|| D::Error::custom(format!("missing alpha {a} for landmark {idx}")))?;
                qs.push(q.map_or(T::infinity(), T::c));
            }
            quantiles.push(qs);
        }
        Ok(CalibrationTable {
            alphas: json.alphas,
            quantiles,
            n,
            calibration_nll: json.calibration_nll,
        })
    }
}
