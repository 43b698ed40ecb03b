//! Test-set metrics: mean Euclidean distance, Gaussian NLL and percentage of
//! region-contained positions (PRCP).

use serde::{Deserialize, Serialize};

use crate::anatomy::{units_to_mm, LandmarkId, LANDMARKS};
use crate::conformal::{prediction_region, CalibrationTable};
use crate::error::{Error, Result};
use crate::losses::{nll_loss, Vec3s};
use crate::regressor::McdEstimate;
use crate::scalar::Real;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::Dimension(format!("{a} predictions for {b} targets")));
    }
    Ok(())
}

fn dist<T: Real>(a: &[T; 3], b: &[T; 3]) -> f64 {
    let d: T = (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum();
    d.sqrt().as_f64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerLandmark {
    pub overall: f64,
    pub per_landmark: [f64; LANDMARKS],
}

impl PerLandmark {
    fn from_sums(sums: [f64; LANDMARKS], n: usize) -> Self {
        let per_landmark = sums.map(|s| s / n as f64);
        let overall = per_landmark.iter().sum::<f64>() / LANDMARKS as f64;
        PerLandmark { overall, per_landmark }
    }

    fn scaled(&self, f: f64) -> Self {
        PerLandmark {
            overall: self.overall * f,
            per_landmark: self.per_landmark.map(|v| v * f),
        }
    }
}

/// Mean Euclidean distance between predicted and true displacements
/// (normalized units).
pub fn mean_euclidean_distance<T: Real>(pred: &[Vec3s<T>], truth: &[Vec3s<T>]) -> Result<PerLandmark> {
    check_lengths(pred.len(), truth.len())?;
    let mut sums = [0.0; LANDMARKS];
    for (p, t) in pred.iter().zip(truth) {
        for k in 0..LANDMARKS {
            sums[k] += dist(&p[k], &t[k]);
        }
    }
    Ok(PerLandmark::from_sums(sums, pred.len()))
}

/// Gaussian NLL (beta = 1) of the predictive distribution with total
/// variance. `overall` equals the mean per-sample loss used in training.
pub fn eval_nll<T: Real>(estimates: &[McdEstimate<T>], truth: &[Vec3s<T>]) -> Result<PerLandmark> {
    check_lengths(estimates.len(), truth.len())?;
    let mut sums = [0.0; LANDMARKS];
    for (e, t) in estimates.iter().zip(truth) {
        let pred = e.predictive();
        nll_loss(&pred, t, T::one())?;
        for k in 0..LANDMARKS {
            for a in 0..3 {
                let v = pred.variance[k][a];
                let r = t[k][a] - pred.mean[k][a];
                sums[k] += (T::c(0.5) * (v.ln() + r * r / v)).as_f64();
            }
        }
    }
    Ok(PerLandmark::from_sums(sums, estimates.len()))
}

/// Coverage for one miscoverage level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub alpha: f64,
    pub overall: f64,
    pub per_landmark: [f64; LANDMARKS],
}

impl Coverage {
    pub fn label(&self) -> String {
        prcp_label(self.alpha)
    }
}

pub fn prcp_label(alpha: f64) -> String {
    format!("prcp@{}", ((1.0 - alpha) * 100.0).round())
}

/// Fraction of true displacements inside their conformal regions, for every
/// alpha in the table.
pub fn prcp<T: Real>(
    estimates: &[McdEstimate<T>],
    truth: &[Vec3s<T>],
    table: &CalibrationTable<T>,
) -> Result<Vec<Coverage>> {
    check_lengths(estimates.len(), truth.len())?;
    let mut hits = vec![[0usize; LANDMARKS]; table.alphas.len()];
    for (e, t) in estimates.iter().zip(truth) {
        for k in 0..LANDMARKS {
            for (ai, q) in table.quantiles[k].iter().enumerate() {
                let inside = if q.is_infinite() {
                    true
                } else {
                    prediction_region(e.mean[k], e.scalar_total[k], *q)?.contains(&t[k])
                };
                hits[ai][k] += inside as usize;
            }
        }
    }
    let n = estimates.len() as f64;
    Ok(table
        .alphas
        .iter()
        .zip(hits)
        .map(|(&alpha, h)| {
            let per_landmark = h.map(|c| c as f64 / n);
            Coverage {
                alpha,
                overall: per_landmark.iter().sum::<f64>() / LANDMARKS as f64,
                per_landmark,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub distance: PerLandmark,
    pub distance_mm: PerLandmark,
    pub nll: PerLandmark,
    pub calibration_nll: Option<f64>,
    pub coverage: Vec<Coverage>,
}

pub fn evaluate<T: Real>(
    estimates: &[McdEstimate<T>],
    truth: &[Vec3s<T>],
    table: &CalibrationTable<T>,
) -> Result<MetricsReport> {
    let means: Vec<Vec3s<T>> = estimates.iter().map(|e| e.mean).collect();
    let distance = mean_euclidean_distance(&means, truth)?;
    Ok(MetricsReport {
        n_samples: estimates.len(),
        distance_mm: distance.scaled(units_to_mm(1.0)),
        distance,
        nll: eval_nll(estimates, truth)?,
        calibration_nll: table.calibration_nll,
        coverage: prcp(estimates, truth, table)?,
    })
}

impl MetricsReport {
    pub fn coverage_at(&self, alpha: f64) -> Option<&Coverage> {
        self.coverage.iter().find(|c| (c.alpha - alpha).abs() < 1e-12)
    }

    /// One row per landmark plus an `overall` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("landmark,distance_mm,nll");
        for c in &self.coverage {
            s.push(',');
            s.push_str(&c.label());
        }
        s.push('\n');
        for k in 0..LANDMARKS {
            s.push_str(&format!(
                "{},{},{}",
                LandmarkId::from_slot(k).name(),
                self.distance_mm.per_landmark[k],
                self.nll.per_landmark[k]
            ));
            for c in &self.coverage {
                s.push_str(&format!(",{}", c.per_landmark[k]));
            }
            s.push('\n');
        }
        s.push_str(&format!("overall,{},{}", self.distance_mm.overall, self.nll.overall));
        for c in &self.coverage {
            s.push_str(&format!(",{}", c.overall));
        }
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{calibrate, score_estimates, CalibrationPolicy};
    use crate::losses::mean_nll;
    use rand::Rng as _;
    use rand_distr::{Distribution, Normal};

    fn est(mean: Vec3s<f64>, var: f64) -> McdEstimate<f64> {
        McdEstimate::certain(mean, [[var; 3]; LANDMARKS])
    }

    #[test]
    fn distance_of_exact_predictions_is_zero() {
        let t = vec![[[0.1, 0.2, 0.3]; LANDMARKS]; 3];
        let d = mean_euclidean_distance(&t, &t).unwrap();
        assert_eq!(d.overall, 0.0);
    }

    #[test]
    fn distance_hand_value() {
        let p = vec![[[3.0, 4.0, 0.0]; LANDMARKS]];
        let t = vec![[[0.0; 3]; LANDMARKS]];
        let d = mean_euclidean_distance(&p, &t).unwrap();
        assert_eq!(d.overall, 5.0);
        assert!(mean_euclidean_distance(&p, &[]).is_err());
    }

    #[test]
    fn nll_matches_training_loss() {
        let mut rng = crate::rng::stream(0, "t", 0);
        let ests: Vec<_> = (0..20)
            .map(|_| {
                est(
                    std::array::from_fn(|_| [rng.random(), rng.random(), 0.0]),
                    rng.random_range(0.1..2.0),
                )
            })
            .collect();
        let truth = vec![[[0.5; 3]; LANDMARKS]; 20];
        let nll = eval_nll(&ests, &truth).unwrap();
        let preds: Vec<_> = ests.iter().map(|e| e.predictive()).collect();
        let reference = mean_nll(&preds, &truth, 1.0).unwrap();
        assert!((nll.overall - reference).abs() < 1e-12, "{} {}", nll.overall, reference);
    }

    #[test]
    fn coverage_tracks_nominal_level() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let draw = |seed: u64, n: usize| {
            let mut rng = crate::rng::stream(seed, "cov", 0);
            let ests: Vec<_> = (0..n).map(|_| est([[0.0; 3]; LANDMARKS], 1.0)).collect();
            let truth: Vec<Vec3s<f64>> = (0..n)
                .map(|_| std::array::from_fn(|_| std::array::from_fn(|_| normal.sample(&mut rng))))
                .collect();
            (ests, truth)
        };
        let (ce, ct) = draw(1, 4000);
        let table = calibrate(
            &score_estimates(&ce, &ct).unwrap(),
            &[0.1, 0.05],
            CalibrationPolicy::RequireFinite,
        )
        .unwrap();
        for n in [500, 2000, 8000] {
            let (te, tt) = draw(2 + n as u64, n);
            let cov = prcp(&te, &tt, &table).unwrap();
            let tol = 4.0 * (0.1f64 * 0.9 / n as f64).sqrt() + 0.01;
            assert!((cov[0].overall - 0.9).abs() < tol, "n={n}: {}", cov[0].overall);
        }
    }

    #[test]
    fn infinite_quantile_covers_everything() {
        let e = vec![est([[0.0; 3]; LANDMARKS], 1.0); 2];
        let t = vec![[[1e6; 3]; LANDMARKS]; 2];
        let table = calibrate(&vec![vec![0.5]; LANDMARKS], &[0.1], CalibrationPolicy::AllowInfinite).unwrap();
        let cov = prcp(&e, &t, &table).unwrap();
        assert_eq!(cov[0].overall, 1.0);
    }

    #[test]
    fn csv_has_header_landmarks_and_overall() {
        let e = vec![est([[0.0; 3]; LANDMARKS], 1.0); 40];
        let t = vec![[[0.0; 3]; LANDMARKS]; 40];
        let table = calibrate(
            &score_estimates(&e, &t).unwrap(),
            &[0.1, 0.05, 0.03],
            CalibrationPolicy::RequireFinite,
        )
        .unwrap();
        let r = evaluate(&e, &t, &table).unwrap();
        let csv = r.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "landmark,distance_mm,nll,prcp@90,prcp@95,prcp@97");
        assert_eq!(lines.len(), 16);
        assert!(lines[1].starts_with("Skull,"));
        assert!(lines[15].starts_with("overall,0,"));
        assert_eq!(r.coverage_at(0.05).unwrap().overall, 1.0);
    }
}
