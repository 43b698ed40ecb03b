//! Multi-step positioning: each predicted displacement becomes the next pose.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anatomy::{self, units_to_mm, LandmarkId, Patient, Point, LANDMARKS};
use crate::conformal::CalibrationTable;
use crate::error::{Error, Result};
use crate::regressor::{McdEstimate, Regressor};
use crate::rng::{self, Rng};
use crate::sampler::{displacement_targets, sample_isocenter, ObservationModel, Pose};
use crate::scalar::Real;

/// Anything that maps an observation at a pose to displacement estimates.
pub trait PositioningModel: Sync {
    fn is_trained(&self) -> bool;

    fn estimate(&self, patient: &Patient, pose: Pose, observation: &[f64], rng: &mut Rng) -> Result<McdEstimate<f64>>;
}

/// A regressor queried with `passes` MC-dropout passes at rate `p`.
#[derive(Debug, Clone, Copy)]
pub struct McdModel<'a, T: Real> {
    pub regressor: &'a Regressor<T>,
    pub passes: usize,
    pub p: f64,
}

impl<T: Real> PositioningModel for McdModel<'_, T> {
    fn is_trained(&self) -> bool {
        self.regressor.epochs_trained > 0
    }

    fn estimate(&self, _: &Patient, pose: Pose, observation: &[f64], rng: &mut Rng) -> Result<McdEstimate<f64>> {
        let e = self
            .regressor
            .mcd_predict(observation, pose, self.passes, T::c(self.p), rng)?;
        let cv = |a: [[T; 3]; LANDMARKS]| a.map(|v| v.map(T::as_f64));
        Ok(McdEstimate {
            mean: cv(e.mean),
            epistemic: cv(e.epistemic),
            aleatoric: cv(e.aleatoric),
            total: cv(e.total),
            scalar_total: e.scalar_total.map(T::as_f64),
        })
    }
}

/// Test stub returning the exact displacements with a fixed small variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleModel;

pub const ORACLE_VARIANCE: f64 = 1e-4;

impl PositioningModel for OracleModel {
    fn is_trained(&self) -> bool {
        true
    }

    fn estimate(&self, patient: &Patient, pose: Pose, _: &[f64], _: &mut Rng) -> Result<McdEstimate<f64>> {
        Ok(McdEstimate::certain(
            displacement_targets(patient, pose),
            [[ORACLE_VARIANCE; 3]; LANDMARKS],
        ))
    }
}

/// Ordered landmark sequence; the last element is the target.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PathSpec(Vec<LandmarkId>);

impl PathSpec {
    pub fn new(steps: Vec<LandmarkId>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidArgument("empty path".into()));
        }
        if steps.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!(
                "path {} repeats a landmark in consecutive stages",
                PathSpec(steps)
            )));
        }
        Ok(PathSpec(steps))
    }

    pub fn steps(&self) -> &[LandmarkId] {
        &self.0
    }

    pub fn target(&self) -> LandmarkId {
        *self.0.last().expect("non-empty")
    }

    /// `1`, `10-1`, `11-1`, `11-10-1`.
    pub fn defaults() -> Vec<PathSpec> {
        parse_paths("1;10-1;11-1;11-10-1").expect("valid")
    }
}

impl fmt::Display for PathSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|l| l.index().to_string()).collect();
        f.write_str(&parts.join("-"))
    }
}

impl FromStr for PathSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let steps = s
            .trim()
            .split('-')
            .map(|part| {
                let idx: u8 = part
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("malformed path {s:?}")))?;
                LandmarkId::new(idx)
            })
            .collect::<Result<Vec<_>>>()?;
        PathSpec::new(steps)
    }
}

impl TryFrom<String> for PathSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PathSpec> for String {
    fn from(p: PathSpec) -> String {
        p.to_string()
    }
}

/// `;`-separated list of paths.
pub fn parse_paths(s: &str) -> Result<Vec<PathSpec>> {
    let paths = s
        .split(';')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<_>>>()?;
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no paths given".into()));
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub landmark: LandmarkId,
    pub pose_before: Pose,
    pub displacement: Point,
    pub scalar_total: f64,
    /// Region radius per calibrated alpha (normalized units).
    pub region_radius: Vec<f64>,
    pub pose_after: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub patient_id: u64,
    pub start: Pose,
    pub stages: Vec<Stage>,
    /// `|final - target|` in x and y (normalized units).
    pub error_xy: [f64; 2],
    pub error_3d: f64,
}

impl Trajectory {
    pub fn final_pose(&self) -> Pose {
        self.stages.last().map_or(self.start, |s| s.pose_after)
    }

    pub fn error_2d(&self) -> f64 {
        self.error_xy[0].hypot(self.error_xy[1])
    }
}

/// Runs one path from `start`.
pub fn run_path(
    model: &dyn PositioningModel,
    calib: &CalibrationTable<f64>,
    patient: &Patient,
    start: Pose,
    path: &PathSpec,
    obs: &ObservationModel,
    rng: &mut Rng,
) -> Result<Trajectory> {
    if !model.is_trained() {
        return Err(Error::Untrained);
    }
    let mut pose = start;
    let mut stages = Vec::with_capacity(path.steps().len());
    for &landmark in path.steps() {
        let observation = obs.synthesize(patient, pose, rng);
        let est = model.estimate(patient, pose, &observation, rng)?;
        let k = landmark.slot();
        let d = est.mean[k];
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("displacement for landmark {landmark}")));
        }
        let next = Pose::new(pose.x + d[0], pose.y + d[1], pose.z + d[2]).snapped();
        stages.push(Stage {
            landmark,
            pose_before: pose,
            displacement: d,
            scalar_total: est.scalar_total[k],
            region_radius: calib.quantiles[k].iter().map(|q| est.scalar_total[k] * q).collect(),
            pose_after: next,
        });
        pose = next;
    }
    let target = patient.position(path.target());
    let p = pose.to_point();
    Ok(Trajectory {
        patient_id: patient.id,
        start,
        stages,
        error_xy: [(p[0] - target[0]).abs(), (p[1] - target[1]).abs()],
        error_3d: anatomy::distance(&p, &target),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    pub path: PathSpec,
    /// Mean 2D absolute error (mm).
    pub mae: f64,
    /// Population variance of the 2D absolute error (mm^2).
    pub error_variance: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathReport {
    pub summaries: Vec<PathSummary>,
    /// `trajectories[path][episode]`
    pub trajectories: Vec<Vec<Trajectory>>,
}

impl PathReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("path,mae,error_variance,n\n");
        for r in &self.summaries {
            s.push_str(&format!("{},{},{},{}\n", r.path, r.mae, r.error_variance, r.n));
        }
        s
    }

    /// Per-episode `(x, y)` absolute errors in mm.
    pub fn errors_csv(&self) -> String {
        let mut s = String::from("path,episode,err_x,err_y\n");
        for (r, trajs) in self.summaries.iter().zip(&self.trajectories) {
            for (e, t) in trajs.iter().enumerate() {
                s.push_str(&format!(
                    "{},{},{},{}\n",
                    r.path,
                    e,
                    units_to_mm(t.error_xy[0]),
                    units_to_mm(t.error_xy[1])
                ));
            }
        }
        s
    }
}

/// Runs every path from the same start pose per episode. Episode `e` of
/// patient `i` owns its own streams; path runs are keyed by path text.
#[allow(clippy::too_many_arguments)]
pub fn compare_paths(
    model: &dyn PositioningModel,
    calib: &CalibrationTable<f64>,
    patients: &[Patient],
    paths: &[PathSpec],
    episodes_per_patient: usize,
    obs: &ObservationModel,
    seed: u64,
) -> Result<PathReport> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no paths to compare".into()));
    }
    let episodes: Vec<(usize, usize)> = (0..patients.len())
        .flat_map(|i| (0..episodes_per_patient).map(move |e| (i, e)))
        .collect();
    let runs: Vec<Vec<Trajectory>> = episodes
        .par_iter()
        .map(|&(i, e)| {
            let patient = &patients[i];
            let key = format!("{}/{}", patient.id, e);
            let start = sample_isocenter(patient, &mut rng::stream(seed, &format!("navigation/start/{key}"), 0));
            paths
                .iter()
                .map(|path| {
                    let mut r = rng::stream(seed, &format!("navigation/run/{key}/{path}"), 0);
                    run_path(model, calib, patient, start, path, obs, &mut r)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut trajectories: Vec<Vec<Trajectory>> = vec![Vec::with_capacity(runs.len()); paths.len()];
    for per_episode in runs {
        for (j, t) in per_episode.into_iter().enumerate() {
            trajectories[j].push(t);
        }
    }
    let summaries = paths
        .iter()
        .zip(&trajectories)
        .map(|(path, trajs)| {
            let errs: Vec<f64> = trajs.iter().map(|t| units_to_mm(t.error_2d())).collect();
            let n = errs.len();
            let (mae, error_variance) = if n == 0 {
                (0.0, 0.0)
            } else {
                let mean = errs.iter().sum::<f64>() / n as f64;
                let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n as f64;
                (mean, var)
            };
            PathSummary {
                path: path.clone(),
                mae,
                error_variance,
                n,
            }
        })
        .collect();
    Ok(PathReport {
        summaries,
        trajectories,
    })
}
