//! Isocenter sampling, synthetic observations, position augmentation and
//! dataset assembly.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anatomy::{self, mm_to_units, snap, Patient, Point, SkeletonTemplate, LANDMARKS};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Horizontal isocenter spread (mm).
pub const HORIZONTAL_SIGMA_MM: f64 = 47.5;
/// Depth isocenter spread (mm).
pub const DEPTH_SIGMA_MM: f64 = 100.0;
/// Fraction of the body height the vertical coordinate is drawn from.
pub const VERTICAL_FRACTION: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Pose { x, y, z }
    }

    pub fn from_point(p: Point) -> Self {
        Pose::new(p[0], p[1], p[2])
    }

    pub fn to_point(self) -> Point {
        [self.x, self.y, self.z]
    }

    /// Clamped to the unit cube and snapped to the coordinate lattice.
    pub fn snapped(self) -> Self {
        Pose::from_point(anatomy::snap_point(self.to_point()))
    }

    pub fn is_in_unit_cube(&self) -> bool {
        self.to_point().iter().all(|v| (0.0..=1.0).contains(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub patient_id: u64,
    pub pose: Pose,
    pub observation: Vec<f64>,
    /// `landmark - pose`, per landmark.
    pub targets: [Point; LANDMARKS],
}

impl Sample {
    pub fn true_position(&self, slot: usize) -> Point {
        let t = self.targets[slot];
        [self.pose.x + t[0], self.pose.y + t[1], self.pose.z + t[2]]
    }
}

/// Exact displacements from `pose` to every landmark of `patient`.
pub fn displacement_targets(patient: &Patient, pose: Pose) -> [Point; LANDMARKS] {
    let p = pose.to_point();
    patient
        .landmark_positions
        .map(|l| [l[0] - p[0], l[1] - p[1], l[2] - p[2]])
}

/// Draws an isocenter: vertical uniform over the central 70% of the body,
/// horizontal and depth Gaussian around the patient's midline and mean depth.
pub fn sample_isocenter(patient: &Patient, rng: &mut Rng) -> Pose {
    let (top, bottom) = patient.vertical_extent();
    let margin = (bottom - top) * (1.0 - VERTICAL_FRACTION) / 2.0;
    let (lo, hi) = (top + margin, bottom - margin);
    let y = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let x = Normal::new(patient.midline_x(), mm_to_units(HORIZONTAL_SIGMA_MM))
        .expect("finite")
        .sample(rng);
    let z = Normal::new(patient.mean_depth(), mm_to_units(DEPTH_SIGMA_MM))
        .expect("finite")
        .sample(rng);
    Pose::new(x, y, z).snapped()
}

/// Proxy for the rendered radiograph and its encoder features.
///
/// Each landmark within `fov_radius` of the pose writes a small bank of
/// Gaussian responses of its offset `o = landmark - pose` into its slots:
/// the radial response `g = exp(-|o|^2 / 2w^2)` followed (when there is room)
/// by the first-order responses `g * o_axis / w`. Remaining channels carry
/// noise only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservationModel {
    pub dim: usize,
    pub fov_radius: f64,
    pub rbf_width: f64,
    pub noise_sigma: f64,
}

impl Default for ObservationModel {
    fn default() -> Self {
        ObservationModel {
            dim: 64,
            fov_radius: 0.35,
            rbf_width: 0.15,
            noise_sigma: 0.05,
        }
    }
}

impl ObservationModel {
    pub fn validate(&self) -> Result<()> {
        if self.dim < LANDMARKS {
            return Err(Error::InvalidArgument(format!(
                "observation dimension {} below {LANDMARKS}",
                self.dim
            )));
        }
        if !(self.rbf_width > 0.0 && self.fov_radius >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(
                "observation widths and noise must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn slots_per_landmark(&self) -> usize {
        if self.dim >= 4 * LANDMARKS {
            4
        } else {
            1
        }
    }

    pub fn with_noise(self, noise_sigma: f64) -> Self {
        ObservationModel { noise_sigma, ..self }
    }

    pub fn synthesize(&self, patient: &Patient, pose: Pose, rng: &mut Rng) -> Vec<f64> {
        let per = self.slots_per_landmark();
        let mut values = vec![0.0; self.dim];
        let p = pose.to_point();
        let w = self.rbf_width;
        for (k, l) in patient.landmark_positions.iter().enumerate() {
            let o = [l[0] - p[0], l[1] - p[1], l[2] - p[2]];
            let r2 = o[0] * o[0] + o[1] * o[1] + o[2] * o[2];
            if r2.sqrt() > self.fov_radius {
                continue;
            }
            let g = (-r2 / (2.0 * w * w)).exp();
            let slots = &mut values[k * per..(k + 1) * per];
            slots[0] = g;
            if per == 4 {
                for axis in 0..3 {
                    slots[axis + 1] = g * o[axis] / w;
                }
            }
        }
        if self.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, self.noise_sigma).expect("finite");
            for v in &mut values {
                *v += noise.sample(rng);
            }
        }
        values
    }
}

pub fn synthesize_observation(patient: &Patient, pose: Pose, model: &ObservationModel, rng: &mut Rng) -> Vec<f64> {
    model.synthesize(patient, pose, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AugmentationLevel {
    #[default]
    None,
    Weak,
    Mid,
    Strong,
}

impl AugmentationLevel {
    pub const ALL: [AugmentationLevel; 4] = [
        AugmentationLevel::None,
        AugmentationLevel::Weak,
        AugmentationLevel::Mid,
        AugmentationLevel::Strong,
    ];

    pub fn strength(self) -> f64 {
        match self {
            AugmentationLevel::None => 0.0,
            AugmentationLevel::Weak => 0.02,
            AugmentationLevel::Mid => 0.05,
            AugmentationLevel::Strong => 0.10,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AugmentationLevel::None => "none",
            AugmentationLevel::Weak => "weak",
            AugmentationLevel::Mid => "mid",
            AugmentationLevel::Strong => "strong",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub probability: f64,
    pub strength: f64,
    pub level: AugmentationLevel,
}

impl AugmentationConfig {
    pub fn none() -> Self {
        Self::from_level(AugmentationLevel::None)
    }

    pub fn from_level(level: AugmentationLevel) -> Self {
        AugmentationConfig {
            probability: 0.5,
            strength: level.strength(),
            level,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) || !(self.strength >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "augmentation needs p0 in [0,1] and eta >= 0, got {} / {}",
                self.probability, self.strength
            )));
        }
        Ok(())
    }
}

/// Shared `(x, y)` shift, or `None` when the coin flip leaves the patient alone.
pub fn draw_shift(cfg: &AugmentationConfig, rng: &mut Rng) -> Option<[f64; 2]> {
    let u: f64 = rng.random();
    if u >= cfg.probability {
        return None;
    }
    let eta = cfg.strength;
    let dist = Uniform::new_inclusive(-eta, eta).expect("eta >= 0");
    Some([dist.sample(rng), dist.sample(rng)])
}

/// Translates every landmark's `(x, y)` by one shared shift with probability
/// `p0`; depth is never touched.
pub fn apply_position_augmentation(patient: &Patient, cfg: &AugmentationConfig, rng: &mut Rng) -> Patient {
    match draw_shift(cfg, rng) {
        None => patient.clone(),
        Some([sx, sy]) => Patient {
            id: patient.id,
            landmark_positions: patient.landmark_positions.map(|p| {
                [
                    snap((p[0] + sx).clamp(0.0, 1.0)),
                    snap((p[1] + sy).clamp(0.0, 1.0)),
                    p[2],
                ]
            }),
        },
    }
}

fn patient_samples(
    patient: &Patient,
    n: usize,
    aug: &AugmentationConfig,
    obs: &ObservationModel,
    rng: &mut Rng,
) -> Vec<Sample> {
    let patient = apply_position_augmentation(patient, aug, rng);
    (0..n)
        .map(|_| {
            let pose = sample_isocenter(&patient, rng);
            let observation = obs.synthesize(&patient, pose, rng);
            Sample {
                patient_id: patient.id,
                pose,
                observation,
                targets: displacement_targets(&patient, pose),
            }
        })
        .collect()
}

/// `n_per_patient` samples for every patient, in patient order. Each patient
/// uses its own stream so the result does not depend on thread count.
pub fn build_dataset(
    patients: &[Patient],
    n_per_patient: usize,
    aug: &AugmentationConfig,
    obs: &ObservationModel,
    seed: u64,
) -> Result<Vec<Sample>> {
    if patients.is_empty() {
        return Err(Error::InvalidArgument("empty patient list".into()));
    }
    if n_per_patient == 0 {
        return Err(Error::InvalidArgument("n_per_patient must be >= 1".into()));
    }
    aug.validate()?;
    obs.validate()?;
    let chunks: Vec<Vec<Sample>> = patients
        .par_iter()
        .map(|p| {
            let mut rng = rng::stream(seed, "dataset", p.id);
            patient_samples(p, n_per_patient, aug, obs, &mut rng)
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

/// One sample from each of `count` freshly generated patients.
///
/// Every record is an independent draw of (patient, isocenter, noise), so
/// records are exchangeable. Patient ids start at `id_offset`.
pub fn build_episode_dataset(
    template: &SkeletonTemplate,
    count: usize,
    id_offset: u64,
    obs: &ObservationModel,
    seed: u64,
    stream_name: &str,
) -> Result<Vec<Sample>> {
    obs.validate()?;
    let none = AugmentationConfig::none();
    Ok((0..count as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, stream_name, i);
            let patient = anatomy::sample_patient_with(template, id_offset + i, &mut rng);
            patient_samples(&patient, 1, &none, obs, &mut rng)
                .pop()
                .expect("one sample")
        })
        .collect())
}
