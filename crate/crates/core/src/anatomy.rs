//! Synthetic patients: 14 landmarks on a fixed humanoid skeleton graph.
//!
//! Coordinates are normalized to the unit cube. All positions (and poses, see
//! [`crate::sampler`]) are snapped to a dyadic grid of spacing `2^-24`, which
//! keeps `landmark - pose` and `pose + displacement` exact in `f64`.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const LANDMARKS: usize = 14;

/// Nominal body extent: one normalized unit in millimetres.
pub const MM_PER_UNIT: f64 = 1800.0;

/// Coordinate lattice spacing (`2^-24`).
pub const GRID: f64 = 1.0 / 16_777_216.0;

pub type Point = [f64; 3];

pub fn mm_to_units(mm: f64) -> f64 {
    mm / MM_PER_UNIT
}

pub fn units_to_mm(units: f64) -> f64 {
    units * MM_PER_UNIT
}

/// Rounds onto the coordinate lattice.
pub fn snap(v: f64) -> f64 {
    (v / GRID).round() * GRID
}

pub fn clamp_unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

pub fn snap_point(p: Point) -> Point {
    p.map(|v| snap(clamp_unit(v)))
}

pub fn distance(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

const NAMES: [&str; LANDMARKS] = [
    "Skull",
    "R Humeral Head",
    "L Humeral Head",
    "R Scapula",
    "L Scapula",
    "R Elbow",
    "L Elbow",
    "R Wrist",
    "L Wrist",
    "T1",
    "Carina",
    "R Hemidiaphragm",
    "L Hemidiaphragm",
    "T12",
];

/// One of the 14 landmarks, 1-based as in the usual landmark tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct LandmarkId(u8);

impl LandmarkId {
    pub const SKULL: LandmarkId = LandmarkId(1);
    pub const R_ELBOW: LandmarkId = LandmarkId(6);
    pub const L_ELBOW: LandmarkId = LandmarkId(7);
    pub const R_WRIST: LandmarkId = LandmarkId(8);
    pub const L_WRIST: LandmarkId = LandmarkId(9);
    pub const T1: LandmarkId = LandmarkId(10);
    pub const CARINA: LandmarkId = LandmarkId(11);
    pub const T12: LandmarkId = LandmarkId(14);

    pub fn new(index: u8) -> Result<Self> {
        if (1..=LANDMARKS as u8).contains(&index) {
            Ok(LandmarkId(index))
        } else {
            Err(Error::InvalidArgument(format!(
                "landmark index {index} outside 1..={LANDMARKS}"
            )))
        }
    }

    pub fn from_slot(slot: usize) -> Self {
        assert!(slot < LANDMARKS, "landmark slot {slot} out of range");
        LandmarkId(slot as u8 + 1)
    }

    pub fn index(self) -> u8 {
        self.0
    }

    /// Zero-based position in per-landmark arrays.
    pub fn slot(self) -> usize {
        self.0 as usize - 1
    }

    pub fn name(self) -> &'static str {
        NAMES[self.slot()]
    }

    pub fn from_name(name: &str) -> Option<Self> {
        NAMES.iter().position(|n| *n == name).map(LandmarkId::from_slot)
    }

    pub fn all() -> impl Iterator<Item = LandmarkId> {
        (0..LANDMARKS).map(LandmarkId::from_slot)
    }
}

impl TryFrom<u8> for LandmarkId {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        LandmarkId::new(v)
    }
}

impl From<LandmarkId> for u8 {
    fn from(id: LandmarkId) -> u8 {
        id.0
    }
}

impl fmt::Display for LandmarkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.0, self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTemplate {
    pub canonical_positions: [Point; LANDMARKS],
    /// Unordered pairs stored as `(lo, hi)` with `lo < hi`.
    pub edges: Vec<(LandmarkId, LandmarkId)>,
    pub per_landmark_sigma: [f64; LANDMARKS],
    pub version: u32,
}

#[derive(Deserialize)]
struct TemplateFile {
    version: u32,
    landmarks: Vec<TemplateLandmark>,
    edges: Vec<[u8; 2]>,
}

#[derive(Deserialize)]
struct TemplateLandmark {
    index: u8,
    name: String,
    position: Point,
    sigma: f64,
}

const TEMPLATE_JSON: &str = include_str!("../data/skeleton_template_v1.json");

impl SkeletonTemplate {
    fn from_json(text: &str) -> Result<Self> {
        let file: TemplateFile = serde_json::from_str(text).map_err(|e| Error::Json {
            path: "skeleton_template_v1.json".into(),
            source: e,
        })?;
        if file.landmarks.len() != LANDMARKS {
            return Err(Error::InvalidArgument(format!(
                "template lists {} landmarks",
                file.landmarks.len()
            )));
        }
        let mut positions = [[0.0; 3]; LANDMARKS];
        let mut sigma = [0.0; LANDMARKS];
        for (slot, lm) in file.landmarks.iter().enumerate() {
            let id = LandmarkId::new(lm.index)?;
            if id.slot() != slot || id.name() != lm.name {
                return Err(Error::InvalidArgument(format!(
                    "template landmark {} ({}) out of order",
                    lm.index, lm.name
                )));
            }
            positions[slot] = snap_point(lm.position);
            sigma[slot] = lm.sigma;
        }
        let mut edges = BTreeSet::new();
        for [a, b] in file.edges {
            let (a, b) = (LandmarkId::new(a)?, LandmarkId::new(b)?);
            if a == b {
                return Err(Error::InvalidArgument(format!("self-loop on {a}")));
            }
            edges.insert((a.min(b), a.max(b)));
        }
        Ok(SkeletonTemplate {
            canonical_positions: positions,
            edges: edges.into_iter().collect(),
            per_landmark_sigma: sigma,
            version: file.version,
        })
    }

    pub fn has_edge(&self, a: LandmarkId, b: LandmarkId) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = [false; LANDMARKS];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(node) = stack.pop() {
            for &(a, b) in &self.edges {
                let next = if a.slot() == node {
                    b.slot()
                } else if b.slot() == node {
                    a.slot()
                } else {
                    continue;
                };
                if !seen[next] {
                    seen[next] = true;
                    stack.push(next);
                }
            }
        }
        seen.iter().all(|&s| s)
    }

    /// Same geometry, no per-patient variability.
    pub fn without_noise(&self) -> Self {
        SkeletonTemplate {
            per_landmark_sigma: [0.0; LANDMARKS],
            ..self.clone()
        }
    }
}

/// The fixed canonical skeleton shipped with the crate.
pub fn canonical_skeleton() -> SkeletonTemplate {
    static TEMPLATE: OnceLock<SkeletonTemplate> = OnceLock::new();
    TEMPLATE
        .get_or_init(|| SkeletonTemplate::from_json(TEMPLATE_JSON).expect("bundled template is valid"))
        .clone()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patient {
    pub id: u64,
    #[serde(rename = "positions")]
    pub landmark_positions: [Point; LANDMARKS],
}

impl Patient {
    pub fn position(&self, id: LandmarkId) -> Point {
        self.landmark_positions[id.slot()]
    }

    /// Vertical interval `[top, bottom]` occupied by the body: landmark span
    /// plus a small margin above the skull and a larger one below the wrists.
    pub fn vertical_extent(&self) -> (f64, f64) {
        let (lo, hi) = self
            .landmark_positions
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p[1]), hi.max(p[1]))
            });
        (clamp_unit(lo - 0.02), clamp_unit(hi + 0.08))
    }

    /// Fraction of the vertical axis occupied by the body.
    pub fn height_extent(&self) -> f64 {
        let (top, bottom) = self.vertical_extent();
        bottom - top
    }

    /// Horizontal midline (mean landmark x).
    pub fn midline_x(&self) -> f64 {
        self.landmark_positions.iter().map(|p| p[0]).sum::<f64>() / LANDMARKS as f64
    }

    pub fn mean_depth(&self) -> f64 {
        self.landmark_positions.iter().map(|p| p[2]).sum::<f64>() / LANDMARKS as f64
    }
}

/// Canonical positions plus per-landmark isotropic Gaussian jitter.
pub fn sample_patient(template: &SkeletonTemplate, seed: u64) -> Patient {
    let mut rng = rng::stream(seed, "patient", 0);
    sample_patient_with(template, seed, &mut rng)
}

pub(crate) fn sample_patient_with(template: &SkeletonTemplate, id: u64, rng: &mut Rng) -> Patient {
    let mut positions = [[0.0; 3]; LANDMARKS];
    for (slot, out) in positions.iter_mut().enumerate() {
        let sigma = template.per_landmark_sigma[slot];
        let base = template.canonical_positions[slot];
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            *out = snap_point([
                base[0] + normal.sample(rng),
                base[1] + normal.sample(rng),
                base[2] + normal.sample(rng),
            ]);
        } else {
            *out = base;
        }
    }
    Patient {
        id,
        landmark_positions: positions,
    }
}

/// Generates `count` patients with ids `0..count`, each from its own stream.
pub fn generate_patients(template: &SkeletonTemplate, count: usize, seed: u64) -> Vec<Patient> {
    (0..count as u64)
        .map(|id| {
            let mut rng = rng::stream(seed, "patients", id);
            sample_patient_with(template, id, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSplits {
    pub train: Vec<Patient>,
    pub calibration: Vec<Patient>,
    pub test: Vec<Patient>,
}

/// Patient-level 70/15/15 partition. Calibration and test sizes are rounded
/// to nearest; the remainder goes to training. Each split is sorted by id.
pub fn split_patients(patients: &[Patient], seed: u64) -> Result<PatientSplits> {
    let n = patients.len();
    if n < 10 {
        return Err(Error::InvalidArgument(format!(
            "need at least 10 patients to split, got {n}"
        )));
    }
    let held_out = (n as f64 * 0.15).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split", 0));

    let pick = |idx: &[usize]| {
        let mut v: Vec<Patient> = idx.iter().map(|&i| patients[i].clone()).collect();
        v.sort_by_key(|p| p.id);
        v
    };
    Ok(PatientSplits {
        calibration: pick(&order[..held_out]),
        test: pick(&order[held_out..2 * held_out]),
        train: pick(&order[2 * held_out..]),
    })
}
