//! Binary dataset files with a JSON sidecar manifest.
//!
//! Layout (little-endian): the 8-byte magic `CARMDS01`, `u64` sample count,
//! `u32` observation width `D`, then one record per sample:
//!
//! | field        | type       | count |
//! |--------------|------------|-------|
//! | patient_id   | `u64`      | 1     |
//! | pose (x,y,z) | `f64`      | 3     |
//! | observation  | `f64`      | D     |
//! | targets      | `f64`      | 42    |
//!
//! Targets are ordered landmark-major (`t1x, t1y, t1z, t2x, ...`).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anatomy::LANDMARKS;
use crate::error::{Error, Result};
use crate::sampler::{AugmentationLevel, Pose, Sample};

const MAGIC: &[u8; 8] = b"CARMDS01";
const HEADER_LEN: usize = 8 + 8 + 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_samples: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub seed: u64,
    pub augmentation: AugmentationLevel,
    pub noise_sigma: f64,
    /// `"per_patient"` or `"episodes"`.
    pub mode: String,
    pub columns: String,
}

pub fn column_header(dim: usize) -> String {
    let mut cols = vec![
        "patient_id".to_string(),
        "pose_x".into(),
        "pose_y".into(),
        "pose_z".into(),
    ];
    cols.extend((0..dim).map(|i| format!("obs_{i}")));
    for k in 1..=LANDMARKS {
        for axis in ["x", "y", "z"] {
            cols.push(format!("target_{k}_{axis}"));
        }
    }
    cols.join(",")
}

pub fn encode(samples: &[Sample], dim: usize) -> Result<Vec<u8>> {
    let record = 8 + 8 * (3 + dim + 3 * LANDMARKS);
    let mut out = Vec::with_capacity(HEADER_LEN + record * samples.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for s in samples {
        if s.observation.len() != dim {
            return Err(Error::Dimension(format!(
                "sample observation has {} values, dataset width is {dim}",
                s.observation.len()
            )));
        }
        out.extend_from_slice(&s.patient_id.to_le_bytes());
        for v in s.pose.to_point() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &s.observation {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in &s.targets {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut a = [0u8; N];
        a.copy_from_slice(&self.buf[self.pos..self.pos + N]);
        self.pos += N;
        a
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(Vec<Sample>, usize)> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::data(path, "not a dataset file (bad header)"));
    }
    let mut c = Cursor { buf: bytes, pos: 8 };
    let n = u64::from_le_bytes(c.take()) as usize;
    let dim = u32::from_le_bytes(c.take()) as usize;
    let record = 8 + 8 * (3 + dim + 3 * LANDMARKS);
    let expected = n
        .checked_mul(record)
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::data(path, "corrupt header (size overflow)"))?;
    if bytes.len() != expected {
        return Err(Error::data(
            path,
            format!(
                "corrupt dataset: header promises {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let patient_id = u64::from_le_bytes(c.take());
        let pose = Pose::new(c.f64(), c.f64(), c.f64());
        let observation = (0..dim).map(|_| c.f64()).collect();
        let mut targets = [[0.0; 3]; LANDMARKS];
        for t in &mut targets {
            *t = [c.f64(), c.f64(), c.f64()];
        }
        samples.push(Sample {
            patient_id,
            pose,
            observation,
            targets,
        });
    }
    Ok((samples, dim))
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

pub fn write_dataset(path: &Path, samples: &[Sample], manifest: &DatasetManifest) -> Result<()> {
    let bytes = encode(samples, manifest.dim)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    crate::io::write_json(&sidecar_path(path), manifest)
}

pub fn read_dataset(path: &Path) -> Result<(Vec<Sample>, DatasetManifest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (samples, dim) = decode(&bytes, path)?;
    let side = sidecar_path(path);
    let manifest: DatasetManifest = crate::io::read_json(&side)?;
    if manifest.dim != dim || manifest.n_samples != samples.len() {
        return Err(Error::data(
            path,
            format!(
                "sidecar disagrees with file: manifest {}x{}, file {}x{}",
                manifest.n_samples,
                manifest.dim,
                samples.len(),
                dim
            ),
        ));
    }
    Ok((samples, manifest))
}
