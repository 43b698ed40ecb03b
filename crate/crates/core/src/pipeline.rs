//! Run configuration and the file-producing stages behind the CLI verbs.
//!
//! Every stage writes its artifacts plus a `<stage>_manifest.json` listing
//! each emitted file with its SHA-256. Manifests record file names only, so
//! two runs into different directories produce identical bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anatomy::{canonical_skeleton, generate_patients, split_patients, PatientSplits, SkeletonTemplate};
use crate::conformal::{calibrate, score_estimates, CalibrationPolicy, CalibrationTable, DEFAULT_ALPHAS};
use crate::dataset::{column_header, read_dataset, write_dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::eval::{eval_nll, evaluate, MetricsReport};
use crate::io::{read_json, sha256_file, sha256_hex, write_json, write_text};
use crate::losses::Vec3s;
use crate::navigation::{compare_paths, McdModel, OracleModel, PathReport, PathSpec, PositioningModel};
use crate::regressor::{Architecture, Checkpoint, McdEstimate, Regressor};
use crate::rng::SeedStream;
use crate::sampler::{
    build_dataset, build_episode_dataset, AugmentationConfig, AugmentationLevel, ObservationModel, Sample,
};
use crate::trainer::{self, ablate, loss_curve_csv, AblationRow, AblationVariant, TrainConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// First patient id of the strict-mode calibration and test episodes.
pub const CALIBRATION_ID_OFFSET: u64 = 1 << 32;
pub const TEST_ID_OFFSET: u64 = 2 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnatomyConfig {
    pub n_patients: usize,
}

impl Default for AnatomyConfig {
    fn default() -> Self {
        AnatomyConfig { n_patients: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub samples_per_patient: usize,
    pub observation: ObservationModel,
    pub augmentation: AugmentationLevel,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            samples_per_patient: 512,
            observation: ObservationModel::default(),
            augmentation: AugmentationLevel::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConformalConfig {
    pub alphas: Vec<f64>,
    /// Draw calibration and test records one per freshly generated patient.
    pub strict: bool,
    pub calibration_episodes: usize,
    pub test_episodes: usize,
}

impl Default for ConformalConfig {
    fn default() -> Self {
        ConformalConfig {
            alphas: DEFAULT_ALPHAS.to_vec(),
            strict: false,
            calibration_episodes: 2000,
            test_episodes: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavigationConfig {
    pub paths: Vec<PathSpec>,
    pub episodes_per_patient: usize,
    pub oracle: bool,
}

impl Default for NavigationConfig {
    fn default() -> Self {
        NavigationConfig {
            paths: PathSpec::defaults(),
            episodes_per_patient: 25,
            oracle: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub anatomy: AnatomyConfig,
    pub sampler: SamplerConfig,
    pub model: Architecture,
    pub train: TrainConfig,
    pub conformal: ConformalConfig,
    pub navigation: NavigationConfig,
}

impl PipelineConfig {
    /// Reads a config file, or the config embedded in a stage manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let mut value: serde_json::Value = read_json(path)?;
        if value.get("stage").is_some() {
            if let Some(inner) = value.get_mut("config") {
                value = inner.take();
            }
        }
        let cfg: PipelineConfig = serde_json::from_value(value).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampler.observation.validate()?;
        self.train.validate()?;
        if self.model.obs_dim != self.sampler.observation.dim {
            return Err(Error::InvalidArgument(format!(
                "model expects D = {}, sampler produces D = {}",
                self.model.obs_dim, self.sampler.observation.dim
            )));
        }
        if self.sampler.samples_per_patient == 0 {
            return Err(Error::InvalidArgument("samples_per_patient must be >= 1".into()));
        }
        if self.conformal.alphas.is_empty() {
            return Err(Error::InvalidArgument("no alpha levels configured".into()));
        }
        for &a in &self.conformal.alphas {
            crate::conformal::validate_alpha(a)?;
        }
        Ok(())
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            dropout: self.model.p,
            augmentation: self.sampler.augmentation,
            ..self.train.clone()
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<ArtifactRecord>,
    pub artifacts: Vec<ArtifactRecord>,
    pub config: PipelineConfig,
}

impl RunManifest {
    pub fn file_name(stage: &str) -> String {
        format!("{stage}_manifest.json")
    }
}

fn record(path: &Path) -> Result<ArtifactRecord> {
    Ok(ArtifactRecord {
        file: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: sha256_file(path)?,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn finish(cfg: &PipelineConfig, stage: &str, out: &Path, inputs: &[&Path], files: &[PathBuf]) -> Result<RunManifest> {
    let manifest = RunManifest {
        stage: stage.into(),
        tool_version: TOOL_VERSION.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        inputs: inputs.iter().map(|p| record(p)).collect::<Result<_>>()?,
        artifacts: files.iter().map(|p| record(p)).collect::<Result<_>>()?,
        config: cfg.clone(),
    };
    write_json(&out.join(RunManifest::file_name(stage)), &manifest)?;
    Ok(manifest)
}

pub const PATIENTS_FILE: &str = "patients.json";
pub const TRAIN_FILE: &str = "train.bin";
pub const CALIBRATION_FILE: &str = "calibration.bin";
pub const TEST_FILE: &str = "test.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const TABLE_FILE: &str = "calibration_table.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const PATHS_CSV: &str = "paths.csv";
pub const PATH_ERRORS_CSV: &str = "path_errors.csv";
pub const TRAJECTORIES_FILE: &str = "trajectories.json";

/// In-memory result of data generation.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub splits: PatientSplits,
    pub train: Vec<Sample>,
    pub calibration: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn generate(cfg: &PipelineConfig, template: &SkeletonTemplate) -> Result<GeneratedData> {
    cfg.validate()?;
    let patients = generate_patients(template, cfg.anatomy.n_patients, cfg.seed);
    let splits = split_patients(&patients, cfg.seed)?;
    let obs = &cfg.sampler.observation;
    let n = cfg.sampler.samples_per_patient;
    let aug = AugmentationConfig::from_level(cfg.sampler.augmentation);
    let train = build_dataset(&splits.train, n, &aug, obs, cfg.seed)?;
    let (calibration, test) = if cfg.conformal.strict {
        (
            build_episode_dataset(
                template,
                cfg.conformal.calibration_episodes,
                CALIBRATION_ID_OFFSET,
                obs,
                cfg.seed,
                "episodes/calibration",
            )?,
            build_episode_dataset(
                template,
                cfg.conformal.test_episodes,
                TEST_ID_OFFSET,
                obs,
                cfg.seed,
                "episodes/test",
            )?,
        )
    } else {
        let none = AugmentationConfig::none();
        (
            build_dataset(&splits.calibration, n, &none, obs, cfg.seed)?,
            build_dataset(&splits.test, n, &none, obs, cfg.seed)?,
        )
    };
    Ok(GeneratedData {
        splits,
        train,
        calibration,
        test,
    })
}

pub fn run_gen(cfg: &PipelineConfig, out: &Path) -> Result<RunManifest> {
    ensure_dir(out)?;
    let data = generate(cfg, &canonical_skeleton())?;
    let obs = &cfg.sampler.observation;
    let mut files = vec![out.join(PATIENTS_FILE)];
    write_json(&files[0], &data.splits)?;
    let strict_mode = if cfg.conformal.strict {
        "episodes"
    } else {
        "per_patient"
    };
    for (name, samples, aug, mode) in [
        (TRAIN_FILE, &data.train, cfg.sampler.augmentation, "per_patient"),
        (
            CALIBRATION_FILE,
            &data.calibration,
            AugmentationLevel::None,
            strict_mode,
        ),
        (TEST_FILE, &data.test, AugmentationLevel::None, strict_mode),
    ] {
        let path = out.join(name);
        let manifest = DatasetManifest {
            n_samples: samples.len(),
            dim: obs.dim,
            seed: cfg.seed,
            augmentation: aug,
            noise_sigma: obs.noise_sigma,
            mode: mode.into(),
            columns: column_header(obs.dim),
        };
        write_dataset(&path, samples, &manifest)?;
        files.push(crate::dataset::sidecar_path(&path));
        files.push(path);
    }
    finish(cfg, "gen", out, &[], &files)
}

pub fn load_checkpoint(path: &Path) -> Result<Regressor<f64>> {
    let c: Checkpoint<f64> = read_json(path)?;
    Regressor::from_checkpoint(c).map_err(|e| Error::data(path, e.to_string()))
}

pub fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    let (samples, _) = read_dataset(path)?;
    if samples.is_empty() {
        return Err(Error::data(path, "dataset is empty"));
    }
    Ok(samples)
}

pub fn run_train(cfg: &PipelineConfig, dataset_dir: &Path, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    ensure_dir(out)?;
    let data_path = dataset_dir.join(TRAIN_FILE);
    let samples = load_samples(&data_path)?;
    let outcome = trainer::train::<f64>(&samples, cfg.model.clone(), &cfg.train_config(), &canonical_skeleton())?;
    let ckpt = out.join(CHECKPOINT_FILE);
    write_json(&ckpt, &outcome.model.to_checkpoint())?;
    let curve = out.join(LOSS_CURVE_FILE);
    write_text(&curve, &loss_curve_csv(&outcome.loss_curve))?;
    finish(cfg, "train", out, &[&data_path], &[ckpt, curve])
}

fn targets(samples: &[Sample]) -> Vec<Vec3s<f64>> {
    samples.iter().map(|s| s.targets).collect()
}

/// MC-dropout estimates for every sample; sample `i` uses `stream.at(i)`.
pub fn estimate_all(
    model: &Regressor<f64>,
    samples: &[Sample],
    passes: usize,
    p: f64,
    stream: &SeedStream,
) -> Result<Vec<McdEstimate<f64>>> {
    let inputs: Vec<(&[f64], _)> = samples.iter().map(|s| (s.observation.as_slice(), s.pose)).collect();
    model.mcd_predict_many(&inputs, passes, p, stream)
}

pub fn calibrate_model(
    model: &Regressor<f64>,
    samples: &[Sample],
    alphas: &[f64],
    seed: u64,
) -> Result<CalibrationTable<f64>> {
    let a = &model.architecture;
    let est = estimate_all(
        model,
        samples,
        a.t_default,
        a.p,
        &SeedStream::new(seed, "mcd/calibration"),
    )?;
    let truth = targets(samples);
    let mut table = calibrate(
        &score_estimates(&est, &truth)?,
        alphas,
        CalibrationPolicy::RequireFinite,
    )?;
    table.calibration_nll = Some(eval_nll(&est, &truth)?.overall);
    Ok(table)
}

pub fn evaluate_model(
    model: &Regressor<f64>,
    samples: &[Sample],
    table: &CalibrationTable<f64>,
    seed: u64,
) -> Result<MetricsReport> {
    let a = &model.architecture;
    let est = estimate_all(model, samples, a.t_default, a.p, &SeedStream::new(seed, "mcd/test"))?;
    evaluate(&est, &targets(samples), table)
}

pub fn run_calibrate(cfg: &PipelineConfig, checkpoint: &Path, dataset: &Path, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    ensure_dir(out)?;
    let model = load_checkpoint(checkpoint)?;
    let samples = load_samples(dataset)?;
    let table = calibrate_model(&model, &samples, &cfg.conformal.alphas, cfg.seed)?;
    let path = out.join(TABLE_FILE);
    write_json(&path, &table)?;
    finish(cfg, "calibrate", out, &[checkpoint, dataset], &[path])
}

/// Restricts `table` to `alphas`, failing if any is missing.
pub fn select_alphas(table: &CalibrationTable<f64>, alphas: &[f64]) -> Result<CalibrationTable<f64>> {
    let idx = alphas
        .iter()
        .map(|&a| {
            table.alpha_index(a).ok_or_else(|| {
                Error::InvalidArgument(format!("alpha {a} not in calibration table (has {:?})", table.alphas))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationTable {
        alphas: alphas.to_vec(),
        quantiles: table
            .quantiles
            .iter()
            .map(|q| idx.iter().map(|&i| q[i]).collect())
            .collect(),
        n: table.n,
        calibration_nll: table.calibration_nll,
    })
}

pub fn run_eval(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    table_path: &Path,
    dataset: &Path,
    out: &Path,
) -> Result<RunManifest> {
    cfg.validate()?;
    ensure_dir(out)?;
    let model = load_checkpoint(checkpoint)?;
    let table: CalibrationTable<f64> = read_json(table_path)?;
    let table = select_alphas(&table, &cfg.conformal.alphas)?;
    let samples = load_samples(dataset)?;
    let report = evaluate_model(&model, &samples, &table, cfg.seed)?;
    let csv = out.join(METRICS_CSV);
    write_text(&csv, &report.to_csv())?;
    let json = out.join(METRICS_JSON);
    write_json(&json, &report)?;
    finish(cfg, "eval", out, &[checkpoint, table_path, dataset], &[csv, json])
}

/// Navigation with either a checkpoint or the oracle stub.
pub fn navigate(
    cfg: &PipelineConfig,
    model: Option<&Regressor<f64>>,
    table: &CalibrationTable<f64>,
    splits: &PatientSplits,
) -> Result<PathReport> {
    let oracle = OracleModel;
    let mcd;
    let m: &dyn PositioningModel = match model {
        Some(r) if !cfg.navigation.oracle => {
            mcd = McdModel {
                regressor: r,
                passes: r.architecture.t_default,
                p: r.architecture.p,
            };
            &mcd
        }
        _ if cfg.navigation.oracle => &oracle,
        _ => {
            return Err(Error::InvalidArgument(
                "navigation needs a checkpoint or the oracle".into(),
            ))
        }
    };
    compare_paths(
        m,
        table,
        &splits.test,
        &cfg.navigation.paths,
        cfg.navigation.episodes_per_patient,
        &cfg.sampler.observation,
        cfg.seed,
    )
}

pub fn run_navigate(
    cfg: &PipelineConfig,
    checkpoint: Option<&Path>,
    table_path: &Path,
    patients: &Path,
    out: &Path,
) -> Result<RunManifest> {
    cfg.validate()?;
    ensure_dir(out)?;
    let model = match checkpoint {
        Some(p) if !cfg.navigation.oracle => Some(load_checkpoint(p)?),
        _ => None,
    };
    let table: CalibrationTable<f64> = read_json(table_path)?;
    let splits: PatientSplits = read_json(patients)?;
    let report = navigate(cfg, model.as_ref(), &table, &splits)?;
    let files = [
        out.join(PATHS_CSV),
        out.join(PATH_ERRORS_CSV),
        out.join(TRAJECTORIES_FILE),
    ];
    write_text(&files[0], &report.to_csv())?;
    write_text(&files[1], &report.errors_csv())?;
    write_json(&files[2], &report.trajectories)?;
    let mut inputs: Vec<&Path> = vec![table_path, patients];
    if let (Some(p), false) = (checkpoint, cfg.navigation.oracle) {
        inputs.insert(0, p);
    }
    finish(cfg, "navigate", out, &inputs, &files)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    Lambda,
    Augmentation,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(AblationKind::Lambda),
            "augmentation" => Ok(AblationKind::Augmentation),
            _ => Err(Error::InvalidArgument(format!(
                "unknown ablation {s:?} (expected lambda or augmentation)"
            ))),
        }
    }
}

pub const LAMBDA_GRID: [f64; 5] = [0.0, 0.5, 1.0, 5.0, 10.0];

pub fn ablation_variants(cfg: &PipelineConfig, kind: AblationKind) -> Vec<AblationVariant> {
    let base = cfg.train_config();
    match kind {
        AblationKind::Lambda => LAMBDA_GRID
            .iter()
            .map(|&lambda| {
                let mut t = base.clone();
                t.loss.lambda = lambda;
                AblationVariant {
                    label: format!("{lambda}"),
                    train: t,
                }
            })
            .collect(),
        AblationKind::Augmentation => AugmentationLevel::ALL
            .iter()
            .map(|&level| AblationVariant {
                label: level.label().into(),
                train: TrainConfig {
                    augmentation: level,
                    ..base.clone()
                },
            })
            .collect(),
    }
}

pub fn ablation_csv(kind: AblationKind, alphas: &[f64], rows: &[AblationRow]) -> String {
    let first = match kind {
        AblationKind::Lambda => "lambda",
        AblationKind::Augmentation => "augmentation",
    };
    let mut s = format!("{first},distance_mm,nll_cal,nll_test");
    for &a in alphas {
        s.push(',');
        s.push_str(&crate::eval::prcp_label(a));
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}",
            r.label,
            r.metrics.distance_mm.overall,
            r.metrics.calibration_nll.unwrap_or(f64::NAN),
            r.metrics.nll.overall
        ));
        for &a in alphas {
            let v = r.metrics.coverage_at(a).map_or(f64::NAN, |c| c.overall);
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

pub fn run_ablate(cfg: &PipelineConfig, kind: AblationKind, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    ensure_dir(out)?;
    let data = generate(cfg, &canonical_skeleton())?;
    let rows = ablate(cfg, &data, &ablation_variants(cfg, kind))?;
    let stem = match kind {
        AblationKind::Lambda => "ablation_lambda",
        AblationKind::Augmentation => "ablation_augmentation",
    };
    let csv = out.join(format!("{stem}.csv"));
    write_text(&csv, &ablation_csv(kind, &cfg.conformal.alphas, &rows))?;
    let json = out.join(format!("{stem}.json"));
    write_json(&json, &rows)?;
    finish(cfg, stem, out, &[], &[csv, json])
}

/// `"0.1,0.05,0.03"`
pub fn parse_alphas(s: &str) -> Result<Vec<f64>> {
    let v = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("malformed alpha list {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    for &a in &v {
        crate::conformal::validate_alpha(a)?;
    }
    Ok(v)
}
