//! Minibatch training loop: seeded shuffling, fresh dropout masks per batch,
//! NLL + skeleton objective, AdamW.
//!
//! Batches are split into fixed-size shards that run in parallel; shard
//! gradients are summed in shard order, so results are independent of the
//! thread count.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anatomy::{canonical_skeleton, SkeletonTemplate, LANDMARKS};
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::losses::{batch_objective, LossConfig, Vec3s};
use crate::pipeline::{calibrate_model, evaluate_model, GeneratedData, PipelineConfig};
use crate::regressor::{inputs_matrix, Architecture, Regressor, RegressorGrads};
use crate::rng;
use crate::sampler::{build_dataset, AugmentationConfig, AugmentationLevel, Sample};
use crate::scalar::Real;
use crate::tensor::{AdamW, AdamWConfig};

const SHARD_ROWS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub loss: LossConfig,
    pub dropout: f64,
    pub augmentation: AugmentationLevel,
    /// Rebuild the (augmented) training set every epoch.
    pub rebuild_each_epoch: bool,
    /// Set from the run's root seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 128,
            optimizer: AdamWConfig::default(),
            loss: LossConfig::default(),
            dropout: 0.3,
            augmentation: AugmentationLevel::None,
            rebuild_each_epoch: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        self.loss.validate()
    }
}

/// Where each epoch's samples come from.
pub enum DataSource<'a> {
    Fixed(&'a [Sample]),
    PerEpoch(&'a (dyn Fn(usize) -> Result<Vec<Sample>> + Sync)),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    pub model: Regressor<T>,
    /// Mean training objective per epoch.
    pub loss_curve: Vec<f64>,
}

pub fn targets_of<T: Real>(s: &Sample) -> Vec3s<T> {
    s.targets.map(|t| t.map(T::c))
}

/// Objective and gradients of one batch (dropout masks drawn from `masks_rng`
/// per shard).
pub fn batch_gradients<T: Real>(
    model: &Regressor<T>,
    batch: &[&Sample],
    cfg: &TrainConfig,
    graph: &SkeletonTemplate,
    mask_stream: Option<&rng::SeedStream>,
) -> Result<(f64, RegressorGrads<T>)> {
    let total_rows = batch.len();
    let shards: Vec<&[&Sample]> = batch.chunks(SHARD_ROWS).collect();
    let results: Vec<Result<(f64, RegressorGrads<T>)>> = shards
        .par_iter()
        .enumerate()
        .map(|(si, shard)| {
            let (obs, poses) = inputs_matrix::<T>(
                shard.iter().map(|s| (s.observation.as_slice(), s.pose)),
                model.obs_dim(),
            )?;
            let masks = match mask_stream {
                Some(st) if cfg.dropout > 0.0 => {
                    Some(model.draw_masks(shard.len(), T::c(cfg.dropout), &mut st.at(si as u64))?)
                }
                _ => None,
            };
            let (raw, trace) = model.forward_raw(&obs, &poses, masks.as_ref())?;
            let targets: Vec<Vec3s<T>> = shard.iter().map(|s| targets_of(s)).collect();
            let mut obj = batch_objective(&raw, &poses, &targets, &cfg.loss, graph)?;
            let weight = T::from_usize_exact(shard.len()) / T::from_usize_exact(total_rows);
            for v in obj.grad_raw.as_mut_slice() {
                *v *= weight;
            }
            let grads = model.backward(&trace, &obj.grad_raw)?;
            Ok(((obj.total * weight).as_f64(), grads))
        })
        .collect();
    let mut loss = 0.0;
    let mut grads = model.zero_grads();
    for r in results {
        let (l, g) = r?;
        loss += l;
        grads.accumulate(&g);
    }
    Ok((loss, grads))
}

/// Trains a freshly initialised model.
pub fn train<T: Real>(
    samples: &[Sample],
    architecture: Architecture,
    config: &TrainConfig,
    graph: &SkeletonTemplate,
) -> Result<TrainOutcome<T>> {
    let model = Regressor::new(architecture, &mut rng::stream(config.seed, "init", 0))?;
    train_from(model, DataSource::Fixed(samples), config, graph)
}

pub fn train_from<T: Real>(
    mut model: Regressor<T>,
    data: DataSource<'_>,
    config: &TrainConfig,
    graph: &SkeletonTemplate,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let mut opt = AdamW::<T>::new(config.optimizer);
    let mut curve = Vec::with_capacity(config.epochs);
    let mut owned: Vec<Sample>;
    let mut fixed: &[Sample] = match data {
        DataSource::Fixed(s) => s,
        DataSource::PerEpoch(_) => &[],
    };
    for epoch in 0..config.epochs {
        if let DataSource::PerEpoch(build) = &data {
            owned = build(epoch)?;
            fixed = &owned;
        }
        if fixed.is_empty() {
            return Err(Error::InvalidArgument("empty training dataset".into()));
        }
        let mut order: Vec<usize> = (0..fixed.len()).collect();
        order.shuffle(&mut rng::stream(config.seed, "shuffle", epoch as u64));
        let mut epoch_loss = 0.0;
        let dropout = rng::SeedStream::new(config.seed, format!("dropout/{epoch}"));
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &fixed[i]).collect();
            let stream = dropout.child(&bi.to_string());
            let (loss, grads) = batch_gradients(&model, &batch, config, graph, Some(&stream)).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch} batch {bi}: {m}")),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch} batch {bi}: loss {loss}")));
            }
            epoch_loss += loss * batch.len() as f64;
            let g = grads.tensors();
            opt.step(&mut model.tensors_mut(), &g).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch} batch {bi}: {m}")),
                other => other,
            })?;
        }
        curve.push(epoch_loss / fixed.len() as f64);
        model.epochs_trained += 1;
    }
    Ok(TrainOutcome {
        model,
        loss_curve: curve,
    })
}

pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut s = String::from("epoch,train_loss\n");
    for (i, l) in curve.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i + 1, l));
    }
    s
}

/// Mean Euclidean distance of the deterministic (mask-free) predictions.
pub fn deterministic_mean_distance<T: Real>(model: &Regressor<T>, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let pred = model.predict(&s.observation, s.pose, None)?;
        for k in 0..LANDMARKS {
            total += crate::anatomy::distance(&pred.mean_f64(k), &s.targets[k]);
        }
    }
    Ok(total / (samples.len() * LANDMARKS) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub label: String,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub train: TrainConfig,
    pub metrics: MetricsReport,
}

/// Trains, calibrates and evaluates each variant on the same patients,
/// calibration and test sets. The training set is rebuilt only when a
/// variant asks for a different augmentation level.
pub fn ablate(cfg: &PipelineConfig, data: &GeneratedData, variants: &[AblationVariant]) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::InvalidArgument("empty ablation grid".into()));
    }
    let graph = canonical_skeleton();
    variants
        .iter()
        .map(|v| {
            let rebuilt;
            let train_set: &[Sample] = if v.train.augmentation == cfg.sampler.augmentation {
                &data.train
            } else {
                rebuilt = build_dataset(
                    &data.splits.train,
                    cfg.sampler.samples_per_patient,
                    &AugmentationConfig::from_level(v.train.augmentation),
                    &cfg.sampler.observation,
                    cfg.seed,
                )?;
                &rebuilt
            };
            let model = train::<f64>(train_set, cfg.model.clone(), &v.train, &graph)?.model;
            let table = calibrate_model(&model, &data.calibration, &cfg.conformal.alphas, cfg.seed)?;
            let metrics = evaluate_model(&model, &data.test, &table, cfg.seed)?;
            Ok(AblationRow {
                label: v.label.clone(),
                train: v.train.clone(),
                metrics,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomy::generate_patients;
    use crate::sampler::ObservationModel;

    fn small_arch() -> Architecture {
        Architecture {
            encoder_widths: vec![32],
            head_widths: vec![32],
            pose_embedding: 8,
            ..Architecture::default()
        }
    }

    fn data(n: usize) -> Vec<Sample> {
        let ps = generate_patients(&canonical_skeleton(), 2, 0);
        build_dataset(&ps, n, &AugmentationConfig::none(), &ObservationModel::default(), 0).unwrap()
    }

    #[test]
    fn overfits_two_samples() {
        let ds: Vec<Sample> = data(1);
        assert_eq!(ds.len(), 2);
        // dropout off: with p = 0.3 the masked passes leave a ~12% floor
        let cfg = TrainConfig {
            epochs: 500,
            dropout: 0.0,
            loss: LossConfig { beta: 1.0, lambda: 0.0 },
            ..TrainConfig::default()
        };
        let graph = canonical_skeleton();
        let init = Regressor::<f64>::new(Architecture::default(), &mut rng::stream(cfg.seed, "init", 0)).unwrap();
        let before = deterministic_mean_distance(&init, &ds).unwrap();
        let out = train::<f64>(&ds, Architecture::default(), &cfg, &graph).unwrap();
        let after = deterministic_mean_distance(&out.model, &ds).unwrap();
        assert!(after < 0.1 * before, "{before} -> {after}");
        assert!(out.loss_curve.iter().all(|l| l.is_finite()));
        assert_eq!(out.model.epochs_trained, 500);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let ds = data(40);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let g = canonical_skeleton();
        let a = train::<f64>(&ds, small_arch(), &cfg, &g).unwrap();
        let b = train::<f64>(&ds, small_arch(), &cfg, &g).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.loss_curve, b.loss_curve);
        let ja = serde_json::to_string(&a.model.to_checkpoint()).unwrap();
        let jb = serde_json::to_string(&b.model.to_checkpoint()).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let ds = data(40);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let g = canonical_skeleton();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| train::<f64>(&ds, small_arch(), &cfg, &g).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn skeleton_term_changes_gradients() {
        let ds = data(8);
        let g = canonical_skeleton();
        let model = Regressor::<f64>::new(small_arch(), &mut rng::stream(0, "init", 0)).unwrap();
        let batch: Vec<&Sample> = ds.iter().collect();
        let with = |lambda| {
            let cfg = TrainConfig {
                loss: LossConfig { beta: 1.0, lambda },
                ..TrainConfig::default()
            };
            batch_gradients(&model, &batch, &cfg, &g, None).unwrap().1
        };
        assert_ne!(with(0.0), with(1.0));
    }

    #[test]
    fn rejects_bad_config() {
        let g = canonical_skeleton();
        let ds = data(2);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(train::<f64>(&ds, small_arch(), &cfg, &g).is_err());
        assert!(train::<f64>(&[], small_arch(), &TrainConfig::default(), &g).is_err());
    }

    #[test]
    fn per_epoch_source_is_used() {
        let g = canonical_skeleton();
        let ps = generate_patients(&canonical_skeleton(), 2, 0);
        let build = |epoch: usize| {
            build_dataset(
                &ps,
                4,
                &AugmentationConfig::from_level(AugmentationLevel::Mid),
                &ObservationModel::default(),
                epoch as u64,
            )
        };
        let model = Regressor::<f64>::new(small_arch(), &mut rng::stream(0, "init", 0)).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let out = train_from(model, DataSource::PerEpoch(&build), &cfg, &g).unwrap();
        assert_eq!(out.loss_curve.len(), 2);
    }

    #[test]
    fn loss_curve_csv_rows() {
        let csv = loss_curve_csv(&[1.5, 1.0]);
        assert_eq!(csv, "epoch,train_loss\n1,1.5\n2,1\n");
    }
}
