//! Probabilistic displacement regressor and MC-dropout aggregation.
//!
//! `observation -> encoder -> f`, `pose -> affine -> e`, `[f | e] -> head`
//! giving 14 x 3 means followed by 14 x 3 log-variances (84 outputs).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anatomy::{Point, LANDMARKS};
use crate::error::{Error, Result};
use crate::rng::{Rng, SeedStream};
use crate::sampler::Pose;
use crate::scalar::Real;
use crate::tensor::{draw_batch_masks, DropoutMask, Matrix, Mlp, MlpGrads, Trace};

pub const OUTPUTS: usize = LANDMARKS * 3 * 2;
pub const MEAN_OUTPUTS: usize = LANDMARKS * 3;
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 3.0;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    #[serde(rename = "D")]
    pub obs_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub pose_embedding: usize,
    pub head_widths: Vec<usize>,
    pub outputs: usize,
    #[serde(rename = "T_default")]
    pub t_default: usize,
    pub p: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            obs_dim: 64,
            encoder_widths: vec![128, 128],
            pose_embedding: 16,
            head_widths: vec![128, 128],
            outputs: OUTPUTS,
            t_default: 20,
            p: 0.3,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() || self.pose_embedding == 0 || self.obs_dim == 0 {
            return Err(Error::InvalidArgument(
                "encoder needs at least one layer and a nonzero pose embedding".into(),
            ));
        }
        if self.outputs != OUTPUTS {
            return Err(Error::InvalidArgument(format!(
                "regression head must emit {OUTPUTS} values, got {}",
                self.outputs
            )));
        }
        if !(0.0..1.0).contains(&self.p) || self.t_default == 0 {
            return Err(Error::InvalidArgument("need 0 <= p < 1 and T >= 1".into()));
        }
        Ok(())
    }
}

/// Per-landmark diagonal Gaussian over the displacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct GaussianPrediction<T> {
    pub mean: [[T; 3]; LANDMARKS],
    pub variance: [[T; 3]; LANDMARKS],
}

impl<T: Real> GaussianPrediction<T> {
    /// Decodes one 84-wide output row, clamping log-variances.
    pub fn from_raw(raw: &[T]) -> Self {
        debug_assert_eq!(raw.len(), OUTPUTS);
        let mut mean = [[T::zero(); 3]; LANDMARKS];
        let mut variance = [[T::zero(); 3]; LANDMARKS];
        for k in 0..LANDMARKS {
            for a in 0..3 {
                mean[k][a] = raw[3 * k + a];
                variance[k][a] = clamp_logvar(raw[MEAN_OUTPUTS + 3 * k + a]).exp();
            }
        }
        GaussianPrediction { mean, variance }
    }

    pub fn mean_f64(&self, k: usize) -> Point {
        self.mean[k].map(T::as_f64)
    }
}

pub fn clamp_logvar<T: Real>(raw: T) -> T {
    raw.max(T::c(LOGVAR_MIN)).min(T::c(LOGVAR_MAX))
}

/// MC-dropout aggregate for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct McdEstimate<T> {
    pub mean: [[T; 3]; LANDMARKS],
    pub epistemic: [[T; 3]; LANDMARKS],
    pub aleatoric: [[T; 3]; LANDMARKS],
    pub total: [[T; 3]; LANDMARKS],
    /// Mean over axes of `total`, one per landmark.
    pub scalar_total: [T; LANDMARKS],
}

impl<T: Real> McdEstimate<T> {
    /// Predictive Gaussian with the total variance.
    pub fn predictive(&self) -> GaussianPrediction<T> {
        GaussianPrediction {
            mean: self.mean,
            variance: self.total,
        }
    }

    pub fn mean_f64(&self, k: usize) -> Point {
        self.mean[k].map(T::as_f64)
    }

    /// Estimate with zero epistemic spread around given means/variances.
    pub fn certain(mean: [[T; 3]; LANDMARKS], aleatoric: [[T; 3]; LANDMARKS]) -> Self {
        let zero = [[T::zero(); 3]; LANDMARKS];
        let scalar_total = std::array::from_fn(|k| (aleatoric[k][0] + aleatoric[k][1] + aleatoric[k][2]) / T::c(3.0));
        McdEstimate {
            mean,
            epistemic: zero,
            aleatoric,
            total: aleatoric,
            scalar_total,
        }
    }
}

/// Combines `T` stochastic passes: mean of means, population variance of the
/// means (epistemic), mean predicted variance (aleatoric), and their sum.
///
/// Means and variances are taken around the first pass, so identical passes
/// give exactly zero epistemic variance.
pub fn aggregate_passes<T: Real>(passes: &[GaussianPrediction<T>]) -> Result<McdEstimate<T>> {
    let first = passes
        .first()
        .ok_or_else(|| Error::InvalidArgument("MC dropout needs T >= 1 passes".into()))?;
    let n = T::from_usize_exact(passes.len());
    let mut est = McdEstimate {
        mean: first.mean,
        epistemic: [[T::zero(); 3]; LANDMARKS],
        aleatoric: [[T::zero(); 3]; LANDMARKS],
        total: [[T::zero(); 3]; LANDMARKS],
        scalar_total: [T::zero(); LANDMARKS],
    };
    for k in 0..LANDMARKS {
        for a in 0..3 {
            let anchor = first.mean[k][a];
            let shift: T = passes.iter().map(|p| p.mean[k][a] - anchor).sum::<T>() / n;
            let sq: T = passes
                .iter()
                .map(|p| {
                    let d = p.mean[k][a] - anchor - shift;
                    d * d
                })
                .sum::<T>()
                / n;
            let ale: T = passes.iter().map(|p| p.variance[k][a]).sum::<T>() / n;
            est.mean[k][a] = anchor + shift;
            est.epistemic[k][a] = sq;
            est.aleatoric[k][a] = ale;
            est.total[k][a] = sq + ale;
        }
        est.scalar_total[k] = (est.total[k][0] + est.total[k][1] + est.total[k][2]) / T::c(3.0);
    }
    Ok(est)
}

#[derive(Debug, Clone)]
pub struct RegressorMasks<T> {
    pub encoder: Vec<DropoutMask<T>>,
    pub head: Vec<DropoutMask<T>>,
}

#[derive(Debug, Clone)]
pub struct RegressorTrace<T> {
    encoder: Trace<T>,
    embed: Trace<T>,
    head: Trace<T>,
    feature_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorGrads<T> {
    pub encoder: MlpGrads<T>,
    pub embed: MlpGrads<T>,
    pub head: MlpGrads<T>,
}

impl<T: Real> RegressorGrads<T> {
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut v = self.encoder.tensors();
        v.extend(self.embed.tensors());
        v.extend(self.head.tensors());
        v
    }

    pub fn accumulate(&mut self, other: &RegressorGrads<T>) {
        self.encoder.accumulate(&other.encoder);
        self.embed.accumulate(&other.embed);
        self.head.accumulate(&other.head);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regressor<T: Real> {
    pub architecture: Architecture,
    encoder: Mlp<T>,
    embed: Mlp<T>,
    head: Mlp<T>,
    pub epochs_trained: usize,
}

impl<T: Real> Regressor<T> {
    pub fn new(architecture: Architecture, rng: &mut Rng) -> Result<Self> {
        architecture.validate()?;
        let mut enc_sizes = vec![architecture.obs_dim];
        enc_sizes.extend(&architecture.encoder_widths);
        let encoder = Mlp::new(&enc_sizes, true, rng)?;
        let embed = Mlp::new(&[3, architecture.pose_embedding], false, rng)?;
        let mut head_sizes = vec![encoder.output_dim() + architecture.pose_embedding];
        head_sizes.extend(&architecture.head_widths);
        head_sizes.push(OUTPUTS);
        let head = Mlp::new(&head_sizes, false, rng)?;
        Ok(Regressor {
            architecture,
            encoder,
            embed,
            head,
            epochs_trained: 0,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder.parameter_count() + self.embed.parameter_count() + self.head.parameter_count()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.embed.tensors_mut());
        v.extend(self.head.tensors_mut());
        v
    }

    pub fn zero_grads(&self) -> RegressorGrads<T> {
        RegressorGrads {
            encoder: MlpGrads::zeros_like(&self.encoder),
            embed: MlpGrads::zeros_like(&self.embed),
            head: MlpGrads::zeros_like(&self.head),
        }
    }

    pub fn draw_masks(&self, batch: usize, p: T, rng: &mut Rng) -> Result<RegressorMasks<T>> {
        Ok(RegressorMasks {
            encoder: draw_batch_masks(&self.encoder.dropout_widths(), batch, p, rng)?,
            head: draw_batch_masks(&self.head.dropout_widths(), batch, p, rng)?,
        })
    }

    /// Batched raw forward pass: returns the `batch x 84` output matrix.
    pub fn forward_raw(
        &self,
        observations: &Matrix<T>,
        poses: &Matrix<T>,
        masks: Option<&RegressorMasks<T>>,
    ) -> Result<(Matrix<T>, RegressorTrace<T>)> {
        if observations.cols() != self.obs_dim() {
            return Err(Error::Dimension(format!(
                "observation has {} values, model expects {}",
                observations.cols(),
                self.obs_dim()
            )));
        }
        if poses.cols() != 3 || poses.rows() != observations.rows() {
            return Err(Error::Dimension("poses must be batch x 3".into()));
        }
        let (features, enc_trace) = self
            .encoder
            .forward(observations, masks.map(|m| m.encoder.as_slice()))?;
        let (embedding, embed_trace) = self.embed.forward(poses, None)?;
        let joint = features.hcat(&embedding);
        let (out, head_trace) = self.head.forward(&joint, masks.map(|m| m.head.as_slice()))?;
        Ok((
            out,
            RegressorTrace {
                encoder: enc_trace,
                embed: embed_trace,
                head: head_trace,
                feature_dim: features.cols(),
            },
        ))
    }

    /// Backpropagates gradients of the loss with respect to the raw 84
    /// outputs. Log-variance gradients must already be zeroed where the
    /// clamp is active (see [`crate::losses`]).
    pub fn backward(&self, trace: &RegressorTrace<T>, grad_raw: &Matrix<T>) -> Result<RegressorGrads<T>> {
        let (head, g_joint) = self.head.backward(&trace.head, grad_raw)?;
        let (g_feat, g_embed) = g_joint.hsplit(trace.feature_dim);
        let (embed, _) = self.embed.backward(&trace.embed, &g_embed)?;
        let (encoder, _) = self.encoder.backward(&trace.encoder, &g_feat)?;
        Ok(RegressorGrads { encoder, embed, head })
    }

    pub fn predict(
        &self,
        observation: &[f64],
        pose: Pose,
        masks: Option<&RegressorMasks<T>>,
    ) -> Result<GaussianPrediction<T>> {
        let (obs, poses) = inputs_matrix(std::iter::once((observation, pose)), self.obs_dim())?;
        let (out, _) = self.forward_raw(&obs, &poses, masks)?;
        Ok(GaussianPrediction::from_raw(out.row(0)))
    }

    /// `T` dropout passes (run as one batch of identical rows with
    /// independent masks) aggregated into an [`McdEstimate`].
    pub fn mcd_predict(
        &self,
        observation: &[f64],
        pose: Pose,
        passes: usize,
        p: T,
        rng: &mut Rng,
    ) -> Result<McdEstimate<T>> {
        if passes == 0 {
            return Err(Error::InvalidArgument("MC dropout needs T >= 1 passes".into()));
        }
        let (obs, poses) = inputs_matrix(std::iter::repeat_n((observation, pose), passes), self.obs_dim())?;
        let masks = self.draw_masks(passes, p, rng)?;
        let (out, _) = self.forward_raw(&obs, &poses, Some(&masks))?;
        let preds: Vec<_> = (0..passes).map(|i| GaussianPrediction::from_raw(out.row(i))).collect();
        aggregate_passes(&preds)
    }

    /// [`Regressor::mcd_predict`] over many inputs; input `i` draws its masks
    /// from `stream.at(i)`, so results do not depend on thread count.
    pub fn mcd_predict_many(
        &self,
        inputs: &[(&[f64], Pose)],
        passes: usize,
        p: T,
        stream: &SeedStream,
    ) -> Result<Vec<McdEstimate<T>>> {
        inputs
            .par_iter()
            .enumerate()
            .map(|(i, (obs, pose))| self.mcd_predict(obs, *pose, passes, p, &mut stream.at(i as u64)))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            architecture: self.architecture.clone(),
            epochs_trained: self.epochs_trained,
            encoder: self.encoder.clone(),
            pose_embedding: self.embed.clone(),
            head: self.head.clone(),
        }
    }

    pub fn from_checkpoint(c: Checkpoint<T>) -> Result<Self> {
        if c.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint version {}",
                c.format_version
            )));
        }
        c.architecture.validate()?;
        let a = &c.architecture;
        let widths = |m: &Mlp<T>| m.layers().iter().map(|l| l.outputs()).collect::<Vec<_>>();
        let mut head_widths = a.head_widths.clone();
        head_widths.push(OUTPUTS);
        if c.encoder.input_dim() != a.obs_dim
            || widths(&c.encoder) != a.encoder_widths
            || c.pose_embedding.input_dim() != 3
            || c.pose_embedding.output_dim() != a.pose_embedding
            || widths(&c.head) != head_widths
            || c.head.input_dim() != c.encoder.output_dim() + a.pose_embedding
        {
            return Err(Error::Dimension(
                "checkpoint networks disagree with the architecture descriptor".into(),
            ));
        }
        Ok(Regressor {
            architecture: c.architecture,
            encoder: c.encoder,
            embed: c.pose_embedding,
            head: c.head,
            epochs_trained: c.epochs_trained,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Checkpoint<T: Real> {
    pub format_version: u32,
    pub architecture: Architecture,
    pub epochs_trained: usize,
    pub encoder: Mlp<T>,
    pub pose_embedding: Mlp<T>,
    pub head: Mlp<T>,
}

/// Stacks `(observation, pose)` pairs into batch matrices.
pub fn inputs_matrix<'a, T: Real>(
    rows: impl IntoIterator<Item = (&'a [f64], Pose)>,
    obs_dim: usize,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let mut obs = Vec::new();
    let mut poses = Vec::new();
    let mut n = 0;
    for (o, p) in rows {
        if o.len() != obs_dim {
            return Err(Error::Dimension(format!(
                "observation has {} values, model expects {obs_dim}",
                o.len()
            )));
        }
        obs.extend(o.iter().map(|&v| T::c(v)));
        poses.extend(p.to_point().map(T::c));
        n += 1;
    }
    Ok((Matrix::from_vec(n, obs_dim, obs), Matrix::from_vec(n, 3, poses)))
}
