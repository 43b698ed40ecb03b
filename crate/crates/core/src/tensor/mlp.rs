use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::dropout::DropoutMask;
use super::matrix::{axpy, dot, Matrix};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Real;

pub const PARAMS_FORMAT_VERSION: u32 = 1;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// `d/dx x*sigmoid(x) = s(x) * (1 + x * (1 - s(x)))`
#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    /// `out x in`
    pub weights: Matrix<T>,
    pub biases: Vec<T>,
}

impl<T: Real> LayerParams<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        LayerParams {
            weights: Matrix::zeros(outputs, inputs),
            biases: vec![T::zero(); outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }
}

/// Stack of affine layers. Every hidden layer is followed by SiLU and
/// (optionally) dropout; the last layer is affine only unless
/// `activate_output` is set.
#[derive(Debug)]
pub struct Mlp<T> {
    layers: Vec<LayerParams<T>>,
    activate_output: bool,
    id: u64,
    version: u64,
}

impl<T: Real> Clone for Mlp<T> {
    fn clone(&self) -> Self {
        Mlp {
            layers: self.layers.clone(),
            activate_output: self.activate_output,
            id: fresh_id(),
            version: 0,
        }
    }
}

impl<T: Real> PartialEq for Mlp<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.activate_output == other.activate_output
    }
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    net_id: u64,
    net_version: u64,
    /// Input to each layer.
    inputs: Vec<Matrix<T>>,
    /// Affine output of each activated layer.
    pre_activations: Vec<Matrix<T>>,
    masks: Option<Vec<DropoutMask<T>>>,
    batch: usize,
}

impl<T> Trace<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Gradients with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Real> MlpGrads<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        MlpGrads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerParams::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    /// Flat views in parameter order (weights then biases, per layer).
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.biases.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.biases.as_mut_slice()])
            .collect()
    }

    /// `self += other`, in parameter order.
    pub fn accumulate(&mut self, other: &MlpGrads<T>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

impl<T: Real> Mlp<T> {
    /// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation.
    pub fn new(sizes: &[usize], activate_output: bool, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = || T::c(rng.random_range(-bound..bound));
                let weights = Matrix::from_vec(fan_out, fan_in, (0..fan_in * fan_out).map(|_| draw()).collect());
                let biases = (0..fan_out).map(|_| draw()).collect();
                LayerParams { weights, biases }
            })
            .collect();
        Self::from_layers(layers, activate_output)
    }

    pub fn from_layers(layers: Vec<LayerParams<T>>, activate_output: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.biases.len() != l.outputs() {
                return Err(Error::Shape {
                    layer: i,
                    expected: l.outputs(),
                    got: l.biases.len(),
                });
            }
            if i > 0 && layers[i - 1].outputs() != l.inputs() {
                return Err(Error::Shape {
                    layer: i,
                    expected: layers[i - 1].outputs(),
                    got: l.inputs(),
                });
            }
        }
        Ok(Mlp {
            layers,
            activate_output,
            id: fresh_id(),
            version: 0,
        })
    }

    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn activate_output(&self) -> bool {
        self.activate_output
    }

    fn is_activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.activate_output
    }

    /// Widths of the activated (and hence droppable) layers.
    pub fn dropout_widths(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.is_activated(i))
            .map(|i| self.layers[i].outputs())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.biases.len())
            .sum()
    }

    /// Mutable flat parameter views. Invalidates outstanding traces.
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.version += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.biases.as_mut_slice()])
            .collect()
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.biases.as_slice()])
            .collect()
    }

    /// Batched forward pass; rows of `input` are samples.
    pub fn forward(&self, input: &Matrix<T>, masks: Option<&[DropoutMask<T>]>) -> Result<(Matrix<T>, Trace<T>)> {
        let batch = input.rows();
        if input.cols() != self.input_dim() {
            return Err(Error::Shape {
                layer: 0,
                expected: self.input_dim(),
                got: input.cols(),
            });
        }
        if let Some(masks) = masks {
            let widths = self.dropout_widths();
            if masks.len() != widths.len() {
                return Err(Error::Dimension(format!(
                    "{} dropout masks for {} activated layers",
                    masks.len(),
                    widths.len()
                )));
            }
            for (i, (m, w)) in masks.iter().zip(&widths).enumerate() {
                if m.width() != *w || (m.rows() != 1 && m.rows() != batch) {
                    return Err(Error::Shape {
                        layer: i,
                        expected: *w,
                        got: m.width(),
                    });
                }
            }
        }

        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::new();
        let mut current = input.clone();
        let mut mask_idx = 0;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = Matrix::zeros(batch, layer.outputs());
            for b in 0..batch {
                let x = current.row(b);
                let out = z.row_mut(b);
                for (o, zo) in out.iter_mut().enumerate() {
                    *zo = dot(layer.weights.row(o), x) + layer.biases[o];
                }
            }
            inputs.push(current);
            if self.is_activated(li) {
                let mut a = z.clone();
                for b in 0..batch {
                    let row = a.row_mut(b);
                    for v in row.iter_mut() {
                        *v = silu(*v);
                    }
                    if let Some(masks) = masks {
                        let m = &masks[mask_idx];
                        let scale = m.scale();
                        for (v, &keep) in row.iter_mut().zip(m.row(b)) {
                            *v = if keep { *v * scale } else { T::zero() };
                        }
                    }
                }
                pre_activations.push(z);
                mask_idx += 1;
                current = a;
            } else {
                current = z;
            }
        }
        let trace = Trace {
            net_id: self.id,
            net_version: self.version,
            inputs,
            pre_activations,
            masks: masks.map(<[_]>::to_vec),
            batch,
        };
        Ok((current, trace))
    }

    /// Single-sample convenience wrapper around [`Mlp::forward`].
    pub fn forward_vector(&self, input: &[T], masks: Option<&[DropoutMask<T>]>) -> Result<(Vec<T>, Trace<T>)> {
        let (out, trace) = self.forward(&Matrix::row_vector(input), masks)?;
        Ok((out.into_vec(), trace))
    }

    /// Reverse-mode gradients of `sum(grad_output * output)` with respect to
    /// the parameters and the input. Dropout masks are treated as constants.
    pub fn backward(&self, trace: &Trace<T>, grad_output: &Matrix<T>) -> Result<(MlpGrads<T>, Matrix<T>)> {
        if trace.net_id != self.id || trace.net_version != self.version {
            return Err(Error::StaleTrace(
                "trace was recorded on a different network or before a parameter update".into(),
            ));
        }
        if grad_output.rows() != trace.batch || grad_output.cols() != self.output_dim() {
            return Err(Error::Dimension(format!(
                "output gradient is {}x{}, expected {}x{}",
                grad_output.rows(),
                grad_output.cols(),
                trace.batch,
                self.output_dim()
            )));
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut g = grad_output.clone();
        let mut act_idx = trace.pre_activations.len();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            if self.is_activated(li) {
                act_idx -= 1;
                let z = &trace.pre_activations[act_idx];
                let mask = trace.masks.as_ref().map(|m| &m[act_idx]);
                for b in 0..trace.batch {
                    let zr = z.row(b);
                    let gr = g.row_mut(b);
                    match mask {
                        Some(m) => {
                            let scale = m.scale();
                            for ((gv, &zv), &keep) in gr.iter_mut().zip(zr).zip(m.row(b)) {
                                *gv = if keep { *gv * scale * silu_grad(zv) } else { T::zero() };
                            }
                        }
                        None => {
                            for (gv, &zv) in gr.iter_mut().zip(zr) {
                                *gv *= silu_grad(zv);
                            }
                        }
                    }
                }
            }
            let x = &trace.inputs[li];
            let gl = &mut grads.layers[li];
            let mut gx = Matrix::zeros(trace.batch, layer.inputs());
            for b in 0..trace.batch {
                let gr = g.row(b);
                let xr = x.row(b);
                for (o, &go) in gr.iter().enumerate() {
                    if go == T::zero() {
                        continue;
                    }
                    axpy(go, xr, gl.weights.row_mut(o));
                    gl.biases[o] += go;
                    axpy(go, layer.weights.row(o), gx.row_mut(b));
                }
            }
            g = gx;
        }
        Ok((grads, g))
    }

    /// Adds `delta` to one parameter.
    #[doc(hidden)]
    pub fn perturb(&mut self, tensor: usize, index: usize, delta: T) {
        self.tensors_mut()[tensor][index] += delta;
    }
}

#[derive(Serialize, Deserialize)]
struct LayerJson<T> {
    weights: Vec<Vec<T>>,
    biases: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct MlpJson<T> {
    format_version: u32,
    activate_output: bool,
    layers: BTreeMap<usize, LayerJson<T>>,
}

impl<T: Real> Serialize for Mlp<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MlpJson {
            format_version: PARAMS_FORMAT_VERSION,
            activate_output: self.activate_output,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    (
                        i,
                        LayerJson {
                            weights: l.weights.to_rows(),
                            biases: l.biases.clone(),
                        },
                    )
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de, T: Real> Deserialize<'de> for Mlp<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let json = MlpJson::<T>::deserialize(d)?;
        if json.format_version != PARAMS_FORMAT_VERSION {
            return Err(D::Error::custom(format!(
                "unsupported parameter format version {}",
                json.format_version
            )));
        }
        let expected: Vec<usize> = (0..json.layers.len()).collect();
        if json.layers.keys().copied().collect::<Vec<_>>() != expected {
            return Err(D::Error::custom("layer keys must be 0..n"));
        }
        let mut layers = Vec::with_capacity(json.layers.len());
        for l in json.layers.into_values() {
            if l.weights.iter().any(|r| r.len() != l.weights[0].len()) {
                return Err(D::Error::custom("ragged weight rows"));
            }
            layers.push(LayerParams {
                weights: Matrix::from_rows(&l.weights),
                biases: l.biases,
            });
        }
        Mlp::from_layers(layers, json.activate_output).map_err(D::Error::custom)
    }
}
