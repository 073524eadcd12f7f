//! Per-modality neural encoders `f = g ∘ a`.
//!
//! `a` is an affine alignment layer owned by each subject. It maps that
//! subject's native features into a space shared by every subject of the
//! modality. `g` is a network shared across subjects that maps the aligned
//! features to a `D`-dimensional vector in the image-embedding space.
//!
//! For fMRI the alignment is a flat affine map `V → H`. For EEG and MEG it is a
//! channel-mixing affine map `C → C'` applied independently at every time step,
//! so the temporal axis survives into the convolutional shared network.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::NeuralSample;
use crate::error::{Error, Result};
use crate::kernel::{
    activation, activation_backward, conv1d_backward, conv1d_forward, conv1d_output_len, linear_backward,
    linear_forward, pool1d, pool1d_backward, Activation, PoolMode, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Eeg,
    Meg,
    Fmri,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Eeg => "eeg",
            Modality::Meg => "meg",
            Modality::Fmri => "fmri",
        }
    }

    /// EEG and MEG carry a channel × time layout; fMRI is a flat voxel vector.
    pub fn is_temporal(self) -> bool {
        !matches!(self, Modality::Fmri)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eeg" => Ok(Modality::Eeg),
            "meg" => Ok(Modality::Meg),
            "fmri" => Ok(Modality::Fmri),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// A modality together with the native shape of one sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityKind {
    pub modality: Modality,
    /// `[V]` for fMRI, `[C, T]` for EEG and MEG.
    pub input_shape: Vec<usize>,
}

impl ModalityKind {
    pub fn new(modality: Modality, input_shape: Vec<usize>) -> Result<Self> {
        let kind = Self { modality, input_shape };
        kind.validate()?;
        Ok(kind)
    }

    pub fn fmri(voxels: usize) -> Result<Self> {
        Self::new(Modality::Fmri, vec![voxels])
    }

    pub fn eeg(channels: usize, steps: usize) -> Result<Self> {
        Self::new(Modality::Eeg, vec![channels, steps])
    }

    pub fn meg(channels: usize, steps: usize) -> Result<Self> {
        Self::new(Modality::Meg, vec![channels, steps])
    }

    pub fn validate(&self) -> Result<()> {
        let rank = if self.modality.is_temporal() { 2 } else { 1 };
        if self.input_shape.len() != rank {
            return Err(Error::Config(format!(
                "{} input shape must have {rank} axes, got {:?}",
                self.modality, self.input_shape
            )));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "{} input shape has a zero dimension: {:?}",
                self.modality, self.input_shape
            )));
        }
        Ok(())
    }

    /// Number of scalars in one sample.
    pub fn flat_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Width of the axis the subject alignment mixes (voxels or channels).
    fn native_width(&self) -> usize {
        self.input_shape[0]
    }

    fn aligned_shape(&self, width: usize) -> Vec<usize> {
        if self.modality.is_temporal() {
            vec![width, self.input_shape[1]]
        } else {
            vec![width]
        }
    }
}

/// Rearranges an EEG spectrogram laid out as `frequency × time × channel` into
/// the `(channel·frequency) × time` layout the temporal encoders consume.
pub fn flatten_spectrogram(spectrogram: &Tensor) -> Result<Tensor> {
    let (freqs, steps, channels) = spectrogram.dims3()?;
    let src = spectrogram.data();
    let mut out = vec![0.0; freqs * steps * channels];
    for f in 0..freqs {
        for t in 0..steps {
            for c in 0..channels {
                out[(c * freqs + f) * steps + t] = src[(f * steps + t) * channels + c];
            }
        }
    }
    Tensor::new(vec![channels * freqs, steps], out)
}

/// One layer of the shared network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        width: usize,
        stride: usize,
        padding: usize,
    },
    Activation {
        mode: Activation,
    },
    Pool {
        window: usize,
        mode: PoolMode,
    },
    /// Mean over every remaining time step: `C×T → C`.
    GlobalMeanPool,
    /// `C×T → C·T`.
    Flatten,
}

/// Architecture of one modality encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Output dimension `D`, equal to the image-embedding width.
    pub embed_dim: usize,
    /// Output width of the subject alignment (`H` for fMRI, `C'` for EEG/MEG).
    pub aligned_width: usize,
    pub layers: Vec<LayerSpec>,
}

pub const DEFAULT_EMBED_DIM: usize = 512;

impl ArchConfig {
    /// Reference architectures: an MLP for fMRI, a two-stage strided
    /// convolution for EEG and MEG.
    pub fn default_for(kind: &ModalityKind, embed_dim: usize) -> Self {
        if kind.modality.is_temporal() {
            Self {
                embed_dim,
                aligned_width: 64,
                layers: vec![
                    LayerSpec::Conv1d {
                        in_channels: 64,
                        out_channels: 128,
                        width: 9,
                        stride: 2,
                        padding: 0,
                    },
                    LayerSpec::Activation { mode: Activation::Gelu },
                    LayerSpec::Conv1d {
                        in_channels: 128,
                        out_channels: 128,
                        width: 9,
                        stride: 2,
                        padding: 0,
                    },
                    LayerSpec::Activation { mode: Activation::Gelu },
                    LayerSpec::GlobalMeanPool,
                    LayerSpec::Linear {
                        in_features: 128,
                        out_features: embed_dim,
                    },
                ],
            }
        } else {
            Self {
                embed_dim,
                aligned_width: 1024,
                layers: vec![
                    LayerSpec::Linear {
                        in_features: 1024,
                        out_features: 1024,
                    },
                    LayerSpec::Activation { mode: Activation::Gelu },
                    LayerSpec::Linear {
                        in_features: 1024,
                        out_features: embed_dim,
                    },
                ],
            }
        }
    }

    /// Small members of the same families, sized for desk-scale runs.
    ///
    /// The temporal variant's first convolution spans the whole time axis, so
    /// information carried by time position is not averaged away by the final
    /// pooling.
    pub fn compact_for(kind: &ModalityKind, embed_dim: usize, hidden: usize) -> Self {
        if kind.modality.is_temporal() {
            let (channels, steps) = (kind.input_shape[0], kind.input_shape[1]);
            Self {
                embed_dim,
                aligned_width: channels,
                layers: vec![
                    LayerSpec::Conv1d {
                        in_channels: channels,
                        out_channels: hidden,
                        width: steps,
                        stride: 1,
                        padding: 0,
                    },
                    LayerSpec::Activation { mode: Activation::Gelu },
                    LayerSpec::Conv1d {
                        in_channels: hidden,
                        out_channels: hidden,
                        width: 1,
                        stride: 1,
                        padding: 0,
                    },
                    LayerSpec::Activation { mode: Activation::Gelu },
                    LayerSpec::GlobalMeanPool,
                    LayerSpec::Linear {
                        in_features: hidden,
                        out_features: embed_dim,
                    },
                ],
            }
        } else {
            let voxels = kind.input_shape[0];
            Self {
                embed_dim,
                aligned_width: voxels,
                layers: vec![
                    LayerSpec::Linear {
                        in_features: voxels,
                        out_features: hidden,
                    },
                    LayerSpec::Activation { mode: Activation::Gelu },
                    LayerSpec::Linear {
                        in_features: hidden,
                        out_features: embed_dim,
                    },
                ],
            }
        }
    }

    /// Walks the per-sample shape through every layer, failing on the first
    /// incompatibility. Returns the shape entering each layer.
    pub fn layer_input_shapes(&self, kind: &ModalityKind) -> Result<Vec<Vec<usize>>> {
        kind.validate()?;
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.aligned_width == 0 {
            return Err(Error::Config("aligned_width must be positive".into()));
        }
        let mut shape = kind.aligned_shape(self.aligned_width);
        let mut inputs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(shape.clone());
            let bad = |what: String| Error::Config(format!("layer {i} ({layer:?}): {what}"));
            shape = match *layer {
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => {
                    if shape != [in_features] {
                        return Err(bad(format!("expects [{in_features}], receives {shape:?}")));
                    }
                    if out_features == 0 {
                        return Err(bad("zero output features".into()));
                    }
                    vec![out_features]
                }
                LayerSpec::Conv1d {
                    in_channels,
                    out_channels,
                    width,
                    stride,
                    padding,
                } => {
                    let [c, t] = shape[..] else {
                        return Err(bad(format!("expects channels × time, receives {shape:?}")));
                    };
                    if c != in_channels {
                        return Err(bad(format!("expects {in_channels} channels, receives {c}")));
                    }
                    if out_channels == 0 {
                        return Err(bad("zero output channels".into()));
                    }
                    let len = conv1d_output_len(t, width, stride, padding)
                        .ok_or_else(|| bad(format!("kernel width {width}/stride {stride} does not fit {t} steps")))?;
                    vec![out_channels, len]
                }
                LayerSpec::Activation { .. } => shape,
                LayerSpec::Pool { window, .. } => {
                    let [c, t] = shape[..] else {
                        return Err(bad(format!("expects channels × time, receives {shape:?}")));
                    };
                    if window == 0 || window > t {
                        return Err(bad(format!("window {window} does not fit {t} steps")));
                    }
                    vec![c, t / window]
                }
                LayerSpec::GlobalMeanPool => {
                    let [c, _] = shape[..] else {
                        return Err(bad(format!("expects channels × time, receives {shape:?}")));
                    };
                    vec![c]
                }
                LayerSpec::Flatten => {
                    let [c, t] = shape[..] else {
                        return Err(bad(format!("expects channels × time, receives {shape:?}")));
                    };
                    vec![c * t]
                }
            };
        }
        if shape != [self.embed_dim] {
            return Err(Error::Config(format!(
                "network output shape {shape:?} differs from embedding dimension [{}]",
                self.embed_dim
            )));
        }
        Ok(inputs)
    }
}

/// Affine map from one subject's native features into the modality-common space.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectAlignment {
    /// `native_width × aligned_width`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Linear {
        weight: Tensor,
        bias: Tensor,
    },
    Conv1d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Activation(Activation),
    Pool {
        window: usize,
        mode: PoolMode,
    },
    GlobalMeanPool,
    Flatten,
}

impl Layer {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Linear { weight, bias } => linear_forward(x, weight, bias),
            Layer::Conv1d {
                weight,
                bias,
                stride,
                padding,
            } => conv1d_forward(x, weight, bias, *stride, *padding),
            Layer::Activation(mode) => Ok(activation(x, *mode)),
            Layer::Pool { window, mode } => pool1d(x, *window, *mode),
            Layer::GlobalMeanPool => {
                let (b, c, t) = x.dims3()?;
                pool1d(x, t, PoolMode::Mean)?.reshape(&[b, c])
            }
            Layer::Flatten => {
                let (b, c, t) = x.dims3()?;
                x.reshape(&[b, c * t])
            }
        }
    }

    /// Returns `(d_input, [(param, grad)])`.
    fn backward(&self, x: &Tensor, d_out: &Tensor) -> Result<(Tensor, Vec<(&'static str, Tensor)>)> {
        Ok(match self {
            Layer::Linear { weight, .. } => {
                let mut g = linear_backward(x, weight, d_out)?;
                let (w, b) = (g.take_param("weight"), g.take_param("bias"));
                (g.d_input, vec![("weight", w), ("bias", b)])
            }
            Layer::Conv1d {
                weight,
                stride,
                padding,
                ..
            } => {
                let mut g = conv1d_backward(x, weight, d_out, *stride, *padding)?;
                let (w, b) = (g.take_param("weight"), g.take_param("bias"));
                (g.d_input, vec![("weight", w), ("bias", b)])
            }
            Layer::Activation(mode) => (activation_backward(x, d_out, *mode)?, vec![]),
            Layer::Pool { window, mode } => (pool1d_backward(x, *window, *mode, d_out)?, vec![]),
            Layer::GlobalMeanPool => {
                let (b, c, t) = x.dims3()?;
                let d = d_out.reshape(&[b, c, 1])?;
                (pool1d_backward(x, t, PoolMode::Mean, &d)?, vec![])
            }
            Layer::Flatten => (d_out.reshape(x.shape())?, vec![]),
        })
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv1d { weight, bias, .. } => {
                vec![("weight", weight), ("bias", bias)]
            }
            _ => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv1d { weight, bias, .. } => {
                vec![("weight", weight), ("bias", bias)]
            }
            _ => vec![],
        }
    }
}

/// The network shared by every subject of a modality.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedEncoder {
    layers: Vec<Layer>,
    embed_dim: usize,
}

impl SharedEncoder {
    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Named, ordered access to trainable tensors.
pub trait Parameters {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |n, _| names.push(n.to_string()));
        names
    }
}

impl Parameters for BTreeMap<String, Tensor> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (n, t) in self {
            f(n, t);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (n, t) in self.iter_mut() {
            f(n, t);
        }
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(pub BTreeMap<String, Tensor>);

impl Gradients {
    pub fn zeros_like(params: &impl Parameters) -> Self {
        let mut map = BTreeMap::new();
        params.visit_params(&mut |n, t| {
            map.insert(n.to_string(), Tensor::zeros(t.shape()));
        });
        Self(map)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    fn accumulate(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        match self.0.get_mut(name) {
            Some(t) => t.add_assign(grad),
            None => Err(Error::shape(format!("no parameter named `{name}`"))),
        }
    }
}

pub(crate) fn alignment_param_name(subject: &str, field: &str) -> String {
    format!("align/{subject}/{field}")
}

pub(crate) fn shared_param_name(layer: usize, field: &str) -> String {
    format!("shared/{layer}/{field}")
}

/// `f = g ∘ a` for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityEncoder {
    kind: ModalityKind,
    arch: ArchConfig,
    alignments: BTreeMap<String, SubjectAlignment>,
    shared: SharedEncoder,
}

/// Activations cached by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    layer_inputs: Vec<Tensor>,
}

/// Builds an encoder with scaled-uniform fan-in initialization: every weight and
/// bias of a layer with fan-in `n` is drawn from `U(−1/√n, 1/√n)`.
///
/// Subjects are initialized in sorted order, then shared layers in sequence,
/// from a single ChaCha8 stream seeded with `seed`.
pub fn init_encoder(kind: &ModalityKind, subjects: &[String], arch: &ArchConfig, seed: u64) -> Result<ModalityEncoder> {
    if subjects.is_empty() {
        return Err(Error::Config("an encoder needs at least one subject".into()));
    }
    arch.layer_input_shapes(kind)?;
    let mut sorted: Vec<&String> = subjects.iter().collect();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::DuplicateId(w[0].clone()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let native = kind.native_width();
    let mut alignments = BTreeMap::new();
    for subject in sorted {
        let weight = uniform(&mut rng, &[native, arch.aligned_width], native);
        let bias = uniform(&mut rng, &[arch.aligned_width], native);
        alignments.insert(subject.clone(), SubjectAlignment { weight, bias });
    }

    let layers = arch
        .layers
        .iter()
        .map(|spec| match *spec {
            LayerSpec::Linear {
                in_features,
                out_features,
            } => Layer::Linear {
                weight: uniform(&mut rng, &[in_features, out_features], in_features),
                bias: uniform(&mut rng, &[out_features], in_features),
            },
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                width,
                stride,
                padding,
            } => {
                let fan_in = in_channels * width;
                Layer::Conv1d {
                    weight: uniform(&mut rng, &[out_channels, in_channels, width], fan_in),
                    bias: uniform(&mut rng, &[out_channels], fan_in),
                    stride,
                    padding,
                }
            }
            LayerSpec::Activation { mode } => Layer::Activation(mode),
            LayerSpec::Pool { window, mode } => Layer::Pool { window, mode },
            LayerSpec::GlobalMeanPool => Layer::GlobalMeanPool,
            LayerSpec::Flatten => Layer::Flatten,
        })
        .collect();

    Ok(ModalityEncoder {
        kind: kind.clone(),
        arch: arch.clone(),
        alignments,
        shared: SharedEncoder {
            layers,
            embed_dim: arch.embed_dim,
        },
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

impl ModalityEncoder {
    pub fn kind(&self) -> &ModalityKind {
        &self.kind
    }

    pub fn modality(&self) -> Modality {
        self.kind.modality
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim
    }

    pub fn shared(&self) -> &SharedEncoder {
        &self.shared
    }

    pub fn subjects(&self) -> impl Iterator<Item = &str> {
        self.alignments.keys().map(String::as_str)
    }

    pub fn alignment(&self, subject: &str) -> Option<&SubjectAlignment> {
        self.alignments.get(subject)
    }

    pub fn alignment_mut(&mut self, subject: &str) -> Option<&mut SubjectAlignment> {
        self.alignments.get_mut(subject)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        if let Some(rest) = name.strip_prefix("align/") {
            let (subject, field) = rest.rsplit_once('/')?;
            let a = self.alignments.get(subject)?;
            return match field {
                "weight" => Some(&a.weight),
                "bias" => Some(&a.bias),
                _ => None,
            };
        }
        let (index, field) = name.strip_prefix("shared/")?.split_once('/')?;
        let layer = self.shared.layers.get(index.parse::<usize>().ok()?)?;
        layer.params().into_iter().find(|(f, _)| *f == field).map(|(_, t)| t)
    }

    /// Replaces the named parameter; the new value must keep its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let mut result = Err(Error::UnknownId(name.to_string()));
        let mut value = Some(value);
        self.visit_params_mut(&mut |n, t| {
            if n == name {
                let v = value.take().expect("parameter names are unique");
                result = if v.shape() == t.shape() {
                    *t = v;
                    Ok(())
                } else {
                    Err(Error::shape(format!(
                        "parameter `{name}` has shape {:?}, replacement has {:?}",
                        t.shape(),
                        v.shape()
                    )))
                };
            }
        });
        result
    }

    /// Bitwise equality of architecture and every parameter.
    pub fn bit_eq(&self, other: &ModalityEncoder) -> bool {
        if self.kind != other.kind || self.arch != other.arch {
            return false;
        }
        let (mut a, mut b) = (Vec::new(), Vec::new());
        self.visit_params(&mut |n, t| a.push((n.to_string(), t.clone())));
        other.visit_params(&mut |n, t| b.push((n.to_string(), t.clone())));
        a.len() == b.len() && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }

    fn check_sample<'s>(&'s self, sample: &NeuralSample) -> Result<&'s SubjectAlignment> {
        if sample.modality != self.kind.modality {
            return Err(Error::Modality(format!(
                "sample `{}` is {}, encoder is {}",
                sample.sample_id, sample.modality, self.kind.modality
            )));
        }
        if sample.features.shape() != self.kind.input_shape.as_slice() {
            return Err(Error::shape(format!(
                "sample `{}` has shape {:?}, encoder expects {:?}",
                sample.sample_id,
                sample.features.shape(),
                self.kind.input_shape
            )));
        }
        self.alignments
            .get(&sample.subject_id)
            .ok_or_else(|| Error::UnknownSubject(sample.subject_id.clone()))
    }

    /// Applies the sample's subject alignment, `a(n, s)`.
    pub fn align_forward(&self, sample: &NeuralSample) -> Result<Tensor> {
        let align = self.check_sample(sample)?;
        let width = self.arch.aligned_width;
        if self.kind.modality.is_temporal() {
            // C×T → T×C, mix channels per time step, → C'×T
            let x = sample.features.transpose2()?;
            linear_forward(&x, &align.weight, &align.bias)?.transpose2()
        } else {
            let x = sample.features.reshape(&[1, self.kind.flat_len()])?;
            linear_forward(&x, &align.weight, &align.bias)?.reshape(&[width])
        }
    }

    /// Raw (un-normalized) embedding `z = g(a(n, s))` of length `D`.
    pub fn encode(&self, sample: &NeuralSample) -> Result<Tensor> {
        let z = self.encode_batch(&[sample])?;
        z.reshape(&[self.embed_dim()])
    }

    /// Encodes samples of this modality into a `B×D` matrix, one row per sample.
    pub fn encode_batch(&self, samples: &[&NeuralSample]) -> Result<Tensor> {
        Ok(self.encode_batch_traced(samples)?.0)
    }

    pub fn encode_batch_traced(&self, samples: &[&NeuralSample]) -> Result<(Tensor, ForwardTrace)> {
        let d = self.embed_dim();
        if samples.is_empty() {
            return Ok((
                Tensor::zeros(&[0, d]),
                ForwardTrace {
                    layer_inputs: Vec::new(),
                },
            ));
        }
        if let Some(s) = samples.iter().find(|s| s.modality != self.kind.modality) {
            return Err(Error::Modality(format!(
                "batch mixes modalities: sample `{}` is {}, encoder is {}",
                s.sample_id, s.modality, self.kind.modality
            )));
        }
        let aligned = samples
            .iter()
            .map(|s| self.align_forward(s))
            .collect::<Result<Vec<_>>>()?;
        let aligned_shape = self.kind.aligned_shape(self.arch.aligned_width);
        let refs: Vec<&Tensor> = aligned.iter().collect();
        let mut h = Tensor::stack(&refs, &aligned_shape)?;

        let mut layer_inputs = Vec::with_capacity(self.shared.layers.len());
        for layer in &self.shared.layers {
            let next = layer.forward(&h)?;
            layer_inputs.push(h);
            h = next;
        }
        if h.shape() != [samples.len(), d] {
            return Err(Error::shape(format!(
                "shared network produced {:?}, expected [{}, {d}]",
                h.shape(),
                samples.len()
            )));
        }
        Ok((h, ForwardTrace { layer_inputs }))
    }

    /// Gradients of `Σ d_z ⊙ encode_batch(samples)` with respect to every
    /// parameter. Alignments of subjects absent from the batch get zeros.
    pub fn encoder_backward(&self, samples: &[&NeuralSample], d_z: &Tensor) -> Result<Gradients> {
        let (_, trace) = self.encode_batch_traced(samples)?;
        self.backward_traced(samples, &trace, d_z)
    }

    /// Backward pass reusing a trace from [`Self::encode_batch_traced`] on the
    /// same samples.
    pub fn backward_traced(&self, samples: &[&NeuralSample], trace: &ForwardTrace, d_z: &Tensor) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        if d_z.shape() != [samples.len(), self.embed_dim()] {
            return Err(Error::shape(format!(
                "d_z has shape {:?}, expected [{}, {}]",
                d_z.shape(),
                samples.len(),
                self.embed_dim()
            )));
        }
        if samples.is_empty() {
            return Ok(grads);
        }
        if trace.layer_inputs.len() != self.shared.layers.len() {
            return Err(Error::shape("forward trace does not match this encoder"));
        }

        let mut d = d_z.clone();
        for (i, layer) in self.shared.layers.iter().enumerate().rev() {
            let (d_in, params) = layer.backward(&trace.layer_inputs[i], &d)?;
            for (field, g) in params {
                grads.accumulate(&shared_param_name(i, field), &g)?;
            }
            d = d_in;
        }

        // d now holds the gradient w.r.t. the stacked aligned features.
        for (b, sample) in samples.iter().enumerate() {
            let align = self.check_sample(sample)?;
            let d_aligned = d.index_axis0(b);
            let mut g = if self.kind.modality.is_temporal() {
                let x = sample.features.transpose2()?;
                linear_backward(&x, &align.weight, &d_aligned.transpose2()?)?
            } else {
                let x = sample.features.reshape(&[1, self.kind.flat_len()])?;
                let dy = d_aligned.reshape(&[1, self.arch.aligned_width])?;
                linear_backward(&x, &align.weight, &dy)?
            };
            grads.accumulate(
                &alignment_param_name(&sample.subject_id, "weight"),
                &g.take_param("weight"),
            )?;
            grads.accumulate(&alignment_param_name(&sample.subject_id, "bias"), &g.take_param("bias"))?;
        }
        Ok(grads)
    }
}

impl Parameters for ModalityEncoder {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (subject, a) in &self.alignments {
            f(&alignment_param_name(subject, "weight"), &a.weight);
            f(&alignment_param_name(subject, "bias"), &a.bias);
        }
        for (i, layer) in self.shared.layers.iter().enumerate() {
            for (field, t) in layer.params() {
                f(&shared_param_name(i, field), t);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (subject, a) in self.alignments.iter_mut() {
            f(&alignment_param_name(subject, "weight"), &mut a.weight);
            f(&alignment_param_name(subject, "bias"), &mut a.bias);
        }
        for (i, layer) in self.shared.layers.iter_mut().enumerate() {
            for (field, t) in layer.params_mut() {
                f(&shared_param_name(i, field), t);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use crate::kernel::fd::{numeric_grad, random_tensor, rel_err, weighted_sum};

    fn sample(id: &str, subject: &str, kind: &ModalityKind, features: Tensor) -> NeuralSample {
        NeuralSample {
            sample_id: id.into(),
            subject_id: subject.into(),
            modality: kind.modality,
            features,
            stimulus_id: format!("stim-{id}"),
            split: Split::Train,
        }
    }

    fn subjects(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn fmri_setup() -> (ModalityKind, ArchConfig, ModalityEncoder) {
        let kind = ModalityKind::fmri(6).unwrap();
        let arch = ArchConfig::compact_for(&kind, 4, 8);
        let enc = init_encoder(&kind, &subjects(&["s1", "s2", "s3"]), &arch, 7).unwrap();
        (kind, arch, enc)
    }

    fn eeg_setup() -> (ModalityKind, ArchConfig, ModalityEncoder) {
        let kind = ModalityKind::eeg(3, 10).unwrap();
        let arch = ArchConfig {
            embed_dim: 4,
            aligned_width: 5,
            layers: vec![
                LayerSpec::Conv1d {
                    in_channels: 5,
                    out_channels: 6,
                    width: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Activation { mode: Activation::Gelu },
                LayerSpec::Pool {
                    window: 2,
                    mode: PoolMode::Mean,
                },
                LayerSpec::Conv1d {
                    in_channels: 6,
                    out_channels: 6,
                    width: 2,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::GlobalMeanPool,
                LayerSpec::Linear {
                    in_features: 6,
                    out_features: 4,
                },
            ],
        };
        let enc = init_encoder(&kind, &subjects(&["a", "b"]), &arch, 11).unwrap();
        (kind, arch, enc)
    }

    #[test]
    fn init_is_seed_deterministic() {
        let (kind, arch, enc) = fmri_setup();
        let again = init_encoder(&kind, &subjects(&["s3", "s1", "s2"]), &arch, 7).unwrap();
        assert!(enc.bit_eq(&again));
        let other = init_encoder(&kind, &subjects(&["s1", "s2", "s3"]), &arch, 8).unwrap();
        assert!(!enc.bit_eq(&other));
    }

    #[test]
    fn init_rejects_bad_configs() {
        let (kind, mut arch, _) = fmri_setup();
        assert!(init_encoder(&kind, &[], &arch, 0).is_err());
        assert!(init_encoder(&kind, &subjects(&["x", "x"]), &arch, 0).is_err());
        arch.layers[2] = LayerSpec::Linear {
            in_features: 7,
            out_features: 4,
        };
        assert!(matches!(
            init_encoder(&kind, &subjects(&["x"]), &arch, 0),
            Err(Error::Config(_))
        ));
        let (eeg, mut eeg_arch, _) = eeg_setup();
        eeg_arch.layers[0] = LayerSpec::Conv1d {
            in_channels: 5,
            out_channels: 6,
            width: 30,
            stride: 1,
            padding: 0,
        };
        assert!(init_encoder(&eeg, &subjects(&["x"]), &eeg_arch, 0).is_err());
    }

    #[test]
    fn default_architectures_chain() {
        let fmri = ModalityKind::fmri(15_000).unwrap();
        ArchConfig::default_for(&fmri, DEFAULT_EMBED_DIM)
            .layer_input_shapes(&fmri)
            .unwrap();
        let meg = ModalityKind::meg(272, 181).unwrap();
        let shapes = ArchConfig::default_for(&meg, DEFAULT_EMBED_DIM)
            .layer_input_shapes(&meg)
            .unwrap();
        assert_eq!(shapes[0], vec![64, 181]);
        assert_eq!(shapes[2], vec![128, 87]);
        assert_eq!(shapes[5], vec![128]);
    }

    #[test]
    fn modality_kind_rank_checks() {
        assert!(ModalityKind::new(Modality::Fmri, vec![3, 4]).is_err());
        assert!(ModalityKind::new(Modality::Eeg, vec![3]).is_err());
        assert!(ModalityKind::new(Modality::Meg, vec![3, 0]).is_err());
    }

    #[test]
    fn identity_alignment_passes_features_through() {
        let (kind, _, mut enc) = fmri_setup();
        let a = enc.alignment_mut("s1").unwrap();
        a.weight = Tensor::eye(6);
        a.bias = Tensor::zeros(&[6]);
        let x = random_tensor(&[6], 1);
        let out = enc.align_forward(&sample("q", "s1", &kind, x.clone())).unwrap();
        assert_eq!(out.data(), x.data());

        let (kind, _, mut enc) = eeg_setup();
        let a = enc.alignment_mut("a").unwrap();
        a.weight = Tensor::from_rows(&[
            [1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0, 0.0],
        ])
        .unwrap();
        a.bias = Tensor::zeros(&[5]);
        let x = random_tensor(&[3, 10], 2);
        let out = enc.align_forward(&sample("q", "a", &kind, x.clone())).unwrap();
        assert_eq!(out.shape(), &[5, 10]);
        assert_eq!(&out.data()[..30], x.data());
        assert!(out.data()[30..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_alignment_weights_give_bias() {
        let (kind, _, mut enc) = fmri_setup();
        let b = random_tensor(&[6], 3);
        let a = enc.alignment_mut("s2").unwrap();
        a.weight = Tensor::zeros(&[6, 6]);
        a.bias = b.clone();
        let out = enc
            .align_forward(&sample("q", "s2", &kind, random_tensor(&[6], 4)))
            .unwrap();
        assert!(out.bit_eq(&b));
    }

    #[test]
    fn subjects_differ_only_through_alignment() {
        let (kind, _, mut enc) = fmri_setup();
        let x = random_tensor(&[6], 5);
        let s1 = sample("p", "s1", &kind, x.clone());
        let s2 = sample("q", "s2", &kind, x.clone());
        assert_ne!(enc.encode(&s1).unwrap().data(), enc.encode(&s2).unwrap().data());

        let copy = enc.alignment("s1").unwrap().clone();
        *enc.alignment_mut("s2").unwrap() = copy;
        assert!(enc.encode(&s1).unwrap().bit_eq(&enc.encode(&s2).unwrap()));
    }

    #[test]
    fn unknown_subject_and_shape_errors() {
        let (kind, _, enc) = fmri_setup();
        let bad_subject = sample("q", "nobody", &kind, random_tensor(&[6], 1));
        assert!(matches!(enc.encode(&bad_subject), Err(Error::UnknownSubject(_))));
        let bad_shape = sample("q", "s1", &kind, random_tensor(&[5], 1));
        assert!(matches!(enc.encode(&bad_shape), Err(Error::Shape(_))));
    }

    #[test]
    fn identity_network_reproduces_input() {
        let kind = ModalityKind::fmri(4).unwrap();
        let arch = ArchConfig {
            embed_dim: 4,
            aligned_width: 4,
            layers: vec![LayerSpec::Linear {
                in_features: 4,
                out_features: 4,
            }],
        };
        let mut enc = init_encoder(&kind, &subjects(&["s"]), &arch, 0).unwrap();
        enc.set_param("align/s/weight", Tensor::eye(4)).unwrap();
        enc.set_param("align/s/bias", Tensor::zeros(&[4])).unwrap();
        enc.set_param("shared/0/weight", Tensor::eye(4)).unwrap();
        enc.set_param("shared/0/bias", Tensor::zeros(&[4])).unwrap();
        assert!(enc.set_param("shared/0/bias", Tensor::zeros(&[3])).is_err());
        let x = random_tensor(&[4], 9);
        assert!(enc.encode(&sample("q", "s", &kind, x.clone())).unwrap().bit_eq(&x));
    }

    #[test]
    fn batching_is_consistent() {
        for (kind, _, enc) in [fmri_setup(), eeg_setup()] {
            let subs: Vec<String> = enc.subjects().map(String::from).collect();
            let samples: Vec<NeuralSample> = (0..5)
                .map(|i| {
                    let x = random_tensor(&kind.input_shape, 100 + i);
                    sample(&format!("n{i}"), &subs[i as usize % subs.len()], &kind, x)
                })
                .collect();
            let refs: Vec<&NeuralSample> = samples.iter().collect();
            let z = enc.encode_batch(&refs).unwrap();
            assert_eq!(z.shape(), &[5, 4]);
            for (i, s) in samples.iter().enumerate() {
                let single = enc.encode(s).unwrap();
                assert!(single
                    .data()
                    .iter()
                    .zip(z.row(i))
                    .all(|(a, b)| a.to_bits() == b.to_bits()));
            }
            let perm = [3usize, 0, 4, 1, 2];
            let permuted: Vec<&NeuralSample> = perm.iter().map(|&i| &samples[i]).collect();
            let zp = enc.encode_batch(&permuted).unwrap();
            for (row, &src) in perm.iter().enumerate() {
                assert_eq!(zp.row(row), z.row(src));
            }
        }
    }

    #[test]
    fn empty_batch() {
        let (_, _, enc) = fmri_setup();
        let z = enc.encode_batch(&[]).unwrap();
        assert_eq!(z.shape(), &[0, 4]);
    }

    #[test]
    fn mixed_modalities_rejected() {
        let (kind, _, enc) = fmri_setup();
        let eeg = ModalityKind::eeg(6, 1).unwrap();
        let a = sample("a", "s1", &kind, random_tensor(&[6], 1));
        let b = sample("b", "s1", &eeg, random_tensor(&[6, 1], 1));
        assert!(matches!(enc.encode_batch(&[&a, &b]), Err(Error::Modality(_))));
    }

    #[test]
    fn zero_upstream_and_absent_subjects() {
        let (kind, _, enc) = fmri_setup();
        let a = sample("a", "s1", &kind, random_tensor(&[6], 1));
        let b = sample("b", "s2", &kind, random_tensor(&[6], 2));
        let zero = enc.encoder_backward(&[&a, &b], &Tensor::zeros(&[2, 4])).unwrap();
        assert!(zero.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));

        let g = enc.encoder_backward(&[&a, &b], &random_tensor(&[2, 4], 3)).unwrap();
        assert!(g.get("align/s3/weight").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.get("align/s3/bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.get("align/s1/weight").unwrap().l2_norm() > 0.0);
        assert_eq!(g.0.len(), enc.param_names().len());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (kind, _, enc) in [fmri_setup(), eeg_setup()] {
            let subs: Vec<String> = enc.subjects().map(String::from).collect();
            let samples: Vec<NeuralSample> = (0..4)
                .map(|i| {
                    let x = random_tensor(&kind.input_shape, 200 + i);
                    sample(&format!("n{i}"), &subs[i as usize % subs.len()], &kind, x)
                })
                .collect();
            let refs: Vec<&NeuralSample> = samples.iter().collect();
            let probe = random_tensor(&[4, 4], 17);
            let grads = enc.encoder_backward(&refs, &probe).unwrap();
            for name in enc.param_names() {
                let value = enc.param(&name).unwrap().clone();
                let numeric = numeric_grad(&value, |v| {
                    let mut e = enc.clone();
                    e.set_param(&name, v.clone()).unwrap();
                    weighted_sum(&e.encode_batch(&refs).unwrap(), &probe)
                });
                let err = rel_err(grads.get(&name).unwrap(), &numeric);
                assert!(err <= 1e-6, "{:?} {name}: {err}", kind.modality);
            }
        }
    }

    #[test]
    fn spectrogram_layout() {
        // F=2, T=3, C=2; value encodes (f, t, c) as 100f + 10t + c.
        let mut data = Vec::new();
        for f in 0..2 {
            for t in 0..3 {
                for c in 0..2 {
                    data.push((100 * f + 10 * t + c) as f64);
                }
            }
        }
        let spec = Tensor::new(vec![2, 3, 2], data).unwrap();
        let flat = flatten_spectrogram(&spec).unwrap();
        assert_eq!(flat.shape(), &[4, 3]);
        // row c·F + f
        assert_eq!(flat.row(0), &[0.0, 10.0, 20.0]);
        assert_eq!(flat.row(1), &[100.0, 110.0, 120.0]);
        assert_eq!(flat.row(2), &[1.0, 11.0, 21.0]);
        assert_eq!(flat.row(3), &[101.0, 111.0, 121.0]);
    }

    #[test]
    fn param_lookup() {
        let (_, _, enc) = eeg_setup();
        assert_eq!(enc.param("align/a/weight").unwrap().shape(), &[3, 5]);
        assert_eq!(enc.param("shared/0/weight").unwrap().shape(), &[6, 5, 3]);
        assert!(enc.param("shared/1/weight").is_none());
        assert!(enc.param("align/zz/weight").is_none());
    }
}
