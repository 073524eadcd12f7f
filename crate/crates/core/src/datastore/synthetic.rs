//! Synthetic paired datasets with a known generative map per subject.
//!
//! Stimulus embeddings are uniform on the unit sphere in `R^D`. Each subject
//! has an affine map `x = W·z + b` from embedding to flattened features,
//! followed by i.i.d. Gaussian noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{NeuralSample, PairedDataset, Split, StimulusRecord};
use crate::encoder::{Modality, ModalityKind};
use crate::error::{Error, Result};
use crate::kernel::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapFamily {
    /// `x = z`; needs a flat native size equal to `D`.
    Identity,
    /// `W` with entries `N(0, 1/D)`, `b` with entries `N(0, 0.01)`.
    RandomAffine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModality {
    pub kind: ModalityKind,
    pub num_subjects: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_stimuli: usize,
    /// The last `num_test` stimuli form the test split.
    pub num_test: usize,
    /// Stimulus `i` gets label `class-{i mod num_classes}`.
    pub num_classes: usize,
    pub embed_dim: usize,
    pub noise_std: f64,
    pub map: MapFamily,
    pub seed: u64,
    pub modalities: Vec<SyntheticModality>,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_stimuli == 0 {
            problems.push("num_stimuli must be positive".to_string());
        }
        if self.num_test > self.num_stimuli {
            problems.push(format!(
                "num_test {} exceeds num_stimuli {}",
                self.num_test, self.num_stimuli
            ));
        }
        if self.num_classes == 0 {
            problems.push("num_classes must be positive".into());
        }
        if self.embed_dim == 0 {
            problems.push("embed_dim must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            problems.push(format!("noise_std must be finite and ≥ 0, got {}", self.noise_std));
        }
        if self.modalities.is_empty() {
            problems.push("no modalities requested".into());
        }
        let mut seen = Vec::new();
        for m in &self.modalities {
            if seen.contains(&m.kind.modality) {
                problems.push(format!("modality {} requested twice", m.kind.modality));
            }
            seen.push(m.kind.modality);
            if let Err(e) = m.kind.validate() {
                problems.push(e.to_string());
            }
            if m.num_subjects == 0 {
                problems.push(format!("{} needs at least one subject", m.kind.modality));
            }
            if self.map == MapFamily::Identity && m.kind.flat_len() != self.embed_dim {
                problems.push(format!(
                    "identity maps need {} features to total D = {}, got shape {:?}",
                    m.kind.modality, self.embed_dim, m.kind.input_shape
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Ground-truth generative map of one subject: `features = weight·z + bias`
/// (before noise), with `weight` of shape `flat × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectMap {
    pub modality: Modality,
    pub subject_id: String,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    /// One dataset per requested modality, in request order, all sharing the
    /// same stimulus table.
    pub datasets: Vec<PairedDataset>,
    pub maps: Vec<SubjectMap>,
}

impl SyntheticData {
    pub fn dataset(&self, modality: Modality) -> Option<&PairedDataset> {
        self.datasets.iter().find(|d| d.kind.modality == modality)
    }

    pub fn map(&self, modality: Modality, subject: &str) -> Option<&SubjectMap> {
        self.maps
            .iter()
            .find(|m| m.modality == modality && m.subject_id == subject)
    }
}

pub fn subject_id(index: usize) -> String {
    format!("sub-{:02}", index + 1)
}

pub fn stimulus_id(index: usize) -> String {
    format!("stim-{index:05}")
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn unit_sphere(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Generates every modality's dataset from one seeded stream: stimuli first,
/// then, per modality and subject, the map followed by that subject's samples.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticData> {
    config.validate()?;
    let d = config.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let num_train = config.num_stimuli - config.num_test;

    let stimuli: Vec<StimulusRecord> = (0..config.num_stimuli)
        .map(|i| StimulusRecord {
            stimulus_id: stimulus_id(i),
            class_label: Some(format!("class-{:03}", i % config.num_classes)),
            embedding: Tensor::from_parts(vec![d], unit_sphere(&mut rng, d)),
        })
        .collect();

    let mut datasets = Vec::with_capacity(config.modalities.len());
    let mut maps = Vec::new();
    for spec in &config.modalities {
        let kind = &spec.kind;
        let flat = kind.flat_len();
        let subjects: Vec<String> = (0..spec.num_subjects).map(subject_id).collect();
        let mut samples = Vec::with_capacity(spec.num_subjects * config.num_stimuli);
        for subject in &subjects {
            let (weight, bias) = match config.map {
                MapFamily::Identity => (Tensor::eye(d), Tensor::zeros(&[d])),
                MapFamily::RandomAffine => (
                    Tensor::from_parts(vec![flat, d], gaussian(&mut rng, flat * d, 1.0 / (d as f64).sqrt())),
                    Tensor::from_parts(vec![flat], gaussian(&mut rng, flat, 0.1)),
                ),
            };
            for (i, stim) in stimuli.iter().enumerate() {
                let z = stim.embedding.data();
                let mut x: Vec<f64> = match config.map {
                    MapFamily::Identity => z.to_vec(),
                    MapFamily::RandomAffine => weight.rows().zip(bias.data()).map(|(w, b)| dot(w, z) + b).collect(),
                };
                if config.noise_std > 0.0 {
                    let noise = gaussian(&mut rng, flat, config.noise_std);
                    x.iter_mut().zip(noise).for_each(|(v, e)| *v += e);
                }
                samples.push(NeuralSample {
                    sample_id: format!("{}-{subject}-{}", kind.modality, stim.stimulus_id),
                    subject_id: subject.clone(),
                    modality: kind.modality,
                    features: Tensor::new(kind.input_shape.clone(), x)?,
                    stimulus_id: stim.stimulus_id.clone(),
                    split: if i < num_train { Split::Train } else { Split::Test },
                });
            }
            maps.push(SubjectMap {
                modality: kind.modality,
                subject_id: subject.clone(),
                weight,
                bias,
            });
        }
        datasets.push(PairedDataset::new(kind.clone(), d, subjects, samples, stimuli.clone())?);
    }
    Ok(SyntheticData { datasets, maps })
}
