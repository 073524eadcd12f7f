//! JSON dataset manifests. Tensor paths are relative to the manifest's
//! directory unless absolute.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::container::{read_tensor, write_tensor};
use crate::dataset::{self, NeuralSample, PairedDataset, Split, StimulusRecord};
use crate::encoder::{Modality, ModalityKind};
use crate::error::{Error, Result};
use crate::kernel::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

fn manifest_version() -> u32 {
    MANIFEST_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample_id: String,
    pub subject_id: String,
    pub tensor: PathBuf,
    pub stimulus_id: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StimulusRow {
    pub stimulus_id: String,
    #[serde(default)]
    pub class_label: Option<String>,
    pub embedding: PathBuf,
}

/// A manifest as stored on disk.
///
/// Stimulus-only manifests (an embedding export with no recordings yet) omit
/// `modality`, `input_shape`, `subjects` and `samples`; they load through
/// [`load_stimulus_table`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default = "manifest_version")]
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
    pub embed_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<Vec<usize>>,
    #[serde(default)]
    pub subjects: Vec<String>,
    #[serde(default)]
    pub samples: Vec<SampleRow>,
    pub stimuli: Vec<StimulusRow>,
    /// Free-form provenance (e.g. which image model produced the embeddings).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl DatasetManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = super::read_file(path.as_ref())?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn load_stimuli(manifest: &DatasetManifest, base: &Path, problems: &mut Vec<String>) -> Vec<StimulusRecord> {
    manifest
        .stimuli
        .iter()
        .map(|row| {
            let embedding = match read_tensor(resolve(base, &row.embedding)) {
                Ok(t) => t,
                Err(e) => {
                    problems.push(format!("stimulus `{}`: {e}", row.stimulus_id));
                    // non-zero so only the read error is reported
                    Tensor::full(&[manifest.embed_dim], 1.0)
                }
            };
            StimulusRecord {
                stimulus_id: row.stimulus_id.clone(),
                class_label: row.class_label.clone(),
                embedding,
            }
        })
        .collect()
}

/// Loads and validates a paired dataset. On failure the error lists every
/// problem found, including unreadable tensor files.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<PairedDataset> {
    let path = path.as_ref();
    let manifest = DatasetManifest::read(path)?;
    let base = base_dir(path);

    let mut problems = Vec::new();
    if manifest.format_version != MANIFEST_VERSION {
        problems.push(format!(
            "manifest version {} is not supported (expected {MANIFEST_VERSION})",
            manifest.format_version
        ));
    }
    let (Some(modality), Some(input_shape)) = (manifest.modality, manifest.input_shape.clone()) else {
        problems.push("manifest lacks `modality` or `input_shape`".into());
        return Err(Error::InvalidManifest(problems));
    };
    let kind = ModalityKind { modality, input_shape };

    let stimuli = load_stimuli(&manifest, &base, &mut problems);
    let samples: Vec<NeuralSample> = manifest
        .samples
        .iter()
        .map(|row| {
            let features = match read_tensor(resolve(&base, &row.tensor)) {
                Ok(t) => t,
                Err(e) => {
                    problems.push(format!("sample `{}`: {e}", row.sample_id));
                    Tensor::zeros(&kind.input_shape)
                }
            };
            NeuralSample {
                sample_id: row.sample_id.clone(),
                subject_id: row.subject_id.clone(),
                modality,
                features,
                stimulus_id: row.stimulus_id.clone(),
                split: row.split,
            }
        })
        .collect();

    problems.extend(dataset::validate(
        &kind,
        manifest.embed_dim,
        &manifest.subjects,
        &samples,
        &stimuli,
    ));
    if !problems.is_empty() {
        return Err(Error::InvalidManifest(problems));
    }
    PairedDataset::new(kind, manifest.embed_dim, manifest.subjects, samples, stimuli)
}

/// Loads the stimulus table of any manifest, with or without samples.
/// Returns the embedding width and the validated records.
pub fn load_stimulus_table(path: impl AsRef<Path>) -> Result<(usize, Vec<StimulusRecord>)> {
    let path = path.as_ref();
    let manifest = DatasetManifest::read(path)?;
    let base = base_dir(path);
    let mut problems = Vec::new();
    if manifest.format_version != MANIFEST_VERSION {
        problems.push(format!(
            "manifest version {} is not supported (expected {MANIFEST_VERSION})",
            manifest.format_version
        ));
    }
    if manifest.embed_dim == 0 {
        problems.push("embed_dim must be positive".into());
    }
    if manifest.stimuli.is_empty() {
        problems.push("stimulus table is empty".into());
    }
    let stimuli = load_stimuli(&manifest, &base, &mut problems);
    let mut seen = HashSet::new();
    for s in &stimuli {
        if !seen.insert(s.stimulus_id.as_str()) {
            problems.push(format!("duplicate stimulus id `{}`", s.stimulus_id));
        }
        if s.embedding.shape() != [manifest.embed_dim] {
            problems.push(format!(
                "stimulus `{}` embedding has shape {:?}, expected [{}]",
                s.stimulus_id,
                s.embedding.shape(),
                manifest.embed_dim
            ));
        } else if s.embedding.l2_norm() == 0.0 {
            problems.push(format!("stimulus `{}` embedding is all zeros", s.stimulus_id));
        }
    }
    if !problems.is_empty() {
        return Err(Error::InvalidManifest(problems));
    }
    Ok((manifest.embed_dim, stimuli))
}

/// Writes `dataset` under `dir` as `manifest.json` plus one container per
/// sample and per stimulus. Any existing `dir` is replaced atomically.
pub fn save_dataset(
    dataset: &PairedDataset,
    dir: impl AsRef<Path>,
    metadata: BTreeMap<String, serde_json::Value>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    super::write_dir_atomic(dir, |tmp| {
        let mut samples = Vec::with_capacity(dataset.samples().len());
        for (i, s) in dataset.samples().iter().enumerate() {
            let rel = PathBuf::from(format!("samples/{i:06}.naln"));
            write_tensor(tmp.join(&rel), &s.features)?;
            samples.push(SampleRow {
                sample_id: s.sample_id.clone(),
                subject_id: s.subject_id.clone(),
                tensor: rel,
                stimulus_id: s.stimulus_id.clone(),
                split: s.split,
            });
        }
        let mut stimuli = Vec::with_capacity(dataset.stimuli().len());
        for (i, s) in dataset.stimuli().iter().enumerate() {
            let rel = PathBuf::from(format!("stimuli/{i:06}.naln"));
            write_tensor(tmp.join(&rel), &s.embedding)?;
            stimuli.push(StimulusRow {
                stimulus_id: s.stimulus_id.clone(),
                class_label: s.class_label.clone(),
                embedding: rel,
            });
        }
        let manifest = DatasetManifest {
            format_version: MANIFEST_VERSION,
            modality: Some(dataset.kind.modality),
            embed_dim: dataset.embed_dim,
            input_shape: Some(dataset.kind.input_shape.clone()),
            subjects: dataset.subjects.clone(),
            samples,
            stimuli,
            metadata,
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        super::write_atomic(tmp.join(MANIFEST_FILE), &json)
    })?;
    Ok(dir.join(MANIFEST_FILE))
}
