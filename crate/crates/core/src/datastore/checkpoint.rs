//! Encoder checkpoints: a directory with `architecture.json` and one tensor
//! container per parameter (and per optimizer moment, when saved).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::container::{read_tensor, write_tensor};
use crate::encoder::{init_encoder, ArchConfig, ModalityEncoder, ModalityKind, Parameters};
use crate::error::{Error, Result};
use crate::kernel::Tensor;
use crate::train::{AdamWState, Moments};

pub const CHECKPOINT_FILE: &str = "architecture.json";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MomentFiles {
    m: PathBuf,
    v: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct OptimizerFiles {
    step: u64,
    moments: BTreeMap<String, MomentFiles>,
}

#[derive(Serialize, Deserialize)]
struct ArchitectureManifest {
    format_version: u32,
    kind: ModalityKind,
    arch: ArchConfig,
    subjects: Vec<String>,
    params: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerFiles>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub encoder: ModalityEncoder,
    pub optimizer: Option<AdamWState>,
}

/// Writes a checkpoint directory, replacing `dir` atomically if it exists.
pub fn save_checkpoint(encoder: &ModalityEncoder, optimizer: Option<&AdamWState>, dir: impl AsRef<Path>) -> Result<()> {
    super::write_dir_atomic(dir.as_ref(), |tmp| {
        let mut tensors: Vec<(PathBuf, Tensor)> = Vec::new();
        let mut params = BTreeMap::new();
        encoder.visit_params(&mut |name, t| {
            let rel = PathBuf::from(format!("params/{:04}.naln", tensors.len()));
            params.insert(name.to_string(), rel.clone());
            tensors.push((rel, t.clone()));
        });
        let optimizer = optimizer.map(|state| {
            let moments = state
                .moments
                .iter()
                .enumerate()
                .map(|(i, (name, mo))| {
                    let m = PathBuf::from(format!("optimizer/{i:04}-m.naln"));
                    let v = PathBuf::from(format!("optimizer/{i:04}-v.naln"));
                    tensors.push((m.clone(), mo.m.clone()));
                    tensors.push((v.clone(), mo.v.clone()));
                    (name.clone(), MomentFiles { m, v })
                })
                .collect();
            OptimizerFiles {
                step: state.step,
                moments,
            }
        });
        for (rel, t) in &tensors {
            write_tensor(tmp.join(rel), t)?;
        }
        let manifest = ArchitectureManifest {
            format_version: CHECKPOINT_VERSION,
            kind: encoder.kind().clone(),
            arch: encoder.arch().clone(),
            subjects: encoder.subjects().map(str::to_string).collect(),
            params,
            optimizer,
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        super::write_atomic(tmp.join(CHECKPOINT_FILE), &json)
    })
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest: ArchitectureManifest = serde_json::from_slice(&super::read_file(&dir.join(CHECKPOINT_FILE))?)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "format version {} (expected {CHECKPOINT_VERSION})",
            manifest.format_version
        )));
    }
    // Build the skeleton, then overwrite every parameter from disk.
    let mut encoder = init_encoder(&manifest.kind, &manifest.subjects, &manifest.arch, 0)
        .map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
    let expected = encoder.param_names();
    let stored: Vec<String> = manifest.params.keys().cloned().collect();
    let mut sorted_expected = expected.clone();
    sorted_expected.sort();
    if sorted_expected != stored {
        return Err(Error::CheckpointMismatch(format!(
            "parameter set differs: architecture defines {expected:?}, checkpoint stores {stored:?}"
        )));
    }
    for (name, rel) in &manifest.params {
        let t = read_tensor(dir.join(rel))?;
        encoder
            .set_param(name, t)
            .map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
    }

    let optimizer = match manifest.optimizer {
        None => None,
        Some(files) => {
            let mut moments = BTreeMap::new();
            for (name, f) in files.moments {
                let shape = encoder
                    .param(&name)
                    .ok_or_else(|| Error::CheckpointMismatch(format!("moment for unknown parameter `{name}`")))?
                    .shape()
                    .to_vec();
                let m = read_tensor(dir.join(&f.m))?;
                let v = read_tensor(dir.join(&f.v))?;
                if m.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
                    return Err(Error::CheckpointMismatch(format!(
                        "moments of `{name}` do not match shape {shape:?}"
                    )));
                }
                moments.insert(name, Moments { m, v });
            }
            Some(AdamWState {
                step: files.step,
                moments,
            })
        }
    };
    Ok(Checkpoint { encoder, optimizer })
}

/// Loads a checkpoint and fails unless it was saved for `kind` and `arch`.
pub fn load_checkpoint_expecting(dir: impl AsRef<Path>, kind: &ModalityKind, arch: &ArchConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(dir)?;
    if ckpt.encoder.kind() != kind {
        return Err(Error::CheckpointMismatch(format!(
            "saved for {:?}, expected {kind:?}",
            ckpt.encoder.kind()
        )));
    }
    if ckpt.encoder.arch() != arch {
        return Err(Error::CheckpointMismatch(
            "layer configuration differs from the requested architecture".into(),
        ));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{NeuralSample, Split};
    use crate::encoder::Modality;
    use crate::kernel::fd::random_tensor;

    fn encoder(seed: u64) -> ModalityEncoder {
        let kind = ModalityKind::eeg(3, 5).unwrap();
        let arch = ArchConfig::compact_for(&kind, 4, 6);
        init_encoder(&kind, &["s1".into(), "s2".into()], &arch, seed).unwrap()
    }

    fn sample() -> NeuralSample {
        NeuralSample {
            sample_id: "x".into(),
            subject_id: "s2".into(),
            modality: Modality::Eeg,
            features: random_tensor(&[3, 5], 11),
            stimulus_id: "i".into(),
            split: Split::Test,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let enc = encoder(3);
        let mut state = AdamWState::new();
        state.step = 7;
        let p = enc.param("shared/0/bias").unwrap();
        state.moments.insert(
            "shared/0/bias".into(),
            Moments {
                m: p.map(|x| x * 0.5),
                v: p.map(|x| x * x),
            },
        );
        save_checkpoint(&enc, Some(&state), dir.path().join("ck")).unwrap();
        let back = load_checkpoint(dir.path().join("ck")).unwrap();
        assert!(back.encoder.bit_eq(&enc));
        assert_eq!(back.optimizer.unwrap(), state);
        let before = enc.encode(&sample()).unwrap();
        let after = back.encoder.encode(&sample()).unwrap();
        assert!(before.bit_eq(&after));
    }

    #[test]
    fn untrained_checkpoint_equals_fresh_init() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&encoder(5), None, dir.path().join("ck")).unwrap();
        let back = load_checkpoint(dir.path().join("ck")).unwrap();
        assert!(back.encoder.bit_eq(&encoder(5)));
        assert!(back.optimizer.is_none());
    }

    #[test]
    fn saving_twice_gives_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        save_checkpoint(&encoder(1), None, &a).unwrap();
        save_checkpoint(&encoder(1), None, &b).unwrap();
        for entry in walk(&a) {
            let rel = entry.strip_prefix(&a).unwrap();
            assert_eq!(std::fs::read(&entry).unwrap(), std::fs::read(b.join(rel)).unwrap());
        }
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let enc = encoder(1);
        save_checkpoint(&enc, None, dir.path().join("ck")).unwrap();
        let other = ArchConfig::compact_for(enc.kind(), 4, 7);
        assert!(matches!(
            load_checkpoint_expecting(dir.path().join("ck"), enc.kind(), &other),
            Err(Error::CheckpointMismatch(_))
        ));
        let fmri = ModalityKind::fmri(15).unwrap();
        assert!(matches!(
            load_checkpoint_expecting(dir.path().join("ck"), &fmri, enc.arch()),
            Err(Error::CheckpointMismatch(_))
        ));
        assert!(load_checkpoint_expecting(dir.path().join("ck"), enc.kind(), enc.arch()).is_ok());
    }

    #[test]
    fn tampered_parameter_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("ck");
        save_checkpoint(&encoder(1), None, &ck).unwrap();
        write_tensor(ck.join("params/0000.naln"), &Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(load_checkpoint(&ck), Err(Error::CheckpointMismatch(_))));
    }
}
