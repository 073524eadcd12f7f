//! In-memory paired datasets: neural recordings matched to the images that
//! were on screen while they were recorded.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::ModalityKind;
use crate::error::{Error, Result};
use crate::kernel::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One recorded trial.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralSample {
    pub sample_id: String,
    pub subject_id: String,
    pub modality: crate::encoder::Modality,
    pub features: Tensor,
    pub stimulus_id: String,
    pub split: Split,
}

/// One image with its frozen embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct StimulusRecord {
    pub stimulus_id: String,
    pub class_label: Option<String>,
    pub embedding: Tensor,
}

/// A validated set of samples for one modality with the stimuli they reference.
///
/// Construct through [`PairedDataset::new`] (or the manifest loader), which
/// enforces the pairing and split invariants.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub kind: ModalityKind,
    pub embed_dim: usize,
    pub subjects: Vec<String>,
    samples: Vec<NeuralSample>,
    stimuli: Vec<StimulusRecord>,
    stimulus_index: HashMap<String, usize>,
}

impl PairedDataset {
    pub fn new(
        kind: ModalityKind,
        embed_dim: usize,
        subjects: Vec<String>,
        samples: Vec<NeuralSample>,
        stimuli: Vec<StimulusRecord>,
    ) -> Result<Self> {
        let problems = validate(&kind, embed_dim, &subjects, &samples, &stimuli);
        if !problems.is_empty() {
            return Err(Error::InvalidManifest(problems));
        }
        let stimulus_index = stimuli
            .iter()
            .enumerate()
            .map(|(i, s)| (s.stimulus_id.clone(), i))
            .collect();
        Ok(Self {
            kind,
            embed_dim,
            subjects,
            samples,
            stimuli,
            stimulus_index,
        })
    }

    pub fn samples(&self) -> &[NeuralSample] {
        &self.samples
    }

    pub fn stimuli(&self) -> &[StimulusRecord] {
        &self.stimuli
    }

    pub fn split(&self, split: Split) -> Vec<&NeuralSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn stimulus(&self, id: &str) -> Option<&StimulusRecord> {
        self.stimulus_index.get(id).map(|&i| &self.stimuli[i])
    }

    /// Stimuli referenced by samples of `split`, in first-reference order.
    pub fn split_stimuli(&self, split: Split) -> Vec<&StimulusRecord> {
        let mut seen = std::collections::HashSet::new();
        self.samples
            .iter()
            .filter(|s| s.split == split && seen.insert(s.stimulus_id.as_str()))
            .map(|s| &self.stimuli[self.stimulus_index[&s.stimulus_id]])
            .collect()
    }

    pub fn has_class_labels(&self) -> bool {
        !self.stimuli.is_empty() && self.stimuli.iter().all(|s| s.class_label.is_some())
    }
}

/// Returns every violated invariant; an empty list means the dataset is valid.
pub(crate) fn validate(
    kind: &ModalityKind,
    embed_dim: usize,
    subjects: &[String],
    samples: &[NeuralSample],
    stimuli: &[StimulusRecord],
) -> Vec<String> {
    use std::collections::{HashMap, HashSet};

    let mut problems = Vec::new();
    if let Err(e) = kind.validate() {
        problems.push(e.to_string());
    }
    if embed_dim == 0 {
        problems.push("embed_dim must be positive".into());
    }
    if samples.is_empty() {
        problems.push("sample table is empty".into());
    }

    let mut subject_set = HashSet::new();
    for s in subjects {
        if !subject_set.insert(s.as_str()) {
            problems.push(format!("duplicate subject `{s}`"));
        }
    }

    let mut stim_ids = HashSet::new();
    for st in stimuli {
        if !stim_ids.insert(st.stimulus_id.as_str()) {
            problems.push(format!("duplicate stimulus id `{}`", st.stimulus_id));
        }
        if st.embedding.shape() != [embed_dim] {
            problems.push(format!(
                "stimulus `{}` embedding has shape {:?}, expected [{embed_dim}]",
                st.stimulus_id,
                st.embedding.shape()
            ));
        } else if st.embedding.data().iter().all(|&v| v == 0.0) {
            problems.push(format!("stimulus `{}` embedding is all zeros", st.stimulus_id));
        }
    }

    let mut sample_ids = HashSet::new();
    let mut split_of_stimulus: HashMap<&str, Split> = HashMap::new();
    let mut overlap = HashSet::new();
    for s in samples {
        if !sample_ids.insert(s.sample_id.as_str()) {
            problems.push(format!("duplicate sample id `{}`", s.sample_id));
        }
        if s.modality != kind.modality {
            problems.push(format!(
                "sample `{}` has modality {}, dataset is {}",
                s.sample_id, s.modality, kind.modality
            ));
        }
        if !subject_set.contains(s.subject_id.as_str()) {
            problems.push(format!(
                "sample `{}` references unknown subject `{}`",
                s.sample_id, s.subject_id
            ));
        }
        if s.features.shape() != kind.input_shape.as_slice() {
            problems.push(format!(
                "sample `{}` features have shape {:?}, expected {:?}",
                s.sample_id,
                s.features.shape(),
                kind.input_shape
            ));
        }
        if !stim_ids.contains(s.stimulus_id.as_str()) {
            problems.push(format!(
                "sample `{}` references missing stimulus `{}`",
                s.sample_id, s.stimulus_id
            ));
        }
        match split_of_stimulus.get(s.stimulus_id.as_str()) {
            Some(&prev) if prev != s.split => {
                overlap.insert(s.stimulus_id.as_str());
            }
            Some(_) => {}
            None => {
                split_of_stimulus.insert(&s.stimulus_id, s.split);
            }
        }
    }
    let mut overlap: Vec<_> = overlap.into_iter().collect();
    overlap.sort_unstable();
    for id in overlap {
        problems.push(format!("stimulus `{id}` appears in both train and test splits"));
    }
    problems
}
