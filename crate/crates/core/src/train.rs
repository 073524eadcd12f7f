//! AdamW training of a modality encoder against frozen image embeddings.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{contrastive_loss, ContrastiveConfig};
use crate::dataset::{NeuralSample, PairedDataset, Split, StimulusRecord};
use crate::encoder::{Gradients, ModalityEncoder, Parameters};
use crate::error::{Error, Result};
use crate::kernel::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 1e-3,
            batch_size: 256,
            epochs: 30,
            temperature: 1.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// A learning rate of exactly zero is accepted; it freezes every parameter.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!(
                "betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            ));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        self.contrastive().validate()
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.temperature,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW update with decoupled weight decay:
///
/// ```text
/// m ← β1·m + (1−β1)·g        v ← β2·v + (1−β2)·g²
/// m̂ = m/(1−β1ᵗ)              v̂ = v/(1−β2ᵗ)
/// θ ← θ·(1 − lr·wd) − lr·m̂/(√v̂ + eps)
/// ```
///
/// Every shape is checked before any parameter is touched.
pub fn adamw_step(
    params: &mut impl Parameters,
    grads: &Gradients,
    state: &mut AdamWState,
    config: &TrainConfig,
) -> Result<()> {
    let mut problems = Vec::new();
    params.visit_params(&mut |name, t| match grads.get(name) {
        None => problems.push(format!("no gradient for `{name}`")),
        Some(g) if g.shape() != t.shape() => problems.push(format!(
            "gradient for `{name}` has shape {:?}, parameter has {:?}",
            g.shape(),
            t.shape()
        )),
        Some(_) => {}
    });
    for (name, m) in &state.moments {
        if let Some(g) = grads.get(name) {
            if m.m.shape() != g.shape() {
                problems.push(format!("optimizer state for `{name}` has shape {:?}", m.m.shape()));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::shape(problems.join("; ")));
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    let lr = config.learning_rate;
    let decay = 1.0 - lr * config.weight_decay;

    let moments = &mut state.moments;
    params.visit_params_mut(&mut |name, theta| {
        let g = grads.get(name).expect("checked above");
        let mom = moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: Tensor::zeros(theta.shape()),
            v: Tensor::zeros(theta.shape()),
        });
        let iter = theta
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(mom.m.data_mut().iter_mut().zip(mom.v.data_mut().iter_mut()));
        for ((p, &gv), (m, v)) in iter {
            *m = b1 * *m + (1.0 - b1) * gv;
            *v = b2 * *v + (1.0 - b2) * gv * gv;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p = *p * decay - lr * (m_hat / (v_hat.sqrt() + config.eps));
        }
    });
    Ok(())
}

/// Shuffles `0..num_samples` with a ChaCha8 stream selected by `epoch` and
/// chunks it into batches. The final partial batch is kept.
pub fn make_batches(num_samples: usize, batch_size: usize, epoch: u64, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..num_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Neural samples paired with the embedding of the image each one was recorded with.
#[derive(Clone, Debug)]
pub struct TrainingPairs<'a> {
    samples: Vec<&'a NeuralSample>,
    embeddings: Vec<&'a Tensor>,
}

impl<'a> TrainingPairs<'a> {
    /// Resolves every sample's stimulus id against `stimuli`.
    pub fn new(samples: Vec<&'a NeuralSample>, stimuli: &'a [StimulusRecord]) -> Result<Self> {
        let lookup: BTreeMap<&str, &Tensor> = stimuli.iter().map(|s| (s.stimulus_id.as_str(), &s.embedding)).collect();
        let embeddings = samples
            .iter()
            .map(|s| {
                lookup
                    .get(s.stimulus_id.as_str())
                    .copied()
                    .ok_or_else(|| Error::UnknownId(s.stimulus_id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, embeddings })
    }

    pub fn from_dataset(dataset: &'a PairedDataset, split: Split) -> Result<Self> {
        Self::new(dataset.split(split), dataset.stimuli())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn batch(&self, indices: &[usize]) -> Result<(Vec<&'a NeuralSample>, Tensor)> {
        let samples = indices.iter().map(|&i| self.samples[i]).collect();
        let targets: Vec<&Tensor> = indices.iter().map(|&i| self.embeddings[i]).collect();
        let d = targets[0].numel();
        let images = Tensor::stack(&targets, &[d])?;
        Ok((samples, images))
    }
}

/// Runs one epoch of shuffled mini-batch training and returns the mean loss
/// over the batches that were trained on.
///
/// Batches of a single sample are skipped: the contrastive loss of one pair is
/// identically zero and carries no gradient.
pub fn train_epoch(
    encoder: &mut ModalityEncoder,
    pairs: &TrainingPairs<'_>,
    state: &mut AdamWState,
    config: &TrainConfig,
    epoch: u64,
) -> Result<f64> {
    config.validate()?;
    let contrastive = config.contrastive();
    let mut total = 0.0;
    let mut used = 0usize;
    for batch in make_batches(pairs.len(), config.batch_size, epoch, config.seed) {
        if batch.len() < 2 {
            continue;
        }
        let (samples, images) = pairs.batch(&batch)?;
        let (z, trace) = encoder.encode_batch_traced(&samples)?;
        let out = contrastive_loss(&z, &images, &contrastive)?;
        let grads = encoder.backward_traced(&samples, &trace, &out.d_neural)?;
        adamw_step(encoder, &grads, state, config)?;
        total += out.loss;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Empty(format!(
            "no batch with at least two samples ({} samples, batch size {})",
            pairs.len(),
            config.batch_size
        )));
    }
    Ok(total / used as f64)
}

/// Mean contrastive loss over the batches `train_epoch` would use for
/// `epoch`, without updating anything. With a zero learning rate the two
/// agree exactly.
pub fn evaluation_loss(
    encoder: &ModalityEncoder,
    pairs: &TrainingPairs<'_>,
    config: &TrainConfig,
    epoch: u64,
) -> Result<f64> {
    config.validate()?;
    let contrastive = config.contrastive();
    let mut total = 0.0;
    let mut used = 0usize;
    for batch in make_batches(pairs.len(), config.batch_size, epoch, config.seed) {
        if batch.len() < 2 {
            continue;
        }
        let (samples, images) = pairs.batch(&batch)?;
        let z = encoder.encode_batch(&samples)?;
        total += contrastive_loss(&z, &images, &contrastive)?.loss;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Empty("no batch with at least two samples".into()));
    }
    Ok(total / used as f64)
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub state: AdamWState,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Trains on the dataset's train split for `config.epochs` epochs.
pub fn fit(encoder: &mut ModalityEncoder, dataset: &PairedDataset, config: &TrainConfig) -> Result<FitOutcome> {
    fit_from(encoder, dataset, config, AdamWState::new())
}

/// Like [`fit`], resuming from an existing optimizer state.
pub fn fit_from(
    encoder: &mut ModalityEncoder,
    dataset: &PairedDataset,
    config: &TrainConfig,
    mut state: AdamWState,
) -> Result<FitOutcome> {
    config.validate()?;
    if dataset.kind != *encoder.kind() {
        return Err(Error::Modality(format!(
            "dataset is {:?}, encoder is {:?}",
            dataset.kind,
            encoder.kind()
        )));
    }
    let pairs = TrainingPairs::from_dataset(dataset, Split::Train)?;
    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        loss_curve.push(train_epoch(encoder, &pairs, &mut state, config, epoch as u64)?);
    }
    Ok(FitOutcome { state, loss_curve })
}

/// Renders a loss curve as `epoch,mean_loss` CSV.
pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (epoch, loss) in curve.iter().enumerate() {
        out.push_str(&format!("{epoch},{loss}\n"));
    }
    out
}
