//! Decoding, encoding and conversion experiments on the test split, with
//! JSON-serializable summaries and plain-text tables.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{NeuralSample, PairedDataset, Split, StimulusRecord};
use crate::encoder::{Modality, ModalityEncoder};
use crate::error::{Error, Result};
use crate::kernel::Tensor;
use crate::metrics::{
    chance_baseline, normalized_conversion_accuracy, topk_class_accuracy, two_way_accuracy, MetricReport,
};
use crate::retrieval::{build_index, build_neural_index, PayloadKind, RankedHits, RetrievalIndex};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    /// Cutoffs for top-k class accuracy. Empty disables class metrics.
    pub ks: Vec<usize>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { ks: vec![1, 5] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeSummary {
    pub modality: Modality,
    pub retrieval_size: usize,
    pub num_classes: Option<usize>,
    pub reports: Vec<MetricReport>,
}

impl DecodeSummary {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.reports.iter().find(|r| r.metric == name).map(|r| r.value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodeSummary {
    pub modality: Modality,
    pub retrieval_size: usize,
    pub two_way: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionSummary {
    pub source: Modality,
    pub target: Modality,
    pub two_way: MetricReport,
    /// Fraction of source samples whose rank-1 target shares their stimulus.
    pub stimulus_match: f64,
    /// `two_way` divided by the target modality's decoding two-way accuracy.
    pub normalized: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub decoding: Vec<DecodeSummary>,
    pub encoding: Vec<EncodeSummary>,
    pub conversion: Vec<ConversionSummary>,
}

fn stimulus_matrix(stimuli: &[&StimulusRecord]) -> Result<Tensor> {
    let rows: Vec<&Tensor> = stimuli.iter().map(|s| &s.embedding).collect();
    let d = rows.first().map(|t| t.numel()).unwrap_or(0);
    Tensor::stack(&rows, &[d])
}

fn image_index(stimuli: &[&StimulusRecord]) -> Result<RetrievalIndex> {
    let ids = stimuli.iter().map(|s| s.stimulus_id.clone()).collect();
    build_index(ids, &stimulus_matrix(stimuli)?, PayloadKind::Image)
}

fn test_split(dataset: &PairedDataset) -> Result<(Vec<&NeuralSample>, Vec<&StimulusRecord>)> {
    let samples = dataset.split(Split::Test);
    if samples.is_empty() {
        return Err(Error::Empty(format!(
            "{} dataset has no test samples",
            dataset.kind.modality
        )));
    }
    Ok((samples, dataset.split_stimuli(Split::Test)))
}

fn check_kind(encoder: &ModalityEncoder, dataset: &PairedDataset) -> Result<()> {
    if encoder.kind() != &dataset.kind {
        return Err(Error::Modality(format!(
            "encoder is {:?}, dataset is {:?}",
            encoder.kind(),
            dataset.kind
        )));
    }
    Ok(())
}

fn rank_rows(index: &RetrievalIndex, queries: &Tensor, k: usize) -> Result<Vec<RankedHits>> {
    (0..queries.shape()[0])
        .map(|i| index.top_k(&queries.index_axis0(i), k))
        .collect()
}

/// Image embedding of each query's rank-1 hit. `stimulus_of` maps a hit id to
/// the stimulus behind it.
fn top1_embeddings(hits: &[RankedHits], stimulus_of: &HashMap<&str, &str>, dataset: &PairedDataset) -> Result<Tensor> {
    let rows = hits
        .iter()
        .map(|h| {
            let id = h.top().expect("k ≥ 1").id.as_str();
            let stim = *stimulus_of.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
            dataset
                .stimulus(stim)
                .map(|s| &s.embedding)
                .ok_or_else(|| Error::UnknownId(stim.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&rows, &[dataset.embed_dim])
}

fn truth_of(samples: &[&NeuralSample], dataset: &PairedDataset) -> Result<Tensor> {
    let rows: Vec<&Tensor> = samples
        .iter()
        .map(|s| &dataset.stimulus(&s.stimulus_id).expect("validated dataset").embedding)
        .collect();
    Tensor::stack(&rows, &[dataset.embed_dim])
}

/// Neural → image retrieval over the test stimuli.
///
/// Reports top-k class accuracy for each `k` in the protocol and the two-way
/// accuracy of the rank-1 retrieved image against the true stimulus, with every
/// other test image as a distractor.
pub fn evaluate_decode(
    encoder: &ModalityEncoder,
    dataset: &PairedDataset,
    protocol: &EvalProtocol,
) -> Result<DecodeSummary> {
    check_kind(encoder, dataset)?;
    let (samples, stimuli) = test_split(dataset)?;
    if !protocol.ks.is_empty() && !stimuli.iter().all(|s| s.class_label.is_some()) {
        return Err(Error::Config(
            "top-k class accuracy requested but test stimuli lack class labels".into(),
        ));
    }
    let index = image_index(&stimuli)?;
    let max_k = protocol.ks.iter().copied().max().unwrap_or(1);
    let z = encoder.encode_batch(&samples)?;
    let hits = rank_rows(&index, &z, max_k)?;

    let mut reports = Vec::new();
    let mut num_classes = None;
    if !protocol.ks.is_empty() {
        let class_of: HashMap<String, String> = stimuli
            .iter()
            .map(|s| (s.stimulus_id.clone(), s.class_label.clone().unwrap()))
            .collect();
        num_classes = Some(class_of.values().collect::<BTreeSet<_>>().len());
        let query_classes: Vec<&str> = samples.iter().map(|s| class_of[&s.stimulus_id].as_str()).collect();
        for &k in &protocol.ks {
            reports.push(topk_class_accuracy(&hits, &query_classes, &class_of, k)?);
        }
    }
    let same: HashMap<&str, &str> = stimuli
        .iter()
        .map(|s| (s.stimulus_id.as_str(), s.stimulus_id.as_str()))
        .collect();
    let predicted = top1_embeddings(&hits, &same, dataset)?;
    let truth = truth_of(&samples, dataset)?;
    reports.push(two_way_accuracy(&predicted, &truth, &stimulus_matrix(&stimuli)?)?);
    Ok(DecodeSummary {
        modality: dataset.kind.modality,
        retrieval_size: index.len(),
        num_classes,
        reports,
    })
}

/// Image → neural retrieval: each test image queries the test samples, and
/// the image behind the rank-1 sample is scored against the query image.
pub fn evaluate_encode(encoder: &ModalityEncoder, dataset: &PairedDataset) -> Result<EncodeSummary> {
    check_kind(encoder, dataset)?;
    let (samples, stimuli) = test_split(dataset)?;
    let index = build_neural_index(encoder, &samples)?;
    let queries = stimulus_matrix(&stimuli)?;
    let hits = rank_rows(&index, &queries, 1)?;
    let stimulus_of: HashMap<&str, &str> = samples
        .iter()
        .map(|s| (s.sample_id.as_str(), s.stimulus_id.as_str()))
        .collect();
    let predicted = top1_embeddings(&hits, &stimulus_of, dataset)?;
    Ok(EncodeSummary {
        modality: dataset.kind.modality,
        retrieval_size: index.len(),
        two_way: two_way_accuracy(&predicted, &queries, &queries)?,
    })
}

/// Source neural → target neural retrieval. The image behind the rank-1
/// target sample is scored against the source sample's image, with the source
/// test images as distractors.
pub fn evaluate_convert(
    source: (&ModalityEncoder, &PairedDataset),
    target: (&ModalityEncoder, &PairedDataset),
    target_decoding_two_way: f64,
) -> Result<ConversionSummary> {
    let (src_enc, src_ds) = source;
    let (tgt_enc, tgt_ds) = target;
    check_kind(src_enc, src_ds)?;
    check_kind(tgt_enc, tgt_ds)?;
    if src_ds.kind.modality == tgt_ds.kind.modality {
        return Err(Error::Modality(format!(
            "conversion needs two modalities, both are {}",
            src_ds.kind.modality
        )));
    }
    if src_ds.embed_dim != tgt_ds.embed_dim {
        return Err(Error::shape(format!(
            "embedding widths differ: {} vs {}",
            src_ds.embed_dim, tgt_ds.embed_dim
        )));
    }
    let (src_samples, src_stimuli) = test_split(src_ds)?;
    let (tgt_samples, _) = test_split(tgt_ds)?;
    let index = build_neural_index(tgt_enc, &tgt_samples)?;
    let z = src_enc.encode_batch(&src_samples)?;
    let hits = rank_rows(&index, &z, 1)?;

    let stimulus_of: HashMap<&str, &str> = tgt_samples
        .iter()
        .map(|s| (s.sample_id.as_str(), s.stimulus_id.as_str()))
        .collect();
    let matches = hits
        .iter()
        .zip(&src_samples)
        .filter(|(h, s)| stimulus_of[h.top().unwrap().id.as_str()] == s.stimulus_id)
        .count();
    let predicted = top1_embeddings(&hits, &stimulus_of, tgt_ds)?;
    let truth = truth_of(&src_samples, src_ds)?;
    let two_way = two_way_accuracy(&predicted, &truth, &stimulus_matrix(&src_stimuli)?)?;
    let normalized = normalized_conversion_accuracy(two_way.value, target_decoding_two_way)?;
    Ok(ConversionSummary {
        source: src_ds.kind.modality,
        target: tgt_ds.kind.modality,
        two_way,
        stimulus_match: matches as f64 / src_samples.len() as f64,
        normalized,
    })
}

/// Runs decoding and encoding for every modality and conversion for every
/// ordered pair of distinct modalities.
pub fn evaluate_all(pairs: &[(&ModalityEncoder, &PairedDataset)], protocol: &EvalProtocol) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::default();
    for &(enc, ds) in pairs {
        report.decoding.push(evaluate_decode(enc, ds, protocol)?);
        report.encoding.push(evaluate_encode(enc, ds)?);
    }
    for (i, &src) in pairs.iter().enumerate() {
        for (j, &tgt) in pairs.iter().enumerate() {
            if i == j {
                continue;
            }
            let denominator = report.decoding[j]
                .metric("two_way_accuracy")
                .expect("decoding always reports two-way accuracy");
            report.conversion.push(evaluate_convert(src, tgt, denominator)?);
        }
    }
    Ok(report)
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

fn render(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(
                |(i, (c, &w))| {
                    if i == 0 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                },
            )
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(rule.iter().map(String::as_str).collect(), &mut out);
    for row in rows {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

/// Decoding results with chance baselines, in percent.
pub fn decoding_table(rows: &[DecodeSummary]) -> String {
    let header = [
        "module",
        "top1 (%)",
        "top5 (%)",
        "2-way (%)",
        "chance top1 (%)",
        "chance top5 (%)",
        "retrieval size",
        "classes",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let chance = |k| r.num_classes.and_then(|n| chance_baseline(n, k).ok());
            vec![
                r.modality.to_string().to_uppercase(),
                pct(r.metric("top1_accuracy")),
                pct(r.metric("top5_accuracy")),
                pct(r.metric("two_way_accuracy")),
                pct(chance(1)),
                pct(chance(5)),
                r.retrieval_size.to_string(),
                r.num_classes.map(|n| n.to_string()).unwrap_or_else(|| "-".into()),
            ]
        })
        .collect();
    render(&header, &body)
}

pub fn encoding_table(rows: &[EncodeSummary]) -> String {
    let header = ["module", "2-way (%)", "retrieval size"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.modality.to_string().to_uppercase(),
                pct(Some(r.two_way.value)),
                r.retrieval_size.to_string(),
            ]
        })
        .collect();
    render(&header, &body)
}

pub fn conversion_table(rows: &[ConversionSummary]) -> String {
    let header = ["conversion", "2-way (%)", "normalized 2-way"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!(
                    "{} -> {}",
                    r.source.to_string().to_uppercase(),
                    r.target.to_string().to_uppercase()
                ),
                pct(Some(r.two_way.value)),
                format!("{:.4}", r.normalized),
            ]
        })
        .collect();
    render(&header, &body)
}

impl ExperimentReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (title, table, empty) in [
            ("Decoding", decoding_table(&self.decoding), self.decoding.is_empty()),
            ("Encoding", encoding_table(&self.encoding), self.encoding.is_empty()),
            (
                "Conversion",
                conversion_table(&self.conversion),
                self.conversion.is_empty(),
            ),
        ] {
            if empty {
                continue;
            }
            if !out.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "{title}\n{table}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{generate_synthetic, MapFamily, SyntheticConfig, SyntheticModality};
    use crate::encoder::{init_encoder, ArchConfig, ModalityKind};

    fn identity_setup() -> (Vec<ModalityEncoder>, Vec<PairedDataset>) {
        let cfg = SyntheticConfig {
            num_stimuli: 30,
            num_test: 12,
            num_classes: 6,
            embed_dim: 4,
            noise_std: 0.0,
            map: MapFamily::Identity,
            seed: 3,
            modalities: vec![
                SyntheticModality {
                    kind: ModalityKind::fmri(4).unwrap(),
                    num_subjects: 2,
                },
                SyntheticModality {
                    kind: ModalityKind::meg(4, 1).unwrap(),
                    num_subjects: 2,
                },
            ],
        };
        let data = generate_synthetic(&cfg).unwrap();
        let encoders = data
            .datasets
            .iter()
            .map(|ds| identity_encoder(&ds.kind, &ds.subjects))
            .collect();
        (encoders, data.datasets)
    }

    /// An encoder that returns its flattened input unchanged.
    fn identity_encoder(kind: &ModalityKind, subjects: &[String]) -> ModalityEncoder {
        let d = kind.flat_len();
        let arch = ArchConfig {
            embed_dim: d,
            aligned_width: kind.input_shape[0],
            layers: if kind.modality.is_temporal() {
                vec![crate::encoder::LayerSpec::GlobalMeanPool]
            } else {
                vec![crate::encoder::LayerSpec::Linear {
                    in_features: d,
                    out_features: d,
                }]
            },
        };
        let mut enc = init_encoder(kind, subjects, &arch, 0).unwrap();
        let names = crate::encoder::Parameters::param_names(&enc);
        for name in names {
            let shape = enc.param(&name).unwrap().shape().to_vec();
            let value = if shape.len() == 2 {
                Tensor::eye(shape[0])
            } else {
                Tensor::zeros(&shape)
            };
            enc.set_param(&name, value).unwrap();
        }
        enc
    }

    #[test]
    fn identity_encoders_score_perfectly() {
        let (encs, dss) = identity_setup();
        let pairs: Vec<_> = encs.iter().zip(&dss).collect();
        let report = evaluate_all(&pairs, &EvalProtocol::default()).unwrap();
        for d in &report.decoding {
            assert_eq!(d.metric("top1_accuracy"), Some(1.0));
            assert_eq!(d.metric("top5_accuracy"), Some(1.0));
            assert_eq!(d.metric("two_way_accuracy"), Some(1.0));
            assert_eq!(d.retrieval_size, 12);
            assert_eq!(d.num_classes, Some(6));
        }
        for e in &report.encoding {
            assert_eq!(e.two_way.value, 1.0);
        }
        assert_eq!(report.conversion.len(), 2);
        for c in &report.conversion {
            assert_eq!(c.stimulus_match, 1.0);
            assert_eq!(c.two_way.value, 1.0);
            assert_eq!(c.normalized, 1.0);
        }
        let table = report.to_table();
        assert!(table.contains("FMRI"));
        assert!(table.contains("FMRI -> MEG"));
    }

    #[test]
    fn decode_report_shape() {
        let (encs, dss) = identity_setup();
        let d = evaluate_decode(&encs[0], &dss[0], &EvalProtocol::default()).unwrap();
        let names: Vec<&str> = d.reports.iter().map(|r| r.metric.as_str()).collect();
        assert_eq!(names, ["top1_accuracy", "top5_accuracy", "two_way_accuracy"]);
        assert_eq!(d.reports[0].count, 24);
        // 24 queries, 11 distractors each
        assert_eq!(d.reports[2].count, 24 * 11);
    }

    #[test]
    fn mismatched_encoder_is_rejected() {
        let (encs, dss) = identity_setup();
        assert!(evaluate_decode(&encs[1], &dss[0], &EvalProtocol::default()).is_err());
        assert!(evaluate_convert((&encs[0], &dss[0]), (&encs[0], &dss[0]), 1.0).is_err());
    }

    #[test]
    fn decoding_table_layout() {
        let (encs, dss) = identity_setup();
        let d = evaluate_decode(&encs[0], &dss[0], &EvalProtocol::default()).unwrap();
        let table = decoding_table(&[d]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("module"));
        assert!(lines[2].contains("100.00"));
        assert!(lines[2].contains("16.67"));
    }
}
