//! Retrieval evaluation: top-k class accuracy, two-way accuracy, chance
//! baselines and normalized conversion accuracy.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::contrastive::l2_normalize;
use crate::error::{Error, Result};
use crate::kernel::{dot, Tensor};
use crate::retrieval::RankedHits;

/// How a metric was computed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    /// `"exhaustive"` for two-way metrics (every distractor is tried).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distractors: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    /// Number of queries (top-k) or two-way trials.
    pub count: usize,
    pub protocol: Protocol,
}

/// Fraction of queries whose first `k` hits contain an item of the query's class.
pub fn topk_class_accuracy(
    hits: &[RankedHits],
    query_classes: &[&str],
    class_of: &HashMap<String, String>,
    k: usize,
) -> Result<MetricReport> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if hits.len() != query_classes.len() {
        return Err(Error::shape(format!(
            "{} hit lists for {} query labels",
            hits.len(),
            query_classes.len()
        )));
    }
    if hits.is_empty() {
        return Err(Error::Empty("top-k accuracy over zero queries".into()));
    }
    let mut correct = 0usize;
    for (ranked, &class) in hits.iter().zip(query_classes) {
        let mut found = false;
        for hit in ranked.hits.iter().take(k) {
            let label = class_of
                .get(&hit.id)
                .ok_or_else(|| Error::UnknownId(format!("{} has no class label", hit.id)))?;
            found |= label == class;
        }
        correct += found as usize;
    }
    Ok(MetricReport {
        metric: format!("top{k}_accuracy"),
        value: correct as f64 / hits.len() as f64,
        count: hits.len(),
        protocol: Protocol {
            k: Some(k),
            ..Protocol::default()
        },
    })
}

/// Exhaustive two-way accuracy.
///
/// For each query `q` and each pool row `d` that differs from `truth[q]`, the
/// trial succeeds iff `cos(pred_q, truth_q) > cos(pred_q, d)`; ties fail. Pool
/// rows exactly equal to the query's ground truth are not distractors for that
/// query.
pub fn two_way_accuracy(predicted: &Tensor, truth: &Tensor, pool: &Tensor) -> Result<MetricReport> {
    let (q, d) = predicted.dims2()?;
    if truth.shape() != [q, d] {
        return Err(Error::shape(format!(
            "predictions {:?} and ground truth {:?} differ in shape",
            predicted.shape(),
            truth.shape()
        )));
    }
    let (m, pd) = pool.dims2()?;
    if pd != d {
        return Err(Error::shape(format!("distractor width {pd}, embeddings {d}")));
    }
    if q == 0 {
        return Err(Error::Empty("two-way accuracy over zero queries".into()));
    }
    if m == 0 {
        return Err(Error::Empty("distractor pool is empty".into()));
    }
    let pred_u = l2_normalize(predicted)?;
    let truth_u = l2_normalize(truth)?;
    let pool_u = l2_normalize(pool)?;

    let mut trials = 0usize;
    let mut wins = 0usize;
    for i in 0..q {
        let p = pred_u.row(i);
        let target = dot(p, truth_u.row(i));
        for j in 0..m {
            if pool.row(j) == truth.row(i) {
                continue;
            }
            trials += 1;
            wins += (target > dot(p, pool_u.row(j))) as usize;
        }
    }
    if trials == 0 {
        return Err(Error::Empty("every distractor coincides with a ground truth".into()));
    }
    Ok(MetricReport {
        metric: "two_way_accuracy".into(),
        value: wins as f64 / trials as f64,
        count: trials,
        protocol: Protocol {
            distractors: Some("exhaustive".into()),
            ..Protocol::default()
        },
    })
}

/// Accuracy of uniform-random retrieval, `k / num_classes` clipped to 1.
pub fn chance_baseline(num_classes: usize, k: usize) -> Result<f64> {
    if num_classes == 0 {
        return Err(Error::Config("chance baseline needs at least one class".into()));
    }
    Ok((k as f64 / num_classes as f64).min(1.0))
}

/// Conversion two-way accuracy divided by the target modality's decoding
/// two-way accuracy. Values above 1 are reported as they are.
pub fn normalized_conversion_accuracy(conversion: f64, target_decoding: f64) -> Result<f64> {
    if target_decoding <= 0.0 {
        return Err(Error::Config(format!(
            "normalization denominator must be positive, got {target_decoding}"
        )));
    }
    Ok(conversion / target_decoding)
}
