//! Exact cosine-similarity retrieval in the shared embedding space.
//!
//! Decoding ranks images for a neural sample, encoding ranks neural samples for
//! an image, and conversion ranks samples of one modality for a sample of
//! another. All three are the same brute-force top-k over an index of unit rows.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::contrastive::{l2_normalize, l2_normalize_vector};
use crate::dataset::NeuralSample;
use crate::encoder::{Modality, ModalityEncoder};
use crate::error::{Error, Result};
use crate::kernel::{dot, Tensor};

/// What the rows of an index stand for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "modality")]
pub enum PayloadKind {
    Image,
    Neural(Modality),
}

#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    ids: Vec<String>,
    embeddings: Tensor,
    payload: PayloadKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

/// Hits sorted by descending cosine score, ties broken by ascending id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedHits {
    pub hits: Vec<Hit>,
}

impl RankedHits {
    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn top(&self) -> Option<&Hit> {
        self.hits.first()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.id.as_str())
    }
}

/// Normalizes rows and stores them under unique ids.
pub fn build_index(ids: Vec<String>, raw: &Tensor, payload: PayloadKind) -> Result<RetrievalIndex> {
    let (n, _) = raw.dims2()?;
    if n == 0 {
        return Err(Error::Empty("retrieval index with no entries".into()));
    }
    if ids.len() != n {
        return Err(Error::shape(format!("{} ids for {n} embedding rows", ids.len())));
    }
    let mut seen = HashSet::with_capacity(n);
    for id in &ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    Ok(RetrievalIndex {
        ids,
        embeddings: l2_normalize(raw)?,
        payload,
    })
}

/// Encodes `samples` and indexes them by sample id.
pub fn build_neural_index(encoder: &ModalityEncoder, samples: &[&NeuralSample]) -> Result<RetrievalIndex> {
    let z = encoder.encode_batch(samples)?;
    let ids = samples.iter().map(|s| s.sample_id.clone()).collect();
    build_index(ids, &z, PayloadKind::Neural(encoder.modality()))
}

/// Heap entry ordered so that the greatest element is the best hit.
#[derive(PartialEq)]
struct Ranked<'a> {
    score: f64,
    id: &'a str,
}

impl Eq for Ranked<'_> {}

impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then_with(|| other.id.cmp(self.id))
    }
}

impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Unit-norm rows, aligned with [`Self::ids`].
    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn payload(&self) -> PayloadKind {
        self.payload
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id)
    }

    /// Exact top-`k` by cosine similarity. Returns `min(k, N)` hits.
    pub fn top_k(&self, query: &Tensor, k: usize) -> Result<RankedHits> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let d = self.embeddings.shape()[1];
        if query.numel() != d {
            return Err(Error::shape(format!(
                "query has {} values, index rows have {d}",
                query.numel()
            )));
        }
        let q = l2_normalize_vector(query)?;
        let keep = k.min(self.len());

        // min-heap of the best `keep` entries seen so far
        let mut heap: BinaryHeap<Reverse<Ranked<'_>>> = BinaryHeap::with_capacity(keep + 1);
        for (row, id) in self.embeddings.rows().zip(&self.ids) {
            // + 0.0 folds −0.0 into +0.0 so exact-zero scores tie
            let entry = Ranked {
                score: dot(q.data(), row) + 0.0,
                id,
            };
            if heap.len() < keep {
                heap.push(Reverse(entry));
            } else if let Some(Reverse(worst)) = heap.peek() {
                if entry > *worst {
                    heap.pop();
                    heap.push(Reverse(entry));
                }
            }
        }
        let mut ranked: Vec<Ranked<'_>> = heap.into_iter().map(|Reverse(r)| r).collect();
        ranked.sort_by(|a, b| b.cmp(a));
        Ok(RankedHits {
            hits: ranked
                .into_iter()
                .map(|r| Hit {
                    id: r.id.to_string(),
                    score: r.score,
                })
                .collect(),
        })
    }
}

/// Ranks images for one neural sample.
pub fn decode(
    encoder: &ModalityEncoder,
    sample: &NeuralSample,
    image_index: &RetrievalIndex,
    k: usize,
) -> Result<RankedHits> {
    if image_index.payload() != PayloadKind::Image {
        return Err(Error::Modality("decoding searches an image index".into()));
    }
    image_index.top_k(&encoder.encode(sample)?, k)
}

/// Ranks the neural samples of an index for one image embedding.
pub fn encode_retrieve(image_embedding: &Tensor, neural_index: &RetrievalIndex, k: usize) -> Result<RankedHits> {
    if !matches!(neural_index.payload(), PayloadKind::Neural(_)) {
        return Err(Error::Modality("encoding searches a neural index".into()));
    }
    neural_index.top_k(image_embedding, k)
}

/// Ranks samples of another modality for one source sample.
pub fn convert(
    source: &ModalityEncoder,
    sample: &NeuralSample,
    target_index: &RetrievalIndex,
    k: usize,
) -> Result<RankedHits> {
    match target_index.payload() {
        PayloadKind::Neural(m) if m == source.modality() => Err(Error::Modality(format!(
            "conversion needs a different target modality, both are {m}"
        ))),
        PayloadKind::Neural(_) => target_index.top_k(&source.encode(sample)?, k),
        PayloadKind::Image => Err(Error::Modality("conversion searches a neural index".into())),
    }
}

/// One line of a hit report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitRow {
    pub query_id: String,
    pub rank: usize,
    pub hit_id: String,
    pub score: f64,
}

/// Flattens `(query_id, hits)` pairs into report rows with 1-based ranks.
pub fn hit_rows<'a>(results: impl IntoIterator<Item = (&'a str, &'a RankedHits)>) -> Vec<HitRow> {
    results
        .into_iter()
        .flat_map(|(query, hits)| {
            hits.hits.iter().enumerate().map(move |(i, h)| HitRow {
                query_id: query.to_string(),
                rank: i + 1,
                hit_id: h.id.clone(),
                score: h.score,
            })
        })
        .collect()
}

pub fn write_hits_csv(rows: &[HitRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}
