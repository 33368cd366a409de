//! Exact top-k cosine retrieval over an image index.
//!
//! Entries store unit-normalized f32 embeddings (the on-disk format is f32);
//! scores are accumulated in f64. Search is exhaustive and must agree with a
//! score-all-then-sort oracle exactly, including the tie rule: descending
//! score, then ascending image id.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::encoders::{self, Modality};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::{normalize_image, patchify, PixelImage};
use crate::model::ModelBundle;
use crate::nn::Dropout;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub embedding: Vec<f32>,
}

/// Identifier-keyed store of unit-normalized image embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
}

/// Retrieval query mode: training queries concatenate context and response,
/// inference queries use the context alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrievalMode {
    ContextOnly,
    ContextAndResponse,
}

impl RetrievalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalMode::ContextOnly => "context-only",
            RetrievalMode::ContextAndResponse => "context+response",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "context-only" => Some(RetrievalMode::ContextOnly),
            "context+response" => Some(RetrievalMode::ContextAndResponse),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredId {
    pub image_id: String,
    pub score: f64,
}

/// Ranked retrieval output for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub ranked: Vec<ScoredId>,
    pub mode: RetrievalMode,
}

impl ImageIndex {
    pub fn new(dim: usize) -> Self {
        ImageIndex { dim, entries: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.iter().any(|e| e.id == id)
    }

    /// Adds an entry, normalizing the embedding to unit length.
    pub fn insert(&mut self, id: String, embedding: Vec<f32>) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(Error::Dim {
                op: "index_insert",
                detail: format!("embedding length {} does not match dim {}", embedding.len(), self.dim),
            });
        }
        if self.contains(&id) {
            return Err(Error::Ingestion(format!("duplicate image id '{id}'")));
        }
        let norm = libm::sqrtf(embedding.iter().map(|v| v * v).sum::<f32>()).max(1e-12);
        let embedding = embedding.iter().map(|v| v / norm).collect();
        self.entries.push(IndexEntry { id, embedding });
        Ok(())
    }

    /// From raw (id, embedding) pairs, preserving input order.
    pub fn from_embeddings(dim: usize, items: impl IntoIterator<Item = (String, Vec<f32>)>) -> Result<Self> {
        let mut index = ImageIndex::new(dim);
        for (id, emb) in items {
            index.insert(id, emb)?;
        }
        Ok(index)
    }

    /// From already unit-normalized embeddings, stored verbatim (the
    /// deserialization path; run [`validate_index`] afterwards).
    pub fn from_stored(
        dim: usize,
        items: impl IntoIterator<Item = (String, Vec<f32>)>,
    ) -> Result<Self> {
        let mut index = ImageIndex::new(dim);
        for (id, embedding) in items {
            if embedding.len() != dim {
                return Err(Error::Dim {
                    op: "index_insert",
                    detail: format!(
                        "embedding length {} does not match dim {dim}",
                        embedding.len()
                    ),
                });
            }
            if index.contains(&id) {
                return Err(Error::Ingestion(format!("duplicate image id '{id}'")));
            }
            index.entries.push(IndexEntry { id, embedding });
        }
        Ok(index)
    }
}

/// Embeds one image into the shared space with the trained stage-1
/// parameters: encode, pool position 0, project, then f32-quantize.
pub fn embed_image<T: Scalar>(bundle: &ModelBundle<T>, image: &PixelImage) -> Result<Vec<f32>> {
    let pixels = normalize_image::<T>(image);
    let grid = patchify(&pixels, bundle.cfg.patch_size)?;
    let mut g = Graph::new();
    let state = encoders::encode_image(&mut g, bundle, &grid, &mut Dropout::off())?;
    let pooled = encoders::pool_and_project(&mut g, bundle, state, Modality::Image)?;
    Ok(g.value(pooled.node).data().iter().map(|v| v.to_f64() as f32).collect())
}

/// Embeds query text into the shared space.
pub fn embed_text<T: Scalar>(bundle: &ModelBundle<T>, ids: &[u32]) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let text = encoders::encode_text(&mut g, bundle, ids, &mut Dropout::off())?;
    let pooled = encoders::pool_and_project(&mut g, bundle, text.node, Modality::Text)?;
    Ok(g.value(pooled.node).data().iter().map(|v| v.to_f64() as f32).collect())
}

/// Encodes every image and stores its unit-normalized embedding, in input
/// order. Duplicate ids are an ingestion error naming the id.
pub fn build_index<'a, T: Scalar>(
    images: impl IntoIterator<Item = (&'a str, &'a PixelImage)>,
    bundle: &ModelBundle<T>,
) -> Result<ImageIndex> {
    let mut index = ImageIndex::new(bundle.cfg.d_shared);
    for (id, image) in images {
        let emb = embed_image(bundle, image)?;
        index.insert(id.into(), emb)?;
    }
    Ok(index)
}

fn score(entry: &[f32], query_unit: &[f64]) -> f64 {
    entry.iter().zip(query_unit).map(|(e, q)| *e as f64 * q).sum()
}

fn unit_query(query: &[f32]) -> Vec<f64> {
    let norm = libm::sqrt(query.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>()).max(1e-12);
    query.iter().map(|v| *v as f64 / norm).collect()
}

/// Exact top-k by cosine score against a raw query embedding. Ties break by
/// ascending image id; `k` larger than the index is a bounded-index error.
pub fn retrieve_top_k_by_embedding(
    index: &ImageIndex,
    query: &[f32],
    k: usize,
) -> Result<Vec<ScoredId>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if k > index.len() {
        return Err(Error::BoundedIndex { k, size: index.len() });
    }
    let q = unit_query(query);
    // Selection sort over a bounded candidate list keeps this O(n*k) without
    // allocating all scores when k is small; exactness is what matters.
    let mut top: Vec<(f64, &str)> = Vec::with_capacity(k + 1);
    for e in &index.entries {
        let s = score(&e.embedding, &q);
        let pos = top
            .binary_search_by(|(ts, tid)| {
                s.partial_cmp(ts)
                    .expect("finite scores")
                    .then_with(|| tid.cmp(&e.id.as_str()))
            })
            .unwrap_or_else(|p| p);
        if pos < k {
            top.insert(pos, (s, &e.id));
            if top.len() > k {
                top.pop();
            }
        }
    }
    Ok(top
        .into_iter()
        .map(|(s, id)| ScoredId { image_id: id.into(), score: s })
        .collect())
}

/// Top-k most relevant images for a tokenized query text.
pub fn retrieve_top_k<T: Scalar>(
    index: &ImageIndex,
    bundle: &ModelBundle<T>,
    query_ids: &[u32],
    k: usize,
    mode: RetrievalMode,
) -> Result<RetrievalResult> {
    let query = embed_text(bundle, query_ids)?;
    let ranked = retrieve_top_k_by_embedding(index, &query, k)?;
    Ok(RetrievalResult { ranked, mode })
}

/// Diagnostic softmax over retrieval scores (the ranked list itself stays
/// deterministic top-k).
pub fn softmax_scores(ranked: &[ScoredId]) -> Vec<f64> {
    let mx = ranked.iter().map(|s| s.score).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = ranked.iter().map(|s| libm::exp(s.score - mx)).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}

/// A dialogue example as it flows through annotation and training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueExample {
    pub context: Vec<String>,
    pub response: String,
    pub image_ids: Option<Vec<String>>,
    pub retrieval_mode: Option<String>,
}

/// Attaches top-k image ids to every example, once, before stage-2 training.
/// Errors carry the 1-based example number.
pub fn precompute_corpus_retrievals<T: Scalar>(
    index: &ImageIndex,
    bundle: &ModelBundle<T>,
    tokenizer: &crate::tokenizer::Tokenizer,
    corpus: &[DialogueExample],
    k: usize,
    mode: RetrievalMode,
) -> Result<Vec<DialogueExample>> {
    let mut out = Vec::with_capacity(corpus.len());
    for (i, ex) in corpus.iter().enumerate() {
        let ids = match mode {
            RetrievalMode::ContextOnly => tokenizer.encode_turns(&ex.context),
            RetrievalMode::ContextAndResponse => {
                let mut turns = ex.context.clone();
                turns.push(ex.response.clone());
                tokenizer.encode_turns(&turns)
            }
        };
        let result = retrieve_top_k(index, bundle, &ids, k, mode).map_err(|e| {
            Error::Ingestion(format!("example {}: {e}", i + 1))
        })?;
        let mut annotated = ex.clone();
        annotated.image_ids = Some(result.ranked.iter().map(|s| s.image_id.clone()).collect());
        annotated.retrieval_mode = Some(mode.as_str().into());
        out.push(annotated);
    }
    Ok(out)
}

/// Brute-force oracle used by tests and verification: score every entry,
/// sort by (score desc, id asc), take k.
pub fn brute_force_top_k(index: &ImageIndex, query: &[f32], k: usize) -> Result<Vec<ScoredId>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if k > index.len() {
        return Err(Error::BoundedIndex { k, size: index.len() });
    }
    let q = unit_query(query);
    let mut scored: Vec<(f64, &str)> =
        index.entries.iter().map(|e| (score(&e.embedding, &q), e.id.as_str())).collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).expect("finite scores").then_with(|| a.1.cmp(b.1))
    });
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(s, id)| ScoredId { image_id: id.into(), score: s })
        .collect())
}

/// Sanity pass over an index: unique ids, unit norms within 1e-6.
pub fn validate_index(index: &ImageIndex) -> Result<()> {
    let mut seen = BTreeSet::new();
    for e in &index.entries {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::Ingestion(format!("duplicate image id '{}'", e.id)));
        }
        let norm = libm::sqrt(e.embedding.iter().map(|v| (*v as f64) * (*v as f64)).sum());
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Ingestion(format!(
                "embedding for '{}' has norm {norm}, expected 1",
                e.id
            )));
        }
    }
    Ok(())
}
