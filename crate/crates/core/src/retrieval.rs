//! Exact cosine top-K search over an [`ExemplarIndex`].
//!
//! A semantic embedding is a sequence of token vectors; it is mean-pooled
//! over time into a single query vector before scoring. The scan is brute
//! force: index sizes here are a few hundred records.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, mean_pool_rows, Matrix, Vector};
use crate::store::ExemplarIndex;

/// Token-level semantic embedding, `seq_len x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEmbedding(Matrix);

impl SemanticEmbedding {
    pub fn new(values: Matrix) -> Self {
        Self(values)
    }

    pub fn seq_len(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalHit {
    pub rank: usize,
    pub record_id: String,
    /// Position of the record in the index.
    pub position: usize,
    pub score: f64,
}

pub fn pool_query(e: &SemanticEmbedding) -> Vector {
    mean_pool_rows(e.values()).expect("semantic embeddings have at least one row")
}

/// Returns exactly `k` hits by descending cosine score; equal scores keep
/// index order.
pub fn top_k(index: &ExemplarIndex, query: &Vector, k: usize) -> Result<Vec<RetrievalHit>> {
    if k == 0 || k > index.len() {
        return Err(Error::InvalidK {
            k,
            count: index.len(),
        });
    }
    if query.dim() != index.dim() {
        return Err(Error::Dimension(format!(
            "query has dimension {}, index has {}",
            query.dim(),
            index.dim()
        )));
    }
    if query.norm() == 0.0 {
        return Err(Error::ZeroNorm("retrieval query".into()));
    }
    let mut scored = index
        .records()
        .iter()
        .enumerate()
        .map(|(pos, r)| cosine_similarity(query, &r.embedding).map(|s| (pos, s)))
        .collect::<Result<Vec<_>>>()?;
    // stable sort keeps ascending position among ties
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(rank, (position, score))| RetrievalHit {
            rank,
            record_id: index.records()[position].id.clone(),
            position,
            score,
        })
        .collect())
}

/// Pools `e` and searches.
pub fn retrieve(
    index: &ExemplarIndex,
    e: &SemanticEmbedding,
    k: usize,
) -> Result<Vec<RetrievalHit>> {
    top_k(index, &pool_query(e), k)
}
