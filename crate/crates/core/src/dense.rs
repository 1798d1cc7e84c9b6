//! Exact inner-product search over precomputed embeddings.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::run::{top_k, ScoredDoc};

/// One line of a chunk vector file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VectorRecord {
    pub chunk_id: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryVector {
    pub query_id: String,
    pub vector: Vec<f64>,
}

/// Row-major embedding matrix keyed by chunk id.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f64>,
}

impl VectorStore {
    pub fn from_records(records: Vec<VectorRecord>) -> Result<Self> {
        let Some(first) = records.first() else {
            return Err(Error::EmptyVectorStore);
        };
        let dim = first.vector.len();
        if dim == 0 {
            return Err(Error::Dimension {
                id: first.chunk_id.clone(),
                expected: 1,
                found: 0,
            });
        }
        let mut seen = HashSet::with_capacity(records.len());
        let mut ids = Vec::with_capacity(records.len());
        let mut data = Vec::with_capacity(records.len() * dim);
        for r in records {
            if r.vector.len() != dim {
                return Err(Error::Dimension {
                    id: r.chunk_id,
                    expected: dim,
                    found: r.vector.len(),
                });
            }
            if !seen.insert(r.chunk_id.clone()) {
                return Err(Error::ChunkCollision(r.chunk_id));
            }
            ids.push(r.chunk_id);
            data.extend_from_slice(&r.vector);
        }
        Ok(VectorStore { dim, ids, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Top `min(k, len)` chunks by dot product with `query`. No score cutoff.
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<ScoredDoc>> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::Dimension {
                id: "query".into(),
                expected: self.dim,
                found: query.len(),
            });
        }
        let candidates = self
            .data
            .chunks_exact(self.dim)
            .zip(&self.ids)
            .map(|(v, id)| (id.as_str(), dot(v, query)))
            .collect();
        Ok(top_k(candidates, k))
    }
}

pub fn dense_search(store: &VectorStore, q: &QueryVector, k: usize) -> Result<Vec<ScoredDoc>> {
    store.search(&q.vector, k).map_err(|e| match e {
        Error::Dimension {
            expected, found, ..
        } => Error::Dimension {
            id: q.query_id.clone(),
            expected,
            found,
        },
        other => other,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn load_vectors(path: &Path) -> Result<VectorStore> {
    VectorStore::from_records(io::read_jsonl(path)?)
}

pub fn load_query_vectors(path: &Path) -> Result<Vec<QueryVector>> {
    io::read_jsonl(path)
}
