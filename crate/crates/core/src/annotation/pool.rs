use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::io;
use crate::run::RetrievalRun;

pub const DEFAULT_POOL_DEPTH: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolDoc {
    pub chunk_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// One line of a pool file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub query_id: String,
    pub docs: Vec<PoolDoc>,
}

/// Per-query judgment candidates, ordered by first appearance across runs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Pool {
    queries: BTreeMap<String, Vec<PoolDoc>>,
}

impl Pool {
    pub fn queries(&self) -> impl Iterator<Item = (&str, &[PoolDoc])> {
        self.queries.iter().map(|(q, d)| (q.as_str(), d.as_slice()))
    }

    pub fn docs(&self, query_id: &str) -> &[PoolDoc] {
        self.queries.get(query_id).map_or(&[], Vec::as_slice)
    }

    pub fn chunk_ids(&self, query_id: &str) -> Vec<&str> {
        self.docs(query_id)
            .iter()
            .map(|d| d.chunk_id.as_str())
            .collect()
    }

    pub fn query_count(&self) -> usize {
        self.queries.len()
    }

    /// Number of (query, chunk) pairs to judge.
    pub fn pair_count(&self) -> usize {
        self.queries.values().map(Vec::len).sum()
    }

    /// Fills in chunk texts from the given corpora. Returns the number of
    /// pooled chunks that none of them contain.
    pub fn attach_texts(&mut self, corpora: &[Corpus]) -> usize {
        let lookup: HashMap<&str, &str> = corpora
            .iter()
            .flat_map(|c| c.chunks())
            .map(|c| (c.chunk_id.as_str(), c.text.as_str()))
            .collect();
        let mut missing = 0;
        for doc in self.queries.values_mut().flatten() {
            match lookup.get(doc.chunk_id.as_str()) {
                Some(t) => doc.text = Some(t.to_string()),
                None => missing += 1,
            }
        }
        missing
    }

    pub fn entries(&self) -> Vec<PoolEntry> {
        self.queries
            .iter()
            .map(|(q, docs)| PoolEntry {
                query_id: q.clone(),
                docs: docs.clone(),
            })
            .collect()
    }

    pub fn from_entries(entries: Vec<PoolEntry>) -> Result<Self> {
        let mut queries = BTreeMap::new();
        for e in entries {
            let mut seen = HashSet::new();
            if let Some(d) = e.docs.iter().find(|d| !seen.insert(d.chunk_id.as_str())) {
                return Err(Error::Invalid(format!(
                    "pool for {} lists {} twice",
                    e.query_id, d.chunk_id
                )));
            }
            if queries.insert(e.query_id.clone(), e.docs).is_some() {
                return Err(Error::Invalid(format!(
                    "pool lists query {} twice",
                    e.query_id
                )));
            }
        }
        Ok(Pool { queries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_jsonl(path, &self.entries())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Pool::from_entries(io::read_jsonl(path)?)
    }
}

/// Union of each run's top-`depth` chunk ids per query, deduplicated, in
/// order of first appearance with runs visited in input order.
pub fn build_pool(runs: &[RetrievalRun], depth: usize) -> Result<Pool> {
    if runs.is_empty() {
        return Err(Error::NoRuns);
    }
    if depth == 0 {
        return Err(Error::Config("pool depth must be at least 1".into()));
    }
    let mut queries: BTreeMap<String, Vec<PoolDoc>> = BTreeMap::new();
    let mut seen: HashMap<String, HashSet<String>> = HashMap::new();
    for run in runs {
        for (qid, docs) in &run.results {
            let list = queries.entry(qid.clone()).or_default();
            let seen = seen.entry(qid.clone()).or_default();
            for d in docs.iter().take(depth) {
                if seen.insert(d.chunk_id.clone()) {
                    list.push(PoolDoc {
                        chunk_id: d.chunk_id.clone(),
                        text: None,
                    });
                }
            }
        }
    }
    let first: HashSet<&String> = runs[0].results.keys().collect();
    if runs
        .iter()
        .any(|r| r.results.keys().collect::<HashSet<_>>() != first)
    {
        log::warn!("pooled runs cover different query sets; pooling the union");
    }
    Ok(Pool { queries })
}
