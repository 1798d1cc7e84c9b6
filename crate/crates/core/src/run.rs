//! Ranked result lists and the TREC run format.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusId;
use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub chunk_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Ordering used by every ranked list: higher score first, then ascending chunk id.
pub fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

/// Keeps the best `k` of `candidates` and assigns ranks 1..=k.
pub fn top_k(candidates: Vec<(&str, f64)>, k: usize) -> Vec<ScoredDoc> {
    let mut candidates = candidates;
    let cmp = |a: &(&str, f64), b: &(&str, f64)| rank_order(a.1, a.0, b.1, b.0);
    if candidates.len() > k && k > 0 {
        candidates.select_nth_unstable_by(k - 1, cmp);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(cmp);
    candidates.truncate(k);
    candidates
        .into_iter()
        .enumerate()
        .map(|(i, (id, score))| ScoredDoc {
            chunk_id: id.to_string(),
            score,
            rank: i + 1,
        })
        .collect()
}

/// One retrieval system's ranked lists, keyed by query id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalRun {
    pub system_id: String,
    pub corpus_id: Option<CorpusId>,
    pub results: BTreeMap<String, Vec<ScoredDoc>>,
}

impl RetrievalRun {
    pub fn new(system_id: impl Into<String>, corpus_id: Option<CorpusId>) -> Self {
        RetrievalRun {
            system_id: system_id.into(),
            corpus_id,
            results: BTreeMap::new(),
        }
    }

    pub fn ranked_ids(&self, query_id: &str) -> Vec<&str> {
        self.results
            .get(query_id)
            .map(|l| l.iter().map(|d| d.chunk_id.as_str()).collect())
            .unwrap_or_default()
    }

    /// `<query_id> Q0 <chunk_id> <rank> <score> <system_id>`, queries in id order.
    pub fn to_trec(&self) -> String {
        let mut out = String::new();
        for (qid, docs) in &self.results {
            for d in docs {
                writeln!(
                    out,
                    "{qid} Q0 {} {} {:.6} {}",
                    d.chunk_id, d.rank, d.score, self.system_id
                )
                .unwrap();
            }
        }
        out
    }

    pub fn write_trec(&self, path: &Path) -> Result<()> {
        io::write_string(path, &self.to_trec())
    }

    pub fn parse_trec(text: &str, origin: &Path) -> Result<Self> {
        let mut run = RetrievalRun::default();
        let mut seen: HashSet<(String, String)> = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [qid, _q0, chunk_id, rank, score, system] = fields[..] else {
                return Err(Error::parse(origin, i + 1, "expected 6 fields"));
            };
            let rank: usize = rank
                .parse()
                .map_err(|e| Error::parse(origin, i + 1, format!("rank: {e}")))?;
            let score: f64 = score
                .parse()
                .map_err(|e| Error::parse(origin, i + 1, format!("score: {e}")))?;
            if run.system_id.is_empty() {
                run.system_id = system.to_string();
            }
            if !seen.insert((qid.to_string(), chunk_id.to_string())) {
                return Err(Error::parse(
                    origin,
                    i + 1,
                    format!("duplicate {chunk_id} for query {qid}"),
                ));
            }
            run.results
                .entry(qid.to_string())
                .or_default()
                .push(ScoredDoc {
                    chunk_id: chunk_id.to_string(),
                    score,
                    rank,
                });
        }
        for docs in run.results.values_mut() {
            docs.sort_by_key(|d| d.rank);
        }
        Ok(run)
    }

    pub fn read_trec(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        Self::parse_trec(&text, path)
    }
}
