//! Precision and recall at cutoffs over binarized qrels.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::qrels::BinaryQrels;
use crate::report::ReportRow;
use crate::run::RetrievalRun;

pub const DEFAULT_CUTOFFS: [usize; 2] = [10, 50];
pub const DEFAULT_THRESHOLD: u8 = 3;

fn hits_at_k(ranked: &[&str], relevant: &BTreeSet<String>, k: usize) -> usize {
    ranked
        .iter()
        .take(k)
        .filter(|id| relevant.contains(**id))
        .count()
}

/// Relevant documents in the top `k`, divided by `k` even when the list is shorter.
pub fn precision_at_k(ranked: &[&str], relevant: &BTreeSet<String>, k: usize) -> f64 {
    assert!(k >= 1, "cutoff must be at least 1");
    hits_at_k(ranked, relevant, k) as f64 / k as f64
}

pub fn recall_at_k(ranked: &[&str], relevant: &BTreeSet<String>, k: usize) -> Result<f64> {
    assert!(k >= 1, "cutoff must be at least 1");
    if relevant.is_empty() {
        return Err(Error::NoRelevant);
    }
    Ok(hits_at_k(ranked, relevant, k) as f64 / relevant.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalScores {
    pub system_id: String,
    pub corpus_id: Option<String>,
    pub cutoffs: Vec<usize>,
    /// Macro-averaged P@k per cutoff, as fractions.
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub evaluated_queries: usize,
    /// Queries present in run and qrels that have no relevant document.
    pub excluded_queries: Vec<String>,
}

impl RetrievalScores {
    /// Row with `system`, `corpus`, then all P@k columns followed by all R@k columns.
    pub fn to_row(&self) -> ReportRow {
        let mut row = ReportRow::new()
            .label("system", &self.system_id)
            .label("corpus", self.corpus_id.as_deref().unwrap_or("-"));
        for (k, p) in self.cutoffs.iter().zip(&self.precision) {
            row = row.metric(&format!("P@{k}"), *p);
        }
        for (k, r) in self.cutoffs.iter().zip(&self.recall) {
            row = row.metric(&format!("R@{k}"), *r);
        }
        row
    }
}

/// Macro-averaged P@k and R@k over the queries shared by run and qrels that
/// have at least one relevant document. Unjudged documents count as non-relevant.
pub fn evaluate_run(
    run: &RetrievalRun,
    relevant: &BinaryQrels,
    cutoffs: &[usize],
) -> Result<RetrievalScores> {
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(Error::Config(
            "cutoffs must be non-empty and at least 1".into(),
        ));
    }
    let shared: Vec<&String> = run
        .results
        .keys()
        .filter(|q| relevant.contains_key(*q))
        .collect();
    if shared.is_empty() {
        return Err(Error::NoOverlap);
    }
    let mut precision = vec![0.0; cutoffs.len()];
    let mut recall = vec![0.0; cutoffs.len()];
    let mut evaluated = 0usize;
    let mut excluded = Vec::new();
    for q in shared {
        let rel = &relevant[q];
        if rel.is_empty() {
            log::warn!("query {q} has no relevant documents; excluded from averages");
            excluded.push(q.clone());
            continue;
        }
        let ranked = run.ranked_ids(q);
        for (i, &k) in cutoffs.iter().enumerate() {
            precision[i] += precision_at_k(&ranked, rel, k);
            recall[i] += recall_at_k(&ranked, rel, k)?;
        }
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::NoRelevant);
    }
    let n = evaluated as f64;
    Ok(RetrievalScores {
        system_id: run.system_id.clone(),
        corpus_id: run.corpus_id.map(|c| c.to_string()),
        cutoffs: cutoffs.to_vec(),
        precision: precision.into_iter().map(|v| v / n).collect(),
        recall: recall.into_iter().map(|v| v / n).collect(),
        evaluated_queries: evaluated,
        excluded_queries: excluded,
    })
}
