use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::pool::Pool;
use crate::corpus::QuerySummaryPair;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_DOCS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDoc {
    pub chunk_id: String,
    pub text: String,
}

/// A unit of crowd work: one query, one reference summary, a few documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub query_id: String,
    pub query_text: String,
    pub reference_summary: String,
    pub docs: Vec<TaskDoc>,
}

impl AnnotationTask {
    pub fn contains(&self, chunk_id: &str) -> bool {
        self.docs.iter().any(|d| d.chunk_id == chunk_id)
    }
}

/// Splits each query's pool into consecutive tasks of at most `max_docs`
/// documents. Task ids are `<query_id>/<n>` with `n` counting from 0.
pub fn partition_tasks(
    pool: &Pool,
    pairs: &[QuerySummaryPair],
    max_docs: usize,
) -> Result<Vec<AnnotationTask>> {
    if max_docs == 0 {
        return Err(Error::Config("max_docs must be at least 1".into()));
    }
    let meta: HashMap<&str, &QuerySummaryPair> =
        pairs.iter().map(|p| (p.query_id.as_str(), p)).collect();
    let mut tasks = Vec::new();
    for (qid, docs) in pool.queries() {
        let pair = meta
            .get(qid)
            .ok_or_else(|| Error::MissingQuery(qid.to_string()))?;
        if docs.is_empty() {
            log::warn!("pool for query {qid} is empty; no tasks created");
            continue;
        }
        for (n, group) in docs.chunks(max_docs).enumerate() {
            tasks.push(AnnotationTask {
                task_id: format!("{qid}/{n}"),
                query_id: qid.to_string(),
                query_text: pair.query_text.clone(),
                reference_summary: pair.references[0].clone(),
                docs: group
                    .iter()
                    .map(|d| TaskDoc {
                        chunk_id: d.chunk_id.clone(),
                        text: d.text.clone().unwrap_or_default(),
                    })
                    .collect(),
            });
        }
    }
    Ok(tasks)
}
