//! Graded relevance labels and the TREC qrels format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QrelLabel {
    pub grade: u8,
    /// Raw judgments per grade 0..=3; all zero when read from a qrels file.
    pub raw_counts: [u32; 4],
}

/// Aggregated grade per (query, chunk), sorted by query id then chunk id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    labels: BTreeMap<String, BTreeMap<String, QrelLabel>>,
}

/// Relevant chunk ids per query.
pub type BinaryQrels = BTreeMap<String, BTreeSet<String>>;

impl Qrels {
    pub fn insert(&mut self, query_id: &str, chunk_id: &str, label: QrelLabel) {
        self.labels
            .entry(query_id.to_string())
            .or_default()
            .insert(chunk_id.to_string(), label);
    }

    pub fn grade(&self, query_id: &str, chunk_id: &str) -> Option<u8> {
        self.labels.get(query_id)?.get(chunk_id).map(|l| l.grade)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.labels.keys().map(String::as_str)
    }

    pub fn labels(&self, query_id: &str) -> impl Iterator<Item = (&str, &QrelLabel)> {
        self.labels
            .get(query_id)
            .into_iter()
            .flatten()
            .map(|(c, l)| (c.as_str(), l))
    }

    pub fn len(&self) -> usize {
        self.labels.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Count of pairs per grade, index = grade.
    pub fn distribution(&self) -> [usize; 4] {
        let mut d = [0; 4];
        for l in self.labels.values().flat_map(BTreeMap::values) {
            d[l.grade as usize] += 1;
        }
        d
    }

    /// A pair is relevant iff its grade is at least `threshold`.
    pub fn binarize(&self, threshold: u8) -> BinaryQrels {
        self.labels
            .iter()
            .map(|(q, chunks)| {
                let rel = chunks
                    .iter()
                    .filter(|(_, l)| l.grade >= threshold)
                    .map(|(c, _)| c.clone())
                    .collect();
                (q.clone(), rel)
            })
            .collect()
    }

    /// `<query_id> 0 <chunk_id> <grade>` per line.
    pub fn to_trec(&self) -> String {
        let mut out = String::new();
        for (q, chunks) in &self.labels {
            for (c, l) in chunks {
                writeln!(out, "{q} 0 {c} {}", l.grade).unwrap();
            }
        }
        out
    }

    pub fn write_trec(&self, path: &Path) -> Result<()> {
        io::write_string(path, &self.to_trec())
    }

    pub fn parse_trec(text: &str, origin: &Path) -> Result<Self> {
        let mut q = Qrels::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [qid, _, cid, grade] = fields[..] else {
                return Err(Error::parse(origin, i + 1, "expected 4 fields"));
            };
            let grade: i64 = grade
                .parse()
                .map_err(|e| Error::parse(origin, i + 1, format!("grade: {e}")))?;
            if !(0..=3).contains(&grade) {
                return Err(Error::parse(origin, i + 1, Error::GradeOutOfRange(grade)));
            }
            q.insert(
                qid,
                cid,
                QrelLabel {
                    grade: grade as u8,
                    raw_counts: [0; 4],
                },
            );
        }
        Ok(q)
    }

    pub fn read_trec(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        Self::parse_trec(&text, path)
    }
}

/// Validates a binarization threshold (1..=3).
pub fn check_threshold(threshold: u8) -> Result<u8> {
    if (1..=3).contains(&threshold) {
        Ok(threshold)
    } else {
        Err(Error::Config(format!(
            "threshold must be in 1..=3, got {threshold}"
        )))
    }
}
