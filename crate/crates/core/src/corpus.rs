//! Source documents, fixed-size chunking, and the corpus variants.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::tokenize::word_spans;

pub const DEFAULT_MAX_WORDS: usize = 100;

pub const CHUNKS_FILE: &str = "chunks.jsonl";
pub const STATS_FILE: &str = "stats.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollectionTag {
    #[serde(alias = "internal")]
    Int,
    #[serde(alias = "external")]
    Ext,
}

impl CollectionTag {
    pub fn namespace(self) -> &'static str {
        match self {
            CollectionTag::Int => "int",
            CollectionTag::Ext => "ext",
        }
    }

    pub fn corpus_id(self) -> CorpusId {
        match self {
            CollectionTag::Int => CorpusId::Int,
            CollectionTag::Ext => CorpusId::Ext,
        }
    }
}

impl FromStr for CollectionTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "int" | "internal" => Ok(CollectionTag::Int),
            "ext" | "external" => Ok(CollectionTag::Ext),
            other => Err(Error::Config(format!("unknown collection tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusId {
    Int,
    Ext,
    Aug,
    Origin,
}

impl CorpusId {
    pub fn as_str(self) -> &'static str {
        match self {
            CorpusId::Int => "int",
            CorpusId::Ext => "ext",
            CorpusId::Aug => "aug",
            CorpusId::Origin => "origin",
        }
    }
}

impl fmt::Display for CorpusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorpusId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "int" => Ok(CorpusId::Int),
            "ext" => Ok(CorpusId::Ext),
            "aug" => Ok(CorpusId::Aug),
            "origin" => Ok(CorpusId::Origin),
            other => Err(Error::Config(format!("unknown corpus id {other:?}"))),
        }
    }
}

/// An origin document before chunking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceDocument {
    pub source_id: String,
    pub title: Option<String>,
    pub text: String,
    pub collection_tag: CollectionTag,
}

/// One line of a source JSON-lines file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceRecord {
    pub id: String,
    #[serde(default)]
    pub title: Option<String>,
    pub text: String,
}

impl SourceDocument {
    /// Builds a document whose id is namespaced by its collection, e.g. `int/D0701A`.
    pub fn from_record(record: SourceRecord, tag: CollectionTag) -> Self {
        let prefix = format!("{}/", tag.namespace());
        let source_id = if record.id.starts_with(&prefix) {
            record.id
        } else {
            format!("{prefix}{}", record.id)
        };
        SourceDocument {
            source_id,
            title: record.title,
            text: record.text,
            collection_tag: tag,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub source_id: String,
    pub position: usize,
    pub text: String,
    pub word_count: usize,
}

/// Splits a document into consecutive windows of `max_words` words; only the
/// last window may be shorter. Chunk text keeps the original characters of
/// the window with whitespace runs collapsed to single spaces.
pub fn chunk_source(doc: &SourceDocument, max_words: usize) -> Result<Vec<Chunk>> {
    if max_words == 0 {
        return Err(Error::Config("max_words must be at least 1".into()));
    }
    let spans = word_spans(&doc.text);
    if spans.is_empty() {
        return Err(Error::EmptySource(doc.source_id.clone()));
    }
    let chunks = spans
        .chunks(max_words)
        .enumerate()
        .map(|(position, window)| {
            let start = window[0].start;
            let end = window[window.len() - 1].end;
            Chunk {
                chunk_id: format!("{}#{}", doc.source_id, position),
                source_id: doc.source_id.clone(),
                position,
                text: collapse_whitespace(&doc.text[start..end]),
                word_count: window.len(),
            }
        })
        .collect();
    Ok(chunks)
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub corpus_id: CorpusId,
    pub doc_count: usize,
    pub total_words: usize,
}

/// An immutable, ordered collection of chunks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    corpus_id: CorpusId,
    chunks: Vec<Chunk>,
}

impl Corpus {
    /// Wraps already-built chunks, rejecting duplicate chunk ids.
    pub fn from_chunks(corpus_id: CorpusId, chunks: Vec<Chunk>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(chunks.len());
        for c in &chunks {
            if !seen.insert(c.chunk_id.as_str()) {
                return Err(Error::ChunkCollision(c.chunk_id.clone()));
            }
        }
        Ok(Corpus { corpus_id, chunks })
    }

    pub fn corpus_id(&self) -> CorpusId {
        self.corpus_id
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn doc_count(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats {
            corpus_id: self.corpus_id,
            doc_count: self.doc_count(),
            total_words: self.chunks.iter().map(|c| c.word_count).sum(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::write_jsonl(&dir.join(CHUNKS_FILE), &self.chunks)?;
        io::write_json(&dir.join(STATS_FILE), &self.stats())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let stats: CorpusStats = io::read_json(&dir.join(STATS_FILE))?;
        let chunks: Vec<Chunk> = io::read_jsonl(&dir.join(CHUNKS_FILE))?;
        if chunks.len() != stats.doc_count {
            return Err(Error::Invalid(format!(
                "{}: stats report {} chunks, found {}",
                dir.display(),
                stats.doc_count,
                chunks.len()
            )));
        }
        Corpus::from_chunks(stats.corpus_id, chunks)
    }
}

pub fn build_corpus(
    sources: &[SourceDocument],
    corpus_id: CorpusId,
    max_words: usize,
) -> Result<Corpus> {
    if sources.is_empty() {
        return Err(Error::NoSources);
    }
    let mut seen = HashSet::new();
    let mut dups: Vec<String> = Vec::new();
    for s in sources {
        if !seen.insert(s.source_id.as_str()) && !dups.contains(&s.source_id) {
            dups.push(s.source_id.clone());
        }
    }
    if !dups.is_empty() {
        return Err(Error::DuplicateSources(dups));
    }
    let per_source: Vec<Vec<Chunk>> = sources
        .par_iter()
        .map(|s| chunk_source(s, max_words))
        .collect::<Result<_>>()?;
    Ok(Corpus {
        corpus_id,
        chunks: per_source.into_iter().flatten().collect(),
    })
}

/// Concatenates two corpora into the augmented corpus, `a` first.
pub fn merge_corpora(a: &Corpus, b: &Corpus) -> Result<Corpus> {
    let mut seen: HashSet<&str> = a.chunks.iter().map(|c| c.chunk_id.as_str()).collect();
    for c in &b.chunks {
        if !seen.insert(c.chunk_id.as_str()) {
            return Err(Error::ChunkCollision(c.chunk_id.clone()));
        }
    }
    let mut chunks = Vec::with_capacity(a.doc_count() + b.doc_count());
    chunks.extend(a.chunks.iter().cloned());
    chunks.extend(b.chunks.iter().cloned());
    Ok(Corpus {
        corpus_id: CorpusId::Aug,
        chunks,
    })
}

pub fn read_sources(path: &Path, tag: CollectionTag) -> Result<Vec<SourceDocument>> {
    let records: Vec<SourceRecord> = io::read_jsonl(path)?;
    Ok(records
        .into_iter()
        .map(|r| SourceDocument::from_record(r, tag))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "valid" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySummaryPair {
    pub query_id: String,
    #[serde(rename = "query")]
    pub query_text: String,
    pub references: Vec<String>,
    pub split: Split,
}

pub fn read_pairs(path: &Path) -> Result<Vec<QuerySummaryPair>> {
    let pairs: Vec<QuerySummaryPair> = io::read_jsonl(path)?;
    let mut seen = HashSet::new();
    for (i, p) in pairs.iter().enumerate() {
        if p.references.is_empty() {
            return Err(Error::parse(
                path,
                i + 1,
                format!("{} has no references", p.query_id),
            ));
        }
        if !seen.insert(p.query_id.as_str()) {
            return Err(Error::parse(
                path,
                i + 1,
                format!("duplicate query id {}", p.query_id),
            ));
        }
    }
    Ok(pairs)
}
