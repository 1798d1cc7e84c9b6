//! BM25 inverted index and top-k search.
//!
//! Scoring, with duplicate query terms counted once:
//!
//! ```text
//! score(q, d) = Σ_t idf(t) · tf(t,d)·(k1 + 1) / (tf(t,d) + k1·(1 − b + b·|d|/avgdl))
//! idf(t)      = ln(1 + (N − df(t) + 0.5) / (df(t) + 0.5))
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusId};
use crate::error::{Error, Result};
use crate::run::{top_k, ScoredDoc};
use crate::tokenize::tokenize_words;

pub const INDEX_FILE: &str = "index.bin";
const MAGIC: &[u8; 8] = b"KIQFSIDX";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 0.9, b: 0.4 }
    }
}

impl Bm25Params {
    pub fn new(k1: f64, b: f64) -> Result<Self> {
        if !(k1 >= 0.0 && k1.is_finite()) {
            return Err(Error::Config(format!("k1 must be >= 0, got {k1}")));
        }
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::Config(format!("b must be in [0, 1], got {b}")));
        }
        Ok(Bm25Params { k1, b })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub ordinal: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    corpus_id: CorpusId,
    term_ids: HashMap<String, u32>,
    terms: Vec<String>,
    postings: Vec<Vec<Posting>>,
    doc_lengths: Vec<u32>,
    chunk_ids: Vec<String>,
    ordinals: HashMap<String, u32>,
    avg_doc_length: f64,
}

pub fn build_index(corpus: &Corpus) -> Result<InvertedIndex> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    // Per-document term frequencies in first-occurrence order.
    let per_doc: Vec<(Vec<(String, u32)>, u32)> = corpus
        .chunks()
        .par_iter()
        .map(|c| {
            let tokens = tokenize_words(&c.text);
            let len = tokens.len() as u32;
            let mut slot: HashMap<&str, usize> = HashMap::new();
            let mut counts: Vec<(String, u32)> = Vec::new();
            for t in &tokens {
                match slot.get(t.as_str()) {
                    Some(&i) => counts[i].1 += 1,
                    None => {
                        slot.insert(t, counts.len());
                        counts.push((t.clone(), 1));
                    }
                }
            }
            (counts, len)
        })
        .collect();

    let mut term_ids: HashMap<String, u32> = HashMap::new();
    let mut terms = Vec::new();
    let mut postings: Vec<Vec<Posting>> = Vec::new();
    let mut doc_lengths = Vec::with_capacity(per_doc.len());
    for (ordinal, (counts, len)) in per_doc.into_iter().enumerate() {
        doc_lengths.push(len);
        for (term, tf) in counts {
            let id = match term_ids.get(&term) {
                Some(&id) => id,
                None => {
                    let id = terms.len() as u32;
                    term_ids.insert(term.clone(), id);
                    terms.push(term);
                    postings.push(Vec::new());
                    id
                }
            };
            postings[id as usize].push(Posting {
                ordinal: ordinal as u32,
                tf,
            });
        }
    }
    let chunk_ids: Vec<String> = corpus.chunks().iter().map(|c| c.chunk_id.clone()).collect();
    Ok(InvertedIndex::assemble(
        corpus.corpus_id(),
        terms,
        term_ids,
        postings,
        doc_lengths,
        chunk_ids,
    ))
}

impl InvertedIndex {
    fn assemble(
        corpus_id: CorpusId,
        terms: Vec<String>,
        term_ids: HashMap<String, u32>,
        postings: Vec<Vec<Posting>>,
        doc_lengths: Vec<u32>,
        chunk_ids: Vec<String>,
    ) -> Self {
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        let avg_doc_length = total as f64 / doc_lengths.len() as f64;
        let ordinals = chunk_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
        InvertedIndex {
            corpus_id,
            term_ids,
            terms,
            postings,
            doc_lengths,
            chunk_ids,
            ordinals,
            avg_doc_length,
        }
    }

    pub fn corpus_id(&self) -> CorpusId {
        self.corpus_id
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, ordinal: usize) -> Option<u32> {
        self.doc_lengths.get(ordinal).copied()
    }

    pub fn vocabulary_size(&self) -> usize {
        self.terms.len()
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings_for(term).map_or(0, |p| p.len())
    }

    pub fn postings_for(&self, term: &str) -> Option<&[Posting]> {
        self.term_ids
            .get(term)
            .map(|&id| self.postings[id as usize].as_slice())
    }

    pub fn term_freq(&self, term: &str, ordinal: usize) -> u32 {
        self.postings_for(term)
            .and_then(|p| {
                p.binary_search_by_key(&(ordinal as u32), |x| x.ordinal)
                    .ok()
                    .map(|i| p[i].tf)
            })
            .unwrap_or(0)
    }

    pub fn chunk_id(&self, ordinal: usize) -> Option<&str> {
        self.chunk_ids.get(ordinal).map(String::as_str)
    }

    pub fn ordinal_of(&self, chunk_id: &str) -> Option<usize> {
        self.ordinals.get(chunk_id).map(|&o| o as usize)
    }

    pub fn idf(&self, df: usize) -> f64 {
        let n = self.doc_count() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, params: &Bm25Params, idf: f64, tf: u32, doc_len: u32) -> f64 {
        let tf = tf as f64;
        let norm = 1.0 - params.b + params.b * doc_len as f64 / self.avg_doc_length;
        idf * tf * (params.k1 + 1.0) / (tf + params.k1 * norm)
    }

    /// BM25 score of one chunk. Query terms are deduplicated.
    pub fn bm25_score(
        &self,
        params: &Bm25Params,
        query_terms: &[String],
        ordinal: usize,
    ) -> Result<f64> {
        let Some(&len) = self.doc_lengths.get(ordinal) else {
            return Err(Error::UnknownChunk(format!("ordinal {ordinal}")));
        };
        let mut score = 0.0;
        for term in dedup(query_terms) {
            let tf = self.term_freq(term, ordinal);
            if tf > 0 {
                let idf = self.idf(self.doc_freq(term));
                score += self.term_weight(params, idf, tf, len);
            }
        }
        Ok(score)
    }

    /// Top `k` chunks by BM25 score. Chunks scoring zero are never returned.
    pub fn search(
        &self,
        params: &Bm25Params,
        query_text: &str,
        k: usize,
    ) -> Result<Vec<ScoredDoc>> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let terms = tokenize_words(query_text);
        if terms.is_empty() {
            return Err(Error::EmptyQuery);
        }
        let mut scores = vec![0.0f64; self.doc_count()];
        let mut touched: Vec<u32> = Vec::new();
        for term in dedup(&terms) {
            let Some(list) = self.postings_for(term) else {
                continue;
            };
            let idf = self.idf(list.len());
            for p in list {
                let slot = &mut scores[p.ordinal as usize];
                if *slot == 0.0 {
                    touched.push(p.ordinal);
                }
                *slot += self.term_weight(params, idf, p.tf, self.doc_lengths[p.ordinal as usize]);
            }
        }
        let candidates = touched
            .into_iter()
            .filter(|&o| scores[o as usize] > 0.0)
            .map(|o| (self.chunk_ids[o as usize].as_str(), scores[o as usize]))
            .collect();
        Ok(top_k(candidates, k))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(INDEX_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(INDEX_VERSION)?;
        w.write_u8(corpus_code(self.corpus_id))?;
        w.write_u32::<LittleEndian>(self.doc_count() as u32)?;
        for (id, &len) in self.chunk_ids.iter().zip(&self.doc_lengths) {
            write_str(w, id)?;
            w.write_u32::<LittleEndian>(len)?;
        }
        w.write_u32::<LittleEndian>(self.terms.len() as u32)?;
        for (term, list) in self.terms.iter().zip(&self.postings) {
            write_str(w, term)?;
            w.write_u32::<LittleEndian>(list.len() as u32)?;
            for p in list {
                w.write_u32::<LittleEndian>(p.ordinal)?;
                w.write_u32::<LittleEndian>(p.tf)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(&path, e))?;
        if &magic != MAGIC {
            return Err(Error::IndexFormat(format!(
                "{}: not an index file",
                path.display()
            )));
        }
        let version = r
            .read_u32::<LittleEndian>()
            .map_err(|e| Error::io(&path, e))?;
        if version != INDEX_VERSION {
            return Err(Error::IndexFormat(format!(
                "{}: index version {version}, expected {INDEX_VERSION}; rebuild with `index build`",
                path.display()
            )));
        }
        Self::read_body(&mut r).map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => {
                Error::IndexFormat(format!("{}: {e}", path.display()))
            }
            _ => Error::io(&path, e),
        })
    }

    fn read_body(r: &mut impl Read) -> std::io::Result<Self> {
        let corpus_id = corpus_from_code(r.read_u8()?)?;
        let n = r.read_u32::<LittleEndian>()? as usize;
        if n == 0 {
            return Err(invalid("index has no documents"));
        }
        let mut chunk_ids = Vec::with_capacity(n);
        let mut doc_lengths = Vec::with_capacity(n);
        for _ in 0..n {
            chunk_ids.push(read_str(r)?);
            doc_lengths.push(r.read_u32::<LittleEndian>()?);
        }
        let vocab = r.read_u32::<LittleEndian>()? as usize;
        let mut terms = Vec::with_capacity(vocab);
        let mut term_ids = HashMap::with_capacity(vocab);
        let mut postings = Vec::with_capacity(vocab);
        for id in 0..vocab {
            let term = read_str(r)?;
            let df = r.read_u32::<LittleEndian>()? as usize;
            let mut list = Vec::with_capacity(df);
            for _ in 0..df {
                let ordinal = r.read_u32::<LittleEndian>()?;
                let tf = r.read_u32::<LittleEndian>()?;
                if ordinal as usize >= n {
                    return Err(invalid("posting ordinal out of range"));
                }
                list.push(Posting { ordinal, tf });
            }
            term_ids.insert(term.clone(), id as u32);
            terms.push(term);
            postings.push(list);
        }
        Ok(InvertedIndex::assemble(
            corpus_id,
            terms,
            term_ids,
            postings,
            doc_lengths,
            chunk_ids,
        ))
    }
}

fn dedup(terms: &[String]) -> impl Iterator<Item = &str> {
    let mut seen = std::collections::HashSet::new();
    terms
        .iter()
        .map(String::as_str)
        .filter(move |t| seen.insert(*t))
}

fn corpus_code(id: CorpusId) -> u8 {
    match id {
        CorpusId::Int => 0,
        CorpusId::Ext => 1,
        CorpusId::Aug => 2,
        CorpusId::Origin => 3,
    }
}

fn corpus_from_code(code: u8) -> std::io::Result<CorpusId> {
    Ok(match code {
        0 => CorpusId::Int,
        1 => CorpusId::Ext,
        2 => CorpusId::Aug,
        3 => CorpusId::Origin,
        _ => return Err(invalid("unknown corpus code")),
    })
}

fn invalid(msg: &str) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> std::io::Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| invalid("string is not utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Chunk;

    fn corpus(texts: &[(&str, &str)]) -> Corpus {
        let chunks = texts
            .iter()
            .map(|(id, text)| Chunk {
                chunk_id: id.to_string(),
                source_id: id.to_string(),
                position: 0,
                text: text.to_string(),
                word_count: tokenize_words(text).len(),
            })
            .collect();
        Corpus::from_chunks(CorpusId::Int, chunks).unwrap()
    }

    fn words(s: &str) -> Vec<String> {
        tokenize_words(s)
    }

    #[test]
    fn counts_on_tiny_corpus() {
        let idx = build_index(&corpus(&[("d1", "a"), ("d2", "a"), ("d3", "b")])).unwrap();
        assert_eq!(idx.doc_count(), 3);
        assert_eq!(idx.doc_freq("a"), 2);
        assert_eq!(idx.doc_freq("b"), 1);
        assert_eq!(idx.avg_doc_length(), 1.0);
    }

    #[test]
    fn average_length() {
        let long = vec!["x"; 100].join(" ");
        let short = vec!["y"; 50].join(" ");
        let idx = build_index(&corpus(&[("a", &long), ("b", &short)])).unwrap();
        assert_eq!(idx.avg_doc_length(), 75.0);
    }

    #[test]
    fn empty_corpus_rejected() {
        let c = Corpus::from_chunks(CorpusId::Int, vec![]).unwrap();
        assert!(matches!(build_index(&c), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn absent_terms_score_zero() {
        let idx = build_index(&corpus(&[("d1", "cat sat mat")])).unwrap();
        let s = idx
            .bm25_score(&Bm25Params::default(), &words("dog"), 0)
            .unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn unknown_chunk() {
        let idx = build_index(&corpus(&[("d1", "cat")])).unwrap();
        assert!(matches!(
            idx.bm25_score(&Bm25Params::default(), &words("cat"), 7),
            Err(Error::UnknownChunk(_))
        ));
    }

    fn three_docs() -> InvertedIndex {
        build_index(&corpus(&[
            ("d1", "cat sat mat"),
            ("d2", "cat cat ran"),
            ("d3", "dog ran fast"),
        ]))
        .unwrap()
    }

    #[test]
    fn higher_tf_ranks_first() {
        let idx = three_docs();
        let hits = idx.search(&Bm25Params::default(), "cat", 10).unwrap();
        let ids: Vec<_> = hits.iter().map(|d| d.chunk_id.as_str()).collect();
        assert_eq!(ids, ["d2", "d1"]);
        let d3 = idx
            .bm25_score(&Bm25Params::default(), &words("cat"), 2)
            .unwrap();
        assert_eq!(d3, 0.0);

        // Hand evaluation: N=3, df=2, idf = ln(1 + 1.5/2.5) = ln 1.6, equal lengths
        // so the length norm is 1.
        let idf = 1.6f64.ln();
        let (k1, tf2, tf1) = (0.9, 2.0, 1.0);
        let expect_d2 = idf * tf2 * (k1 + 1.0) / (tf2 + k1);
        let expect_d1 = idf * tf1 * (k1 + 1.0) / (tf1 + k1);
        assert!((hits[0].score - expect_d2).abs() < 1e-12);
        assert!((hits[1].score - expect_d1).abs() < 1e-12);
    }

    #[test]
    fn two_term_query() {
        let idx = three_docs();
        let hits = idx.search(&Bm25Params::default(), "cat ran", 10).unwrap();
        assert_eq!(hits[0].chunk_id, "d2");
        assert_eq!(hits.len(), 3);
    }

    #[test]
    fn duplicate_query_terms_count_once() {
        let idx = three_docs();
        let p = Bm25Params::default();
        let once = idx.bm25_score(&p, &words("cat"), 0).unwrap();
        let twice = idx.bm25_score(&p, &words("cat cat the cat"), 0).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn no_zero_padding() {
        let idx = three_docs();
        let hits = idx.search(&Bm25Params::default(), "dog", 10).unwrap();
        assert_eq!(hits.len(), 1);
        let idx = build_index(&corpus(&[("only", "needle")])).unwrap();
        let hits = idx.search(&Bm25Params::default(), "needle", 10).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].rank, 1);
    }

    #[test]
    fn blank_query() {
        let idx = three_docs();
        assert!(matches!(
            idx.search(&Bm25Params::default(), " ?! ", 10),
            Err(Error::EmptyQuery)
        ));
    }

    #[test]
    fn params_validated() {
        assert!(Bm25Params::new(-1.0, 0.5).is_err());
        assert!(Bm25Params::new(1.2, 1.5).is_err());
        assert!(Bm25Params::new(1.2, 0.75).is_ok());
    }

    #[test]
    fn persist_round_trip() {
        let idx = three_docs();
        let dir = tempfile::tempdir().unwrap();
        idx.save(dir.path()).unwrap();
        let back = InvertedIndex::load(dir.path()).unwrap();
        assert_eq!(back, idx);
    }

    #[test]
    fn version_mismatch_fails_loudly() {
        let idx = three_docs();
        let dir = tempfile::tempdir().unwrap();
        idx.save(dir.path()).unwrap();
        let path = dir.path().join(INDEX_FILE);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        std::fs::write(&path, &bytes).unwrap();
        let err = InvertedIndex::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");

        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            InvertedIndex::load(dir.path()),
            Err(Error::IndexFormat(_))
        ));
    }
}
