//! Seeded synthetic fixtures shared by the benchmarks.

use kiqfs_core::corpus::{Chunk, Corpus, CorpusId};
use kiqfs_core::dense::{VectorRecord, VectorStore};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Zipf-ish word drawn from a vocabulary of `vocab` terms.
fn word(rng: &mut StdRng, vocab: usize) -> String {
    let r: f64 = rng.gen();
    format!("w{}", ((vocab as f64).powf(r) as usize).min(vocab - 1))
}

pub fn text(rng: &mut StdRng, words: usize, vocab: usize) -> String {
    (0..words)
        .map(|_| word(rng, vocab))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `docs` chunks of `words` words each.
pub fn corpus(seed: u64, docs: usize, words: usize, vocab: usize) -> Corpus {
    let mut rng = StdRng::seed_from_u64(seed);
    let chunks = (0..docs)
        .map(|i| Chunk {
            chunk_id: format!("int/d{i}#0"),
            source_id: format!("int/d{i}"),
            position: 0,
            text: text(&mut rng, words, vocab),
            word_count: words,
        })
        .collect();
    Corpus::from_chunks(CorpusId::Int, chunks).expect("unique chunk ids")
}

pub fn queries(seed: u64, n: usize, words: usize, vocab: usize) -> Vec<String> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n).map(|_| text(&mut rng, words, vocab)).collect()
}

pub fn vectors(seed: u64, n: usize, dim: usize) -> VectorStore {
    let mut rng = StdRng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| VectorRecord {
            chunk_id: format!("int/d{i}#0"),
            vector: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
        .collect();
    VectorStore::from_records(records).expect("consistent dimensions")
}

pub fn query_vector(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
