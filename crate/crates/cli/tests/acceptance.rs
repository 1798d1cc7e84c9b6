//! Acceptance suite: each criterion is checked against an independent
//! oracle and reported as one PASS/FAIL line. Exits nonzero on any failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use kiqfs_core::annotation::{build_pool, fleiss_kappa, partition_tasks};
use kiqfs_core::controller::{
    assemble_prompt, generate_summary, GenerationConfig, MockProvider, PromptAssets, RetryPolicy,
    DEFAULT_CONTEXT_WINDOW,
};
use kiqfs_core::corpus::{
    chunk_source, Chunk, CollectionTag, Corpus, CorpusId, QuerySummaryPair, SourceDocument, Split,
};
use kiqfs_core::dense::{VectorRecord, VectorStore};
use kiqfs_core::qrels::BinaryQrels;
use kiqfs_core::retrieval_eval::{evaluate_run, precision_at_k, recall_at_k};
use kiqfs_core::rouge::{rouge_n, rouge_su4};
use kiqfs_core::run::{top_k, RetrievalRun};
use kiqfs_core::sparse::{build_index, Bm25Params};
use kiqfs_core::Error;
use num_rational::Ratio;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde_json::json;

const BM25_TOL: f64 = 1e-9;
const BM25_BUDGET: Duration = Duration::from_secs(10);
const DENSE_BUDGET: Duration = Duration::from_secs(5);
const ROUGE_TOL: f64 = 1e-12;
const ROUGE_BUDGET: Duration = Duration::from_secs(5);
const KAPPA_TOL: f64 = 1e-9;
const E2E_BUDGET: Duration = Duration::from_secs(60);

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    ensure(elapsed < budget, || {
        format!("took {elapsed:?}, budget {budget:?}")
    })
}

/// Lowercased maximal runs of alphanumeric characters.
fn oracle_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.push(ch);
        } else if !cur.is_empty() {
            out.push(cur.to_lowercase());
            cur.clear();
        }
    }
    if !cur.is_empty() {
        out.push(cur.to_lowercase());
    }
    out
}

fn vocab(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("t{i}")).collect()
}

fn chunk(id: &str, text: String) -> Chunk {
    Chunk {
        chunk_id: id.to_string(),
        source_id: id.to_string(),
        position: 0,
        word_count: oracle_tokens(&text).len(),
        text,
    }
}

/// Exhaustive scoring straight from the formula, sorted by score then id.
fn bm25_oracle(
    docs: &[(String, Vec<String>)],
    query: &[String],
    k1: f64,
    b: f64,
    k: usize,
) -> Vec<(String, f64)> {
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|(_, t)| t.len()).sum::<usize>() as f64 / n;
    let mut terms: Vec<&String> = Vec::new();
    for t in query {
        if !terms.contains(&t) {
            terms.push(t);
        }
    }
    let dfs: Vec<f64> = terms
        .iter()
        .map(|t| docs.iter().filter(|(_, d)| d.contains(t)).count() as f64)
        .collect();
    let mut scored: Vec<(String, f64)> = docs
        .iter()
        .map(|(id, toks)| {
            let dl = toks.len() as f64;
            let s: f64 = terms
                .iter()
                .zip(&dfs)
                .map(|(t, &df)| {
                    let tf = toks.iter().filter(|w| w == t).count() as f64;
                    if tf == 0.0 {
                        return 0.0;
                    }
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * dl / avgdl))
                })
                .sum();
            (id.clone(), s)
        })
        .filter(|(_, s)| *s > 0.0)
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

fn bm25_equivalence() -> Check {
    let mut spent = Duration::ZERO;
    let mut rng = StdRng::seed_from_u64(11);
    let mut compared = 0usize;
    for c in 0..100 {
        let v = vocab(rng.gen_range(5..=50));
        let n_docs = rng.gen_range(1..=200);
        let docs: Vec<(String, Vec<String>)> = (0..n_docs)
            .map(|i| {
                let len = rng.gen_range(1..=40);
                let toks = (0..len)
                    .map(|_| v.choose(&mut rng).unwrap().clone())
                    .collect();
                (format!("c{c}/d{i:03}#0"), toks)
            })
            .collect();
        let chunks = docs.iter().map(|(id, t)| chunk(id, t.join(" "))).collect();
        let t = Instant::now();
        let corpus = Corpus::from_chunks(CorpusId::Int, chunks).map_err(|e| e.to_string())?;
        let index = build_index(&corpus).map_err(|e| e.to_string())?;
        spent += t.elapsed();
        let params = Bm25Params::default();
        for q in 0..20 {
            let mut query: Vec<String> = (0..rng.gen_range(1..=6))
                .map(|_| v.choose(&mut rng).unwrap().clone())
                .collect();
            if q % 5 == 0 {
                query.push("unseen".into());
            }
            let t = Instant::now();
            let got = index
                .search(&params, &query.join(" "), 10)
                .map_err(|e| e.to_string())?;
            spent += t.elapsed();
            let want = bm25_oracle(&docs, &query, params.k1, params.b, 10);
            ensure(got.len() == want.len(), || {
                format!(
                    "corpus {c} query {q}: {} results, oracle {}",
                    got.len(),
                    want.len()
                )
            })?;
            for (g, (id, s)) in got.iter().zip(&want) {
                ensure(&g.chunk_id == id && (g.score - s).abs() <= BM25_TOL, || {
                    format!(
                        "corpus {c} query {q}: got {} {:.12}, oracle {id} {s:.12}",
                        g.chunk_id, g.score
                    )
                })?;
            }
            compared += 1;
        }
    }
    within(spent, BM25_BUDGET)?;
    Ok(format!(
        "{compared} queries over 100 corpora, tol {BM25_TOL:e}, index+search {spent:?}"
    ))
}

fn dense_equivalence() -> Check {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(12);
    for s in 0..50 {
        let dim = rng.gen_range(1..=64);
        let n = rng.gen_range(1..=500);
        let mut records: Vec<VectorRecord> = Vec::with_capacity(n);
        for i in 0..n {
            // Repeat some vectors to force exact ties.
            let vector = if i > 0 && rng.gen_bool(0.1) {
                records[rng.gen_range(0..i)].vector.clone()
            } else {
                (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            records.push(VectorRecord {
                chunk_id: format!("v{i:04}"),
                vector,
            });
        }
        let store = VectorStore::from_records(records.clone()).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k = rng.gen_range(1..=n + 5);
            let mut want: Vec<(&str, f64)> = records
                .iter()
                .map(|r| {
                    (
                        r.chunk_id.as_str(),
                        r.vector.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>(),
                    )
                })
                .collect();
            want.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            want.truncate(k);
            let got = store.search(&q, k).map_err(|e| e.to_string())?;
            let got: Vec<(&str, f64)> =
                got.iter().map(|d| (d.chunk_id.as_str(), d.score)).collect();
            ensure(got == want, || {
                format!("store {s}: top-{k} differs from exhaustive sort")
            })?;
        }
    }
    within(start.elapsed(), DENSE_BUDGET)?;
    Ok(format!(
        "50 stores x 5 queries exact, {:?}",
        start.elapsed()
    ))
}

/// Units of a token list for ROUGE: n-grams, or unigrams plus skip-bigrams.
fn units(words: &[String], kind: usize) -> Vec<Vec<String>> {
    match kind {
        1 | 2 => words.windows(kind).map(|w| w.to_vec()).collect(),
        _ => {
            let mut u: Vec<Vec<String>> = words.iter().map(|w| vec![w.clone()]).collect();
            for i in 0..words.len() {
                for j in i + 1..words.len() {
                    if j - i <= 4 {
                        u.push(vec![words[i].clone(), words[j].clone(), "<skip>".into()]);
                    }
                }
            }
            u
        }
    }
}

/// Clipped matches by enumerating distinct units and counting occurrences.
fn rouge_oracle(cand: &str, reference: &str, kind: usize) -> (f64, f64, f64) {
    let c = units(&oracle_tokens(cand), kind);
    let r = units(&oracle_tokens(reference), kind);
    let mut distinct: Vec<&Vec<String>> = Vec::new();
    for u in &c {
        if !distinct.contains(&u) {
            distinct.push(u);
        }
    }
    let matched: usize = distinct
        .iter()
        .map(|u| {
            let in_c = c.iter().filter(|x| x == u).count();
            let in_r = r.iter().filter(|x| x == u).count();
            in_c.min(in_r)
        })
        .sum();
    let p = if c.is_empty() {
        0.0
    } else {
        matched as f64 / c.len() as f64
    };
    let rec = if r.is_empty() {
        0.0
    } else {
        matched as f64 / r.len() as f64
    };
    let f = if p + rec > 0.0 {
        2.0 * p * rec / (p + rec)
    } else {
        0.0
    };
    (p, rec, f)
}

fn sentence(rng: &mut StdRng, words: &[&str], max: usize) -> String {
    (0..rng.gen_range(1..=max))
        .map(|_| *words.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

fn rouge_equivalence() -> Check {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(13);
    let words = [
        "the", "cat", "sat", "on", "mat", "a", "dog", "ran", "far", "away", "and", "then",
    ];
    for i in 0..500 {
        let a = sentence(&mut rng, &words, 12);
        let b = sentence(&mut rng, &words, 12);
        for kind in [1, 2, 4] {
            let got = match kind {
                1 => rouge_n(&a, &b, 1),
                2 => rouge_n(&a, &b, 2),
                _ => rouge_su4(&a, &b),
            };
            let (p, r, f) = rouge_oracle(&a, &b, kind);
            ensure(
                (got.precision - p).abs() <= ROUGE_TOL
                    && (got.recall - r).abs() <= ROUGE_TOL
                    && (got.f1 - f).abs() <= ROUGE_TOL,
                || {
                    format!(
                        "pair {i} kind {kind}: {got:?} vs oracle ({p}, {r}, {f}) for {a:?} / {b:?}"
                    )
                },
            )?;
        }
    }
    for i in 0..100 {
        let mut a = sentence(&mut rng, &words, 12);
        a.push_str(" end");
        let upper: Vec<&str> = ["alpha", "beta", "gamma", "delta"].to_vec();
        let d = sentence(&mut rng, &upper, 12);
        for s in [rouge_n(&a, &a, 1), rouge_n(&a, &a, 2), rouge_su4(&a, &a)] {
            ensure(s.precision == 1.0 && s.recall == 1.0 && s.f1 == 1.0, || {
                format!("identity {i}: {s:?}")
            })?;
        }
        for s in [rouge_n(&a, &d, 1), rouge_n(&a, &d, 2), rouge_su4(&a, &d)] {
            ensure(s.precision == 0.0 && s.recall == 0.0 && s.f1 == 0.0, || {
                format!("disjoint {i}: {s:?}")
            })?;
        }
    }
    within(start.elapsed(), ROUGE_BUDGET)?;
    Ok(format!(
        "500 pairs x 3 metrics, tol {ROUGE_TOL:e}; identity 1.0, disjoint 0.0; {:?}",
        start.elapsed()
    ))
}

fn retrieval_metric_oracle() -> Check {
    let mut rng = StdRng::seed_from_u64(14);
    let universe: Vec<String> = (0..60).map(|i| format!("c{i}")).collect();
    let cutoffs = [1, 5, 10, 50];
    for inst in 0..200 {
        let mut run = RetrievalRun::new("sys", None);
        let mut rel = BinaryQrels::new();
        let n_queries = rng.gen_range(1..=5);
        for q in 0..n_queries {
            let qid = format!("q{q}");
            let mut ids = universe.clone();
            ids.shuffle(&mut rng);
            ids.truncate(rng.gen_range(0..=55));
            let n = ids.len();
            let cands = ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.as_str(), (n - i) as f64))
                .collect();
            run.results.insert(qid.clone(), top_k(cands, n));
            let r: BTreeSet<String> = universe
                .iter()
                .filter(|_| rng.gen_bool(0.15))
                .cloned()
                .collect();
            // The first query always has judgments so the instance is evaluable.
            let r = if q == 0 && r.is_empty() {
                BTreeSet::from([universe[0].clone()])
            } else {
                r
            };
            rel.insert(qid, r);
        }
        let mut sums = vec![(0.0, 0.0); cutoffs.len()];
        let mut evaluated = 0;
        for (qid, docs) in &run.results {
            let ranked: Vec<&str> = docs.iter().map(|d| d.chunk_id.as_str()).collect();
            let relevant = &rel[qid];
            let mut last_recall = 0.0;
            for k in 1..=60 {
                let top: BTreeSet<String> = ranked.iter().take(k).map(|s| s.to_string()).collect();
                let hits = top.intersection(relevant).count();
                let p = precision_at_k(&ranked, relevant, k);
                ensure(p == hits as f64 / k as f64, || {
                    format!("instance {inst} {qid} P@{k}")
                })?;
                if relevant.is_empty() {
                    ensure(
                        matches!(recall_at_k(&ranked, relevant, k), Err(Error::NoRelevant)),
                        || format!("instance {inst} {qid}: recall without relevant docs"),
                    )?;
                    continue;
                }
                let r = recall_at_k(&ranked, relevant, k).map_err(|e| e.to_string())?;
                ensure(r == hits as f64 / relevant.len() as f64, || {
                    format!("instance {inst} {qid} R@{k}")
                })?;
                ensure(r >= last_recall, || {
                    format!("instance {inst} {qid}: recall decreased at {k}")
                })?;
                ensure(
                    (p * k as f64 - r * relevant.len() as f64).abs() < 1e-9,
                    || format!("instance {inst} {qid}: P*k != R*|rel| at {k}"),
                )?;
                last_recall = r;
            }
            if relevant.is_empty() {
                continue;
            }
            evaluated += 1;
            for (i, &k) in cutoffs.iter().enumerate() {
                let top: BTreeSet<String> = ranked.iter().take(k).map(|s| s.to_string()).collect();
                let hits = top.intersection(relevant).count() as f64;
                sums[i].0 += hits / k as f64;
                sums[i].1 += hits / relevant.len() as f64;
            }
        }
        let scores = evaluate_run(&run, &rel, &cutoffs).map_err(|e| e.to_string())?;
        ensure(scores.evaluated_queries == evaluated, || {
            format!("instance {inst}: evaluated count")
        })?;
        for (i, (p, r)) in sums.iter().enumerate() {
            let n = evaluated as f64;
            ensure(
                scores.precision[i] == p / n && scores.recall[i] == r / n,
                || format!("instance {inst}: macro average at cutoff {}", cutoffs[i]),
            )?;
        }
    }
    Ok("200 instances exact; recall monotone; P@k*k = R@k*|rel|".into())
}

fn kappa_oracle(m: &[Vec<usize>]) -> Option<Ratio<i64>> {
    let items = m.len() as i64;
    let n = m[0].iter().sum::<usize>() as i64;
    let mut p_bar = Ratio::from_integer(0);
    for row in m {
        let sq: i64 = row.iter().map(|&c| (c * c) as i64).sum();
        p_bar += Ratio::new(sq - n, n * (n - 1));
    }
    p_bar /= items;
    let mut p_e = Ratio::from_integer(0);
    for j in 0..m[0].len() {
        let col: i64 = m.iter().map(|r| r[j] as i64).sum();
        let p = Ratio::new(col, items * n);
        p_e += p * p;
    }
    if p_e == Ratio::from_integer(1) {
        None
    } else {
        Some((p_bar - p_e) / (Ratio::from_integer(1) - p_e))
    }
}

fn to_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn random_row(rng: &mut StdRng, raters: usize) -> Vec<usize> {
    let mut row = vec![0usize; 4];
    for _ in 0..raters {
        row[rng.gen_range(0..4)] += 1;
    }
    row
}

fn fleiss_kappa_checks() -> Check {
    let mut rng = StdRng::seed_from_u64(15);
    for t in 0..100 {
        let raters = rng.gen_range(2..=6);
        let items = rng.gen_range(1..=30);
        let m: Vec<Vec<usize>> = (0..items).map(|_| random_row(&mut rng, raters)).collect();
        match (kappa_oracle(&m), fleiss_kappa(&m)) {
            (Some(want), Ok(got)) => ensure((got - to_f64(want)).abs() <= KAPPA_TOL, || {
                format!("matrix {t}: {got} vs oracle {}", to_f64(want))
            })?,
            (None, Err(Error::KappaUndefined)) => {}
            (w, g) => return Err(format!("matrix {t}: oracle {w:?}, got {g:?}")),
        }
    }
    for t in 0..20 {
        let raters = rng.gen_range(2..=6);
        let items = rng.gen_range(2..=30);
        let mut m: Vec<Vec<usize>> = (0..items)
            .map(|_| {
                let mut row = vec![0; 4];
                row[rng.gen_range(0..4)] = raters;
                row
            })
            .collect();
        // Make sure at least two categories are used so kappa is defined.
        m[0] = vec![raters, 0, 0, 0];
        m[1] = vec![0, 0, 0, raters];
        let k = fleiss_kappa(&m).map_err(|e| e.to_string())?;
        ensure(k == 1.0, || format!("unanimous matrix {t}: {k}"))?;
    }
    let single = vec![vec![0, 0, 3, 0]; 5];
    match fleiss_kappa(&single) {
        Err(e @ Error::KappaUndefined) => {
            ensure(e.to_string() == "kappa undefined", || e.to_string())?
        }
        other => return Err(format!("single category: {other:?}")),
    }
    Ok(format!("100 random matrices within {KAPPA_TOL:e}; unanimity exactly 1.0; single category undefined"))
}

fn random_document(rng: &mut StdRng) -> String {
    let pieces = [
        "alpha",
        "Beta",
        "state-of-the-art",
        "x1",
        "café",
        "naïve",
        "don't",
        "U.S.",
        "42",
        "\u{2014}",
        "(note)",
        "end.",
    ];
    let seps = [" ", "  ", "\n", "\t", " \n ", ", ", "; "];
    let n = rng.gen_range(1..=1200);
    let mut s = String::new();
    for _ in 0..n {
        s.push_str(pieces.choose(rng).unwrap());
        s.push_str(seps.choose(rng).unwrap());
    }
    s
}

fn chunking_round_trip() -> Check {
    let mut rng = StdRng::seed_from_u64(16);
    let mut max_words = 0;
    let mut d = 0;
    while d < 100 {
        let text = random_document(&mut rng);
        let source = oracle_tokens(&text);
        if source.is_empty() || source.len() > 2000 {
            continue;
        }
        d += 1;
        max_words = max_words.max(source.len());
        let doc = SourceDocument {
            source_id: format!("int/d{d}"),
            title: None,
            text: text.clone(),
            collection_tag: CollectionTag::Int,
        };
        let chunks = chunk_source(&doc, 100).map_err(|e| e.to_string())?;
        let mut joined = Vec::new();
        for (i, c) in chunks.iter().enumerate() {
            let toks = oracle_tokens(&c.text);
            ensure(toks.len() == c.word_count && c.word_count <= 100, || {
                format!("doc {d} chunk {i}: {} words", toks.len())
            })?;
            ensure(i + 1 == chunks.len() || c.word_count == 100, || {
                format!("doc {d}: short chunk {i} is not final")
            })?;
            ensure(c.chunk_id == format!("int/d{d}#{i}"), || {
                format!("doc {d}: chunk id {}", c.chunk_id)
            })?;
            joined.extend(toks);
        }
        ensure(joined == source, || {
            format!("doc {d}: concatenated chunks differ from the source")
        })?;
    }
    Ok(format!(
        "100 documents (up to {max_words} words) round-trip, chunks <= 100 words"
    ))
}

fn run_from(system: &str, lists: &BTreeMap<String, Vec<String>>) -> RetrievalRun {
    let mut run = RetrievalRun::new(system, None);
    for (q, ids) in lists {
        let n = ids.len();
        let cands = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), (n - i) as f64))
            .collect();
        run.results.insert(q.clone(), top_k(cands, n));
    }
    run
}

fn pooling_bounds() -> Check {
    let mut rng = StdRng::seed_from_u64(17);
    let universe: Vec<String> = (0..300).map(|i| format!("c{i}")).collect();
    let queries: Vec<String> = (0..4).map(|q| format!("q{q}")).collect();
    let pairs = |qs: &[String]| -> Vec<QuerySummaryPair> {
        qs.iter()
            .map(|q| QuerySummaryPair {
                query_id: q.clone(),
                query_text: q.clone(),
                references: vec!["ref".into()],
                split: Split::Test,
            })
            .collect()
    };
    for t in 0..100 {
        let n_runs = rng.gen_range(1..=6);
        let depth = rng.gen_range(1..=60);
        let runs: Vec<RetrievalRun> = (0..n_runs)
            .map(|r| {
                let lists = queries
                    .iter()
                    .map(|q| {
                        let mut ids = universe.clone();
                        ids.shuffle(&mut rng);
                        ids.truncate(rng.gen_range(0..=80));
                        (q.clone(), ids)
                    })
                    .collect();
                run_from(&format!("r{r}"), &lists)
            })
            .collect();
        let pool = build_pool(&runs, depth).map_err(|e| e.to_string())?;
        for q in &queries {
            let got = pool.chunk_ids(q);
            let mut want: Vec<&str> = Vec::new();
            for r in &runs {
                for id in r.ranked_ids(q).into_iter().take(depth) {
                    if !want.contains(&id) {
                        want.push(id);
                    }
                }
            }
            ensure(got.len() <= n_runs * depth, || {
                format!("set {t} {q}: pool exceeds runs x depth")
            })?;
            ensure(got == want, || {
                format!("set {t} {q}: pool differs from first-appearance union")
            })?;
        }
        let max_docs = rng.gen_range(1..=7);
        let tasks =
            partition_tasks(&pool, &pairs(&queries), max_docs).map_err(|e| e.to_string())?;
        for q in &queries {
            let mine: Vec<_> = tasks.iter().filter(|t| &t.query_id == q).collect();
            let flat: Vec<&str> = mine
                .iter()
                .flat_map(|t| t.docs.iter().map(|d| d.chunk_id.as_str()))
                .collect();
            ensure(flat == pool.chunk_ids(q), || {
                format!("set {t} {q}: tasks do not partition the pool")
            })?;
            ensure(
                mine.iter()
                    .all(|t| !t.docs.is_empty() && t.docs.len() <= max_docs),
                || format!("set {t} {q}: task size out of bounds"),
            )?;
            ensure(mine.len() == pool.docs(q).len().div_ceil(max_docs), || {
                format!("set {t} {q}: task count")
            })?;
        }
    }
    let disjoint: Vec<RetrievalRun> = (0..4)
        .map(|r| {
            let lists = BTreeMap::from([(
                "q".to_string(),
                (0..50).map(|i| format!("r{r}d{i}")).collect(),
            )]);
            run_from(&format!("r{r}"), &lists)
        })
        .collect();
    let pool = build_pool(&disjoint, 50).map_err(|e| e.to_string())?;
    let size = pool.docs("q").len();
    ensure(size == 200, || format!("disjoint 4 x 50 pooled to {size}"))?;
    let tasks = partition_tasks(&pool, &pairs(&["q".to_string()]), 5).map_err(|e| e.to_string())?;
    ensure(tasks.len() == 40, || {
        format!("200 pooled docs gave {} tasks", tasks.len())
    })?;
    Ok("100 random run sets within runs x depth; disjoint 4 x 50 = 200 -> 40 tasks".into())
}

fn prompt_budget() -> Check {
    let assets = PromptAssets::builtin();
    let words: Vec<String> = (0..100).map(|i| format!("word{i}")).collect();
    let docs: Vec<Chunk> = (0..50)
        .map(|i| chunk(&format!("c{i}"), words.join(" ")))
        .collect();
    let refs: Vec<&Chunk> = docs.iter().collect();
    let cfg = GenerationConfig::default();
    let b = assemble_prompt(
        &assets.controller,
        "q",
        "what happened?",
        &refs,
        &assets.demos,
        &cfg,
    )
    .map_err(|e| e.to_string())?;
    ensure(b.chunk_ids.len() == 50, || {
        "prompt does not hold 50 chunks".into()
    })?;
    ensure(b.token_estimate < DEFAULT_CONTEXT_WINDOW, || {
        format!("estimate {} >= window", b.token_estimate)
    })?;

    let many: Vec<Chunk> = (0..150)
        .map(|i| chunk(&format!("c{i}"), words.join(" ")))
        .collect();
    let refs: Vec<&Chunk> = many.iter().collect();
    let big_cfg = GenerationConfig {
        top_k_docs: 150,
        ..cfg
    };
    let big = assemble_prompt(
        &assets.controller,
        "q",
        "what happened?",
        &refs,
        &assets.demos,
        &big_cfg,
    )
    .map_err(|e| e.to_string())?;
    let mock = MockProvider::default();
    let r = generate_summary(&mock, &big, &big_cfg, &RetryPolicy::no_delay(4), "s");
    ensure(matches!(r, Err(Error::OverBudget { .. })), || {
        format!("oversized bundle was not blocked: {r:?}")
    })?;
    ensure(mock.call_count() == 0, || {
        format!("mock saw {} calls", mock.call_count())
    })?;
    Ok(format!(
        "50 x 100 words -> {} tokens < {DEFAULT_CONTEXT_WINDOW}; {}-token bundle blocked, mock log empty",
        b.token_estimate, big.token_estimate
    ))
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = serde_json::Value>) {
    let text: String = lines.into_iter().map(|v| format!("{v}\n")).collect();
    fs::write(path, text).unwrap();
}

/// 100 source documents of 1000 words each, which chunk to 1,000 chunks.
fn synthetic_inputs(dir: &Path) {
    let mut rng = StdRng::seed_from_u64(18);
    let v = vocab(400);
    let mut vectors = Vec::new();
    for (tag, file) in [("int", "int.jsonl"), ("ext", "ext.jsonl")] {
        let docs: Vec<serde_json::Value> = (0..50)
            .map(|d| {
                let text: Vec<&str> = (0..1000)
                    .map(|_| v.choose(&mut rng).unwrap().as_str())
                    .collect();
                for c in 0..10 {
                    let vector: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    vectors.push((
                        tag,
                        json!({"chunk_id": format!("{tag}/d{d}#{c}"), "vector": vector}),
                    ));
                }
                json!({"id": format!("d{d}"), "text": text.join(" ")})
            })
            .collect();
        write_lines(&dir.join(file), docs);
    }
    for tag in ["int", "ext"] {
        write_lines(
            &dir.join(format!("{tag}.vec.jsonl")),
            vectors
                .iter()
                .filter(|(t, _)| *t == tag)
                .map(|(_, v)| v.clone()),
        );
    }
    let mut pairs = Vec::new();
    let mut qvecs = Vec::new();
    let mut origin = Vec::new();
    let mut qrels = String::new();
    for q in 0..5 {
        let query: Vec<&str> = (0..6)
            .map(|_| v.choose(&mut rng).unwrap().as_str())
            .collect();
        let refs: Vec<String> = (0..2)
            .map(|_| {
                (0..220)
                    .map(|_| v.choose(&mut rng).unwrap().as_str())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        pairs.push(json!({"query_id": format!("Q{q}"), "query": query.join(" "), "references": refs, "split": "test"}));
        qvecs.push(json!({"query_id": format!("Q{q}"), "vector": (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()}));
        let docs: Vec<serde_json::Value> = (0..3)
            .map(|d| json!({"id": format!("o{d}"), "text": (0..300).map(|_| v.choose(&mut rng).unwrap().as_str()).collect::<Vec<_>>().join(" ")}))
            .collect();
        origin.push(json!({"query_id": format!("Q{q}"), "documents": docs}));
        for c in 0..12 {
            let grade = rng.gen_range(0..4);
            qrels.push_str(&format!(
                "Q{q} 0 int/d{}#{} {grade}\n",
                rng.gen_range(0..50),
                c % 10
            ));
        }
        qrels.push_str(&format!("Q{q} 0 ext/d{q}#0 3\n"));
    }
    // A training pair that the test split must ignore.
    pairs.push(
        json!({"query_id": "T0", "query": "t1 t2", "references": ["t1 t2"], "split": "train"}),
    );
    write_lines(&dir.join("pairs.jsonl"), pairs);
    write_lines(&dir.join("qvec.jsonl"), qvecs);
    write_lines(&dir.join("origin.jsonl"), origin);
    fs::write(dir.join("qrels.txt"), qrels).unwrap();
}

fn experiment_config(out: &str) -> String {
    format!(
        r#"output_dir = "{out}"
workers = 4

[queries]
pairs = "pairs.jsonl"
split = "test"
vectors = "qvec.jsonl"

[[corpus]]
id = "int"
sources = "int.jsonl"
vectors = "int.vec.jsonl"

[[corpus]]
id = "ext"
sources = "ext.jsonl"
vectors = "ext.vec.jsonl"

[[corpus]]
id = "aug"
merge = ["int", "ext"]

[retrieval]
systems = ["bm25", "dense"]
k = 50

[evaluation]
qrels = "qrels.txt"
cutoffs = [10, 50]

[generation]
provider = "mock"
modes = ["controller", "naive"]
origin = "origin.jsonl"
"#
    )
}

fn files_under(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .replace('\\', "/");
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pipeline(dir: &Path, config: &str) -> Result<std::process::Output, String> {
    Command::new(env!("CARGO_BIN_EXE_kiqfs"))
        .args(["pipeline", "run", "--config", config])
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())
}

fn end_to_end() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    synthetic_inputs(dir);
    fs::write(dir.join("a.toml"), experiment_config("out_a")).unwrap();
    fs::write(dir.join("b.toml"), experiment_config("out_b")).unwrap();
    let start = Instant::now();
    for cfg in ["a.toml", "b.toml"] {
        let out = pipeline(dir, cfg)?;
        ensure(out.status.success(), || {
            format!(
                "{cfg}: exit {:?}: {}",
                out.status.code(),
                String::from_utf8_lossy(&out.stderr)
            )
        })?;
    }
    let elapsed = start.elapsed();
    let a = files_under(&dir.join("out_a"));
    let b = files_under(&dir.join("out_b"));
    let stats: serde_json::Value =
        serde_json::from_slice(&a["corpora/aug/stats.json"]).map_err(|e| e.to_string())?;
    ensure(stats["doc_count"] == 1000, || {
        format!("augmented corpus stats {stats}")
    })?;
    ensure(a.keys().eq(b.keys()), || {
        "the two runs produced different file sets".into()
    })?;
    for (name, bytes) in &a {
        if name != "manifest.json" {
            ensure(&b[name] == bytes, || format!("{name} differs between runs"))?;
        }
    }
    let runs = a.keys().filter(|k| k.starts_with("runs/")).count();
    let summaries = a.keys().filter(|k| k.starts_with("summaries/")).count();
    ensure(runs == 6, || format!("{runs} run files, expected 6"))?;
    ensure(summaries == 14, || {
        format!("{summaries} summary files, expected 14")
    })?;
    let retrieval = String::from_utf8_lossy(&a["reports/retrieval.tsv"]).into_owned();
    let summary = String::from_utf8_lossy(&a["reports/summary.tsv"]).into_owned();
    ensure(retrieval.lines().count() == 7, || {
        format!("retrieval report:\n{retrieval}")
    })?;
    ensure(summary.lines().count() == 15, || {
        format!("summary report:\n{summary}")
    })?;
    ensure(
        a.contains_key("reports/retrieval.json") && a.contains_key("reports/summary.json"),
        || "json reports missing".into(),
    )?;
    let records = String::from_utf8_lossy(&a["summaries/controller.bm25.aug.jsonl"]).into_owned();
    ensure(records.lines().count() == 5, || {
        "expected 5 test-split records".into()
    })?;

    let manifest: serde_json::Value =
        serde_json::from_slice(&a["manifest.json"]).map_err(|e| e.to_string())?;
    let listed: BTreeSet<&str> = manifest["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .filter_map(|v| v.as_str())
        .collect();
    for name in a
        .keys()
        .filter(|k| !k.starts_with("stages/") && *k != "manifest.json")
    {
        ensure(listed.contains(name.as_str()), || {
            format!("{name} is not listed in the manifest")
        })?;
    }

    let again = pipeline(dir, "a.toml")?;
    let shown = String::from_utf8_lossy(&again.stdout).into_owned();
    let statuses: Vec<&str> = shown
        .lines()
        .filter_map(|l| l.split_whitespace().last())
        .filter(|w| matches!(*w, "Ran" | "Cached" | "Skipped" | "Partial"))
        .collect();
    let cached = statuses.iter().filter(|s| **s == "Cached").count();
    ensure(
        again.status.success()
            && cached > 0
            && statuses.iter().all(|s| matches!(*s, "Cached" | "Skipped")),
        || format!("rerun was not a no-op:\n{shown}"),
    )?;
    ensure(
        files_under(&dir.join("out_a"))
            .into_iter()
            .filter(|(k, _)| k != "manifest.json")
            .eq(a.into_iter().filter(|(k, _)| k != "manifest.json")),
        || "rerun changed outputs".into(),
    )?;
    within(elapsed, E2E_BUDGET)?;
    Ok(format!(
        "1000-chunk corpus, 5 queries: {runs} runs, {summaries} summary files, 2 reports byte-identical across runs; rerun {cached} stages cached; {elapsed:?}"
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("bm25 oracle equivalence", bm25_equivalence),
        ("dense search oracle equivalence", dense_equivalence),
        ("rouge oracle equivalence", rouge_equivalence),
        ("retrieval metric oracle", retrieval_metric_oracle),
        ("fleiss kappa", fleiss_kappa_checks),
        ("chunking round trip", chunking_round_trip),
        ("pooling bounds", pooling_bounds),
        ("end-to-end smoke", end_to_end),
        ("prompt budget", prompt_budget),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
