//! ROUGE-1, ROUGE-2 and ROUGE-SU4 with candidate truncation and
//! multi-reference averaging.
//!
//! Texts go through the shared tokenizer (lowercase, punctuation stripped);
//! no stemming or stopword removal. Skip-bigrams are ordered pairs
//! `(w_i, w_j)` with `i < j` and `j - i <= 4`, so adjacent bigrams are
//! included. SU4 pools those pairs with the unigrams into one multiset before
//! clipping.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::QuerySummaryPair;
use crate::error::{Error, Result};
use crate::report::ReportRow;
use crate::tokenize::{tokenize_words, truncate_words};

pub const DEFAULT_WORD_LIMIT: usize = 250;
pub const DEFAULT_MAX_SKIP: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScore {
            precision,
            recall,
            f1,
        }
    }

    fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        Self::from_pr(
            ratio(overlap, candidate_total),
            ratio(overlap, reference_total),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    Rouge1,
    Rouge2,
    RougeSu4,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Rouge1, Metric::Rouge2, Metric::RougeSu4];

    pub fn column(self) -> &'static str {
        match self {
            Metric::Rouge1 => "R1",
            Metric::Rouge2 => "R2",
            Metric::RougeSu4 => "RSU4",
        }
    }
}

pub fn ngram_counts<S: AsRef<str>>(words: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    assert!(n >= 1, "n must be at least 1");
    let mut counts = HashMap::new();
    if words.len() < n {
        return counts;
    }
    for window in words.windows(n) {
        let gram: Vec<&str> = window.iter().map(AsRef::as_ref).collect();
        *counts.entry(gram).or_default() += 1;
    }
    counts
}

pub fn skip_bigram_counts<S: AsRef<str>>(
    words: &[S],
    max_skip: usize,
) -> HashMap<(&str, &str), usize> {
    assert!(max_skip >= 1, "max_skip must be at least 1");
    let mut counts = HashMap::new();
    for i in 0..words.len() {
        for j in (i + 1)..words.len().min(i + max_skip + 1) {
            *counts
                .entry((words[i].as_ref(), words[j].as_ref()))
                .or_default() += 1;
        }
    }
    counts
}

/// Clipped overlap and the two totals of a pair of count multisets.
fn overlap<K: Eq + Hash>(
    cand: &HashMap<K, usize>,
    reference: &HashMap<K, usize>,
) -> (usize, usize, usize) {
    let matched = cand
        .iter()
        .map(|(g, &c)| reference.get(g).map_or(0, |&r| c.min(r)))
        .sum();
    (matched, cand.values().sum(), reference.values().sum())
}

fn rouge_n_words(cand: &[String], reference: &[String], n: usize) -> RougeScore {
    let (m, c, r) = overlap(&ngram_counts(cand, n), &ngram_counts(reference, n));
    RougeScore::from_counts(m, c, r)
}

#[derive(PartialEq, Eq, Hash)]
enum SuGram<'a> {
    Uni(&'a str),
    Skip(&'a str, &'a str),
}

fn su_counts(words: &[String], max_skip: usize) -> HashMap<SuGram<'_>, usize> {
    let mut counts: HashMap<SuGram<'_>, usize> = HashMap::new();
    for w in words {
        *counts.entry(SuGram::Uni(w)).or_default() += 1;
    }
    for ((a, b), n) in skip_bigram_counts(words, max_skip) {
        *counts.entry(SuGram::Skip(a, b)).or_default() += n;
    }
    counts
}

fn rouge_su_words(cand: &[String], reference: &[String], max_skip: usize) -> RougeScore {
    let (m, c, r) = overlap(&su_counts(cand, max_skip), &su_counts(reference, max_skip));
    RougeScore::from_counts(m, c, r)
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> RougeScore {
    rouge_n_words(&tokenize_words(candidate), &tokenize_words(reference), n)
}

pub fn rouge_su4(candidate: &str, reference: &str) -> RougeScore {
    rouge_su_words(
        &tokenize_words(candidate),
        &tokenize_words(reference),
        DEFAULT_MAX_SKIP,
    )
}

pub fn score(metric: Metric, candidate: &str, reference: &str) -> RougeScore {
    match metric {
        Metric::Rouge1 => rouge_n(candidate, reference, 1),
        Metric::Rouge2 => rouge_n(candidate, reference, 2),
        Metric::RougeSu4 => rouge_su4(candidate, reference),
    }
}

/// Mean of per-reference precision, recall and F1.
pub fn multi_ref_score(
    candidate: &str,
    references: &[String],
    metric: Metric,
) -> Result<RougeScore> {
    if references.is_empty() {
        return Err(Error::Invalid("no reference summaries".into()));
    }
    let n = references.len() as f64;
    let sum = references.iter().map(|r| score(metric, candidate, r)).fold(
        RougeScore::default(),
        |acc, s| RougeScore {
            precision: acc.precision + s.precision,
            recall: acc.recall + s.recall,
            f1: acc.f1 + s.f1,
        },
    );
    Ok(RougeScore {
        precision: sum.precision / n,
        recall: sum.recall / n,
        f1: sum.f1 / n,
    })
}

/// Per-query averaged F1 for each metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScores {
    pub query_id: String,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_su4: RougeScore,
}

/// Scores one candidate against every reference after truncating it to
/// `limit` words. References are used in full.
pub fn score_query(
    query_id: &str,
    candidate: &str,
    references: &[String],
    limit: usize,
) -> Result<QueryScores> {
    let candidate = truncate_words(candidate, limit);
    Ok(QueryScores {
        query_id: query_id.to_string(),
        rouge1: multi_ref_score(candidate, references, Metric::Rouge1)?,
        rouge2: multi_ref_score(candidate, references, Metric::Rouge2)?,
        rouge_su4: multi_ref_score(candidate, references, Metric::RougeSu4)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryScores {
    pub per_query: Vec<QueryScores>,
    /// Macro-averaged F1 for R1, R2 and RSU4, as fractions.
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_su4: f64,
}

impl SummaryScores {
    pub fn to_row(&self, system: &str, corpus: &str) -> ReportRow {
        ReportRow::new()
            .label("system", system)
            .label("corpus", corpus)
            .metric("R1", self.rouge1)
            .metric("R2", self.rouge2)
            .metric("RSU4", self.rouge_su4)
    }
}

/// Macro-average over the given `(query_id, summary)` pairs.
pub fn evaluate_summaries<'a, I>(
    summaries: I,
    pairs: &[QuerySummaryPair],
    limit: usize,
) -> Result<SummaryScores>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let refs: HashMap<&str, &QuerySummaryPair> =
        pairs.iter().map(|p| (p.query_id.as_str(), p)).collect();
    let per_query: Vec<QueryScores> = summaries
        .into_iter()
        .map(|(qid, text)| {
            let pair = refs
                .get(qid)
                .ok_or_else(|| Error::MissingQuery(qid.to_string()))?;
            score_query(qid, text, &pair.references, limit)
        })
        .collect::<Result<_>>()?;
    if per_query.is_empty() {
        return Err(Error::EmptyReport);
    }
    let n = per_query.len() as f64;
    let mean = |f: fn(&QueryScores) -> f64| per_query.iter().map(f).sum::<f64>() / n;
    Ok(SummaryScores {
        rouge1: mean(|q| q.rouge1.f1),
        rouge2: mean(|q| q.rouge2.f1),
        rouge_su4: mean(|q| q.rouge_su4.f1),
        per_query,
    })
}
