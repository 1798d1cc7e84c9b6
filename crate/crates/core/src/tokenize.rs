//! The shared word tokenizer.
//!
//! Every count in the toolkit (chunk sizes, BM25 term statistics, ROUGE
//! n-grams, token estimates) goes through this one definition of a word.
//!
//! Punctuation table: any character for which [`char::is_alphanumeric`] is
//! false acts as a separator. That covers ASCII punctuation (`.,;:!?'"-_/()[]{}`
//! and so on), symbols, and all Unicode whitespace. Tokens are split on the
//! original text first and lowercased afterwards, so `state-of-the-art`
//! becomes `state`, `of`, `the`, `art` and `don't` becomes `don`, `t`.

use std::ops::Range;

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Byte ranges of each word in `text`, in order.
pub fn word_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (is_word_char(c), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push(s..text.len());
    }
    spans
}

pub fn tokenize_words(text: &str) -> Vec<String> {
    word_spans(text)
        .into_iter()
        .map(|r| text[r].to_lowercase())
        .collect()
}

pub fn word_count(text: &str) -> usize {
    word_spans(text).len()
}

/// Keep the first `limit` words of `text`, preserving the original characters
/// up to the end of the last kept word. Texts within the limit are returned as is.
pub fn truncate_words(text: &str, limit: usize) -> &str {
    let spans = word_spans(text);
    if spans.len() <= limit {
        return text;
    }
    match limit {
        0 => "",
        n => &text[..spans[n - 1].end],
    }
}
