//! Prompt assembly and LLM-driven summary generation.
//!
//! Two prompt modes are supported: the two-step controller (identify
//! query-relevant information, then write a ~250-word summary) and the
//! NaiveRAG baseline that simply asks the model to answer from the documents.
//! Templates and demonstrations are plain-text files; the versioned defaults
//! under `assets/prompts` are compiled in.

pub mod provider;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::corpus::{Chunk, Corpus, QuerySummaryPair};
use crate::error::{Error, Result};
use crate::io;
use crate::run::RetrievalRun;
use crate::tokenize::word_count;

pub use provider::{
    Completion, CompletionRequest, HttpProvider, LlmProvider, MockProvider, ProviderError,
    RetryPolicy,
};

pub const DEFAULT_CONTEXT_WINDOW: usize = 16_385;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Controller,
    #[serde(alias = "naive")]
    NaiveRag,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Controller => "controller",
            Mode::NaiveRag => "naive",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "controller" => Ok(Mode::Controller),
            "naive" | "naive_rag" | "naiverag" => Ok(Mode::NaiveRag),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (controller|naive)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: u32,
    pub top_k_docs: usize,
    pub shots: usize,
    pub context_window: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            temperature: 0.1,
            top_p: 0.95,
            max_output_tokens: 400,
            top_k_docs: 50,
            shots: 3,
            context_window: DEFAULT_CONTEXT_WINDOW,
        }
    }
}

/// A prompt template with `{demonstrations}`, `{query}` and `{documents}` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    mode: Mode,
    text: String,
}

const SLOTS: [&str; 3] = ["demonstrations", "query", "documents"];

impl PromptTemplate {
    pub fn new(mode: Mode, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        for slot in SLOTS {
            if !text.contains(&format!("{{{slot}}}")) {
                return Err(Error::Template(format!("{mode} template lacks {{{slot}}}")));
            }
        }
        let steps = text.contains("Step 1") && text.contains("Step 2");
        match mode {
            Mode::Controller if !steps => {
                return Err(Error::Template(
                    "controller template needs Step 1 and Step 2".into(),
                ))
            }
            Mode::NaiveRag if text.contains("Step 1") || text.contains("Step 2") => {
                return Err(Error::Template(
                    "naive template must not contain step sections".into(),
                ))
            }
            _ => {}
        }
        Ok(PromptTemplate { mode, text })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Single-pass substitution, so slot names inside values are left alone.
    fn render(&self, demonstrations: &str, query: &str, documents: &str) -> String {
        let mut out =
            String::with_capacity(self.text.len() + documents.len() + demonstrations.len());
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let tail = &rest[open..];
            let hit = SLOTS
                .iter()
                .find(|s| tail[1..].starts_with(**s) && tail[1 + s.len()..].starts_with('}'));
            match hit {
                Some(&slot) => {
                    out.push_str(match slot {
                        "demonstrations" => demonstrations,
                        "query" => query,
                        _ => documents,
                    });
                    rest = &tail[slot.len() + 2..];
                }
                None => {
                    out.push('{');
                    rest = &tail[1..];
                }
            }
        }
        out.push_str(rest);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub query: String,
    pub documents: Vec<String>,
    pub summary: String,
}

impl Demonstration {
    /// Parses the `Query:` / `Documents:` / `Summary:` text format. Each
    /// non-empty line of the documents section is one document.
    pub fn parse(text: &str) -> Result<Self> {
        let q = text
            .find("Query:")
            .ok_or_else(|| Error::Template("demonstration lacks Query:".into()))?;
        let d = text
            .find("\nDocuments:")
            .ok_or_else(|| Error::Template("demonstration lacks Documents:".into()))?;
        let s = text
            .find("\nSummary:")
            .ok_or_else(|| Error::Template("demonstration lacks Summary:".into()))?;
        if !(q < d && d < s) {
            return Err(Error::Template(
                "demonstration sections out of order".into(),
            ));
        }
        let query = text[q + "Query:".len()..d].trim().to_string();
        let documents = text[d + "\nDocuments:".len()..s]
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        let summary = text[s + "\nSummary:".len()..].trim().to_string();
        if query.is_empty() || summary.is_empty() {
            return Err(Error::Template(
                "demonstration has an empty query or summary".into(),
            ));
        }
        let words = word_count(&summary);
        if words > 300 {
            log::warn!("demonstration summary has {words} words, above the 300-word bound");
        }
        Ok(Demonstration {
            query,
            documents,
            summary,
        })
    }

    fn render(&self) -> String {
        format!(
            "Query: {}\nDocuments:\n{}Summary: {}\n\n",
            self.query,
            number_documents(self.documents.iter().map(String::as_str)),
            self.summary
        )
    }
}

fn number_documents<'a>(docs: impl Iterator<Item = &'a str>) -> String {
    let mut out = String::new();
    for (i, d) in docs.enumerate() {
        out.push_str(&format!("Document [{}]: {}\n", i + 1, d));
    }
    out
}

/// Templates and demonstrations for both modes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptAssets {
    pub version: String,
    pub controller: PromptTemplate,
    pub naive: PromptTemplate,
    pub demos: Vec<Demonstration>,
}

impl PromptAssets {
    pub fn builtin() -> Self {
        let demos = [
            include_str!("../../assets/prompts/demos/01.txt"),
            include_str!("../../assets/prompts/demos/02.txt"),
            include_str!("../../assets/prompts/demos/03.txt"),
        ]
        .iter()
        .map(|t| Demonstration::parse(t).expect("builtin demonstration parses"))
        .collect();
        PromptAssets {
            version: include_str!("../../assets/prompts/VERSION")
                .trim()
                .to_string(),
            controller: PromptTemplate::new(
                Mode::Controller,
                include_str!("../../assets/prompts/controller.txt"),
            )
            .expect("builtin controller template"),
            naive: PromptTemplate::new(
                Mode::NaiveRag,
                include_str!("../../assets/prompts/naive_rag.txt"),
            )
            .expect("builtin naive template"),
            demos,
        }
    }

    /// Loads `controller.txt`, `naive_rag.txt`, `VERSION` and `demos/*.txt`
    /// (in file-name order) from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let version = io::read_to_string(&dir.join("VERSION"))?.trim().to_string();
        let controller = PromptTemplate::new(
            Mode::Controller,
            io::read_to_string(&dir.join("controller.txt"))?,
        )?;
        let naive = PromptTemplate::new(
            Mode::NaiveRag,
            io::read_to_string(&dir.join("naive_rag.txt"))?,
        )?;
        let demo_dir = dir.join("demos");
        let mut files: Vec<_> = std::fs::read_dir(&demo_dir)
            .map_err(|e| Error::io(&demo_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        let demos = files
            .iter()
            .map(|p| Demonstration::parse(&io::read_to_string(p)?))
            .collect::<Result<_>>()?;
        Ok(PromptAssets {
            version,
            controller,
            naive,
            demos,
        })
    }

    pub fn template(&self, mode: Mode) -> &PromptTemplate {
        match mode {
            Mode::Controller => &self.controller,
            Mode::NaiveRag => &self.naive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub query_id: String,
    pub mode: Mode,
    pub text: String,
    /// Chunks included in the prompt, in rank order.
    pub chunk_ids: Vec<String>,
    pub token_estimate: usize,
}

/// `⌈words × 4/3⌉` under the shared tokenizer.
pub fn estimate_tokens(text: &str) -> usize {
    (word_count(text) * 4).div_ceil(3)
}

/// Renders the prompt for one query from its ranked chunks: instruction,
/// step sections (controller mode), `config.shots` demonstrations, the query,
/// then the first `config.top_k_docs` chunks numbered in rank order.
pub fn assemble_prompt(
    template: &PromptTemplate,
    query_id: &str,
    query: &str,
    docs: &[&Chunk],
    demos: &[Demonstration],
    config: &GenerationConfig,
) -> Result<PromptBundle> {
    if docs.is_empty() {
        return Err(Error::NothingToSummarize);
    }
    if config.shots > demos.len() {
        return Err(Error::NotEnoughDemos {
            requested: config.shots,
            available: demos.len(),
        });
    }
    let included = &docs[..docs.len().min(config.top_k_docs.max(1))];
    let demonstrations = if config.shots == 0 {
        String::new()
    } else {
        let mut s = String::from("Demonstrations:\n\n");
        for d in &demos[..config.shots] {
            s.push_str(&d.render());
        }
        s
    };
    let mut documents = number_documents(included.iter().map(|c| c.text.as_str()));
    documents.pop();
    let text = template.render(&demonstrations, query.trim(), &documents);
    Ok(PromptBundle {
        query_id: query_id.to_string(),
        mode: template.mode(),
        token_estimate: estimate_tokens(&text),
        chunk_ids: included.iter().map(|c| c.chunk_id.clone()).collect(),
        text,
    })
}

/// In controller mode the summary is whatever follows the last `Step 2`
/// marker, minus its heading; without a marker the whole text is used.
pub fn extract_summary(output: &str, mode: Mode) -> &str {
    if mode != Mode::Controller {
        return output.trim();
    }
    let Some(i) = output.rfind("Step 2") else {
        return output.trim();
    };
    let mut rest = output[i + "Step 2".len()..].trim_start_matches([':', '*', '#', '-', ' ', '\t']);
    const HEADING: &str = "controllable summarization";
    if rest.len() >= HEADING.len() && rest[..HEADING.len()].eq_ignore_ascii_case(HEADING) {
        rest = &rest[HEADING.len()..];
    }
    rest.trim_start_matches([':', '*', '#', '-']).trim()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub query_id: String,
    /// Variant label, e.g. `controller/bm25/int/3shot`.
    pub system: String,
    pub summary: String,
    pub word_count: usize,
    pub model_id: String,
    pub latency_ms: u64,
    pub retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SummaryRecord {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn failed(query_id: &str, system: &str, model_id: &str, err: &Error) -> Self {
        SummaryRecord {
            query_id: query_id.to_string(),
            system: system.to_string(),
            summary: String::new(),
            word_count: 0,
            model_id: model_id.to_string(),
            latency_ms: 0,
            retries: 0,
            error: Some(err.to_string()),
        }
    }
}

/// Sends one bundle to the provider, retrying transient failures. Bundles
/// over the context window are rejected without a provider call.
pub fn generate_summary(
    provider: &dyn LlmProvider,
    bundle: &PromptBundle,
    config: &GenerationConfig,
    retry: &RetryPolicy,
    system: &str,
) -> Result<SummaryRecord> {
    if bundle.token_estimate > config.context_window {
        return Err(Error::OverBudget {
            query_id: bundle.query_id.clone(),
            estimate: bundle.token_estimate,
            window: config.context_window,
        });
    }
    let request = CompletionRequest {
        system: None,
        user: bundle.text.clone(),
        temperature: config.temperature,
        top_p: config.top_p,
        max_tokens: config.max_output_tokens,
    };
    let mut latency = 0u64;
    let mut attempt = 0u32;
    loop {
        match provider.complete(&request) {
            Ok(c) => {
                latency += c.latency_ms;
                let summary = extract_summary(&c.text, bundle.mode);
                if summary.is_empty() {
                    return Err(Error::EmptyGeneration);
                }
                return Ok(SummaryRecord {
                    query_id: bundle.query_id.clone(),
                    system: system.to_string(),
                    word_count: word_count(summary),
                    summary: summary.to_string(),
                    model_id: provider.model_id().to_string(),
                    latency_ms: latency,
                    retries: attempt,
                    error: None,
                });
            }
            Err(e) if e.is_transient() && attempt < retry.max_retries => {
                let wait = retry.delay(attempt);
                log::warn!("{}: {e}; retrying in {wait:?}", bundle.query_id);
                if wait > Duration::ZERO {
                    thread::sleep(wait);
                }
                attempt += 1;
            }
            Err(e) => {
                return Err(Error::ProviderExhausted {
                    query_id: bundle.query_id.clone(),
                    attempts: attempt + 1,
                    last: e.to_string(),
                })
            }
        }
    }
}

/// Generates every bundle with at most `max_in_flight` concurrent provider
/// calls. Results come back in input order.
pub fn generate_all(
    provider: &dyn LlmProvider,
    bundles: &[PromptBundle],
    config: &GenerationConfig,
    retry: &RetryPolicy,
    system: &str,
    max_in_flight: usize,
) -> Vec<Result<SummaryRecord>> {
    let workers = max_in_flight.max(1).min(bundles.len());
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<SummaryRecord>>>> =
        Mutex::new((0..bundles.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(bundle) = bundles.get(i) else {
                    break;
                };
                let out = generate_summary(provider, bundle, config, retry, system);
                slots.lock()[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .into_iter()
        .map(|r| r.expect("every bundle is generated"))
        .collect()
}

/// Prompting and generation settings shared by every query of one variant.
#[derive(Clone, Copy)]
pub struct Generator<'a> {
    pub provider: &'a dyn LlmProvider,
    pub template: &'a PromptTemplate,
    pub demos: &'a [Demonstration],
    pub params: GenerationConfig,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
}

impl Generator<'_> {
    /// One record per pair, in pair order. Queries whose prompt cannot be
    /// built or generated yield failed records instead of aborting.
    pub fn summarize(
        &self,
        system: &str,
        pairs: &[QuerySummaryPair],
        docs_for: impl Fn(&str) -> Result<Vec<Chunk>>,
    ) -> Result<Vec<SummaryRecord>> {
        let model = self.provider.model_id();
        let mut slots: Vec<std::result::Result<usize, SummaryRecord>> = Vec::new();
        let mut bundles = Vec::new();
        for p in pairs {
            let docs = docs_for(&p.query_id)?;
            let refs: Vec<&Chunk> = docs.iter().collect();
            match assemble_prompt(
                self.template,
                &p.query_id,
                &p.query_text,
                &refs,
                self.demos,
                &self.params,
            ) {
                Ok(b) => {
                    slots.push(Ok(bundles.len()));
                    bundles.push(b);
                }
                Err(err) => {
                    log::warn!("{}: {err}", p.query_id);
                    slots.push(Err(SummaryRecord::failed(&p.query_id, system, model, &err)));
                }
            }
        }
        let mut generated: Vec<Option<Result<SummaryRecord>>> = generate_all(
            self.provider,
            &bundles,
            &self.params,
            &self.retry,
            system,
            self.max_in_flight,
        )
        .into_iter()
        .map(Some)
        .collect();
        Ok(slots
            .into_iter()
            .zip(pairs)
            .map(|(slot, p)| match slot {
                Ok(i) => match generated[i].take().expect("each bundle used once") {
                    Ok(r) => r,
                    Err(err) => {
                        log::warn!("{}: {err}", p.query_id);
                        SummaryRecord::failed(&p.query_id, system, model, &err)
                    }
                },
                Err(failed) => failed,
            })
            .collect())
    }

    /// Summarizes each pair from its ranked chunks in `run`.
    pub fn summarize_run(
        &self,
        system: &str,
        pairs: &[QuerySummaryPair],
        run: &RetrievalRun,
        corpus: &Corpus,
    ) -> Result<Vec<SummaryRecord>> {
        let by_id: HashMap<&str, &Chunk> = corpus
            .chunks()
            .iter()
            .map(|c| (c.chunk_id.as_str(), c))
            .collect();
        self.summarize(system, pairs, |qid| {
            run.ranked_ids(qid)
                .into_iter()
                .map(|id| {
                    by_id
                        .get(id)
                        .map(|c| (*c).clone())
                        .ok_or_else(|| Error::UnknownChunk(id.to_string()))
                })
                .collect()
        })
    }
}
