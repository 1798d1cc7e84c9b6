//! Config-driven pipelines: corpus build, indexing, retrieval, pooling and
//! retrieval evaluation; then prompting, generation and ROUGE evaluation.
//!
//! Every stage is stamped with a SHA-256 digest of its inputs under
//! `<output_dir>/stages/`. Rerunning a stage whose digest and outputs are
//! unchanged is a no-op. `manifest.json` at the output root records the
//! config snapshot, input digests, stage outcomes and produced artifacts.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotation::{build_pool, partition_tasks, DEFAULT_MAX_DOCS, DEFAULT_POOL_DEPTH};
use crate::controller::provider::provider_from_env;
use crate::controller::{
    GenerationConfig, Generator, LlmProvider, Mode, PromptAssets, RetryPolicy, SummaryRecord,
    DEFAULT_CONTEXT_WINDOW, DEFAULT_MAX_IN_FLIGHT,
};
use crate::corpus::{
    build_corpus, chunk_source, merge_corpora, read_pairs, read_sources, Chunk, CollectionTag,
    Corpus, CorpusId, QuerySummaryPair, SourceDocument, Split, CHUNKS_FILE, DEFAULT_MAX_WORDS,
    STATS_FILE,
};
use crate::dense::{load_query_vectors, VectorRecord, VectorStore};
use crate::error::{Error, Result};
use crate::io;
use crate::qrels::{check_threshold, Qrels};
use crate::report::{emit_report, ReportRow};
use crate::retrieval_eval::{evaluate_run, DEFAULT_CUTOFFS, DEFAULT_THRESHOLD};
use crate::rouge::{evaluate_summaries, DEFAULT_WORD_LIMIT};
use crate::run::RetrievalRun;
use crate::sparse::{build_index, Bm25Params, InvertedIndex, INDEX_FILE};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Retriever {
    Bm25,
    Dense,
}

impl Retriever {
    pub fn as_str(self) -> &'static str {
        match self {
            Retriever::Bm25 => "bm25",
            Retriever::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueriesConfig {
    pub pairs: PathBuf,
    /// Only pairs of this split are used; all pairs when absent.
    #[serde(default)]
    pub split: Option<Split>,
    /// Query embeddings, required by the dense retriever.
    #[serde(default)]
    pub vectors: Option<PathBuf>,
}

/// One corpus, built from exactly one of `sources`, `dir` or `merge`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub id: CorpusId,
    /// Source JSON-lines file; chunked with `chunk_words`.
    #[serde(default)]
    pub sources: Option<PathBuf>,
    /// Collection tag for `sources`; defaults to the corpus id.
    #[serde(default)]
    pub tag: Option<CollectionTag>,
    /// Directory written by `kiqfs ingest`.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Earlier corpora concatenated in the listed order.
    #[serde(default)]
    pub merge: Option<Vec<CorpusId>>,
    #[serde(default)]
    pub vectors: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub systems: Vec<Retriever>,
    pub k: usize,
    pub k1: f64,
    pub b: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        let p = Bm25Params::default();
        RetrievalConfig {
            systems: vec![Retriever::Bm25],
            k: 50,
            k1: p.k1,
            b: p.b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolingConfig {
    pub enabled: bool,
    pub depth: usize,
    pub max_docs: usize,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        PoolingConfig {
            enabled: true,
            depth: DEFAULT_POOL_DEPTH,
            max_docs: DEFAULT_MAX_DOCS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub qrels: Option<PathBuf>,
    pub cutoffs: Vec<usize>,
    pub threshold: u8,
    pub word_limit: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            qrels: None,
            cutoffs: DEFAULT_CUTOFFS.to_vec(),
            threshold: DEFAULT_THRESHOLD,
            word_limit: DEFAULT_WORD_LIMIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub provider: String,
    pub modes: Vec<Mode>,
    /// Retrievers whose runs feed the prompts; all configured when absent.
    pub retrievers: Option<Vec<Retriever>>,
    pub corpora: Option<Vec<CorpusId>>,
    pub shots: usize,
    pub top_k_docs: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: u32,
    pub context_window: usize,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub timeout_secs: u64,
    /// Words the mock provider echoes back.
    pub mock_words: usize,
    pub prompts: Option<PathBuf>,
    /// Original per-query document sets for the origin comparison rows.
    pub origin: Option<PathBuf>,
}

impl Default for GenerationSection {
    fn default() -> Self {
        let g = GenerationConfig::default();
        GenerationSection {
            provider: "mock".into(),
            modes: vec![Mode::Controller],
            retrievers: None,
            corpora: None,
            shots: g.shots,
            top_k_docs: g.top_k_docs,
            temperature: g.temperature,
            top_p: g.top_p,
            max_output_tokens: g.max_output_tokens,
            context_window: DEFAULT_CONTEXT_WINDOW,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            max_retries: RetryPolicy::default().max_retries,
            timeout_secs: 120,
            mock_words: 250,
            prompts: None,
            origin: None,
        }
    }
}

impl GenerationSection {
    pub fn params(&self) -> GenerationConfig {
        GenerationConfig {
            temperature: self.temperature,
            top_p: self.top_p,
            max_output_tokens: self.max_output_tokens,
            top_k_docs: self.top_k_docs,
            shots: self.shots,
            context_window: self.context_window,
        }
    }
}

fn default_workers() -> usize {
    4
}

fn default_chunk_words() -> usize {
    DEFAULT_MAX_WORDS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_chunk_words")]
    pub chunk_words: usize,
    pub queries: QueriesConfig,
    #[serde(rename = "corpus")]
    pub corpora: Vec<CorpusConfig>,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub pooling: PoolingConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    /// Summarization is skipped when this section is absent.
    #[serde(default)]
    pub generation: Option<GenerationSection>,
}

/// Replaces `${NAME}` with `lookup(NAME)`. Unset variables are config errors.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(i) = rest.find("${") {
        out.push_str(&rest[..i]);
        let after = &rest[i + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| Error::Config("unterminated ${ in config".into()))?;
        let name = &after[..end];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::Config(format!(
                "bad variable name {name:?} in config"
            )));
        }
        let value = lookup(name)
            .ok_or_else(|| Error::Config(format!("environment variable {name} is not set")))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        resolve(base, p);
    }
}

impl ExperimentConfig {
    /// Parses TOML after `${VAR}` interpolation from the process environment.
    /// Relative paths are taken relative to `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        Self::from_toml_with(text, base, |k| std::env::var(k).ok())
    }

    pub fn from_toml_with(
        text: &str,
        base: &Path,
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<Self> {
        let text = interpolate(text, lookup)?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("config: {e}")))?;
        resolve(base, &mut cfg.output_dir);
        resolve(base, &mut cfg.queries.pairs);
        resolve_opt(base, &mut cfg.queries.vectors);
        for c in &mut cfg.corpora {
            resolve_opt(base, &mut c.sources);
            resolve_opt(base, &mut c.dir);
            resolve_opt(base, &mut c.vectors);
        }
        resolve_opt(base, &mut cfg.evaluation.qrels);
        if let Some(g) = &mut cfg.generation {
            resolve_opt(base, &mut g.prompts);
            resolve_opt(base, &mut g.origin);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path).map_err(|e| Error::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn corpus(&self, id: CorpusId) -> Option<&CorpusConfig> {
        self.corpora.iter().find(|c| c.id == id)
    }

    fn gen_retrievers(&self, g: &GenerationSection) -> Vec<Retriever> {
        g.retrievers
            .clone()
            .unwrap_or_else(|| self.retrieval.systems.clone())
    }

    fn gen_corpora(&self, g: &GenerationSection) -> Vec<CorpusId> {
        g.corpora
            .clone()
            .unwrap_or_else(|| self.corpora.iter().map(|c| c.id).collect())
    }

    /// Checks invariants and that every referenced input path exists.
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.workers == 0 {
            return cfg("workers must be at least 1".into());
        }
        if self.chunk_words == 0 {
            return cfg("chunk_words must be at least 1".into());
        }
        if self.corpora.is_empty() {
            return cfg("at least one [[corpus]] is required".into());
        }
        let mut inputs: Vec<(&str, &Path)> = vec![("queries.pairs", &self.queries.pairs)];
        let mut seen = BTreeSet::new();
        for c in &self.corpora {
            if !seen.insert(c.id) {
                return cfg(format!("corpus {} is defined twice", c.id));
            }
            let kinds = [c.sources.is_some(), c.dir.is_some(), c.merge.is_some()];
            if kinds.iter().filter(|k| **k).count() != 1 {
                return cfg(format!(
                    "corpus {} needs exactly one of sources, dir or merge",
                    c.id
                ));
            }
            if let Some(s) = &c.sources {
                inputs.push(("corpus.sources", s));
                if c.tag.is_none() && !matches!(c.id, CorpusId::Int | CorpusId::Ext) {
                    return cfg(format!("corpus {} built from sources needs a tag", c.id));
                }
            }
            if let Some(d) = &c.dir {
                inputs.push(("corpus.dir", d));
            }
            if let Some(parts) = &c.merge {
                if parts.len() < 2 {
                    return cfg(format!("corpus {} must merge at least two corpora", c.id));
                }
                for p in parts {
                    if *p == c.id || !seen.contains(p) {
                        return cfg(format!(
                            "corpus {} merges {p}, which is not defined before it",
                            c.id
                        ));
                    }
                }
            }
            if let Some(v) = &c.vectors {
                inputs.push(("corpus.vectors", v));
            }
        }
        let r = &self.retrieval;
        if r.systems.is_empty() {
            return cfg("retrieval.systems is empty".into());
        }
        Bm25Params::new(r.k1, r.b)?;
        let e = &self.evaluation;
        if e.cutoffs.is_empty() || e.cutoffs.contains(&0) {
            return cfg("evaluation.cutoffs must be non-empty and at least 1".into());
        }
        let max_cut = *e.cutoffs.iter().max().expect("non-empty");
        if r.k < max_cut {
            return cfg(format!(
                "retrieval.k = {} is below the largest cutoff {max_cut}",
                r.k
            ));
        }
        check_threshold(e.threshold)?;
        if e.word_limit == 0 {
            return cfg("evaluation.word_limit must be at least 1".into());
        }
        if let Some(q) = &e.qrels {
            inputs.push(("evaluation.qrels", q));
        }
        if self.pooling.enabled && (self.pooling.depth == 0 || self.pooling.max_docs == 0) {
            return cfg("pooling.depth and pooling.max_docs must be at least 1".into());
        }
        if r.systems.contains(&Retriever::Dense) {
            match &self.queries.vectors {
                Some(v) => inputs.push(("queries.vectors", v)),
                None => return cfg("the dense retriever needs queries.vectors".into()),
            }
            for c in &self.corpora {
                if self.vector_files(c).is_empty() {
                    return cfg(format!(
                        "the dense retriever needs vectors for corpus {}",
                        c.id
                    ));
                }
            }
        }
        if let Some(g) = &self.generation {
            if g.modes.is_empty() {
                return cfg("generation.modes is empty".into());
            }
            if g.max_in_flight == 0 || g.top_k_docs == 0 {
                return cfg("generation.max_in_flight and top_k_docs must be at least 1".into());
            }
            for rt in self.gen_retrievers(g) {
                if !r.systems.contains(&rt) {
                    return cfg(format!(
                        "generation uses retriever {}, which is not configured",
                        rt.as_str()
                    ));
                }
            }
            for c in self.gen_corpora(g) {
                if self.corpus(c).is_none() {
                    return cfg(format!(
                        "generation uses corpus {c}, which is not configured"
                    ));
                }
            }
            if g.top_k_docs > r.k {
                log::warn!(
                    "generation.top_k_docs {} exceeds retrieval.k {}",
                    g.top_k_docs,
                    r.k
                );
            }
            if let Some(p) = &g.prompts {
                inputs.push(("generation.prompts", p));
            }
            if let Some(o) = &g.origin {
                inputs.push(("generation.origin", o));
            }
        }
        for (what, p) in inputs {
            if !p.exists() {
                return cfg(format!("{what}: {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    /// Vector files of a corpus; merged corpora use their parts' files in order.
    fn vector_files(&self, c: &CorpusConfig) -> Vec<PathBuf> {
        if let Some(v) = &c.vectors {
            return vec![v.clone()];
        }
        match &c.merge {
            Some(parts) => {
                let files: Vec<Vec<PathBuf>> = parts
                    .iter()
                    .filter_map(|p| self.corpus(*p))
                    .map(|p| self.vector_files(p))
                    .collect();
                if files.iter().any(Vec::is_empty) {
                    Vec::new()
                } else {
                    files.concat()
                }
            }
            None => Vec::new(),
        }
    }
}

/// Original document set of one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginEntry {
    pub query_id: String,
    pub documents: Vec<OriginDocument>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginDocument {
    pub id: String,
    pub text: String,
}

/// Chunks each query's original documents in listed order.
pub fn origin_chunks(entry: &OriginEntry, max_words: usize) -> Result<Vec<Chunk>> {
    let mut out = Vec::new();
    for d in &entry.documents {
        let doc = SourceDocument {
            source_id: format!("origin/{}/{}", entry.query_id, d.id),
            title: None,
            text: d.text.clone(),
            collection_tag: CollectionTag::Int,
        };
        out.extend(chunk_source(&doc, max_words)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Cached,
    Skipped,
    /// Ran with per-query failures; the stamp is withheld so a rerun retries.
    Partial,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub digest: String,
    pub status: StageStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: serde_json::Value,
    /// Input path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: String,
    pub stages: Vec<StageRecord>,
    /// Produced files, relative to the output directory.
    pub artifacts: Vec<String>,
}

/// Incremental SHA-256 over length-prefixed fields.
struct StageDigest(Sha256);

impl StageDigest {
    fn new(stage: &str) -> Self {
        let mut d = StageDigest(Sha256::new());
        d.field(TOOL_VERSION);
        d.field(stage);
        d
    }

    fn field(&mut self, s: &str) -> &mut Self {
        self.0.update((s.len() as u64).to_le_bytes());
        self.0.update(s.as_bytes());
        self
    }

    fn json<T: Serialize>(&mut self, v: &T) -> &mut Self {
        let s = serde_json::to_string(v).expect("digest input serializes");
        self.field(&s)
    }

    fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digest of a file or, for a directory, of every file below it by relative path.
fn path_digest(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return file_digest(path);
    }
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        if entry.file_type().is_file() {
            files.push(entry.into_path());
        }
    }
    files.sort();
    let mut d = StageDigest::new("dir");
    for f in files {
        let rel = f
            .strip_prefix(path)
            .unwrap_or(&f)
            .to_string_lossy()
            .into_owned();
        d.field(&rel).field(&file_digest(&f)?);
    }
    Ok(d.finish())
}

/// What a pipeline invocation produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub manifest: PathBuf,
    pub stages: Vec<StageRecord>,
    pub failed_generations: usize,
    pub retrieval_report: Option<PathBuf>,
    pub summary_report: Option<PathBuf>,
}

impl PipelineOutcome {
    pub fn is_complete(&self) -> bool {
        self.failed_generations == 0
    }
}

pub struct Experiment {
    config: ExperimentConfig,
    provider: Option<Arc<dyn LlmProvider>>,
    out: PathBuf,
    started_at: String,
    stages: Vec<StageRecord>,
    inputs: BTreeMap<String, String>,
    artifacts: BTreeSet<PathBuf>,
    digests: HashMap<PathBuf, String>,
    corpora: HashMap<CorpusId, Arc<Corpus>>,
    failed: usize,
    retrieval_report: Option<PathBuf>,
    summary_report: Option<PathBuf>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let out = config.output_dir.clone();
        Ok(Experiment {
            config,
            provider: None,
            out,
            started_at: now(),
            stages: Vec::new(),
            inputs: BTreeMap::new(),
            artifacts: BTreeSet::new(),
            digests: HashMap::new(),
            corpora: HashMap::new(),
            failed: 0,
            retrieval_report: None,
            summary_report: None,
        })
    }

    /// Overrides the provider named in the config.
    pub fn with_provider(mut self, provider: Arc<dyn LlmProvider>) -> Self {
        self.provider = Some(provider);
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    /// Runs the retrieval half, then the summarization half when configured.
    pub fn run_all(mut self) -> Result<PipelineOutcome> {
        self.in_pool(|e| {
            e.retrieval()?;
            if e.config.generation.is_some() {
                e.summarization()?;
            }
            Ok(())
        })?;
        self.finish()
    }

    pub fn run_retrieval(mut self) -> Result<PipelineOutcome> {
        self.in_pool(Self::retrieval)?;
        self.finish()
    }

    pub fn run_summarization(mut self) -> Result<PipelineOutcome> {
        if self.config.generation.is_none() {
            return Err(Error::Config("no [generation] section in config".into()));
        }
        self.in_pool(Self::summarization)?;
        self.finish()
    }

    fn in_pool(&mut self, f: impl FnOnce(&mut Self) -> Result<()> + Send) -> Result<()> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| f(self))
    }

    fn digest(&mut self, path: &Path) -> Result<String> {
        if let Some(d) = self.digests.get(path) {
            return Ok(d.clone());
        }
        let d = path_digest(path)?;
        self.digests.insert(path.to_path_buf(), d.clone());
        Ok(d)
    }

    fn input(&mut self, path: &Path) -> Result<String> {
        let d = self.digest(path)?;
        self.inputs.insert(path.display().to_string(), d.clone());
        Ok(d)
    }

    /// Runs `body` unless the stamp for `name` matches `digest` and every
    /// output exists. `body` returns false when it finished only partially.
    fn stage(
        &mut self,
        name: &str,
        digest: String,
        outputs: &[PathBuf],
        body: impl FnOnce(&mut Self) -> Result<bool>,
    ) -> Result<StageStatus> {
        let stamp = self.out.join("stages").join(format!("{name}.sha256"));
        let fresh = fs::read_to_string(&stamp).is_ok_and(|s| s.trim() == digest)
            && outputs.iter().all(|p| p.exists());
        let status = if fresh {
            log::info!("stage {name}: up to date");
            StageStatus::Cached
        } else {
            log::info!("stage {name}: running");
            let _ = fs::remove_file(&stamp);
            if body(self)? {
                io::write_string(&stamp, &format!("{digest}\n"))?;
                StageStatus::Ran
            } else {
                StageStatus::Partial
            }
        };
        for p in outputs {
            self.digests.remove(p);
            self.artifacts.insert(p.clone());
        }
        self.record(name, digest, status);
        Ok(status)
    }

    fn record(&mut self, name: &str, digest: String, status: StageStatus) {
        self.stages.retain(|s| s.name != name);
        self.stages.push(StageRecord {
            name: name.to_string(),
            digest,
            status,
        });
    }

    fn pairs(&mut self) -> Result<Vec<QuerySummaryPair>> {
        let path = self.config.queries.pairs.clone();
        self.input(&path)?;
        let all = read_pairs(&path)?;
        let pairs: Vec<_> = match self.config.queries.split {
            Some(s) => all.into_iter().filter(|p| p.split == s).collect(),
            None => all,
        };
        if pairs.is_empty() {
            return Err(Error::Config("no queries selected by queries.split".into()));
        }
        Ok(pairs)
    }

    fn corpus_dir(&self, c: &CorpusConfig) -> PathBuf {
        match &c.dir {
            Some(d) => d.clone(),
            None => self.out.join("corpora").join(c.id.as_str()),
        }
    }

    fn corpus(&mut self, id: CorpusId) -> Result<Arc<Corpus>> {
        if let Some(c) = self.corpora.get(&id) {
            return Ok(c.clone());
        }
        let cfg = self.config.corpus(id).expect("validated corpus id").clone();
        let c = Arc::new(Corpus::load(&self.corpus_dir(&cfg))?);
        self.corpora.insert(id, c.clone());
        Ok(c)
    }

    fn build_corpora(&mut self) -> Result<()> {
        let configs = self.config.corpora.clone();
        for c in &configs {
            let dir = self.corpus_dir(c);
            let chunks = dir.join(CHUNKS_FILE);
            if let Some(d) = &c.dir {
                self.input(&d.join(CHUNKS_FILE))?;
                continue;
            }
            let mut dg = StageDigest::new("corpus");
            dg.json(&c.id).field(&self.config.chunk_words.to_string());
            if let Some(src) = &c.sources {
                dg.field(&self.input(src)?);
            }
            for p in c.merge.iter().flatten() {
                let part = self.config.corpus(*p).expect("validated").clone();
                dg.field(&self.digest(&self.corpus_dir(&part).join(CHUNKS_FILE))?);
            }
            let outputs = [chunks, dir.join(STATS_FILE)];
            let name = format!("corpus.{}", c.id);
            self.stage(&name, dg.finish(), &outputs, |e| {
                let corpus = if let Some(src) = &c.sources {
                    let tag = c.tag.unwrap_or(if c.id == CorpusId::Ext {
                        CollectionTag::Ext
                    } else {
                        CollectionTag::Int
                    });
                    let docs = read_sources(src, tag)?;
                    let built = build_corpus(&docs, tag.corpus_id(), e.config.chunk_words)?;
                    Corpus::from_chunks(c.id, built.chunks().to_vec())?
                } else {
                    let parts = c.merge.as_ref().expect("validated");
                    let mut acc = (*e.corpus(parts[0])?).clone();
                    for p in &parts[1..] {
                        let part = e.corpus(*p)?;
                        acc = merge_corpora(&acc, &part)?;
                    }
                    Corpus::from_chunks(c.id, acc.chunks().to_vec())?
                };
                corpus.save(&dir)?;
                log::info!("corpus {}: {} chunks", c.id, corpus.doc_count());
                e.corpora.insert(c.id, Arc::new(corpus));
                Ok(true)
            })?;
        }
        Ok(())
    }

    fn index_path(&self, id: CorpusId) -> PathBuf {
        self.out.join("corpora").join(id.as_str()).join(INDEX_FILE)
    }

    fn run_path(&self, r: Retriever, id: CorpusId) -> PathBuf {
        self.out
            .join("runs")
            .join(format!("{}.{}.trec", r.as_str(), id))
    }

    fn build_indexes(&mut self) -> Result<()> {
        if !self.config.retrieval.systems.contains(&Retriever::Bm25) {
            return Ok(());
        }
        let configs = self.config.corpora.clone();
        for c in &configs {
            let chunks = self.corpus_dir(c).join(CHUNKS_FILE);
            let mut dg = StageDigest::new("index");
            dg.field(&self.digest(&chunks)?);
            let path = self.index_path(c.id);
            let dir = path
                .parent()
                .expect("index path has a parent")
                .to_path_buf();
            self.stage(&format!("index.{}", c.id), dg.finish(), &[path], |e| {
                let corpus = e.corpus(c.id)?;
                build_index(&corpus)?.save(&dir)?;
                Ok(true)
            })?;
        }
        Ok(())
    }

    fn search_all(&mut self, pairs: &[QuerySummaryPair]) -> Result<Vec<PathBuf>> {
        let r = self.config.retrieval.clone();
        let params = Bm25Params::new(r.k1, r.b)?;
        let pairs_digest = self.digest(&self.config.queries.pairs.clone())?;
        let configs = self.config.corpora.clone();
        let mut runs = Vec::new();
        for system in &r.systems {
            for c in &configs {
                let path = self.run_path(*system, c.id);
                let mut dg = StageDigest::new("search");
                dg.json(system).json(&c.id).json(&self.config.queries.split);
                dg.field(&pairs_digest).field(&r.k.to_string());
                match system {
                    Retriever::Bm25 => {
                        dg.json(&(r.k1, r.b))
                            .field(&self.digest(&self.index_path(c.id))?);
                    }
                    Retriever::Dense => {
                        let qv = self.config.queries.vectors.clone().expect("validated");
                        dg.field(&self.input(&qv)?);
                        for f in self.config.vector_files(c) {
                            dg.field(&self.input(&f)?);
                        }
                    }
                }
                let name = format!("search.{}.{}", system.as_str(), c.id);
                let out = path.clone();
                self.stage(&name, dg.finish(), std::slice::from_ref(&path), |e| {
                    let run = match system {
                        Retriever::Bm25 => {
                            let index_path = e.index_path(c.id);
                            let index =
                                InvertedIndex::load(index_path.parent().expect("index dir"))?;
                            bm25_run(&index, &params, pairs, r.k)?
                        }
                        Retriever::Dense => {
                            let store = load_store(&e.config.vector_files(c))?;
                            let qv = load_query_vectors(
                                e.config.queries.vectors.as_ref().expect("validated"),
                            )?;
                            dense_run(&store, &qv, pairs, r.k, c.id)?
                        }
                    };
                    run.write_trec(&out)?;
                    Ok(true)
                })?;
                runs.push(path);
            }
        }
        Ok(runs)
    }

    fn pool(&mut self, pairs: &[QuerySummaryPair], runs: &[PathBuf]) -> Result<()> {
        let p = self.config.pooling.clone();
        let dir = self.out.join("pool");
        let outputs = [dir.join("pool.jsonl"), dir.join("tasks.jsonl")];
        if !p.enabled {
            self.record("pool", String::new(), StageStatus::Skipped);
            return Ok(());
        }
        let mut dg = StageDigest::new("pool");
        dg.json(&(p.depth, p.max_docs));
        for r in runs {
            dg.field(&self.digest(r)?);
        }
        dg.json(&pairs.iter().map(|q| &q.query_id).collect::<Vec<_>>());
        let ids: Vec<CorpusId> = self.config.corpora.iter().map(|c| c.id).collect();
        for id in &ids {
            let c = self.config.corpus(*id).expect("configured").clone();
            dg.field(&self.digest(&self.corpus_dir(&c).join(CHUNKS_FILE))?);
        }
        self.stage("pool", dg.finish(), &outputs, |e| {
            let loaded: Vec<RetrievalRun> = runs
                .iter()
                .map(|r| RetrievalRun::read_trec(r))
                .collect::<Result<_>>()?;
            let mut pool = build_pool(&loaded, p.depth)?;
            let corpora: Vec<Corpus> = ids
                .iter()
                .map(|id| e.corpus(*id).map(|c| (*c).clone()))
                .collect::<Result<_>>()?;
            let missing = pool.attach_texts(&corpora);
            if missing > 0 {
                log::warn!("{missing} pooled chunks have no text in any corpus");
            }
            pool.save(&outputs[0])?;
            let tasks = partition_tasks(&pool, pairs, p.max_docs)?;
            io::write_jsonl(&outputs[1], &tasks)?;
            log::info!("pool: {} pairs in {} tasks", pool.pair_count(), tasks.len());
            Ok(true)
        })?;
        Ok(())
    }

    fn evaluate_retrieval(&mut self, runs: &[PathBuf]) -> Result<()> {
        let e = self.config.evaluation.clone();
        let Some(qrels_path) = e.qrels.clone() else {
            log::warn!("no evaluation.qrels configured; retrieval evaluation skipped");
            eprintln!("notice: no qrels configured, skipping retrieval evaluation");
            self.record("eval-retrieval", String::new(), StageStatus::Skipped);
            return Ok(());
        };
        let report = self.out.join("reports").join("retrieval.tsv");
        let mut dg = StageDigest::new("eval-retrieval");
        dg.field(&self.input(&qrels_path)?)
            .json(&(&e.cutoffs, e.threshold));
        for r in runs {
            dg.field(&self.digest(r)?);
        }
        let outputs = [report.clone(), report.with_extension("json")];
        self.stage("eval-retrieval", dg.finish(), &outputs, |_| {
            let qrels = Qrels::read_trec(&qrels_path)?.binarize(e.threshold);
            let rows: Vec<ReportRow> = runs
                .iter()
                .map(|r| {
                    Ok(evaluate_run(&RetrievalRun::read_trec(r)?, &qrels, &e.cutoffs)?.to_row())
                })
                .collect::<Result<_>>()?;
            emit_report(&rows, &report)?;
            Ok(true)
        })?;
        self.retrieval_report = Some(report);
        Ok(())
    }

    fn retrieval(&mut self) -> Result<()> {
        let pairs = self.pairs()?;
        self.build_corpora()?;
        self.build_indexes()?;
        let runs = self.search_all(&pairs)?;
        self.pool(&pairs, &runs)?;
        self.evaluate_retrieval(&runs)
    }

    fn provider(&mut self, g: &GenerationSection) -> Result<Arc<dyn LlmProvider>> {
        if let Some(p) = &self.provider {
            return Ok(p.clone());
        }
        let p: Arc<dyn LlmProvider> = if g.provider == "mock" {
            Arc::new(crate::controller::MockProvider::new(g.mock_words))
        } else {
            provider_from_env(&g.provider, Duration::from_secs(g.timeout_secs))
                .map_err(|e| Error::Config(e.to_string()))?
        };
        self.provider = Some(p.clone());
        Ok(p)
    }

    fn summarization(&mut self) -> Result<()> {
        let g = self.config.generation.clone().expect("checked by caller");
        let pairs = self.pairs()?;
        let params = g.params();
        let assets = match &g.prompts {
            Some(dir) => {
                self.input(dir)?;
                PromptAssets::load(dir)?
            }
            None => PromptAssets::builtin(),
        };
        if params.shots > assets.demos.len() {
            return Err(Error::NotEnoughDemos {
                requested: params.shots,
                available: assets.demos.len(),
            });
        }
        let provider = self.provider(&g)?;
        let retry = RetryPolicy {
            max_retries: g.max_retries,
            ..RetryPolicy::default()
        };
        let pairs_digest = self.digest(&self.config.queries.pairs.clone())?;
        let mut variants: Vec<(Mode, String, String, PathBuf)> = Vec::new();

        for mode in &g.modes {
            let template = assets.template(*mode);
            let gen = Generator {
                provider: &*provider,
                template,
                demos: &assets.demos,
                params,
                retry,
                max_in_flight: g.max_in_flight,
            };
            for rt in self.config.gen_retrievers(&g) {
                for cid in self.config.gen_corpora(&g) {
                    let run_path = self.run_path(rt, cid);
                    if !run_path.exists() {
                        return Err(Error::Invalid(format!(
                            "missing run {}; run the retrieval stage first",
                            run_path.display()
                        )));
                    }
                    let c = self.config.corpus(cid).expect("validated").clone();
                    let out = self
                        .out
                        .join("summaries")
                        .join(format!("{mode}.{}.{cid}.jsonl", rt.as_str()));
                    let system = format!("{mode}/{}/{cid}/{}shot", rt.as_str(), params.shots);
                    let mut dg = StageDigest::new("summarize");
                    dg.field(&system)
                        .field(&pairs_digest)
                        .json(&self.config.queries.split);
                    dg.field(&self.digest(&run_path)?);
                    dg.field(&self.digest(&self.corpus_dir(&c).join(CHUNKS_FILE))?);
                    dg.json(&params)
                        .field(template.text())
                        .json(&assets.demos)
                        .field(provider.model_id());
                    let name = format!("summarize.{mode}.{}.{cid}", rt.as_str());
                    self.stage(&name, dg.finish(), std::slice::from_ref(&out), |e| {
                        let run = RetrievalRun::read_trec(&run_path)?;
                        let corpus = e.corpus(cid)?;
                        let records = gen.summarize_run(&system, &pairs, &run, &corpus)?;
                        write_records(e, &out, &records)
                    })?;
                    variants.push((*mode, rt.as_str().to_string(), cid.to_string(), out));
                }
            }
            if let Some(origin) = g.origin.clone() {
                let out = self
                    .out
                    .join("summaries")
                    .join(format!("{mode}.origin.jsonl"));
                let system = format!("{mode}/origin/{}shot", params.shots);
                let mut dg = StageDigest::new("summarize-origin");
                dg.field(&system)
                    .field(&pairs_digest)
                    .json(&self.config.queries.split);
                dg.field(&self.input(&origin)?)
                    .field(&self.config.chunk_words.to_string());
                dg.json(&params)
                    .field(template.text())
                    .json(&assets.demos)
                    .field(provider.model_id());
                let name = format!("summarize.{mode}.origin");
                let words = self.config.chunk_words;
                self.stage(&name, dg.finish(), std::slice::from_ref(&out), |e| {
                    let entries: Vec<OriginEntry> = io::read_jsonl(&origin)?;
                    let by_q: HashMap<&str, &OriginEntry> =
                        entries.iter().map(|o| (o.query_id.as_str(), o)).collect();
                    let docs_for = |qid: &str| -> Result<Vec<Chunk>> {
                        match by_q.get(qid) {
                            Some(o) => origin_chunks(o, words),
                            None => Ok(Vec::new()),
                        }
                    };
                    let records = gen.summarize(&system, &pairs, docs_for)?;
                    write_records(e, &out, &records)
                })?;
                variants.push((*mode, "origin".into(), "origin".into(), out));
            }
        }
        self.evaluate_summaries(&pairs, &variants)
    }

    fn evaluate_summaries(
        &mut self,
        pairs: &[QuerySummaryPair],
        variants: &[(Mode, String, String, PathBuf)],
    ) -> Result<()> {
        let limit = self.config.evaluation.word_limit;
        let report = self.out.join("reports").join("summary.tsv");
        let mut dg = StageDigest::new("eval-summary");
        dg.field(&limit.to_string());
        for (_, _, _, p) in variants {
            dg.field(&self.digest(p)?);
        }
        dg.json(&pairs);
        let outputs = [report.clone(), report.with_extension("json")];
        self.stage("eval-summary", dg.finish(), &outputs, |_| {
            let mut rows = Vec::new();
            for (mode, retriever, corpus, path) in variants {
                let records: Vec<SummaryRecord> = io::read_jsonl(path)?;
                let ok: Vec<&SummaryRecord> = records.iter().filter(|r| r.is_ok()).collect();
                let failed = records.len() - ok.len();
                let status = match (failed, ok.len()) {
                    (0, _) => "ok".to_string(),
                    (_, 0) => "failed".to_string(),
                    (n, _) => format!("partial ({n} failed)"),
                };
                let (r1, r2, su4) = if ok.is_empty() {
                    (0.0, 0.0, 0.0)
                } else {
                    let s = evaluate_summaries(
                        ok.iter().map(|r| (r.query_id.as_str(), r.summary.as_str())),
                        pairs,
                        limit,
                    )?;
                    (s.rouge1, s.rouge2, s.rouge_su4)
                };
                rows.push(
                    ReportRow::new()
                        .label("system", mode)
                        .label("retriever", retriever)
                        .label("corpus", corpus)
                        .label("queries", ok.len())
                        .label("status", status)
                        .metric("R1", r1)
                        .metric("R2", r2)
                        .metric("RSU4", su4),
                );
            }
            emit_report(&rows, &report)?;
            Ok(true)
        })?;
        self.summary_report = Some(report);
        Ok(())
    }

    fn finish(self) -> Result<PipelineOutcome> {
        let path = self.out.join(MANIFEST_FILE);
        let previous: Option<RunManifest> = io::read_json(&path).ok();
        let mut stages = previous
            .as_ref()
            .map(|m| m.stages.clone())
            .unwrap_or_default();
        for s in &self.stages {
            stages.retain(|p| p.name != s.name);
            stages.push(s.clone());
        }
        let mut artifacts: BTreeSet<String> = previous
            .as_ref()
            .map(|m| m.artifacts.iter().cloned().collect())
            .unwrap_or_default();
        for a in &self.artifacts {
            let rel = a.strip_prefix(&self.out).unwrap_or(a);
            artifacts.insert(rel.to_string_lossy().replace('\\', "/"));
        }
        let mut inputs = previous.map(|m| m.inputs).unwrap_or_default();
        inputs.extend(self.inputs.clone());
        let manifest = RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            inputs,
            started_at: self.started_at.clone(),
            finished_at: now(),
            stages,
            artifacts: artifacts.into_iter().collect(),
        };
        io::write_json(&path, &manifest)?;
        if self.failed > 0 {
            log::warn!("{} generations failed; reports are partial", self.failed);
        }
        Ok(PipelineOutcome {
            manifest: path,
            stages: self.stages,
            failed_generations: self.failed,
            retrieval_report: self.retrieval_report,
            summary_report: self.summary_report,
        })
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn write_records(e: &mut Experiment, out: &Path, records: &[SummaryRecord]) -> Result<bool> {
    io::write_jsonl(out, records)?;
    let failed = records.iter().filter(|r| !r.is_ok()).count();
    e.failed += failed;
    Ok(failed == 0)
}

pub fn bm25_run(
    index: &InvertedIndex,
    params: &Bm25Params,
    pairs: &[QuerySummaryPair],
    k: usize,
) -> Result<RetrievalRun> {
    let lists: Vec<(String, Vec<crate::run::ScoredDoc>)> = pairs
        .par_iter()
        .map(|p| Ok((p.query_id.clone(), index.search(params, &p.query_text, k)?)))
        .collect::<Result<_>>()?;
    let mut run = RetrievalRun::new("bm25", Some(index.corpus_id()));
    run.results.extend(lists);
    Ok(run)
}

pub fn dense_run(
    store: &VectorStore,
    queries: &[crate::dense::QueryVector],
    pairs: &[QuerySummaryPair],
    k: usize,
    corpus_id: CorpusId,
) -> Result<RetrievalRun> {
    let by_id: HashMap<&str, &crate::dense::QueryVector> =
        queries.iter().map(|q| (q.query_id.as_str(), q)).collect();
    let lists: Vec<(String, Vec<crate::run::ScoredDoc>)> = pairs
        .par_iter()
        .map(|p| {
            let q = by_id
                .get(p.query_id.as_str())
                .ok_or_else(|| Error::MissingQuery(p.query_id.clone()))?;
            Ok((p.query_id.clone(), crate::dense::dense_search(store, q, k)?))
        })
        .collect::<Result<_>>()?;
    let mut run = RetrievalRun::new("dense", Some(corpus_id));
    run.results.extend(lists);
    Ok(run)
}

fn load_store(files: &[PathBuf]) -> Result<VectorStore> {
    let mut records: Vec<VectorRecord> = Vec::new();
    for f in files {
        records.extend(io::read_jsonl::<VectorRecord>(f)?);
    }
    VectorStore::from_records(records)
}
