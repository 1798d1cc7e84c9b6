use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kiqfs_core::annotation::{build_pool, partition_tasks, serve_blocking, JudgmentStore};
use kiqfs_core::controller::provider::provider_from_env;
use kiqfs_core::controller::{
    GenerationConfig, Generator, LlmProvider, MockProvider, Mode, PromptAssets, RetryPolicy,
    SummaryRecord,
};
use kiqfs_core::corpus::{
    build_corpus, merge_corpora, read_pairs, read_sources, CollectionTag, Corpus, CorpusId,
    QuerySummaryPair, Split,
};
use kiqfs_core::dense::{load_query_vectors, load_vectors};
use kiqfs_core::experiment::{bm25_run, dense_run, Experiment, ExperimentConfig, PipelineOutcome};
use kiqfs_core::qrels::Qrels;
use kiqfs_core::report::{emit_report, ReportRow};
use kiqfs_core::retrieval_eval::evaluate_run;
use kiqfs_core::rouge::evaluate_summaries;
use kiqfs_core::run::RetrievalRun;
use kiqfs_core::sparse::{build_index, Bm25Params, InvertedIndex, INDEX_FILE};
use kiqfs_core::{io, ErrorKind};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_PROVIDER: u8 = 4;

#[derive(Parser)]
#[command(
    name = "kiqfs",
    version,
    about = "Knowledge-intensive query-focused summarization toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk a source JSON-lines file into a corpus directory.
    Ingest(IngestArgs),
    /// Corpus operations.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Sparse index operations.
    #[command(subcommand)]
    Index(IndexCmd),
    /// BM25 search over a built index.
    Search(SearchArgs),
    /// Dense retrieval.
    #[command(subcommand)]
    Dense(DenseCmd),
    /// Judgment pooling.
    #[command(subcommand)]
    Pool(PoolCmd),
    /// Annotation service.
    #[command(subcommand)]
    Annotate(AnnotateCmd),
    /// Label aggregation.
    #[command(subcommand)]
    Qrels(QrelsCmd),
    /// Retrieval and summary evaluation.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Generate summaries for one retrieval run.
    Summarize(SummarizeArgs),
    /// Config-driven experiments.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    sources: PathBuf,
    #[arg(long, value_parser = parse_tag)]
    tag: CollectionTag,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    max_words: usize,
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Concatenate two corpora into the augmented corpus.
    Merge {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum IndexCmd {
    /// Build the BM25 inverted index for a corpus directory.
    Build {
        #[arg(long)]
        corpus: PathBuf,
        /// Defaults to the corpus directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SearchArgs {
    /// Directory holding `index.bin`.
    #[arg(long)]
    index: PathBuf,
    /// Pairs-style JSON lines with `query_id` and `query`.
    #[arg(long, conflicts_with = "query")]
    queries: Option<PathBuf>,
    /// A single query; results go to stdout.
    #[arg(long)]
    query: Option<String>,
    #[arg(long, default_value_t = 50)]
    k: usize,
    #[arg(long, default_value_t = 0.9)]
    k1: f64,
    #[arg(long, default_value_t = 0.4)]
    b: f64,
    #[arg(long, requires = "queries")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DenseCmd {
    /// Exact inner-product search over precomputed vectors.
    Search {
        #[arg(long)]
        vectors: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long, value_parser = parse_corpus_id)]
        corpus_id: CorpusId,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PoolCmd {
    /// Union the top-depth results of several runs.
    Build {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value_t = 50)]
        depth: usize,
        /// Corpus directories used to attach chunk texts.
        #[arg(long = "corpus")]
        corpora: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also partition the pool into annotation tasks.
        #[arg(long, requires = "tasks")]
        pairs: Option<PathBuf>,
        #[arg(long, requires = "pairs")]
        tasks: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        max_docs: usize,
    },
}

#[derive(Subcommand)]
enum AnnotateCmd {
    /// Serve the annotation HTTP API.
    Serve {
        #[arg(long)]
        tasks: PathBuf,
        /// Store directory for the judgment log.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, default_value_t = 3)]
        required: usize,
    },
}

#[derive(Subcommand)]
enum QrelsCmd {
    /// Majority-vote qrels and an agreement report from a judgment store.
    Aggregate {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        required: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// P@k and R@k of runs against graded qrels.
    Retrieval {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,50")]
        cutoffs: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        threshold: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// ROUGE-1, ROUGE-2 and ROUGE-SU4 of summary files.
    Summary {
        #[arg(long = "summaries", required = true)]
        summaries: Vec<PathBuf>,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = 250)]
        word_limit: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Controller,
    Naive,
}

#[derive(Args)]
struct SummarizeArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    #[arg(long, value_enum, default_value = "controller")]
    mode: ModeArg,
    /// `mock` or `openai` (reads KIQFS_LLM_* variables).
    #[arg(long, default_value = "mock")]
    provider: String,
    #[arg(long, default_value_t = 3)]
    shots: usize,
    #[arg(long, default_value_t = 50)]
    top_k_docs: usize,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    All,
    Retrieval,
    Summarization,
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Run the configured experiment end to end.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
    },
}

fn parse_tag(s: &str) -> Result<CollectionTag, String> {
    s.parse().map_err(|e: kiqfs_core::Error| e.to_string())
}

fn parse_corpus_id(s: &str) -> Result<CorpusId, String> {
    s.parse().map_err(|e: kiqfs_core::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: kiqfs_core::Error| e.to_string())
}

/// Outcome of a command that may finish with partial provider failures.
enum Done {
    Ok,
    ProviderFailures(usize),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Done::Ok) => ExitCode::SUCCESS,
        Ok(Done::ProviderFailures(n)) => {
            eprintln!("error: {n} generations failed; partial results written");
            ExitCode::from(EXIT_PROVIDER)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e
        .chain()
        .find_map(|c| c.downcast_ref::<kiqfs_core::Error>())
    {
        Some(k) => match k.kind() {
            ErrorKind::Config => EXIT_CONFIG,
            ErrorKind::Data => EXIT_DATA,
            ErrorKind::Provider => EXIT_PROVIDER,
        },
        None => EXIT_DATA,
    }
}

fn run(command: Command) -> anyhow::Result<Done> {
    match command {
        Command::Ingest(a) => {
            let docs = read_sources(&a.sources, a.tag)?;
            let corpus = build_corpus(&docs, a.tag.corpus_id(), a.max_words)?;
            corpus.save(&a.out)?;
            println!(
                "{} chunks from {} documents -> {}",
                corpus.doc_count(),
                docs.len(),
                a.out.display()
            );
        }
        Command::Corpus(CorpusCmd::Merge { a, b, out }) => {
            let merged = merge_corpora(&Corpus::load(&a)?, &Corpus::load(&b)?)?;
            merged.save(&out)?;
            println!("{} chunks -> {}", merged.doc_count(), out.display());
        }
        Command::Index(IndexCmd::Build { corpus, out }) => {
            let c = Corpus::load(&corpus)?;
            let index = build_index(&c)?;
            let out = out.unwrap_or(corpus);
            index.save(&out)?;
            println!(
                "{} chunks, {} terms -> {}",
                index.doc_count(),
                index.vocabulary_size(),
                out.join(INDEX_FILE).display()
            );
        }
        Command::Search(a) => search(a)?,
        Command::Dense(DenseCmd::Search {
            vectors,
            queries,
            k,
            corpus_id,
            out,
        }) => {
            let store = load_vectors(&vectors)?;
            let qv = load_query_vectors(&queries)?;
            let pairs: Vec<QuerySummaryPair> = qv
                .iter()
                .map(|q| QuerySummaryPair {
                    query_id: q.query_id.clone(),
                    query_text: String::new(),
                    references: Vec::new(),
                    split: Split::Test,
                })
                .collect();
            let run = dense_run(&store, &qv, &pairs, k, corpus_id)?;
            run.write_trec(&out)?;
            println!("{} queries -> {}", run.results.len(), out.display());
        }
        Command::Pool(PoolCmd::Build {
            runs,
            depth,
            corpora,
            out,
            pairs,
            tasks,
            max_docs,
        }) => {
            let loaded = runs
                .iter()
                .map(|r| RetrievalRun::read_trec(r))
                .collect::<Result<Vec<_>, _>>()?;
            let mut pool = build_pool(&loaded, depth)?;
            if !corpora.is_empty() {
                let cs = corpora
                    .iter()
                    .map(|c| Corpus::load(c))
                    .collect::<Result<Vec<_>, _>>()?;
                let missing = pool.attach_texts(&cs);
                if missing > 0 {
                    log::warn!("{missing} pooled chunks were not found in the given corpora");
                }
            }
            pool.save(&out)?;
            println!(
                "{} pairs over {} queries -> {}",
                pool.pair_count(),
                pool.query_count(),
                out.display()
            );
            if let (Some(pairs), Some(tasks)) = (pairs, tasks) {
                let t = partition_tasks(&pool, &read_pairs(&pairs)?, max_docs)?;
                io::write_jsonl(&tasks, &t)?;
                println!("{} tasks -> {}", t.len(), tasks.display());
            }
        }
        Command::Annotate(AnnotateCmd::Serve {
            tasks,
            dir,
            addr,
            required,
        }) => {
            let t = io::read_jsonl(&tasks)?;
            let store = JudgmentStore::open(&dir, t, required)?;
            println!("serving {} tasks on http://{addr}", store.tasks().len());
            serve_blocking(Arc::new(store), addr)?;
        }
        Command::Qrels(QrelsCmd::Aggregate {
            dir,
            required,
            out,
            report,
        }) => {
            let store = JudgmentStore::open_snapshot(&dir, required)?;
            let agg = store.aggregate();
            agg.qrels.write_trec(&out)?;
            let r = &agg.report;
            println!(
                "{}/{} pairs aggregated, {} pending; kappa {}",
                r.aggregated_pairs,
                r.total_pairs,
                r.pending.len(),
                r.fleiss_kappa.map_or("n/a".into(), |k| format!("{k:.3}"))
            );
            if let Some(p) = report {
                io::write_json(&p, r)?;
            }
        }
        Command::Eval(EvalCmd::Retrieval {
            runs,
            qrels,
            cutoffs,
            threshold,
            out,
        }) => {
            let rel =
                Qrels::read_trec(&qrels)?.binarize(kiqfs_core::qrels::check_threshold(threshold)?);
            let rows = runs
                .iter()
                .map(|r| Ok(evaluate_run(&RetrievalRun::read_trec(r)?, &rel, &cutoffs)?.to_row()))
                .collect::<anyhow::Result<Vec<ReportRow>>>()?;
            emit_report(&rows, &out)?;
            print!("{}", io::read_to_string(&out)?);
        }
        Command::Eval(EvalCmd::Summary {
            summaries,
            pairs,
            word_limit,
            out,
        }) => {
            let pairs = read_pairs(&pairs)?;
            let mut rows = Vec::new();
            for path in &summaries {
                let records: Vec<SummaryRecord> = io::read_jsonl(path)?;
                let ok: Vec<&SummaryRecord> = records.iter().filter(|r| r.is_ok()).collect();
                if ok.is_empty() {
                    bail!(kiqfs_core::Error::EmptyReport);
                }
                let scores = evaluate_summaries(
                    ok.iter().map(|r| (r.query_id.as_str(), r.summary.as_str())),
                    &pairs,
                    word_limit,
                )?;
                // Labels look like `<mode>/<retriever>/<corpus>/<shots>shot`.
                let system = ok[0].system.clone();
                let corpus = system
                    .split('/')
                    .nth(2)
                    .map_or_else(|| file_stem(path), str::to_string);
                rows.push(scores.to_row(&system, &corpus));
            }
            emit_report(&rows, &out)?;
            print!("{}", io::read_to_string(&out)?);
        }
        Command::Summarize(a) => return summarize(a),
        Command::Pipeline(PipelineCmd::Run { config, stage }) => {
            let cfg = ExperimentConfig::load(&config)?;
            let exp = Experiment::new(cfg)?;
            let outcome = match stage {
                StageArg::All => exp.run_all()?,
                StageArg::Retrieval => exp.run_retrieval()?,
                StageArg::Summarization => exp.run_summarization()?,
            };
            return Ok(report_outcome(&outcome));
        }
    }
    Ok(Done::Ok)
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn report_outcome(o: &PipelineOutcome) -> Done {
    for s in &o.stages {
        println!("{:<40} {:?}", s.name, s.status);
    }
    for r in [&o.retrieval_report, &o.summary_report]
        .into_iter()
        .flatten()
    {
        println!("report: {}", r.display());
    }
    println!("manifest: {}", o.manifest.display());
    if o.is_complete() {
        Done::Ok
    } else {
        Done::ProviderFailures(o.failed_generations)
    }
}

fn search(a: SearchArgs) -> anyhow::Result<()> {
    if !a.index.join(INDEX_FILE).exists() {
        bail!(kiqfs_core::Error::IndexFormat(format!(
            "no index in {}; run `kiqfs index build --corpus {}` first",
            a.index.display(),
            a.index.display()
        )));
    }
    let index = InvertedIndex::load(&a.index)?;
    let params = Bm25Params::new(a.k1, a.b)?;
    match (a.query, a.queries) {
        (Some(q), _) => {
            for d in index.search(&params, &q, a.k)? {
                println!("{}\t{}\t{:.6}", d.rank, d.chunk_id, d.score);
            }
        }
        (None, Some(path)) => {
            let pairs: Vec<QuerySummaryPair> = read_queries(&path)?;
            let run = bm25_run(&index, &params, &pairs, a.k)?;
            match a.out {
                Some(out) => {
                    run.write_trec(&out)?;
                    println!("{} queries -> {}", run.results.len(), out.display());
                }
                None => print!("{}", run.to_trec()),
            }
        }
        (None, None) => bail!(kiqfs_core::Error::Config(
            "pass --query or --queries".into()
        )),
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct QueryLine {
    query_id: String,
    query: String,
}

/// Reads `{query_id, query}` lines; pairs files qualify since extra fields are ignored.
fn read_queries(path: &Path) -> anyhow::Result<Vec<QuerySummaryPair>> {
    let lines: Vec<QueryLine> = io::read_jsonl(path)?;
    Ok(lines
        .into_iter()
        .map(|l| QuerySummaryPair {
            query_id: l.query_id,
            query_text: l.query,
            references: Vec::new(),
            split: Split::Test,
        })
        .collect())
}

fn summarize(a: SummarizeArgs) -> anyhow::Result<Done> {
    let mode = match a.mode {
        ModeArg::Controller => Mode::Controller,
        ModeArg::Naive => Mode::NaiveRag,
    };
    let assets = match &a.prompts {
        Some(d) => PromptAssets::load(d)?,
        None => PromptAssets::builtin(),
    };
    let provider: Arc<dyn LlmProvider> = if a.provider == "mock" {
        Arc::new(MockProvider::default())
    } else {
        provider_from_env(&a.provider, Duration::from_secs(120))
            .map_err(|e| kiqfs_core::Error::Config(e.to_string()))
            .context("provider")?
    };
    let mut pairs = read_pairs(&a.pairs)?;
    if let Some(s) = a.split {
        pairs.retain(|p| p.split == s);
    }
    let run = RetrievalRun::read_trec(&a.run)?;
    let corpus = Corpus::load(&a.corpus)?;
    let params = GenerationConfig {
        shots: a.shots,
        top_k_docs: a.top_k_docs,
        ..GenerationConfig::default()
    };
    let gen = Generator {
        provider: &*provider,
        template: assets.template(mode),
        demos: &assets.demos,
        params,
        retry: RetryPolicy::default(),
        max_in_flight: a.max_in_flight,
    };
    let corpus_label = run.corpus_id.unwrap_or(corpus.corpus_id());
    let system = format!("{mode}/{}/{corpus_label}/{}shot", run.system_id, a.shots);
    let records = gen.summarize_run(&system, &pairs, &run, &corpus)?;
    io::write_jsonl(&a.out, &records)?;
    let failed = records.iter().filter(|r| !r.is_ok()).count();
    println!(
        "{} summaries ({failed} failed) -> {}",
        records.len(),
        a.out.display()
    );
    Ok(if failed == 0 {
        Done::Ok
    } else {
        Done::ProviderFailures(failed)
    })
}
