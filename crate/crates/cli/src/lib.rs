//! Batch front end for the one-to-many WMD solver.
//!
//! The binary loads a fastText-format embedding file, a corpus file, and a
//! queries file (both one document per line), solves every query against the
//! whole corpus, and writes a `query_id,doc_id,wmd` CSV. Two optional modes
//! extend that:
//!
//! - `--check-dense` verifies each result against the dense reference solver
//!   whenever the instance is small enough (v_r * N at most 10^6), appends a
//!   `dense_wmd` column, and fails the run on any deviation above 1e-8.
//! - `--bench T1,T2,...` times the full per-query solve at each worker count
//!   after an untimed warm-up, checks the results are bitwise identical
//!   across counts, and writes a second CSV next to the main output.
//!
//! Exit codes: 0 on success, 1 when the solver or a verification step fails
//! (including individual queries that could not be processed), 2 on usage or
//! input errors.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use wmd::ingest::{
    build_corpus_with_stats, build_query, load_embeddings, load_stopwords, read_documents,
    EmbeddingMatrix,
};
use wmd::sinkhorn::{
    dense_reference_wmd, sinkhorn_wmd, SolverConfig, SolverMode, WmdResult,
};
use wmd::{DocMatrix, QueryHistogram};

/// Largest v_r * N product for which `--check-dense` actually runs the dense
/// solver; larger instances are skipped with an empty `dense_wmd` field.
const DENSE_CHECK_LIMIT: usize = 1_000_000;

/// Dense verification fails the run above this deviation.
const DENSE_CHECK_TOL: f64 = 1e-8;

#[derive(Parser, Debug)]
#[command(
    name = "wmd",
    about = "One-to-many Word Mover's Distance over a document corpus",
    version
)]
pub struct Cli {
    /// fastText-format .vec embedding file
    #[arg(long, value_name = "PATH")]
    pub embeddings: PathBuf,

    /// Corpus file, one document per line
    #[arg(long, value_name = "PATH")]
    pub corpus: PathBuf,

    /// Queries file, one document per line (same format as the corpus)
    #[arg(long, value_name = "PATH")]
    pub queries: PathBuf,

    /// Stopword list, one word per line
    #[arg(long, value_name = "PATH")]
    pub stopwords: Option<PathBuf>,

    /// Entropic regularization strength
    #[arg(long, default_value_t = 10.0)]
    pub lambda: f64,

    /// Iteration count in fixed mode, iteration cap with --until-converged
    #[arg(long, default_value_t = 15)]
    pub max_iter: usize,

    /// Convergence threshold on the scaling vector (--until-converged only)
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,

    /// Iterate until the scaling vector settles instead of a fixed count
    #[arg(long)]
    pub until_converged: bool,

    /// Worker threads per solve (default: available hardware parallelism)
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,

    /// Verify results against the dense reference solver
    #[arg(long)]
    pub check_dense: bool,

    /// Comma-separated worker counts to benchmark, e.g. 1,2,4
    #[arg(long, value_name = "T1,T2,...", value_delimiter = ',')]
    pub bench: Option<Vec<usize>>,

    /// Solve independent queries concurrently, one worker thread each
    #[arg(long)]
    pub parallel_queries: bool,

    /// Output CSV path; benchmark reports go to <PATH>.bench.csv
    #[arg(long, value_name = "PATH")]
    pub output: PathBuf,
}

/// Everything the run needs, validated up front.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub embeddings_path: PathBuf,
    pub corpus_path: PathBuf,
    pub queries_path: PathBuf,
    pub stopwords_path: Option<PathBuf>,
    pub solver: SolverConfig,
    pub workers: usize,
    pub check_dense: bool,
    pub parallel_queries: bool,
    pub bench_thread_list: Option<Vec<usize>>,
    pub output_path: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    /// Usage or input problems: unreadable files, bad formats, bad flags.
    Input(String),
    /// Solver or verification failures during an otherwise valid run.
    Run(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(msg) | CliError::Run(msg) => f.write_str(msg),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl RunConfig {
    pub fn from_cli(cli: Cli) -> Result<Self, CliError> {
        let workers = cli.threads.unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
        if workers == 0 {
            return Err(CliError::Input("--threads must be at least 1".into()));
        }
        if let Some(list) = &cli.bench {
            if list.contains(&0) {
                return Err(CliError::Input(
                    "--bench worker counts must be at least 1".into(),
                ));
            }
            if cli.parallel_queries {
                return Err(CliError::Input(
                    "--bench times isolated solves and cannot be combined with \
                     --parallel-queries"
                        .into(),
                ));
            }
        }
        let solver = SolverConfig {
            lambda: cli.lambda,
            max_iter: cli.max_iter,
            tol: cli.tol,
            mode: if cli.until_converged {
                SolverMode::UntilConverged
            } else {
                SolverMode::FixedIterations
            },
        };
        solver
            .validate()
            .map_err(|e| CliError::Input(e.to_string()))?;
        Ok(RunConfig {
            embeddings_path: cli.embeddings,
            corpus_path: cli.corpus,
            queries_path: cli.queries,
            stopwords_path: cli.stopwords,
            solver,
            workers,
            check_dense: cli.check_dense,
            parallel_queries: cli.parallel_queries,
            bench_thread_list: cli.bench,
            output_path: cli.output,
        })
    }
}

/// Parsed inputs. A query that could not be turned into a histogram (empty
/// line, or every token out of vocabulary) is kept as an error message so
/// the remaining queries still run.
pub struct Inputs {
    pub embeddings: EmbeddingMatrix,
    pub corpus: DocMatrix,
    pub queries: Vec<Result<QueryHistogram, String>>,
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Input(format!("cannot open {}: {e}", path.display())))
}

fn input_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs, CliError> {
    let stopwords = match &cfg.stopwords_path {
        Some(path) => load_stopwords(open(path)?).map_err(|e| input_err(path, e))?,
        None => HashSet::new(),
    };
    let embeddings =
        load_embeddings(open(&cfg.embeddings_path)?).map_err(|e| input_err(&cfg.embeddings_path, e))?;

    let corpus_docs = read_documents(open(&cfg.corpus_path)?, &stopwords)
        .map_err(|e| input_err(&cfg.corpus_path, e))?;
    let (corpus, stats) = build_corpus_with_stats(&corpus_docs, &embeddings)
        .map_err(|e| input_err(&cfg.corpus_path, e))?;
    eprintln!(
        "corpus: {} documents, {} matrix entries, {} tokens in vocabulary, {} out",
        corpus.num_docs(),
        corpus.nnz(),
        stats.in_vocab,
        stats.out_of_vocab
    );

    let query_docs = read_documents(open(&cfg.queries_path)?, &stopwords)
        .map_err(|e| input_err(&cfg.queries_path, e))?;
    if query_docs.is_empty() {
        return Err(input_err(&cfg.queries_path, "no queries found"));
    }
    let queries = query_docs
        .iter()
        .enumerate()
        .map(|(i, doc)| {
            build_query(doc, &embeddings).map_err(|e| format!("query {i}: {e}"))
        })
        .collect();
    Ok(Inputs {
        embeddings,
        corpus,
        queries,
    })
}

/// One output CSV row. `dense_wmd` is populated only when the dense check
/// ran for the query.
#[derive(Debug, Clone)]
pub struct BatchRow {
    pub query_id: usize,
    pub doc_id: usize,
    pub wmd: f64,
    pub dense_wmd: Option<f64>,
}

pub struct BatchOutcome {
    pub rows: Vec<BatchRow>,
    pub failed_queries: usize,
}

/// Maps `f` over `items` on up to `pieces` scoped threads, preserving input
/// order in the output.
fn map_concurrently<T, R, F>(items: &[T], pieces: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let pieces = pieces.clamp(1, items.len().max(1));
    let chunk_len = items.len().div_ceil(pieces).max(1);
    let fref = &f;
    std::thread::scope(|scope| {
        let mut chunks = items.chunks(chunk_len);
        let first = chunks.next().unwrap_or(&[]);
        let handles: Vec<_> = chunks
            .map(|chunk| scope.spawn(move || chunk.iter().map(fref).collect::<Vec<R>>()))
            .collect();
        let mut out: Vec<R> = first.iter().map(fref).collect();
        for handle in handles {
            out.extend(handle.join().expect("query worker panicked"));
        }
        out
    })
}

fn solve_queries(cfg: &RunConfig, inputs: &Inputs) -> Vec<Result<WmdResult, String>> {
    let solve = |query: &QueryHistogram, workers: usize| {
        sinkhorn_wmd(query, &inputs.corpus, &inputs.embeddings, &cfg.solver, workers)
    };
    if cfg.parallel_queries && cfg.workers > 1 {
        // Concurrency across queries instead of inside each solve; every
        // solve is single-threaded so total thread count stays at the
        // configured budget. Results are identical either way.
        map_concurrently(&inputs.queries, cfg.workers, |slot| match slot {
            Ok(query) => solve(query, 1).map_err(|e| e.to_string()),
            Err(msg) => Err(msg.clone()),
        })
    } else {
        inputs
            .queries
            .iter()
            .map(|slot| match slot {
                Ok(query) => solve(query, cfg.workers).map_err(|e| e.to_string()),
                Err(msg) => Err(msg.clone()),
            })
            .collect()
    }
}

pub fn run_batch(cfg: &RunConfig, inputs: &Inputs) -> Result<BatchOutcome, CliError> {
    let mut rows = Vec::new();
    let mut failed = 0;
    for (query_id, solved) in solve_queries(cfg, inputs).into_iter().enumerate() {
        let result = match solved {
            Ok(result) => result,
            Err(msg) => {
                eprintln!("error: {msg}; skipping");
                failed += 1;
                continue;
            }
        };
        let dense = match (&inputs.queries[query_id], cfg.check_dense) {
            (Ok(query), true) => dense_check(cfg, inputs, query_id, query, &result)?,
            _ => None,
        };
        for (doc_id, &wmd) in result.distances.iter().enumerate() {
            rows.push(BatchRow {
                query_id,
                doc_id,
                wmd,
                dense_wmd: dense.as_ref().map(|d| d[doc_id]),
            });
        }
    }
    Ok(BatchOutcome {
        rows,
        failed_queries: failed,
    })
}

fn dense_check(
    cfg: &RunConfig,
    inputs: &Inputs,
    query_id: usize,
    query: &QueryHistogram,
    sparse: &WmdResult,
) -> Result<Option<Vec<f64>>, CliError> {
    let v_r = query.idx().len();
    let size = v_r * inputs.corpus.num_docs();
    if size > DENSE_CHECK_LIMIT {
        eprintln!(
            "dense check skipped for query {query_id}: v_r * N = {size} exceeds {DENSE_CHECK_LIMIT}"
        );
        return Ok(None);
    }
    let dense = dense_reference_wmd(query, &inputs.corpus, &inputs.embeddings, &cfg.solver)
        .map_err(|e| CliError::Run(format!("dense reference failed for query {query_id}: {e}")))?;
    let mut max_dev: f64 = 0.0;
    for (doc_id, (s, d)) in sparse.distances.iter().zip(&dense.distances).enumerate() {
        let dev = (s - d).abs();
        if dev > DENSE_CHECK_TOL {
            return Err(CliError::Run(format!(
                "dense verification failed: query {query_id} doc {doc_id} deviates by {dev:e} \
                 (limit {DENSE_CHECK_TOL:e})"
            )));
        }
        max_dev = max_dev.max(dev);
    }
    eprintln!("dense check passed for query {query_id}: max deviation {max_dev:e}");
    Ok(Some(dense.distances))
}

/// One benchmark measurement: the full solve for one query at one worker
/// count, after an untimed warm-up.
#[derive(Debug, Clone)]
pub struct BenchEntry {
    pub threads: usize,
    pub query_id: usize,
    pub seconds: f64,
    pub speedup: f64,
    pub iterations: u64,
    pub v_r: usize,
    pub nnz: usize,
}

pub struct BenchReport {
    pub entries: Vec<BenchEntry>,
    /// Cross-checked distances, reused for the main CSV.
    pub rows: Vec<BatchRow>,
    pub failed_queries: usize,
}

pub fn run_bench(cfg: &RunConfig, inputs: &Inputs) -> Result<BenchReport, CliError> {
    let list = cfg
        .bench_thread_list
        .as_ref()
        .filter(|l| !l.is_empty())
        .ok_or_else(|| CliError::Input("--bench requires at least one worker count".into()))?;

    let mut entries = Vec::new();
    let mut rows = Vec::new();
    let mut failed = 0;
    for (query_id, slot) in inputs.queries.iter().enumerate() {
        let query = match slot {
            Ok(query) => query,
            Err(msg) => {
                eprintln!("error: {msg}; skipping");
                failed += 1;
                continue;
            }
        };
        let mut timed: Vec<(usize, f64, WmdResult)> = Vec::with_capacity(list.len());
        for &threads in list {
            let solve = || {
                sinkhorn_wmd(query, &inputs.corpus, &inputs.embeddings, &cfg.solver, threads)
                    .map_err(|e| CliError::Run(format!("query {query_id}: {e}")))
            };
            solve()?;
            let started = Instant::now();
            let result = solve()?;
            timed.push((threads, started.elapsed().as_secs_f64(), result));
        }

        let reference = &timed[0].2;
        for (threads, _, result) in &timed[1..] {
            let identical = result
                .distances
                .iter()
                .zip(&reference.distances)
                .all(|(a, b)| a.to_bits() == b.to_bits())
                && result.stats == reference.stats;
            if !identical {
                return Err(CliError::Run(format!(
                    "determinism violation: query {query_id} differs between {} and {threads} \
                     workers",
                    timed[0].0
                )));
            }
        }

        // Speedups are relative to the single-worker time; when the list
        // does not include 1 the first entry serves as the baseline.
        let baseline = timed
            .iter()
            .find(|(threads, _, _)| *threads == 1)
            .map(|&(_, seconds, _)| seconds)
            .unwrap_or(timed[0].1);
        let v_r = query.idx().len();
        for &(threads, seconds, ref result) in &timed {
            entries.push(BenchEntry {
                threads,
                query_id,
                seconds,
                speedup: baseline / seconds,
                iterations: result.stats.iterations,
                v_r,
                nnz: inputs.corpus.nnz(),
            });
        }
        for (doc_id, &wmd) in reference.distances.iter().enumerate() {
            rows.push(BatchRow {
                query_id,
                doc_id,
                wmd,
                dense_wmd: None,
            });
        }
    }
    entries.sort_by_key(|e| (e.threads, e.query_id));
    Ok(BenchReport {
        entries,
        rows,
        failed_queries: failed,
    })
}

/// Renders the result CSV. Rows are sorted by (query_id, doc_id); values use
/// the shortest decimal form that round-trips to the same float, so writing
/// and re-parsing is lossless.
pub fn format_csv(rows: &[BatchRow], include_dense: bool) -> Result<String, CliError> {
    if rows.is_empty() {
        return Err(CliError::Run("no results to write".into()));
    }
    let mut sorted: Vec<&BatchRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.query_id, r.doc_id));
    let mut out = String::from(if include_dense {
        "query_id,doc_id,wmd,dense_wmd\n"
    } else {
        "query_id,doc_id,wmd\n"
    });
    for row in sorted {
        out.push_str(&format!("{},{},{}", row.query_id, row.doc_id, row.wmd));
        if include_dense {
            out.push(',');
            if let Some(dense) = row.dense_wmd {
                out.push_str(&format!("{dense}"));
            }
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn format_bench_csv(entries: &[BenchEntry]) -> Result<String, CliError> {
    if entries.is_empty() {
        return Err(CliError::Run("no benchmark entries to write".into()));
    }
    let mut out = String::from("threads,query_id,seconds,speedup,iterations,v_r,nnz\n");
    for e in entries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.threads, e.query_id, e.seconds, e.speedup, e.iterations, e.v_r, e.nnz
        ));
    }
    Ok(out)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

pub fn bench_output_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".bench.csv");
    PathBuf::from(name)
}

/// Full run. Returns the number of queries that had to be skipped; the
/// process exits 1 when that is nonzero.
pub fn execute(cfg: &RunConfig) -> Result<usize, CliError> {
    let inputs = load_inputs(cfg)?;
    if cfg.bench_thread_list.is_some() {
        let report = run_bench(cfg, &inputs)?;
        let bench_path = bench_output_path(&cfg.output_path);
        write_file(&bench_path, &format_bench_csv(&report.entries)?)?;
        eprintln!("benchmark report written to {}", bench_path.display());
        write_file(&cfg.output_path, &format_csv(&report.rows, false)?)?;
        Ok(report.failed_queries)
    } else {
        let outcome = run_batch(cfg, &inputs)?;
        write_file(&cfg.output_path, &format_csv(&outcome.rows, cfg.check_dense)?)?;
        Ok(outcome.failed_queries)
    }
}

pub fn run(cfg: &RunConfig) -> i32 {
    match execute(cfg) {
        Ok(0) => 0,
        Ok(failed) => {
            eprintln!("completed with {failed} failed queries");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
