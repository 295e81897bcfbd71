//! Command-line entry point.

pub mod config;
pub mod manifest;
pub mod validate;

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::backend::Backend;
use crate::datagen::{run_pipeline, DatagenConfig, RecencyScheme};
use crate::eval::tokens::{reports_table, ImageCost, RetrievalTrace};
use crate::eval::{evaluate, retrieval, step_tasks, token_budget, CostModel, EvalConfig, Strategy};
use crate::matching::DEFAULT_GROUNDING_THRESHOLD;
use crate::memory::{
    summarize_step, CacheError, CacheRecord, MemoryCache, MemorySource, OnlineSummarizer,
};
use crate::planner::{PlannerConfig, TranscriptLine};
use crate::trajectory::{load_trajectories, Trajectory};

use config::{build_backend, effective_backend_config, BackendArgs, BackendKind, FileConfig};
use manifest::{write_file, RunManifest};
use validate::{validate_path, CorpusKind};

/// Failure of a command, carrying its exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    /// I/O or schema problem: exit code 2.
    pub fn io(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    /// Validation or result-level failure: exit code 1.
    pub fn failure(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Parser)]
#[command(
    name = "lookback",
    version,
    about = "GUI agent memory, look-back planning, data curation and evaluation"
)]
pub struct Cli {
    /// TOML file with backend and run settings; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-compute step summaries for every trajectory step into a cache file.
    Summarize(SummarizeArgs),
    /// Build the tool-augmented instruction-tuning dataset.
    Datagen(DatagenArgs),
    /// Evaluate a backend on a step-level benchmark.
    Eval(Box<EvalCommand>),
    /// Mean input tokens per step under each history strategy.
    Tokens(TokensArgs),
    /// Retrieval distance histogram and rate from transcript logs.
    RetrievalStats(RetrievalStatsArgs),
    /// Check a trajectory or SFT corpus.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long)]
    pub parallel: Option<usize>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Backend for reasoning synthesis; defaults to the teacher backend.
    #[arg(long)]
    pub synth_backend: Option<String>,
    /// `uniform` or `power:<alpha>`.
    #[arg(long, default_value = "uniform")]
    pub recency: String,
    #[arg(long)]
    pub grounding_threshold: Option<f64>,
    #[arg(long)]
    pub parallel: Option<usize>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
#[command(args_conflicts_with_subcommands = true, subcommand_negates_reqs = true)]
pub struct EvalCommand {
    #[command(subcommand)]
    pub sub: Option<EvalSub>,
    #[command(flatten)]
    pub run: EvalRunArgs,
}

#[derive(Debug, Subcommand)]
pub enum EvalSub {
    /// Evaluate a backend on a benchmark (same as plain `eval`).
    Run(EvalRunArgs),
    /// Same as the top-level `tokens` command.
    Tokens(TokensArgs),
    /// Same as the top-level `retrieval-stats` command.
    RetrievalStats(RetrievalStatsArgs),
}

#[derive(Debug, Args)]
pub struct EvalRunArgs {
    #[arg(long, required = true)]
    pub benchmark: Option<PathBuf>,
    /// Benchmark name in the report; defaults to the file stem.
    #[arg(long)]
    pub name: Option<String>,
    /// Pre-computed summaries; without it steps are summarized online with the same backend.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long, required = true)]
    pub report: Option<PathBuf>,
    /// Plain-text report; defaults to the report path with a `.txt` extension.
    #[arg(long)]
    pub text_report: Option<PathBuf>,
    /// Transcript log; defaults to the report path with a `.transcripts.jsonl` extension.
    #[arg(long)]
    pub transcripts: Option<PathBuf>,
    #[arg(long)]
    pub max_retrievals: Option<u32>,
    #[arg(long)]
    pub parallel: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub grounding_threshold: Option<f64>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct TokensArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Strategies to account (repeatable): None, +A, +5O, +AO, +SA, +PAL. Defaults to all.
    #[arg(long = "strategy")]
    pub strategies: Vec<String>,
    /// Summary cache, required for +SA and +PAL.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Transcript log providing the observed retrievals for +PAL.
    #[arg(long, conflicts_with = "retrieval_rate")]
    pub transcripts: Option<PathBuf>,
    /// Expected retrievals per step for +PAL when no transcripts are given.
    #[arg(long)]
    pub retrieval_rate: Option<f64>,
    #[arg(long, default_value_t = 1400, conflicts_with = "pixels_per_token")]
    pub image_tokens: u64,
    /// Use an area-proportional image cost instead of a flat one.
    #[arg(long)]
    pub pixels_per_token: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub min_image_tokens: u64,
    #[arg(long, default_value_t = 4)]
    pub chars_per_token: u32,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RetrievalStatsArgs {
    #[arg(long)]
    pub transcripts: PathBuf,
    /// Total planned steps; defaults to the distinct steps in the log.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub path: PathBuf,
    #[arg(long, value_enum, default_value_t = CorpusKind::Auto)]
    pub kind: CorpusKind,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Summarize(a) => cmd_summarize(&a, &file),
        Command::Datagen(a) => cmd_datagen(&a, &file),
        Command::Eval(e) => match e.sub {
            Some(EvalSub::Run(a)) => cmd_eval(&a, &file),
            Some(EvalSub::Tokens(a)) => cmd_tokens(&a),
            Some(EvalSub::RetrievalStats(a)) => cmd_retrieval_stats(&a),
            None => cmd_eval(&e.run, &file),
        },
        Command::Tokens(a) => cmd_tokens(&a),
        Command::RetrievalStats(a) => cmd_retrieval_stats(&a),
        Command::Validate(a) => cmd_validate(&a),
    }
}

fn load_arc_trajectories(path: &Path) -> Result<Vec<Arc<Trajectory>>, CliError> {
    let trajs = load_trajectories(path).map_err(|e| CliError::io(e.to_string()))?;
    Ok(trajs.into_iter().map(Arc::new).collect())
}

fn cache_error(e: CacheError) -> CliError {
    match e {
        CacheError::MissingMemoryCache { .. } => CliError::io(format!("MissingMemoryCache: {e}")),
        other => CliError::io(other.to_string()),
    }
}

fn load_cache(path: &Path) -> Result<MemoryCache, CliError> {
    if !path.exists() {
        return Err(CliError::io(format!(
            "MissingMemoryCache: {} not found; run `summarize` first",
            path.display()
        )));
    }
    MemoryCache::load(path).map_err(cache_error)
}

fn worker_count(flag: Option<usize>, file: &FileConfig, backend_parallel: usize) -> usize {
    flag.or(file.parallel).unwrap_or(backend_parallel).max(1)
}

fn cmd_summarize(a: &SummarizeArgs, file: &FileConfig) -> Result<(), CliError> {
    use rayon::prelude::*;
    let mut manifest = RunManifest::new("summarize");
    let trajs = load_arc_trajectories(&a.input)?;
    manifest.input(&a.input)?;
    let mut cache = MemoryCache::open(&a.cache).map_err(cache_error)?;
    let kind = BackendKind::parse(&a.backend.backend)?;
    let bcfg = effective_backend_config(&a.backend, file);
    let backend = build_backend(&kind, &bcfg)?;
    let parallel = worker_count(a.parallel, file, bcfg.max_parallel);

    let todo: Vec<(Arc<Trajectory>, usize)> = trajs
        .iter()
        .flat_map(|t| (0..t.len()).map(move |k| (Arc::clone(t), k)))
        .filter(|(t, k)| !cache.contains(&t.id, *k as u32))
        .collect();
    let total_steps: usize = trajs.iter().map(|t| t.len()).sum();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .expect("worker pool");
    let results: Vec<_> = pool.install(|| {
        todo.par_iter()
            .map(|(t, k)| summarize_step(backend.as_ref(), t, *k))
            .collect()
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for ((t, k), r) in todo.iter().zip(results) {
        match r {
            Ok(entry) => records.push(CacheRecord {
                trajectory_id: t.id.clone(),
                entry,
            }),
            Err(e) => failures.push(format!("trajectory {} step {k}: {e}", t.id)),
        }
    }
    let added = records.len();
    cache.append(records).map_err(cache_error)?;
    println!(
        "{added} new entries, {} already cached, {} failed",
        total_steps - todo.len(),
        failures.len()
    );
    for f in &failures {
        eprintln!("{f}");
    }
    manifest.config =
        json!({ "backend": kind.describe(), "backend_config": bcfg, "parallel": parallel });
    manifest.stats = json!({ "steps": total_steps, "added": added, "cached": total_steps - todo.len(), "failed": failures.len() });
    manifest.output(&a.cache);
    manifest.write_beside(&a.cache)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::failure(format!(
            "{} steps could not be summarized",
            failures.len()
        )))
    }
}

fn parse_recency(s: &str) -> Result<RecencyScheme, CliError> {
    if s == "uniform" {
        return Ok(RecencyScheme::UniformBuckets);
    }
    s.strip_prefix("power:")
        .and_then(|a| a.parse::<f64>().ok())
        .filter(|a| a.is_finite())
        .map(|alpha| RecencyScheme::Power { alpha })
        .ok_or_else(|| {
            CliError::io(format!(
                "unknown recency scheme `{s}`; expected `uniform` or `power:<alpha>`"
            ))
        })
}

fn cmd_datagen(a: &DatagenArgs, file: &FileConfig) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("datagen");
    let trajs = load_arc_trajectories(&a.input)?;
    manifest.input(&a.input)?;
    let cache = load_cache(&a.cache)?;
    manifest.input(&a.cache)?;
    for t in &trajs {
        cache
            .memory_for(t, t.len().saturating_sub(1))
            .map_err(cache_error)?;
    }
    let kind = BackendKind::parse(&a.backend.backend)?;
    let bcfg = effective_backend_config(&a.backend, file);
    let teacher = build_backend(&kind, &bcfg)?;
    let synth_kind = match &a.synth_backend {
        Some(s) => Some(BackendKind::parse(s)?),
        None => None,
    };
    let synth_owned = match &synth_kind {
        Some(k) => Some(build_backend(k, &bcfg)?),
        None => None,
    };
    let synth: &dyn Backend = synth_owned.as_deref().unwrap_or(teacher.as_ref());
    let config = DatagenConfig {
        seed: a.seed,
        grounding_threshold: a
            .grounding_threshold
            .or(file.grounding_threshold)
            .unwrap_or(DEFAULT_GROUNDING_THRESHOLD),
        recency: parse_recency(&a.recency)?,
        parallel: worker_count(a.parallel, file, bcfg.max_parallel),
    };
    let output = run_pipeline(teacher.as_ref(), synth, &trajs, &cache, &config)
        .map_err(|e| CliError::failure(e.to_string()))?;
    let s = &output.stats;
    println!("steps attempted: {}", s.steps_attempted);
    println!(
        "curated: {} ({} failed)",
        s.curated,
        s.steps_attempted - s.curated
    );
    println!("dropped as incorrect: {}", s.dropped_incorrect);
    println!("correct with retrieval: {}", s.tool_correct);
    println!("correct without retrieval: {}", s.notool_correct);
    println!(
        "final: {} with retrieval, {} without",
        s.final_tool, s.final_notool
    );

    let mut body = String::new();
    for sample in &output.samples {
        body.push_str(&sample.to_json_line());
        body.push('\n');
    }
    write_file(&a.out, &body)?;
    manifest.output(&a.out);
    manifest.seeds.insert("rebalance".into(), config.seed);
    manifest
        .seeds
        .insert("balance".into(), config.seed.wrapping_add(1));
    manifest.config = json!({
        "backend": kind.describe(),
        "synth_backend": synth_kind.as_ref().map(BackendKind::describe),
        "backend_config": bcfg,
        "datagen": config,
    });
    manifest.stats = serde_json::to_value(&output.stats).expect("stats serialize");
    manifest.write_beside(&a.out)?;
    if output.samples.is_empty() {
        return Err(CliError::failure("the final dataset is empty"));
    }
    Ok(())
}

fn with_extension(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn cmd_eval(a: &EvalRunArgs, file: &FileConfig) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("eval");
    let bench = a
        .benchmark
        .as_deref()
        .ok_or_else(|| CliError::io("--benchmark is required"))?;
    let report_path = a
        .report
        .as_deref()
        .ok_or_else(|| CliError::io("--report is required"))?;
    let trajs = load_arc_trajectories(bench)?;
    manifest.input(bench)?;
    let kind = BackendKind::parse(&a.backend.backend)?;
    let bcfg = effective_backend_config(&a.backend, file);
    let backend: Arc<dyn Backend> = Arc::from(build_backend(&kind, &bcfg)?);
    let memory: Box<dyn MemorySource> = match &a.cache {
        Some(p) => {
            manifest.input(p)?;
            Box::new(load_cache(p)?)
        }
        None => Box::new(OnlineSummarizer::new(Arc::clone(&backend))),
    };
    let config = EvalConfig {
        planner: PlannerConfig {
            max_retrievals: a
                .max_retrievals
                .or(file.max_retrievals)
                .unwrap_or(PlannerConfig::default().max_retrievals),
        },
        grounding_threshold: a
            .grounding_threshold
            .or(file.grounding_threshold)
            .unwrap_or(DEFAULT_GROUNDING_THRESHOLD),
        seed: a.seed,
        parallel: worker_count(a.parallel, file, bcfg.max_parallel),
    };
    let name = a.name.clone().unwrap_or_else(|| {
        bench
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let tasks = step_tasks(&trajs);
    let out = evaluate(backend.as_ref(), &name, &tasks, memory.as_ref(), &config);

    let text_path = a
        .text_report
        .clone()
        .unwrap_or_else(|| with_extension(report_path, ".txt"));
    let transcript_path = a
        .transcripts
        .clone()
        .unwrap_or_else(|| with_extension(report_path, ".transcripts.jsonl"));
    write_file(report_path, &(out.report.to_json() + "\n"))?;
    let table = out.report.to_table();
    write_file(&text_path, &table)?;
    let mut lines = String::new();
    for rec in &out.records {
        for l in rec.transcript_lines() {
            lines.push_str(&serde_json::to_string(&l).expect("transcript serializes"));
            lines.push('\n');
        }
    }
    write_file(&transcript_path, &lines)?;
    print!("{table}");
    manifest.output(report_path);
    manifest.output(&text_path);
    manifest.output(&transcript_path);
    manifest.seeds.insert("eval".into(), a.seed);
    manifest.config = json!({
        "backend": kind.describe(),
        "backend_config": bcfg,
        "eval": config,
        "parallel": config.parallel,
        "config_hash": config.config_hash(),
    });
    manifest.stats = json!({ "retrieval": out.retrieval });
    manifest.write_beside(report_path)?;
    Ok(())
}

pub fn read_transcripts(path: &Path) -> Result<Vec<TranscriptLine>, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: TranscriptLine = serde_json::from_str(&line)
            .map_err(|e| CliError::io(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(l);
    }
    Ok(out)
}

fn cmd_tokens(a: &TokensArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("tokens");
    let trajs = load_arc_trajectories(&a.input)?;
    manifest.input(&a.input)?;
    let strategies: Vec<Strategy> = if a.strategies.is_empty() {
        Strategy::ALL.to_vec()
    } else {
        a.strategies
            .iter()
            .map(|s| s.parse().map_err(CliError::io))
            .collect::<Result<_, _>>()?
    };
    let cost = CostModel {
        image: match a.pixels_per_token {
            Some(p) if p > 0.0 => ImageCost::Area {
                pixels_per_token: p,
                min_tokens: a.min_image_tokens,
            },
            Some(_) => return Err(CliError::io("--pixels-per-token must be positive")),
            None => ImageCost::Flat {
                tokens: a.image_tokens,
            },
        },
        chars_per_token: a.chars_per_token.max(1),
    };
    let cache = match &a.cache {
        Some(p) => {
            manifest.input(p)?;
            Some(load_cache(p)?)
        }
        None => None,
    };
    let trace = match (&a.transcripts, a.retrieval_rate) {
        (Some(p), _) => {
            manifest.input(p)?;
            RetrievalTrace::from_transcripts(&read_transcripts(p)?)
        }
        (None, Some(r)) => RetrievalTrace::Rate(r),
        (None, None) => RetrievalTrace::Empty,
    };
    let mut reports = Vec::new();
    for s in strategies {
        let mem = cache.as_ref().map(|c| c as &dyn MemorySource);
        let r = token_budget(&trajs, s, &cost, mem, &trace)
            .map_err(|e| CliError::io(format!("{}: {e}", e.code())))?;
        reports.push(r);
    }
    print!("{}", reports_table(&reports));
    if let Some(out) = &a.out {
        write_file(
            out,
            &(serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n"),
        )?;
        manifest.output(out);
        manifest.config = json!({ "cost_model": cost, "retrieval_rate": a.retrieval_rate });
        manifest.write_beside(out)?;
    }
    Ok(())
}

fn cmd_retrieval_stats(a: &RetrievalStatsArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("retrieval-stats");
    let lines = read_transcripts(&a.transcripts)?;
    manifest.input(&a.transcripts)?;
    let steps = a.steps.unwrap_or_else(|| retrieval::distinct_steps(&lines));
    let stats = retrieval::retrieval_stats(&lines, steps);
    print!("{}", stats.to_table());
    if let Some(out) = &a.out {
        write_file(
            out,
            &(serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n"),
        )?;
        manifest.output(out);
        manifest.write_beside(out)?;
    }
    Ok(())
}

fn cmd_validate(a: &ValidateArgs) -> Result<(), CliError> {
    let report = validate_path(&a.path, a.kind)?;
    print!("{}", report.render());
    if report.violations.is_empty() {
        Ok(())
    } else {
        Err(CliError::failure(format!(
            "{} violations",
            report.violations.len()
        )))
    }
}
