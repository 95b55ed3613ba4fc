use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use vpt_core::harness::cache::sha256_hex;
use vpt_core::harness::{
    compute_metrics, ingest, CacheMode, ConfigError, Dataset, FormatError, Manifest, Pipeline, PipelineError, Policy,
    RunConfig, RunMode,
};
use vpt_core::imagegen::SynthStrategy;
use vpt_core::policies::RewardKind;
use vpt_core::sampler::Strategy;

#[derive(Parser)]
#[command(name = "vpt", version, about = "Score, select and repair visual programs with synthesized unit tests")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// JSONL dataset
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Candidate programs per query
    #[arg(long, global = true, value_name = "N")]
    programs: Option<usize>,
    /// Unit tests kept per query
    #[arg(long, global = true, value_name = "K")]
    tests: Option<usize>,
    /// Test sampling strategy: by_answer, by_input or answer_then_input
    #[arg(long, global = true)]
    strategy: Option<Strategy>,
    /// Image synthesis strategy: plain_diffusion, hires_diffusion, lm_grounded or mock_scene
    #[arg(long, global = true)]
    synth: Option<SynthStrategy>,
    /// Score threshold of the policy being run
    #[arg(long, global = true)]
    theta: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Offline run: fixture chat, hash embeddings, scene-graph images
    #[arg(long, global = true)]
    mock: bool,
    /// Persist service responses to the cache
    #[arg(long, global = true, conflicts_with = "replay")]
    record: bool,
    /// Serve every service response from the cache; misses fail
    #[arg(long, global = true)]
    replay: bool,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Skip malformed dataset lines instead of failing
    #[arg(long, global = true)]
    lenient: bool,
    /// Output file (stdout if absent)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone)]
enum Command {
    /// Generate candidate unit tests per record
    GenTests,
    /// Generate and coverage-sample unit tests
    Sample,
    /// Sample tests and synthesize their images
    Synth,
    /// Choose the best-scoring program per record and write a manifest
    RunSelect,
    /// Like run-select, falling back to a base model below the threshold
    RunRefuse,
    /// Like run-select, re-prompting with test feedback below the threshold
    RunReprompt,
    /// Emit reward-weighted training records
    EmitRewards {
        #[arg(long)]
        reward: Option<RewardKind>,
        #[arg(long)]
        iteration: Option<usize>,
    },
    /// Recompute metrics from a manifest
    Report {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Service(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Service(_) => 3,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e.exit_code() {
            1 => CliError::Usage(e.to_string()),
            2 => CliError::Data(e.to_string()),
            _ => CliError::Service(e.to_string()),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn load_config(shared: &Shared, command: &Command) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(shared.config.as_deref())?;
    if let Some(n) = shared.programs {
        cfg.programs = n;
    }
    if let Some(k) = shared.tests {
        cfg.tests = k;
    }
    if let Some(s) = shared.strategy {
        cfg.strategy = s;
    }
    if let Some(s) = shared.synth {
        cfg.synth.strategy = s;
    }
    if let Some(seed) = shared.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(w) = shared.workers {
        cfg.workers = w;
    }
    if let Some(dir) = &shared.cache_dir {
        cfg.cache_dir = Some(dir.clone());
    }
    if let Some(theta) = shared.theta {
        match command {
            Command::RunRefuse => cfg.refusal.threshold = theta,
            Command::RunReprompt => cfg.reprompt.threshold = theta,
            Command::EmitRewards { .. } => cfg.reward.threshold = theta,
            _ => log::warn!("--theta has no effect on this command"),
        }
    }
    if let Command::EmitRewards { reward, iteration } = command {
        if let Some(r) = reward {
            cfg.reward.kind = *r;
        }
        if let Some(i) = iteration {
            cfg.reward.iteration = *i;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display()))),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::Data(e.to_string())),
    }
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items.iter().map(|i| serde_json::to_string(i).expect("outputs serialize") + "\n").collect()
}

fn report(manifest: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(manifest)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", manifest.display())))?;
    let m = Manifest::parse(&text).map_err(|e| CliError::Data(e.to_string()))?;
    let metrics = compute_metrics(&m.records).map_err(|e| CliError::Data(e.to_string()))?;
    let body = serde_json::json!({ "command": m.header.command, "metrics": metrics });
    write_output(out, &(serde_json::to_string_pretty(&body).expect("metrics serialize") + "\n"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let shared = &cli.shared;
    let out = shared.out.as_deref();
    if let Command::Report { manifest } = &cli.command {
        return report(manifest, out);
    }
    let dataset_path = shared.dataset.as_deref().ok_or_else(|| CliError::Usage("--dataset is required".into()))?;
    let cfg = load_config(shared, &cli.command)?;
    let ds: Dataset = ingest(dataset_path, shared.lenient)?;
    if !ds.skipped.is_empty() {
        log::warn!("skipped {} malformed dataset lines", ds.skipped.len());
    }
    let cache = match (shared.record, shared.replay) {
        (true, _) => CacheMode::ReadWrite,
        (_, true) => CacheMode::Replay,
        _ => CacheMode::Off,
    };
    let pipeline = Pipeline::from_config(cfg, RunMode { mock: shared.mock, cache })?;
    let policy = match &cli.command {
        Command::GenTests => return write_output(out, &jsonl(&pipeline.map_records(&ds, |r| pipeline.tests_record(r))?)),
        Command::Sample => return write_output(out, &jsonl(&pipeline.map_records(&ds, |r| pipeline.sample_record(r))?)),
        Command::Synth => return write_output(out, &jsonl(&pipeline.map_records(&ds, |r| pipeline.synth_record(r))?)),
        Command::EmitRewards { .. } => {
            let per_record = pipeline.map_records(&ds, |r| pipeline.rewards(&ds, r))?;
            let mut records = Vec::new();
            for r in per_record.into_iter().flatten() {
                match r {
                    Ok(rec) => records.push(rec),
                    Err(e) => log::warn!("dropping reward record: {e}"),
                }
            }
            if records.is_empty() {
                return Err(CliError::Data("no reward record could be computed".into()));
            }
            return write_output(out, &jsonl(&records));
        }
        Command::RunSelect => Policy::Select,
        Command::RunRefuse => Policy::Refuse,
        Command::RunReprompt => Policy::Reprompt,
        Command::Report { .. } => unreachable!("handled above"),
    };
    let command = match policy {
        Policy::Select => "run-select",
        Policy::Refuse => "run-refuse",
        Policy::Reprompt => "run-reprompt",
    };
    let results = pipeline.run(policy, &ds)?;
    let dataset_bytes = std::fs::read(dataset_path).map_err(|e| CliError::Data(e.to_string()))?;
    let manifest = pipeline.manifest(command, &sha256_hex(&dataset_bytes), results)?;
    let m = &manifest.summary.metrics;
    log::info!("{} records, accuracy {:.3}, error rate {:.3}", m.records, m.accuracy, m.error_rate);
    write_output(out, &manifest.to_jsonl())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
