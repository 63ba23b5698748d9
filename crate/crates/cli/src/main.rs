//! `css`: drives the counterfactual semantic saliency pipeline.
//!
//! Exit codes: 0 success, 2 invalid input or config, 3 backend failure,
//! 4 finished with some items missing.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use css_core::exec::Execution;
use css_core::gateway::mock::{MockDescriber, MockEmbedder, MockInpainter, MockSegmenter, DEFAULT_EMBED_DIM};
use css_core::gateway::conformance::{load_fixtures, run_suite};
use css_core::gateway::protocol::{ModelServer, ServedBackends};
use css_core::gateway::MockWorld;
use css_core::pipeline::{Pipeline, RunConfig, Stage, StageOutcome};
use css_core::synth::scenes::{generate, SynthConfig};
use css_core::Error;

const EXIT_INVALID: u8 = 2;
const EXIT_BACKEND: u8 = 3;
const EXIT_PARTIAL: u8 = 4;

#[derive(Parser)]
#[command(name = "css", version, about = "Counterfactual semantic saliency pipeline")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run config (JSON). Relative paths inside resolve against its directory.
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory, overriding `output_dir`.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Run seed, overriding `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Resampling iterations, overriding `stats.n_iterations`.
    #[arg(long)]
    iterations: Option<usize>,
    /// Disable the parallel executor.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage the config provides inputs for.
    Run {
        #[command(flatten)]
        args: RunArgs,
        /// Comma-separated stage list instead of the default selection.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
    },
    /// List objects, segment, preprocess masks and inpaint variants.
    Prepare(RunArgs),
    /// Apply annotator votes and review decisions to the manifest.
    Validate(RunArgs),
    /// Sample and embed descriptions of every stimulus for each agent.
    Describe(RunArgs),
    /// Compute css for every accepted variant.
    Score(RunArgs),
    /// Render saliency rasters.
    Map(RunArgs),
    /// Embed participant responses and drop off-topic ones.
    HumanFilter(RunArgs),
    /// Split responses into ground-truth and predictor sets and score them.
    Consensus(RunArgs),
    /// Top-1 accuracy and Kendall tau against the truth agent.
    Eval(RunArgs),
    /// Object attributes and per-agent bias correlations.
    Bias(RunArgs),
    /// Bootstrap, permutation and driving-factor tests.
    Stats(RunArgs),
    /// Compare white-box saliency stacks with css rankings.
    Whitebox(RunArgs),
    /// Route stimuli into participant sets.
    Studyplan(RunArgs),
    /// Summary table and charts.
    Report(RunArgs),
    /// Write a planted synthetic dataset with a ready run config.
    Synth {
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Simulated participants per stimulus (0 for none).
        #[arg(long, default_value_t = 12)]
        participants: usize,
    },
    /// Serve the mock backends over the HTTP wire protocol.
    ServeMock {
        /// Mock world JSON (object palette).
        #[arg(long)]
        world: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Embedder seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Replay the golden protocol fixtures against a running service.
    Conformance {
        /// Base URL of the service.
        #[arg(long)]
        url: String,
        /// Fixture directory.
        #[arg(long)]
        fixtures: PathBuf,
        /// Roles the service hosts (describe, embed, segment, inpaint); all when omitted.
        #[arg(long, value_delimiter = ',')]
        roles: Vec<String>,
        /// Also require exact mock responses.
        #[arg(long)]
        strict: bool,
        #[arg(long, default_value_t = 120.0)]
        timeout_secs: f64,
    },
}

fn open(args: &RunArgs) -> Result<Pipeline, Error> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.output_dir = std::path::absolute(out).map_err(|e| Error::Invalid(format!("{}: {e}", out.display())))?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.iterations {
        cfg.stats.n_iterations = n;
    }
    if args.sequential {
        cfg.execution = Execution::Sequential;
    }
    let base = args.config.parent().map(PathBuf::from).unwrap_or_default();
    Pipeline::new(cfg, &base)
}

fn report(o: &StageOutcome) {
    let state = if o.skipped {
        "up to date".to_string()
    } else if o.is_partial() {
        format!("partial, {} failed", o.n_failed)
    } else {
        "done".to_string()
    };
    println!("{:<13} {state} ({} outputs)", o.stage.name(), o.outputs.len());
}

fn run_stages(args: &RunArgs, stages: Option<Vec<Stage>>) -> Result<bool, Error> {
    let p = open(args)?;
    let stages = stages.unwrap_or_else(|| p.default_stages());
    let mut partial = false;
    for s in stages {
        let o = p.run(s)?;
        report(&o);
        partial |= o.is_partial();
    }
    Ok(partial)
}

fn serve(world: PathBuf, addr: &str, seed: u64) -> Result<(), Error> {
    let world = Arc::new(MockWorld::load(&world)?);
    let backends = ServedBackends {
        generator: Some(Arc::new(MockDescriber::new(world.clone()))),
        embedder: Some(Arc::new(MockEmbedder::new(DEFAULT_EMBED_DIM, seed))),
        segmenter: Some(Arc::new(MockSegmenter::new(world))),
        inpainter: Some(Arc::new(MockInpainter)),
    };
    let server = ModelServer::start(addr, backends)?;
    println!("serving mock backends at {}", server.url());
    server.join();
    Ok(())
}

fn conformance(url: &str, dir: &std::path::Path, roles: &[String], strict: bool, timeout: f64) -> Result<bool, Error> {
    let fixtures = load_fixtures(dir)?;
    let results = run_suite(url, &fixtures, roles, strict, Duration::from_secs_f64(timeout));
    let mut failed = 0;
    for r in &results {
        if r.passed() {
            println!("[PASS] {}", r.name);
        } else {
            failed += 1;
            println!("[FAIL] {}: {}", r.name, r.violations.join("; "));
        }
    }
    println!("{} of {} fixtures conform", results.len() - failed, results.len());
    if failed > 0 {
        return Err(Error::Protocol(format!("{failed} fixtures failed")));
    }
    Ok(false)
}

fn dispatch(command: Command) -> Result<bool, Error> {
    let single = |args: RunArgs, stage: Stage| run_stages(&args, Some(vec![stage]));
    match command {
        Command::Run { args, stages } => {
            let stages = if stages.is_empty() {
                None
            } else {
                Some(stages.iter().map(|s| s.parse()).collect::<Result<Vec<Stage>, _>>()?)
            };
            run_stages(&args, stages)
        }
        Command::Prepare(a) => single(a, Stage::Prepare),
        Command::Validate(a) => single(a, Stage::Validate),
        Command::Describe(a) => single(a, Stage::Describe),
        Command::Score(a) => single(a, Stage::Score),
        Command::Map(a) => single(a, Stage::Map),
        Command::HumanFilter(a) => single(a, Stage::HumanFilter),
        Command::Consensus(a) => single(a, Stage::Consensus),
        Command::Eval(a) => single(a, Stage::Eval),
        Command::Bias(a) => single(a, Stage::Bias),
        Command::Stats(a) => single(a, Stage::Stats),
        Command::Whitebox(a) => single(a, Stage::Whitebox),
        Command::Studyplan(a) => single(a, Stage::Studyplan),
        Command::Report(a) => single(a, Stage::Report),
        Command::Synth { out, scenes, seed, participants } => {
            let cfg = SynthConfig { n_scenes: scenes, seed, participants, ..Default::default() };
            let ds = generate(&cfg, &out)?;
            println!("wrote {} scenes; run with: css run --config {}", ds.scenes.len(), ds.config_path.display());
            Ok(false)
        }
        Command::ServeMock { world, addr, seed } => serve(world, &addr, seed).map(|_| false),
        Command::Conformance { url, fixtures, roles, strict, timeout_secs } => {
            conformance(&url, &fixtures, &roles, strict, timeout_secs)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("finished with missing items; see the warnings above");
            ExitCode::from(EXIT_PARTIAL)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_backend() { EXIT_BACKEND } else { EXIT_INVALID })
        }
    }
}
