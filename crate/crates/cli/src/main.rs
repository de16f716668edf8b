use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dataclone::report::{self, Format};
use dataclone::{run_all, run_stage, CliError, ExperimentConfig, Stage};

#[derive(Parser)]
#[command(name = "dataclone", version, about = "Clinical dataset cloning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic source, audit and public corpora.
    Synth(StageArgs),
    /// Extract entities, relations and assertions.
    Annotate(StageArgs),
    /// Build instruction pairs and generation prompts.
    Instruct(StageArgs),
    /// Pretrain the base model and train one adapter per privacy level.
    Train(StageArgs),
    /// Sample clone corpora from each adapter.
    Generate(StageArgs),
    /// Adapt the encoder on each corpus and track perplexity.
    Adapt(StageArgs),
    /// Train and score entity taggers.
    Tag(StageArgs),
    /// Run the membership inference audit.
    Audit(StageArgs),
    /// Write the report, or render one from an existing results directory.
    Report(ReportArgs),
    /// Run every stage in order.
    All(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `stage=seed`; may be repeated.
    #[arg(long = "seed-override", value_parser = parse_override)]
    seed_override: Vec<(Stage, u64)>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, conflicts_with = "results", required_unless_present = "results")]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "seed-override", value_parser = parse_override)]
    seed_override: Vec<(Stage, u64)>,
    /// Results directory to render to stdout.
    #[arg(long)]
    results: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "md")]
    format: OutFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Md,
    Json,
}

fn parse_override(s: &str) -> Result<(Stage, u64), String> {
    let (stage, seed) = s.split_once('=').ok_or("expected stage=seed")?;
    let seed = seed.parse().map_err(|e| format!("bad seed {seed:?}: {e}"))?;
    Ok((stage.parse()?, seed))
}

fn load(config: &PathBuf, out: &Option<PathBuf>, overrides: &[(Stage, u64)]) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(o) = out {
        cfg.out_dir = o.clone();
    }
    for &(stage, seed) in overrides {
        cfg.override_seed(stage, seed)?;
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(cfg)
}

fn stage(args: &StageArgs, stage: Stage) -> Result<(), CliError> {
    let cfg = load(&args.config, &args.out, &args.seed_override)?;
    if !run_stage(&cfg, stage)? {
        eprintln!("{stage}: up to date");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => stage(&a, Stage::Synth),
        Command::Annotate(a) => stage(&a, Stage::Annotate),
        Command::Instruct(a) => stage(&a, Stage::Instruct),
        Command::Train(a) => stage(&a, Stage::Train),
        Command::Generate(a) => stage(&a, Stage::Generate),
        Command::Adapt(a) => stage(&a, Stage::Adapt),
        Command::Tag(a) => stage(&a, Stage::Tag),
        Command::Audit(a) => stage(&a, Stage::Audit),
        Command::All(a) => run_all(&load(&a.config, &a.out, &a.seed_override)?),
        Command::Report(a) => match (&a.config, &a.results) {
            (Some(config), _) => {
                let cfg = load(config, &a.out, &a.seed_override)?;
                run_stage(&cfg, Stage::Report).map(|_| ())
            }
            (None, Some(dir)) => {
                let doc = report::from_results(dir);
                let format = match a.format {
                    OutFormat::Md => Format::Markdown,
                    OutFormat::Json => Format::Json,
                };
                print!("{}", report::render(&doc, format));
                if doc.missing.is_empty() {
                    Ok(())
                } else {
                    Err(CliError::Incomplete {
                        written: Vec::new(),
                        missing: doc.missing,
                    })
                }
            }
            (None, None) => unreachable!("clap requires one of --config and --results"),
        },
    }
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("DATACLONE_THREADS").ok().and_then(|v| v.parse().ok()) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("thread pool is configured once");
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
