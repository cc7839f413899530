mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{
    AccountantSection, Config, EncoderSection, EvaluationSection, GraphSection, ObjectiveSection,
    OptimSection, PrivacySection, RrSection, SamplerSection,
};

/// Differentially private relational learning on text-attributed graphs.
#[derive(Debug, Parser)]
#[command(name = "dprel", version)]
struct Cli {
    /// TOML experiment config; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate entity/relation files and write them in canonical form.
    Ingest {
        #[command(flatten)]
        io: commands::IngestIo,
    },
    /// Generate a planted-partition graph with community labels.
    Synth {
        #[command(flatten)]
        io: commands::OutIo,
        #[command(flatten)]
        graph: GraphSection,
    },
    /// Split a graph's relations into train and eval sets.
    Split {
        #[command(flatten)]
        io: commands::SplitIo,
        #[command(flatten)]
        graph: GraphSection,
    },
    /// Train an encoder, optionally under differential privacy.
    Train {
        #[command(flatten)]
        io: commands::TrainIo,
        #[command(flatten)]
        encoder: EncoderSection,
        #[command(flatten)]
        sampler: SamplerSection,
        #[command(flatten)]
        objective: ObjectiveSection,
        #[command(flatten)]
        privacy: PrivacySection,
        #[command(flatten)]
        optim: OptimSection,
    },
    /// PREC@1 and MRR on held-out relations.
    Eval {
        #[command(flatten)]
        io: commands::EvalIo,
        #[command(flatten)]
        evaluation: EvaluationSection,
    },
    /// Few-shot linear-probe entity classification.
    Probe {
        #[command(flatten)]
        io: commands::ProbeIo,
        #[command(flatten)]
        evaluation: EvaluationSection,
    },
    /// Membership-inference audit of a trained encoder.
    Attack {
        #[command(flatten)]
        io: commands::AttackIo,
        #[command(flatten)]
        evaluation: EvaluationSection,
    },
    /// Privacy loss of a subsampled Gaussian run.
    Account {
        #[command(flatten)]
        io: commands::OptOutIo,
        #[command(flatten)]
        accountant: AccountantSection,
    },
    /// Smallest noise multiplier meeting a target epsilon.
    Calibrate {
        #[command(flatten)]
        io: commands::OptOutIo,
        #[command(flatten)]
        accountant: AccountantSection,
    },
    /// Randomized response over every entity pair.
    RrBaseline {
        #[command(flatten)]
        io: commands::RrIo,
        #[command(flatten)]
        rr: RrSection,
    },
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct ReplayArgs {
    manifest: PathBuf,
    /// Output directory for the re-run (default: `replay` next to the manifest).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes, each with its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Internal = 1,
    Usage = 2,
    Config = 3,
    Input = 4,
    Data = 5,
    Numeric = 6,
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self { category, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn categorize(err: &anyhow::Error) -> Category {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return e.category;
        }
        if let Some(e) = cause.downcast_ref::<dprel::Error>() {
            use dprel::Error as E;
            return match e {
                E::InvalidParameter(_) => Category::Config,
                E::Calibration(_) | E::NonFinite(_) => Category::Numeric,
                E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Category::Input,
                E::Io(_) => Category::Internal,
                _ => Category::Data,
            };
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            return if e.kind() == std::io::ErrorKind::NotFound { Category::Input } else { Category::Internal };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return Category::Data;
        }
    }
    Category::Internal
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::new(Category::Usage, format!("--threads: {e}")))?;
    }
    if let Command::Replay(args) = &cli.command {
        return commands::replay(&args.manifest, args.out.as_deref());
    }
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        if cfg.seed.is_some_and(|s| s != seed) {
            eprintln!("warning: --seed {seed} overrides seed = {} from the config file", cfg.seed.unwrap());
        }
        cfg.seed = Some(seed);
    }
    let job = match cli.command {
        Command::Ingest { io } => commands::Job::Ingest(io),
        Command::Synth { io, graph } => {
            cfg.graph.merge_flags(&graph, "graph");
            commands::Job::Synth(io)
        }
        Command::Split { io, graph } => {
            cfg.graph.merge_flags(&graph, "graph");
            commands::Job::Split(io)
        }
        Command::Train { io, encoder, sampler, objective, privacy, optim } => {
            cfg.encoder.merge_flags(&encoder, "encoder");
            cfg.sampler.merge_flags(&sampler, "sampler");
            cfg.objective.merge_flags(&objective, "objective");
            cfg.privacy.merge_flags(&privacy, "privacy");
            cfg.optim.merge_flags(&optim, "optim");
            commands::Job::Train(io)
        }
        Command::Eval { io, evaluation } => {
            cfg.evaluation.merge_flags(&evaluation, "evaluation");
            commands::Job::Eval(io)
        }
        Command::Probe { io, evaluation } => {
            cfg.evaluation.merge_flags(&evaluation, "evaluation");
            commands::Job::Probe(io)
        }
        Command::Attack { io, evaluation } => {
            cfg.evaluation.merge_flags(&evaluation, "evaluation");
            commands::Job::Attack(io)
        }
        Command::Account { io, accountant } => {
            cfg.accountant.merge_flags(&accountant, "accountant");
            commands::Job::Account(io)
        }
        Command::Calibrate { io, accountant } => {
            cfg.accountant.merge_flags(&accountant, "accountant");
            commands::Job::Calibrate(io)
        }
        Command::RrBaseline { io, rr } => {
            cfg.rr.merge_flags(&rr, "rr");
            commands::Job::RrBaseline(io)
        }
        Command::Replay(_) => unreachable!("handled above"),
    };
    commands::execute(&job, &cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(Category::Usage as u8) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = categorize(&e);
            eprintln!("error ({category:?}): {e:#}");
            ExitCode::from(category as u8)
        }
    }
}
