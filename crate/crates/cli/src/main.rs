use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use evidal_cli::commands::{self, GenerateOptions};
use evidal_cli::error::{EXIT_OK, EXIT_USAGE};
use evidal_cli::{report, serve, CliResult, RunConfig};
use evidal_core::active::QueryStrategy;
use evidal_core::network::EvidenceActivation;
use evidal_core::pipeline::Domain;

#[derive(Parser)]
#[command(name = "evidal", version, about = "Evidential active learning on synthetic pools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset file.
    Generate {
        #[arg(long, default_value = "nct-toy")]
        preset: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        overlap_factor: Option<f64>,
        /// Also write the out-domain sibling distribution.
        #[arg(long)]
        outdomain: bool,
    },
    /// Contrastively pre-train an encoder and save the checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fine-tune on every training label, evaluate, optionally distill.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<u32>,
        #[arg(long)]
        distill_epochs: Option<u32>,
    },
    /// Run the active-learning experiment for every strategy and seed.
    AlRun {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        active: ActiveArgs,
        /// Print one line per completed round.
        #[arg(long)]
        progress: bool,
    },
    /// Summarize a finished al-run directory.
    Report { run_dir: PathBuf },
    /// Write per-sample embeddings and opinions as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Host an interactive run behind the annotation service.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "uncertainty_topk")]
        strategy: QueryStrategy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Flags shared by the training subcommands; each overrides the config file.
#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    activation: Option<EvidenceActivation>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, conflicts_with = "no_pretrain")]
    pretrain: bool,
    #[arg(long)]
    no_pretrain: bool,
    #[arg(long)]
    domain: Option<Domain>,
}

#[derive(Args)]
struct ActiveArgs {
    /// Repeat to run several strategies.
    #[arg(long = "strategy")]
    strategies: Vec<QueryStrategy>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Fraction of the pool labeled per round.
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    max_budget: Option<f64>,
    #[arg(long)]
    epochs_per_round: Option<u32>,
}

impl Common {
    fn resolve(self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        if let Some(d) = self.dataset {
            cfg.data.dataset = Some(d);
        }
        if let Some(p) = self.preset {
            cfg.data.preset = p;
            cfg.data.dataset = None;
        }
        if let Some(s) = self.data_seed {
            cfg.data.seed = s;
        }
        if self.out.is_some() {
            cfg.out = self.out;
        }
        if let Some(a) = self.activation {
            cfg.model.evidence_activation = a;
        }
        if let Some(lr) = self.lr {
            cfg.optimizer.learning_rate = lr;
        }
        if self.pretrain {
            cfg.pipeline.pretrain = true;
        }
        if self.no_pretrain {
            cfg.pipeline.pretrain = false;
        }
        if let Some(d) = self.domain {
            cfg.pipeline.domain = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Generate { preset, seed, out, n, overlap_factor, outdomain } => {
            for path in commands::generate(&preset, seed, &out, &GenerateOptions { n, overlap_factor, outdomain })? {
                println!("{}", path.display());
            }
        }
        Command::Pretrain { common, seed } => {
            let cfg = common.resolve()?;
            println!("{}", commands::pretrain(&cfg, seed)?.display());
        }
        Command::Finetune { common, seed, checkpoint, epochs, distill_epochs } => {
            let mut cfg = common.resolve()?;
            if let Some(e) = epochs {
                cfg.finetune.epochs = e;
            }
            if let Some(e) = distill_epochs {
                cfg.finetune.distill_epochs = e;
            }
            let r = commands::finetune(&cfg, checkpoint.as_deref(), seed)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::AlRun { common, active, progress } => {
            let mut cfg = common.resolve()?;
            if !active.strategies.is_empty() {
                cfg.active.strategies = active.strategies;
            }
            if !active.seeds.is_empty() {
                cfg.active.seeds = active.seeds;
            }
            if let Some(q) = active.q {
                cfg.active.budget_fraction_per_round = q;
            }
            if let Some(m) = active.max_budget {
                cfg.active.max_budget_fraction = m;
            }
            if let Some(e) = active.epochs_per_round {
                cfg.active.epochs_per_round = e;
            }
            let out = commands::al_run(&cfg, progress)?;
            print!("{}", report::report(&out.dir)?);
        }
        Command::Report { run_dir } => print!("{}", report::report(&run_dir)?),
        Command::ExportEmbeddings { checkpoint, dataset, out } => {
            let n = commands::export_embeddings(&checkpoint, &dataset, &out)?;
            println!("{n} rows written to {}", out.display());
        }
        Command::Serve { common, port, strategy, seed } => {
            let cfg = common.resolve()?;
            serve::serve(&cfg, strategy, seed, port)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            return ExitCode::from(code as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
