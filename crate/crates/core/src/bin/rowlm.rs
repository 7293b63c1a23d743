use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rowlm::app::{cmd_account, cmd_evaluate, cmd_generate, cmd_prepare, cmd_train, AccountQuery};
use rowlm::config::RunConfig;
use rowlm::model::Guiding;
use rowlm::sentence::{OrderPolicy, TokenizerMode};
use rowlm::{Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "rowlm", version, about = "Private synthetic tables from a row-sentence language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the discretizer and split the table
    Prepare(RunArgs),
    /// Train with DP-SGD, writing checkpoints and telemetry
    Train(RunArgs),
    /// Sample a synthetic table from a checkpoint
    Generate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Held-out likelihood and marginal distances
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Compare this CSV instead of generating rows in memory
        #[arg(long)]
        synthetic: Option<PathBuf>,
    },
    /// Privacy accounting without training
    Account(AccountArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, value_parser = ["fixed", "random"])]
    order: Option<String>,
    #[arg(long, value_parser = ["level", "semantic"])]
    tokenizer: Option<String>,
    #[arg(long, value_parser = ["trie", "none"])]
    guiding: Option<String>,
    #[arg(long)]
    non_private: bool,
    #[arg(long)]
    workers: Option<usize>,
    /// Continue from the checkpoint under --out
    #[arg(long)]
    resume: bool,
    /// Stop training after this many updates
    #[arg(long)]
    stop_at: Option<u64>,
}

#[derive(Args)]
struct AccountArgs {
    /// Poisson sampling rate
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    steps: u64,
    #[arg(long, default_value_t = 1e-6)]
    delta: f64,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.data {
            cfg.data = Some(v.clone());
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        let p = &mut cfg.privacy;
        p.epsilon = self.epsilon.unwrap_or(p.epsilon);
        p.delta = self.delta.unwrap_or(p.delta);
        p.clip = self.clip.unwrap_or(p.clip);
        p.steps = self.steps.unwrap_or(p.steps);
        p.batch = self.batch.or(p.batch);
        p.non_private |= self.non_private;
        match self.order.as_deref() {
            Some("random") => cfg.order = OrderPolicy::Random,
            Some(_) => cfg.order = OrderPolicy::Fixed,
            None => {}
        }
        match self.tokenizer.as_deref() {
            Some("semantic") => cfg.tokenizer = TokenizerMode::Semantic,
            Some(_) => cfg.tokenizer = TokenizerMode::Level,
            None => {}
        }
        match self.guiding.as_deref() {
            Some("none") => cfg.guiding = Guiding::None,
            Some(_) => cfg.guiding = Guiding::Trie,
            None => {}
        }
        cfg.workers = self.workers.unwrap_or(cfg.workers);
        cfg.resume |= self.resume;
        cfg.stop_at = self.stop_at.or(cfg.stop_at);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn emit(text: &str) {
    // a closed pipe (e.g. `| head`) is not an error worth reporting
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    emit(&serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(args) => print(&cmd_prepare(&args.resolve()?)?),
        Command::Train(args) => print(&cmd_train(&args.resolve()?)?),
        Command::Generate {
            run,
            checkpoint,
            rows,
            temperature,
        } => {
            let mut cfg = run.resolve()?;
            cfg.generation.temperature = temperature.unwrap_or(cfg.generation.temperature);
            cfg.validate()?;
            print(&cmd_generate(&cfg, checkpoint.as_deref(), rows)?)
        }
        Command::Evaluate {
            run,
            checkpoint,
            synthetic,
        } => {
            let mut cfg = run.resolve()?;
            cfg.eval.synthetic = synthetic.or(cfg.eval.synthetic);
            let report = cmd_evaluate(&cfg, checkpoint.as_deref())?;
            emit(&report.to_json()?);
            Ok(())
        }
        Command::Account(a) => print(&cmd_account(&AccountQuery {
            sample_rate: a.q,
            rows: a.rows,
            batch: a.batch,
            sigma: a.sigma,
            epsilon: a.epsilon,
            steps: a.steps,
            delta: a.delta,
        })?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
