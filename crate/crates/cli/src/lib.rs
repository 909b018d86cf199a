//! Config-driven pipeline around the `mimo-fm` library: data generation,
//! both training phases, deployment, evaluation and FLOP accounting.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "mimo-fm",
    version,
    about = "Multi-environment precoding foundation model pipeline"
)]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the train, adapt and eval seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Dotted-key override, e.g. `--set train.epochs=5` or
    /// `--set channel.0.path_loss_db=150`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Suppress progress output on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one channel file per configured environment.
    GenData,
    /// Site-aware sum-rate pre-training.
    Pretrain,
    /// Multi-objective rate/energy training (needs pretrain).
    Train,
    /// Zero-shot, few-shot and full heads for the deployment sites (needs train).
    Adapt,
    /// Max-sum-rate and cross-site evaluation (needs train, and adapt when deployment sites exist).
    Eval,
    /// Rate/energy trade-off sweep (needs train).
    Sweep,
    /// Closed-form FLOP counts of ZF, WMMSE and the model.
    Flops {
        #[arg(long)]
        n_users: Option<usize>,
        #[arg(long)]
        n_tx: Option<usize>,
        /// WMMSE iterations.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Every stage in order.
    Run,
}

impl Cli {
    fn load(&self) -> Result<RunConfig, CliError> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| CliError::Config("this command needs --config <FILE>".into()))?;
        RunConfig::load(path, &self.overrides, self.seed)
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let quiet = cli.quiet;
    match &cli.command {
        Command::Flops {
            n_users,
            n_tx,
            iterations,
        } => {
            let cfg = match &cli.config {
                Some(_) => Some(cli.load()?),
                None => None,
            };
            let sys = cfg.as_ref().map(|c| c.system.clone()).unwrap_or_default();
            let iters = iterations
                .or(cfg.as_ref().map(|c| c.eval.wmmse_iterations))
                .unwrap_or(16);
            let (out, _) = stages::flops(
                cfg.as_ref(),
                n_users.unwrap_or(sys.n_users),
                n_tx.unwrap_or(sys.n_tx),
                iters,
            )?;
            for r in &out.reports {
                println!("{r}");
            }
            println!("wmmse/proposed {:.2}", out.wmmse_over_proposed);
            if !out.audit.is_empty() {
                let total: f64 = out.audit.iter().map(|l| l.flops).sum();
                println!("forward-pass audit of the configured model: {total:.0} FLOPs");
                for l in &out.audit {
                    println!("  {:<18}{:>14.0}", l.layer, l.flops);
                }
            }
            Ok(())
        }
        command => {
            let cfg = cli.load()?;
            if !quiet {
                eprintln!("config {}", &cfg.hash()[..12]);
            }
            match command {
                Command::GenData => stages::gen_data(&cfg, quiet).map(drop),
                Command::Pretrain => stages::pretrain(&cfg, quiet).map(drop),
                Command::Train => stages::train(&cfg, quiet).map(drop),
                Command::Adapt => stages::adapt(&cfg, quiet).map(drop),
                Command::Eval => stages::eval(&cfg, quiet).map(drop),
                Command::Sweep => stages::sweep(&cfg, quiet).map(drop),
                Command::Run => {
                    stages::gen_data(&cfg, quiet)?;
                    stages::pretrain(&cfg, quiet)?;
                    stages::train(&cfg, quiet)?;
                    stages::adapt(&cfg, quiet)?;
                    stages::eval(&cfg, quiet)?;
                    stages::sweep(&cfg, quiet)?;
                    stages::flops(
                        Some(&cfg),
                        cfg.system.n_users,
                        cfg.system.n_tx,
                        cfg.eval.wmmse_iterations,
                    )?;
                    Ok(())
                }
                Command::Flops { .. } => unreachable!("handled above"),
            }
        }
    }
}
