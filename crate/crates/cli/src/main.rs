use clap::{Parser, Subcommand, ValueEnum};
use fedsim_cli::{
    cmd_evaluate, cmd_partition, cmd_plot, cmd_table, cmd_train, load_config, partition_table, CliError, Overrides,
    PlotKind,
};
use fedsim_core::data::Split;
use fedsim_core::orchestrator::Method;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated graph bot-detection simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Fedrio,
    Fedavg,
    Fedprox,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Fedrio => Method::Fedrio,
            MethodArg::Fedavg => Method::Fedavg,
            MethodArg::Fedprox => Method::Fedprox,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Curve,
    Heatmap,
    Features,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Uniform aggregation masks, no mask learning.
    #[arg(long)]
    no_masks: bool,
    /// Full global download every round instead of the learned policy.
    #[arg(long)]
    no_rl: bool,
    /// Plain message passing without learned gates.
    #[arg(long)]
    no_adaptive_mp: bool,
}

impl ConfigArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            method: self.method.map(Into::into),
            no_masks: self.no_masks,
            no_rl: self.no_rl,
            no_adaptive_mp: self.no_adaptive_mp,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print and save per-client label counts.
    Partition {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment into a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory. Defaults to $FEDSIM_OUT/<label>-seed<seed>, or runs/ when unset.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a finished run's global model.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Draw figures (SVG plus CSV) from run directories.
    Plot {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Rounds-to-target table over run directories.
    Table {
        #[arg(long = "target", required = true)]
        targets: Vec<f64>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Partition { cfg, out } => {
            let config = load_config(&cfg.config, &cfg.overrides())?;
            let counts = cmd_partition(&config, out.as_deref())?;
            print!("{}", partition_table(&counts));
        }
        Command::Train { cfg, out } => {
            let config = load_config(&cfg.config, &cfg.overrides())?;
            let dir = out.unwrap_or_else(|| {
                let base = std::env::var_os("FEDSIM_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
                base.join(format!("{}-seed{}", fedsim_cli::run_label(&config), config.seed))
            });
            let summary = cmd_train(&config, &dir)?;
            println!("{}", serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.to_string()))?);
            eprintln!("run written to {}", dir.display());
        }
        Command::Evaluate { run, split } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let e = cmd_evaluate(&run, split)?;
            println!("{}", serde_json::to_string(&e).map_err(|e| CliError::Runtime(e.to_string()))?);
        }
        Command::Plot { kind, out, runs } => {
            let kind = match kind {
                KindArg::Curve => PlotKind::Curve,
                KindArg::Heatmap => PlotKind::Heatmap,
                KindArg::Features => PlotKind::Features,
            };
            for f in cmd_plot(&runs, kind, &out)? {
                println!("{}", f.display());
            }
        }
        Command::Table { targets, csv, runs } => {
            print!("{}", cmd_table(&runs, &targets, csv.as_deref().map(Path::new))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
