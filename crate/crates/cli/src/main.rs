//! `rjepa` command-line entry point.
//!
//! Exit codes: 0 pass, 1 I/O or internal failure, 2 usage or configuration
//! error, 3 numeric divergence, 4 tolerance failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{Cell, CliConfig, Gates, Generator};

#[derive(Debug, Parser)]
#[command(name = "rjepa", version, about = "Recurrent JEPA experiments, gradient checks and reports")]
struct Cli {
    /// TOML configuration file; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default 1 for bit-identical output)
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,
    /// Output directory for reports
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compare RFP, BPTT, full RTRL and finite differences
    Gradcheck(GradcheckArgs),
    /// Train the recurrent JEPA and write metrics plus a checkpoint
    Train(TrainArgs),
    /// Train the linear testbed and trace the balance residual
    Balance(BalanceArgs),
    /// Paired collapse experiment and feature spectrum
    Collapse(CollapseArgs),
    /// Fourth-moment tensors: closed form, Gaussian exact and Monte Carlo
    Moments(MomentsArgs),
    /// Per-step time and state memory across cell sizes
    Bench(BenchArgs),
    /// Generate a sequence dataset file
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=64))]
    n: Option<u64>,
    #[arg(long = "T", value_parser = clap::value_parser!(u64).range(2..))]
    t: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    instances: Option<u64>,
    #[arg(long, value_enum)]
    cell: Option<Cell>,
    #[arg(long, value_enum)]
    gates: Option<Gates>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Bptt,
    Rfp,
}

impl From<ModeArg> for rjepa::TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Bptt => rjepa::TrainMode::Bptt,
            ModeArg::Rfp => rjepa::TrainMode::Rfp,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
}

#[derive(Debug, Args)]
struct BalanceArgs {
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct CollapseArgs {
    /// Run the control without stop-gradient (expected to collapse)
    #[arg(long)]
    no_stop_gradient: bool,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct MomentsArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=4))]
    n: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    sigma_scale: Option<f64>,
    /// Monte Carlo samples; 0 skips the Monte Carlo comparison
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BenchModeArg {
    Rfp,
    FullRtrl,
    Bptt,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Comma-separated cell sizes
    #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(u64).range(1..))]
    sizes: Option<Vec<u64>>,
    #[arg(long = "T", value_parser = clap::value_parser!(u64).range(1..))]
    t: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<BenchModeArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GeneratorArg {
    Latent,
    Scanpath,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    generator: Option<GeneratorArg>,
    /// Total sequence count (train + test)
    #[arg(long)]
    count: Option<usize>,
    #[arg(long = "T", value_parser = clap::value_parser!(u64).range(2..))]
    t: Option<u64>,
    /// Dataset file to write (default `<out>/sequences.rjpa`)
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Applies command-line overrides on top of the file configuration.
fn resolve(cli: &Cli) -> anyhow::Result<CliConfig> {
    let mut cfg = config::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t as usize;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    match &cli.command {
        Command::Gradcheck(a) => {
            let g = &mut cfg.gradcheck;
            if let Some(v) = a.n {
                g.n = v as usize;
            }
            if let Some(v) = a.t {
                g.t = v as usize;
            }
            if let Some(v) = a.instances {
                g.instances = v as usize;
            }
            if let Some(v) = a.cell {
                g.cell = v;
            }
            if let Some(v) = a.gates {
                g.gates = v;
            }
        }
        Command::Train(a) => {
            if let Some(m) = a.mode {
                cfg.train.mode = m.into();
            }
            if let Some(v) = a.epochs {
                cfg.train.epochs = v as usize;
            }
            if let Some(v) = a.lr {
                cfg.train.lr = v;
            }
            if let Some(v) = a.weight_decay {
                cfg.train.weight_decay = v;
            }
        }
        Command::Balance(a) => {
            if let Some(v) = a.eta {
                cfg.testbed.eta = v;
            }
            if let Some(v) = a.iterations {
                cfg.balance.iterations = v;
            }
            if let Some(v) = a.lr {
                cfg.balance.lr = v;
            }
        }
        Command::Collapse(a) => {
            if a.no_stop_gradient {
                cfg.collapse.stop_gradient = false;
            }
            if let Some(m) = a.mode {
                cfg.collapse.mode = m.into();
            }
            if let Some(v) = a.epochs {
                cfg.collapse.epochs = v as usize;
            }
            if let Some(v) = a.lr {
                cfg.collapse.lr = v;
            }
        }
        Command::Moments(a) => {
            let m = &mut cfg.moments;
            if let Some(v) = a.n {
                m.n = v as usize;
            }
            if let Some(v) = a.tau {
                m.tau = v;
            }
            if let Some(v) = a.sigma_scale {
                m.sigma_scale = v;
            }
            if let Some(v) = a.samples {
                m.samples = v;
            }
            if let Some(v) = a.burn_in {
                m.burn_in = v;
            }
        }
        Command::Bench(a) => {
            if let Some(v) = &a.sizes {
                cfg.bench.sizes = v.iter().map(|&s| s as usize).collect();
            }
            if let Some(v) = a.t {
                cfg.bench.t = v as usize;
            }
            if let Some(m) = a.mode {
                cfg.bench.mode = match m {
                    BenchModeArg::Rfp => rjepa::analysis::BenchMode::Rfp,
                    BenchModeArg::FullRtrl => rjepa::analysis::BenchMode::FullRtrl,
                    BenchModeArg::Bptt => rjepa::analysis::BenchMode::Bptt,
                };
            }
        }
        Command::GenData(a) => {
            if let Some(g) = a.generator {
                cfg.data.generator = match g {
                    GeneratorArg::Latent => Generator::Latent,
                    GeneratorArg::Scanpath => Generator::Scanpath,
                };
            }
            if let Some(c) = a.count {
                cfg.data.train = c.min(cfg.data.train);
                cfg.data.test = c - cfg.data.train;
            }
            if let Some(v) = a.t {
                cfg.data.t = v as usize;
            }
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build_global()
    {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(1);
    }
    println!("# resolved configuration\n{}", config::render(&cfg));
    let result = match &cli.command {
        Command::Gradcheck(_) => commands::gradcheck(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Balance(_) => commands::balance(&cfg),
        Command::Collapse(_) => commands::collapse(&cfg),
        Command::Moments(_) => commands::moments(&cfg),
        Command::Bench(_) => commands::bench(&cfg),
        Command::GenData(a) => commands::gen_data(&cfg, a.output.as_deref()),
    };
    match result {
        Ok(commands::Outcome::Pass) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Tolerance(why)) => {
            eprintln!("tolerance failure: {why}");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
