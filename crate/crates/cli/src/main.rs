mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::{ExperimentConfig, Method, ModeChoice};

#[derive(Parser)]
#[command(name = "secfuse", version, about = "Privacy-preserving multi-party state estimation experiments")]
struct Cli {
    /// Worker threads for Monte-Carlo runs and encryption (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Plaintext,
    EncInproc,
    EncSocket,
}

impl From<ModeArg> for ModeChoice {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Plaintext => ModeChoice::Plaintext,
            ModeArg::EncInproc => ModeChoice::EncInproc,
            ModeArg::EncSocket => ModeChoice::EncSocket,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Norm,
    AdmmStabilize,
    AdmmMmse,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Norm => Method::Norm,
            MethodArg::AdmmStabilize => Method::Stabilize,
            MethodArg::AdmmMmse => Method::Mmse,
        }
    }
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: the config's `output`, else `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Private key file for the encrypted modes; a fresh key is generated otherwise.
    #[arg(long)]
    keys: Option<PathBuf>,
    /// Allow key sizes below 512 bits.
    #[arg(long)]
    insecure_small_keys: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Design estimator gains; exits 1 if the design is not accepted.
    Design {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
    /// Run the filtering protocol and the covariance evaluation.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        runs: Option<usize>,
        /// Gain file (default: the configured method's file in the output directory).
        #[arg(long)]
        gains: Option<PathBuf>,
        /// Also run plaintext and encrypted modes on the same seed and record their difference.
        #[arg(long)]
        compare_modes: bool,
    },
    /// Summarize design and simulation outputs.
    Analyze {
        /// Output directories or individual files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Directory for summary.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Expected values with tolerance bands; exits 1 on any miss.
        #[arg(long)]
        golden: Option<PathBuf>,
    },
    /// Generate a keypair.
    Keygen {
        #[arg(long, default_value_t = secfuse::paillier::DEFAULT_KEY_BITS)]
        bits: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        insecure_small_keys: bool,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), ExitCode> {
    let mut cfg = match ExperimentConfig::load(&common.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return Err(ExitCode::from(2));
        }
    };
    if let Some(seed) = common.seed {
        cfg.sim.seed = seed;
    }
    if let Some(mode) = common.mode {
        cfg.mode = mode.into();
    }
    let out = common.out.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Design { common, method } => {
            let (cfg, out) = match load(&common) {
                Ok(v) => v,
                Err(code) => return Ok(code),
            };
            let method = method.map(Method::from).unwrap_or(cfg.method);
            let keys = commands::KeyOptions { keys: common.keys.as_deref(), insecure: common.insecure_small_keys };
            commands::design(&cfg, method, cfg.mode, &out, &keys)
        }
        Command::Simulate { common, runs, gains, compare_modes } => {
            let (mut cfg, out) = match load(&common) {
                Ok(v) => v,
                Err(code) => return Ok(code),
            };
            if let Some(runs) = runs {
                if runs == 0 {
                    eprintln!("error: --runs must be at least 1");
                    return Ok(ExitCode::from(2));
                }
                cfg.runs = runs;
            }
            let opts = commands::SimulateOptions {
                gains: gains.as_deref(),
                mode: cfg.mode,
                compare_modes,
                keys: commands::KeyOptions { keys: common.keys.as_deref(), insecure: common.insecure_small_keys },
            };
            commands::simulate(&cfg, &out, &opts)
        }
        Command::Analyze { inputs, out, golden } => commands::analyze_command(&inputs, out.as_deref(), golden.as_deref()),
        Command::Keygen { bits, out, insecure_small_keys } => commands::keygen(bits, Path::new(&out), insecure_small_keys),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
