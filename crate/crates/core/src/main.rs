use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use nodule::error::{Error, Result};
use nodule::io::read_json;
use nodule::pipeline::{self, Profile, RunConfig};

/// Worker count override; applies to every subcommand.
const WORKERS_ENV: &str = "NODULE_WORKERS";

#[derive(Parser)]
#[command(name = "nodule", version, about = "Tactile nodule detection from capsule pressure traces")]
struct Cli {
    /// JSON run configuration; flags given explicitly take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic traces and a manifest.
    Gen {
        /// Nodule sizes in mm, comma separated (0 = none).
        #[arg(long, value_delimiter = ',', required = true)]
        b: Vec<u8>,
        #[arg(long, default_value_t = 20)]
        q: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn one trace CSV into a feature matrix.
    Preprocess {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit per-size templates from a generated corpus.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        q: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        profile: Option<ProfileArg>,
    },
    /// Classify one trace against a template library.
    Detect {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth size, if not listed in the trace's manifest.
        #[arg(long)]
        label: Option<u8>,
    },
    /// Aggregate detection results into a report.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        plots: Option<PathBuf>,
    },
    /// Generate, fit, detect and evaluate in one go.
    Pipeline {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        test_seed: Option<u64>,
        #[arg(long, value_enum)]
        profile: Option<ProfileArg>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

fn load_config(path: Option<&Path>, profile: Option<ProfileArg>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => read_json::<RunConfig>(p).map_err(|e| match e {
            Error::Json(e) => Error::InvalidConfig(format!("{}: {e}", p.display())),
            other => other,
        })?,
        None => RunConfig::new(Profile::Desk, 11, 99),
    };
    if let Some(p) = profile {
        let seed = cfg.fit.master_seed;
        cfg.fit = Profile::from(p).fit_config(seed);
    }
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n = v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidConfig(format!("{WORKERS_ENV}={v} is not a count")))?;
        cfg.workers = Some(n);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let profile = match &cli.command {
        Command::Fit { profile, .. } | Command::Pipeline { profile, .. } => *profile,
        _ => None,
    };
    let mut cfg = load_config(cli.config.as_deref(), profile)?;

    match cli.command {
        Command::Gen { b, q, seed, out } => {
            cfg.validate()?;
            init_pool(&cfg)?;
            pipeline::cmd_gen(&out, &cfg.phantom, &b, q, seed)?;
        }
        Command::Preprocess { trace, out } => {
            cfg.validate()?;
            pipeline::cmd_preprocess(&trace, &out, &cfg.preprocess)?;
        }
        Command::Fit { data, out, n, m, q, seed, .. } => {
            if let Some(n) = n {
                cfg.fit.particles = n;
            }
            if let Some(m) = m {
                cfg.fit.iterations = m;
            }
            if let Some(q) = q {
                cfg.fit.traces_per_size = q;
            }
            if let Some(s) = seed {
                cfg.fit.master_seed = s;
            }
            cfg.validate()?;
            init_pool(&cfg)?;
            pipeline::cmd_fit(&data, &out, &cfg.fit, &cfg.bounds, &cfg.preprocess)?;
        }
        Command::Detect { trace, library, out, label } => {
            pipeline::cmd_detect(&trace, &library, &out, label)?;
        }
        Command::Eval { results, out, csv, plots } => {
            pipeline::cmd_eval(&results, &out, csv.as_deref(), plots.as_deref())?;
        }
        Command::Pipeline { seed, test_seed, out, .. } => {
            if let Some(s) = seed {
                cfg.fit.master_seed = s;
            }
            if let Some(s) = test_seed {
                cfg.test_seed = s;
            }
            cfg.validate()?;
            init_pool(&cfg)?;
            let run = pipeline::cmd_pipeline(&cfg, &out)?;
            let r = &run.report.report;
            for b in 0..=5u8 {
                let fmt = |m: &std::collections::BTreeMap<u8, f64>| {
                    m.get(&b).map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
                };
                eprintln!(
                    "b={b} recall={} precision={} exact={} tol1={}",
                    fmt(&r.per_size_recall),
                    fmt(&r.per_size_precision),
                    fmt(&r.exact_acc),
                    fmt(&r.tol1_acc)
                );
            }
        }
    }
    Ok(())
}

fn init_pool(cfg: &RunConfig) -> Result<()> {
    if let Some(n) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = ErrorReport {
                error: e.family(),
                message: e.to_string(),
                exit_code: e.exit_code(),
            };
            eprintln!("{}", serde_json::to_string(&report).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
