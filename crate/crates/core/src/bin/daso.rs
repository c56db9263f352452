use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use daso_core::harness::config::RunConfig;
use daso_core::harness::gradcheck::{self, DEFAULT_EPS, TOLERANCE};
use daso_core::harness::output::{self, OUT_ENV};
use daso_core::harness::suite::{self, Arm};
use daso_core::learner::run_training;

#[derive(Parser)]
#[command(name = "daso", version, about = "Distribution-aware pseudo-labeling lab")]
struct Cli {
    /// Default output root for runs and suites.
    #[arg(long, global = true, env = OUT_ENV, default_value = output::DEFAULT_OUT_ROOT)]
    out_root: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train once and write a run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory (default: <out-root>/<config stem>_seed<N>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// The ablation arm matrix over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cartesian sweep over a grid file of `key = [values]`.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the composite loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
    },
    /// Aggregate summary.json files found under the given directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn load(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn finish_suite(root: &Path, arms: Vec<Arm>, jobs: usize) -> Result<ExitCode> {
    let summaries = suite::run_suite(root, arms, jobs)?;
    print!("{}", suite::comparison_table(&summaries));
    println!("wrote {}", root.display());
    let failed = summaries.iter().filter(|s| s.status != "ok").count();
    if failed > 0 {
        eprintln!("{failed} run(s) failed");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { config, seed, out } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = out
                .or_else(|| cfg.out_dir.clone().map(PathBuf::from))
                .unwrap_or_else(|| cli.out_root.join(output::run_dir_name(&stem(&config), &cfg)));
            let result = run_training(&cfg)?;
            output::write_run_dir(&dir, &stem(&config), &result)?;
            println!(
                "balanced_acc_median{} = {:.4}  status = {}  dir = {}",
                cfg.median_k,
                result.summary.balanced_acc_median,
                if result.status.is_ok() { "ok" } else { "failed" },
                dir.display()
            );
            Ok(if result.status.is_ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Cmd::Ablate {
            config,
            seeds,
            jobs,
            out,
        } => {
            if seeds == 0 {
                bail!("--seeds must be positive");
            }
            let cfg = load(&config)?;
            let root = out.unwrap_or_else(|| cli.out_root.join(format!("ablate_{}", stem(&config))));
            let arms = suite::with_seeds(suite::ablation_arms(&cfg), seeds);
            finish_suite(&root, arms, jobs)
        }
        Cmd::Sweep {
            config,
            grid,
            jobs,
            out,
        } => {
            let cfg = load(&config)?;
            let text = std::fs::read_to_string(&grid).with_context(|| format!("reading {}", grid.display()))?;
            let arms = suite::sweep_arms(&cfg, &text)?;
            let root = out.unwrap_or_else(|| cli.out_root.join(format!("sweep_{}", stem(&config))));
            finish_suite(&root, arms, jobs)
        }
        Cmd::Gradcheck { eps } => {
            let r = gradcheck::run_gradcheck(eps)?;
            println!(
                "max relative error = {:.3e} over {} parameters ({:.2} s)",
                r.max_rel_err, r.params, r.secs
            );
            if r.passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradient check failed: error ≥ {TOLERANCE:e}");
                Ok(ExitCode::FAILURE)
            }
        }
        Cmd::Report { dirs } => {
            let summaries = suite::collect_summaries(&dirs)?;
            if summaries.is_empty() {
                bail!("no {} found", output::SUMMARY_FILE);
            }
            print!("{}", suite::comparison_table(&summaries));
            Ok(ExitCode::SUCCESS)
        }
    }
}
