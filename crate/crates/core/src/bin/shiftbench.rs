use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use shiftbench::benchscore::DEFAULT_REFERENCE;
use shiftbench::commands::{
    cmd_compare, cmd_estimate, cmd_generate, cmd_score, cmd_sweep, Overrides, Preset, RunConfig,
};
use shiftbench::estimator::SweepAxis;
use shiftbench::Error;

#[derive(Parser)]
#[command(name = "shiftbench", version, about = "Diversity and correlation shift between two environments")]
struct Cli {
    /// Worker threads across independent runs and grid cells (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Number of runs (pipeline repetitions).
    #[arg(long)]
    runs: Option<usize>,
    /// iid | irm-cmnist | cmnist-rho <a> <b> | cmnist-blue | latent-a
    #[arg(long, num_args = 1..=3, value_name = "NAME [ARGS]")]
    preset: Option<Vec<String>>,
    /// Dataset CSV with header env,label,x0,...
    #[arg(long, conflicts_with = "preset")]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: data.csv plus spec.json.
    Generate(Common),
    /// Estimate diversity and correlation shift: results.json.
    Estimate(Common),
    /// Grid of estimates over (ρ_tr, ρ_te) or (μ_tr, μ_te): sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_axis)]
        axis: Option<SweepAxis>,
        /// Comma-separated grid values in [0, 1].
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Baseline metrics next to the shift estimate: compare.csv.
    Compare(Common),
    /// Ranking scores of an accuracy table (algorithm,dataset,mean,stderr).
    Score {
        #[arg(long)]
        table: PathBuf,
        #[arg(long = "ref", default_value = DEFAULT_REFERENCE)]
        reference: String,
        #[arg(long)]
        json: bool,
    },
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    match s {
        "rho" => Ok(SweepAxis::Rho),
        "mu" => Ok(SweepAxis::Mu),
        _ => Err(format!("expected rho or mu, got {s:?}")),
    }
}

fn config(common: &Common, threads: Option<usize>) -> Result<RunConfig, Error> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let preset = common.preset.as_deref().map(Preset::parse).transpose()?;
    Overrides {
        seed: common.seed,
        threads,
        out: common.out.clone(),
        runs: common.runs,
        preset,
        data: common.data.clone(),
    }
    .apply(base)
}

fn init_threads(n: usize) {
    if n > 0 {
        // only fails if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = config(&c, cli.threads)?;
            let ds = cmd_generate(&cfg)?;
            println!("wrote {} rows to {}", ds.n_rows(), cfg.out.join("data.csv").display());
        }
        Command::Estimate(c) => {
            let cfg = config(&c, cli.threads)?;
            init_threads(cfg.threads);
            let est = cmd_estimate(&cfg)?;
            println!(
                "d_div {:.4} ± {:.4}  d_cor {:.4} ± {:.4}",
                est.mean.d_div, est.stderr.d_div, est.mean.d_cor, est.stderr.d_cor
            );
            for w in &est.warnings {
                eprintln!("warning: {w}");
            }
            if est.over_one_flag {
                eprintln!("warning: some run exceeded 1");
            }
        }
        Command::Sweep { common, axis, values } => {
            let mut cfg = config(&common, cli.threads)?;
            if let Some(a) = axis {
                cfg.sweep.axis = a;
            }
            if let Some(v) = values {
                cfg.sweep.values = v;
            }
            init_threads(cfg.threads);
            let cells = cmd_sweep(&cfg)?;
            println!("wrote {} cells to {}", cells.len(), cfg.out.join("sweep.csv").display());
        }
        Command::Compare(c) => {
            let cfg = config(&c, cli.threads)?;
            init_threads(cfg.threads);
            let rows = cmd_compare(&cfg)?;
            println!("wrote {} rows to {}", rows.len(), cfg.out.join("compare.csv").display());
        }
        Command::Score { table, reference, json } => {
            print!("{}", cmd_score(&table, &reference, json)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
