use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use invtransfer_core::io::{
    build_report, default_output_root, find_run_dirs, gen_source, run_experiment, write_report, ExperimentConfig,
    RunOverrides, SourceGenConfig, SourceLevel,
};
use invtransfer_core::metrics::REFERENCE_SIZE;
use invtransfer_core::optimizer::Variant;
use invtransfer_core::problems::{Family, MdtlzSpec};

#[derive(Parser)]
#[command(
    name = "invtransfer",
    version,
    about = "Inverse transfer multiobjective optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a source problem and save its nondominated set as an inverse dataset.
    GenSource(GenSourceArgs),
    /// Run every seed of an experiment config.
    Run(RunArgs),
    /// Aggregate run directories into comparison tables and a convergence trace.
    Report(ReportArgs),
    /// Serve finished runs over HTTP.
    Serve(ServeArgs),
}

#[derive(Args)]
struct GenSourceArgs {
    /// JSON file with `spec`, `pop_size`, `generations`, `keep` and `seed`;
    /// other flags are ignored when given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Correlation preset for the source shift parameters.
    #[arg(long, default_value = "HS")]
    level: SourceLevel,
    #[arg(long, default_value = "DTLZ2")]
    family: Family,
    #[arg(long)]
    inverted: bool,
    /// Overrides the preset's delta1.
    #[arg(long)]
    delta1: Option<f64>,
    /// Overrides the preset's delta2.
    #[arg(long)]
    delta2: Option<f64>,
    #[arg(long, default_value_t = 6)]
    d: usize,
    #[arg(long, default_value_t = 3)]
    m: usize,
    #[arg(long, default_value_t = 100)]
    pop_size: usize,
    #[arg(long, default_value_t = 500)]
    generations: usize,
    #[arg(long, default_value_t = 100)]
    keep: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Number of seeds (overrides `n_seeds`).
    #[arg(long)]
    seeds: Option<usize>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, or roots searched for run directories.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// Where to write the tables; defaults to the first directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reference-front size used when metrics must be recomputed.
    #[arg(long, default_value_t = REFERENCE_SIZE)]
    reference_size: usize,
}

#[derive(Args)]
struct ServeArgs {
    /// Directory searched for runs; defaults to `$INVTRANSFER_OUTPUT_ROOT`, else `runs`.
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
}

fn cmd_gen_source(a: GenSourceArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => {
            let (d1, d2) = a.level.deltas();
            SourceGenConfig {
                spec: MdtlzSpec::new(
                    a.family,
                    a.inverted,
                    a.delta1.unwrap_or(d1),
                    a.delta2.unwrap_or(d2),
                    a.d,
                    a.m,
                ),
                pop_size: a.pop_size,
                generations: a.generations,
                keep: a.keep,
                seed: a.seed,
            }
        }
    };
    let ds = gen_source(&cfg, &a.out)?;
    println!("wrote {} rows for {} to {}", ds.len(), cfg.spec.id(), a.out.display());
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    RunOverrides {
        n_seeds: a.seeds,
        output_dir: a.out,
        variant: a.variant,
        budget: a.budget,
    }
    .apply(&mut cfg);
    let outcome = run_experiment(&cfg)?;
    for dir in &outcome.run_dirs {
        println!("{}", dir.display());
    }
    if let Some(rep) = &outcome.report {
        print!("{}", rep.to_csv());
    }
    for (seed, msg) in &outcome.failures {
        eprintln!("seed {seed} failed: {msg}");
    }
    Ok(outcome.failures.is_empty())
}

fn expand(dirs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for d in dirs {
        if !d.is_dir() {
            bail!("{} is not a directory", d.display());
        }
        out.extend(find_run_dirs(d)?);
    }
    out.sort();
    out.dedup();
    Ok(out)
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let dirs = expand(&a.dirs)?;
    if dirs.is_empty() {
        bail!("no run directories found");
    }
    let report = build_report(&dirs, a.reference_size)?;
    let out = a.out.unwrap_or_else(|| a.dirs[0].clone());
    write_report(&report, &out)?;
    print!("{}", report.table_csv);
    println!("wrote {}", Path::new(&out).display());
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let root = a.root.unwrap_or_else(default_output_root);
    let addr = SocketAddr::new(a.host, a.port);
    println!("serving {} on http://{addr}", root.display());
    tokio::runtime::Runtime::new()?
        .block_on(invtransfer_explorer::serve(root, addr))
        .context("server failed")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSource(a) => cmd_gen_source(a).map(|_| true),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a).map(|_| true),
        Command::Serve(a) => cmd_serve(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
