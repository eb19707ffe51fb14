//! `treesmooth`: run smoothing benchmarks from presets or config files.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use treesmooth::experiment::{find_preset, list_presets, run_to_dir, ExperimentConfig, RunRequest};
use treesmooth::Error;

#[derive(Parser)]
#[command(
    name = "treesmooth",
    version,
    about = "Tree-based particle smoothing benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the replications of one experiment and write metrics.csv.
    Run(RunArgs),
    /// Print the named presets with their sample sizes.
    ListPresets,
}

#[derive(Args)]
struct RunArgs {
    /// key = value config file, applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset used as the base configuration.
    #[arg(long)]
    preset: Option<String>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, env = "TREESMOOTH_THREADS")]
    threads: Option<usize>,
    /// Write the auxiliary tree layout to tree.txt.
    #[arg(long)]
    dump_tree: bool,
    /// Write oracle/leaf CDFs at index T to cdf_tT.tsv (nonlinear model).
    #[arg(long, value_name = "T")]
    dump_cdf: Option<usize>,
    /// Write the first replication's filter grid at index T to grid_tT.tsv.
    #[arg(long, value_name = "T")]
    dump_grid: Option<usize>,
    /// Write reference smoothing means and variances to oracle.tsv.
    #[arg(long)]
    dump_oracle: bool,
    /// Write per-node diagnostics of the first replication to diagnostics.csv.
    #[arg(long)]
    diagnostics: bool,
}

fn load_config(args: &RunArgs) -> treesmooth::Result<ExperimentConfig> {
    if args.config.is_none() && args.preset.is_none() {
        return Err(Error::Config(
            "pass --config FILE and/or --preset NAME".into(),
        ));
    }
    let mut config = match &args.preset {
        Some(name) => find_preset(name)?,
        None => ExperimentConfig::default(),
    };
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        config.apply_text(&text)?;
    }
    for item in &args.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
        config.set(key.trim(), value.trim())?;
    }
    config.validate()?;
    Ok(config)
}

fn run(args: RunArgs) -> treesmooth::Result<()> {
    let config = load_config(&args)?;
    if let Some(threads) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure {threads} threads: {e}")))?;
    }
    let request = RunRequest {
        diagnostics: args.diagnostics,
        dump_tree: args.dump_tree,
        dump_cdf: args.dump_cdf,
        dump_grid: args.dump_grid,
        dump_oracle: args.dump_oracle,
    };
    log::info!(
        "running {} x{} (N={})",
        config.label(),
        config.replications,
        config.particles
    );
    let (report, artifacts) = run_to_dir(&config, &args.out, &request)?;
    let ms: f64 = report.rows.iter().map(|r| r.runtime_ms).sum::<f64>() / report.rows.len() as f64;
    match report.mean_msev() {
        Some(msev) => println!(
            "{}: mean MSEm {:.6}  mean MSEv {:.6}  mean KS {:.3}  mean runtime {:.0} ms",
            config.label(),
            report.mean_msem(),
            msev,
            report.mean_ks(),
            ms
        ),
        None => println!(
            "{}: mean MSEm {:.6}  mean KS {:.3}  mean runtime {:.0} ms",
            config.label(),
            report.mean_msem(),
            report.mean_ks(),
            ms
        ),
    }
    let extra = [
        &artifacts.diagnostics_csv,
        &artifacts.tree_txt,
        &artifacts.cdf_tsv,
        &artifacts.grid_tsv,
        &artifacts.oracle_tsv,
    ];
    println!("wrote {}", artifacts.metrics_csv.display());
    for path in extra.into_iter().flatten() {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::ListPresets => {
            print!("{}", list_presets());
            Ok(())
        }
        Command::Run(args) => run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else if e.is_degenerate() {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
