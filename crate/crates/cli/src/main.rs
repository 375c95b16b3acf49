use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cap_core::experiment::{self, Arm, ExpError, Layout, RunConfig, OUTPUT_DIR_ENV};

#[derive(Parser, Debug)]
#[command(name = "cap", version, about = "Audit a sequence model for unauthorized training data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Output root; beats the config and the environment.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Comma-separated seeds replacing the config's list.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset bundle.
    SynthData,
    /// Window, cluster and split a CSV dataset into a bundle.
    Ingest,
    /// Train one target model per seed.
    TrainTarget,
    /// Train one prompt generator per seed against its target.
    TrainPrompter {
        /// Use GPD-guided pruning.
        #[arg(long)]
        optimized: bool,
    },
    /// Audit every seed's trained pair and write reports.
    Audit {
        #[arg(long)]
        optimized: bool,
    },
    /// Mean and 95% interval of report metrics across runs.
    Aggregate {
        /// Report files; defaults to the config's per-seed reports.
        reports: Vec<PathBuf>,
        #[arg(long)]
        optimized: bool,
        /// Output file; defaults to the config's aggregate path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired Opt/No-Opt prompter training with timings and metrics.
    Bench,
}

fn load_config(common: &Common) -> Result<(RunConfig, Layout), ExpError> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| ExpError::Validation("--config is required for this command".into()))?;
    let mut overrides = common.overrides.clone();
    if let Some(seeds) = &common.seeds {
        let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
        overrides.push(format!("seeds=[{}]", list.join(",")));
    }
    let cfg = RunConfig::load(path, &overrides)?;
    let layout = match &common.output_dir {
        Some(dir) => Layout::at(&cfg, dir.clone()),
        None => Layout::new(&cfg),
    };
    log::debug!("output root {} ({OUTPUT_DIR_ENV} honored)", layout.root.display());
    Ok((cfg, layout))
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(cli: Cli) -> Result<(), ExpError> {
    match cli.command {
        Command::SynthData => {
            let (cfg, layout) = load_config(&cli.common)?;
            print_paths(&[experiment::synth_data(&cfg, &layout)?]);
        }
        Command::Ingest => {
            let (cfg, layout) = load_config(&cli.common)?;
            print_paths(&[experiment::ingest(&cfg, &layout)?]);
        }
        Command::TrainTarget => {
            let (cfg, layout) = load_config(&cli.common)?;
            print_paths(&experiment::cmd_train_target(&cfg, &layout)?);
        }
        Command::TrainPrompter { optimized } => {
            let (cfg, layout) = load_config(&cli.common)?;
            print_paths(&experiment::cmd_train_prompter(&cfg, &layout, optimized)?);
        }
        Command::Audit { optimized } => {
            let (cfg, layout) = load_config(&cli.common)?;
            print_paths(&experiment::cmd_audit(&cfg, &layout, optimized)?);
        }
        Command::Aggregate {
            reports,
            optimized,
            out,
        } => {
            let arm = Arm::from_flag(optimized);
            let (reports, out) = if reports.is_empty() {
                let (cfg, layout) = load_config(&cli.common)?;
                let paths = cfg.seeds.iter().map(|&s| layout.report(s, arm)).collect();
                (paths, out.unwrap_or_else(|| layout.aggregate(arm)))
            } else {
                let out = out.ok_or_else(|| {
                    ExpError::Validation("--out is required when report files are given".into())
                })?;
                (reports, out)
            };
            let stats = experiment::cmd_aggregate(&reports, &out)?;
            print!("{}", stats.table());
            println!("{}", out.display());
        }
        Command::Bench => {
            let (cfg, layout) = load_config(&cli.common)?;
            let report = experiment::cmd_bench(&cfg, &layout)?;
            for r in &report.runs {
                println!(
                    "seed {:>3}  no-opt {:>8.2}s  opt {:>8.2}s  ratio {:.3}  AUC-Gain {:.3} / {:.3}",
                    r.seed,
                    r.no_opt.total_seconds,
                    r.opt.total_seconds,
                    r.time_ratio,
                    r.no_opt.auc_gain,
                    r.opt.auc_gain
                );
            }
            println!("overall ratio {:.3}", report.overall_time_ratio);
            println!("{}", layout.bench().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
