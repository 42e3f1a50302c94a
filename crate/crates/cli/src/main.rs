use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use peerslam_cli::artifacts::{report, run_scenario, sweep};
use peerslam_cli::config::{load_config, SweepParameter};
use peerslam_cli::solve::solve;

#[derive(Parser)]
#[command(
    name = "peerslam",
    version,
    about = "Multi-robot pose-graph SLAM experiments: simulate scenarios, sweep parameters, solve g2o graphs, and summarize results"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario config end to end and write its output tree.
    Simulate {
        /// Scenario TOML file.
        #[arg(long)]
        config: PathBuf,
        /// Base seed; per-run seeds derive from it. Defaults to the world
        /// seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-run a scenario once per value of one parameter, paired by seed.
    Sweep {
        /// Scenario TOML file.
        #[arg(long)]
        config: PathBuf,
        /// One of: pcm_threshold, descriptor_match_threshold,
        /// min_correspondences.
        #[arg(long)]
        param: String,
        /// Comma-separated list of values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Base seed shared by every value (paired runs).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Optimize g2o pose graphs directly, with optional closure gating.
    Solve {
        /// Input g2o files; multi-robot graphs may span several files.
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        /// Consistency likelihood threshold; omit to accept all closures.
        #[arg(long)]
        pcm_threshold: Option<f64>,
        /// Output g2o path for the optimized graph.
        #[arg(long, default_value = "solved.g2o")]
        output: PathBuf,
    },
    /// Summarize a finished scenario output directory.
    Report {
        /// Directory that run_scenario wrote.
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> peerslam_cli::Result<()> {
    match cli.command {
        Command::Simulate { config, seed } => {
            let scenario = load_config(&config)?;
            let base_seed = seed.unwrap_or(scenario.world.seed);
            let outcome = run_scenario(&scenario, base_seed)?;
            println!(
                "{} of {} runs succeeded; output in {}",
                outcome.reports.len(),
                scenario.runs,
                outcome.output_dir.display()
            );
            for (run, _, error) in &outcome.failures {
                eprintln!("run {run} failed: {error}");
            }
            print!("{}", report(&outcome.output_dir)?);
            Ok(())
        }
        Command::Sweep {
            config,
            param,
            values,
            seed,
        } => {
            let scenario = load_config(&config)?;
            let parameter = SweepParameter::parse(&param)?;
            let base_seed = seed.unwrap_or(scenario.world.seed);
            let points = sweep(&scenario, parameter, &values, base_seed)?;
            println!(
                "swept {} over {} values; output in {}",
                parameter.name(),
                points.len(),
                scenario.output_dir.display()
            );
            for point in &points {
                let ate = point
                    .aggregate
                    .ate_m_mean
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| "n/a".into());
                println!(
                    "  {} = {}: mean translation error {} m over {} runs",
                    parameter.name(),
                    point.value,
                    ate,
                    point.aggregate.runs_succeeded
                );
            }
            Ok(())
        }
        Command::Solve {
            input,
            pcm_threshold,
            output,
        } => {
            let summary = solve(&input, pcm_threshold, &output)?;
            println!(
                "robots: {:?}; closures: {} of {} accepted; objective {:.6}; separator bytes {}",
                summary.robots,
                summary.accepted_closures,
                summary.candidate_closures,
                summary.objective,
                summary.separator_bytes
            );
            println!("optimized graph written to {}", output.display());
            Ok(())
        }
        Command::Report { dir } => {
            print!("{}", report(&dir)?);
            Ok(())
        }
    }
}
