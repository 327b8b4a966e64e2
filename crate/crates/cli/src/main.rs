use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use decopt::harness::{run_experiment, sweep, write_outputs, ExperimentConfig, ALGORITHMS};
use decopt::Error;

#[derive(Parser)]
#[command(name = "decopt", version, about = "Run decentralized optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel sweep members (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Suppress the progress report on stdout.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write trace.csv and summary.json.
    Run,
    /// Run the [sweep] table of a config and write sweep.json.
    Sweep,
    /// Print the algorithm identifiers accepted in [algorithm].
    ListAlgorithms,
    /// Parse and check a config without running it.
    ValidateConfig,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } => EXIT_DIVERGED,
        _ => EXIT_CONFIG,
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let path = cli.config.as_ref().ok_or_else(|| Error::config("--config", "a config path is required"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.out.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("out"))
}

fn real_main(cli: &Cli) -> Result<u8, Error> {
    match cli.command {
        Command::ListAlgorithms => {
            for (id, about) in ALGORITHMS {
                println!("{id:<16}{about}");
            }
            Ok(0)
        }
        Command::ValidateConfig => {
            let cfg = load(cli)?;
            if !cli.quiet {
                println!("ok: {} on {} nodes", cfg.algorithm.id(), cfg.problem.m);
            }
            Ok(0)
        }
        Command::Run => {
            let cfg = load(cli)?;
            let outcome = run_experiment(&cfg)?;
            let dir = out_dir(cli, &cfg);
            write_outputs(&outcome, &dir)?;
            if !cli.quiet {
                let s = &outcome.summary;
                println!(
                    "{}: {} iterations, {} rounds, {} gradient calls, {} conjugate calls -> {}",
                    s.algorithm,
                    s.iterations,
                    s.comm_rounds,
                    s.grad_calls,
                    s.conj_calls,
                    dir.display()
                );
            }
            Ok(0)
        }
        Command::Sweep => {
            let cfg = load(cli)?;
            let report = sweep(&cfg, cli.workers)?;
            let dir = out_dir(cli, &cfg);
            std::fs::create_dir_all(&dir)?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Parse(e.to_string()))?;
            std::fs::write(dir.join("sweep.json"), json + "\n")?;
            if !cli.quiet {
                for (k, v) in &report.slopes {
                    println!("slope {k:<14}{v:.3}");
                }
                if let Some(pass) = report.pass {
                    println!("{} (theory {:?}, tolerance {})", if pass { "PASS" } else { "FAIL" }, report.theory_slope, report.tolerance);
                }
            }
            for f in &report.failures {
                eprintln!("member {} failed: {}", f.value, f.error);
            }
            Ok(if report.is_partial() { EXIT_PARTIAL } else { 0 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
