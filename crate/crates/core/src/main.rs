use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use trialsim::cli::{self, EmitFormat, RunConfig};
use trialsim::cohort::{calibrate_generator, default_targets, generate_cohort, summarize_cohort};
use trialsim::harness::{oracle_constant_plim, MIN_ORACLE_PARTICIPANTS, MIN_ORACLE_REPS};
use trialsim::{Error, Result};

#[derive(Parser)]
#[command(name = "trialsim", version, about = "Simulate trials with irregular, intervention-dependent outcome assessments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic assessment-schedule cohorts.
    Cohort {
        #[command(subcommand)]
        command: CohortCommand,
    },
    /// Run every scenario x method cell of a config and write the summary table.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1000)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = EmitFormat::Csv)]
        format: EmitFormat,
        /// Cohort file, generated and cached here when missing.
        #[arg(long)]
        cohort: Option<PathBuf>,
    },
    /// Monte Carlo limit of a constant-effect method under each scenario of a config.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: String,
        /// Restrict to one scenario id.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long, default_value_t = MIN_ORACLE_PARTICIPANTS)]
        n_big: usize,
        #[arg(long, default_value_t = MIN_ORACLE_REPS)]
        k_reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        cohort: Option<PathBuf>,
    },
    /// Parse and validate a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum CohortCommand {
    /// Calibrate the schedule generator and write a cohort file.
    Generate {
        #[arg(long, default_value_t = cli::DEFAULT_COHORT_SIZE)]
        size: usize,
        #[arg(long, default_value_t = cli::DEFAULT_COHORT_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Cohort {
            command: CohortCommand::Generate { size, seed, out },
        } => {
            if size == 0 {
                return Err(Error::InvalidArgument("size must be >= 1".into()));
            }
            let report = calibrate_generator(&default_targets(), seed)?;
            if !report.within_tolerance {
                eprintln!("warning: calibration missed a target by more than twice its tolerance");
            }
            let cohort = generate_cohort(&report.params, size, seed)?;
            cohort.save(&out)?;
            eprintln!("{:?}", summarize_cohort(&cohort));
            Ok(())
        }
        Command::Simulate {
            config,
            reps,
            seed,
            threads,
            out,
            format,
            cohort,
        } => {
            let run = RunConfig {
                config_path: config,
                base_seed: seed,
                reps,
                threads,
                output_path: out,
                cohort_path: cohort,
                emit_format: format,
            };
            let summaries = cli::simulate(&run)?;
            match &run.output_path {
                Some(path) => cli::emit_summaries(&summaries, format, path),
                None => std::io::stdout()
                    .write_all(cli::render(&summaries, format).as_bytes())
                    .map_err(|source| Error::Io { path: "<stdout>".into(), source }),
            }
        }
        Command::Oracle {
            config,
            method,
            scenario,
            n_big,
            k_reps,
            seed,
            threads,
            cohort,
        } => {
            let config = cli::parse_config(&config)?;
            let spec = config
                .methods
                .iter()
                .find(|m| m.key == method)
                .ok_or_else(|| Error::InvalidArgument(format!("no method `{method}` in config")))?;
            let scenarios: Vec<_> = config
                .scenarios
                .iter()
                .filter(|s| scenario.as_ref().is_none_or(|id| &s.id == id))
                .collect();
            if scenarios.is_empty() {
                return Err(Error::InvalidArgument("no matching scenario".into()));
            }
            let cohort = cli::load_or_generate_cohort(cohort.as_deref())?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            for s in scenarios {
                let plim = pool.install(|| oracle_constant_plim(s, spec, &cohort, n_big, k_reps, seed))?;
                println!("{} {} {:.4} ± {:.4} (MC SE, {} fits)", s.id, spec.key, plim.value, plim.mc_se, plim.n_used);
            }
            Ok(())
        }
        Command::Validate { config } => {
            let c = cli::parse_config(&config)?;
            println!("ok: {} scenarios x {} methods", c.scenarios.len(), c.methods.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
