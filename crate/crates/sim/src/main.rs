use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rcshp::config::{ExperimentConfig, Profile, Scheme, Seeds, SweepAxis};
use rcshp::gradcheck::{run_gradcheck, ABSOLUTE_TOLERANCE, RELATIVE_TOLERANCE};
use rcshp::harness::{convergence_trace, run_experiment};
use rcshp::output::{emit_results, write_trace_csv, write_trace_file};
use rcshp::{Result, SimError};

#[derive(Parser)]
#[command(
    name = "rcshp",
    version,
    about = "Randomized channel-sparsifying hybrid precoding simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep and write results.csv, results.json and traces/ under --out.
    Run {
        /// TOML file laid over the profile.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Profile::Desk)]
        profile: Profile,
        /// Only this scheme: rcshp, rzf, perfect or duality.
        #[arg(long)]
        scheme: Option<Scheme>,
        #[arg(long, value_enum)]
        sweep: Option<SweepAxis>,
        /// Sets the statistics, optimizer and evaluation seeds to N, N+1, N+2.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic rate Jacobians with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 64)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Optimize once at the base point and write the trace CSV.
    Convergence {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Profile::Desk)]
        profile: Profile,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Trace file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the fully expanded configuration of a profile.
    ReferenceConfig {
        #[arg(long, value_enum, default_value_t = Profile::Desk)]
        profile: Profile,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(config: Option<&PathBuf>, profile: Profile, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::load(config.map(PathBuf::as_path), profile)?;
    if let Some(seed) = seed {
        c.seeds = Seeds::from_base(seed);
    }
    Ok(c)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            config,
            out,
            profile,
            scheme,
            sweep,
            seed,
        } => {
            let mut c = load(config.as_ref(), profile, seed)?;
            if let Some(axis) = sweep {
                c.set_sweep_axis(axis);
            }
            if let Some(s) = scheme {
                c.set_scheme(s);
            }
            c.validate()?;
            let start = Instant::now();
            let output = run_experiment(&c)?;
            let files = emit_results(&out, &c, &output, start.elapsed().as_secs_f64())?;
            let failed = output.records.iter().filter(|r| r.error.is_some()).count();
            for r in output.records.iter().filter_map(|r| r.error.as_ref().map(|e| (r, e))) {
                eprintln!(
                    "{} = {} ({}): {}",
                    r.0.sweep_axis.as_str(),
                    r.0.sweep_value,
                    r.0.scheme,
                    r.1
                );
            }
            eprintln!(
                "{} records ({failed} failed), config {} -> {}",
                output.records.len(),
                &output.config_hash[..12],
                files.csv.display()
            );
            Ok(failed == 0)
        }
        Command::Gradcheck { instances, seed } => {
            let report = run_gradcheck(instances, seed)?;
            for c in &report.cases {
                println!(
                    "M={} S={} K={} Tp={} {:?} seed={:#018x}: rel {:.2e} abs {:.2e} {}",
                    c.antennas,
                    c.rf_chains,
                    c.users,
                    c.pilots,
                    c.csi,
                    c.seed,
                    c.error.max_relative,
                    c.error.max_absolute_small,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            println!(
                "{} instances, worst relative {:.2e} (tol {RELATIVE_TOLERANCE:.0e}), worst absolute {:.2e} (tol {ABSOLUTE_TOLERANCE:.0e}): {}",
                report.cases.len(),
                report.worst_relative(),
                report.worst_absolute(),
                if report.passed() { "PASS" } else { "FAIL" }
            );
            Ok(report.passed())
        }
        Command::Convergence {
            config,
            profile,
            iterations,
            seed,
            out,
        } => {
            let mut c = load(config.as_ref(), profile, seed)?;
            if let Some(n) = iterations {
                c.optimizer.iterations = n;
            }
            let trace = convergence_trace(&c)?;
            match out {
                Some(path) => write_trace_file(&path, &trace)?,
                None => write_trace_csv(std::io::stdout().lock(), &trace).map_err(|source| SimError::Csv {
                    path: "<stdout>".into(),
                    source,
                })?,
            }
            Ok(true)
        }
        Command::ReferenceConfig { profile, out } => {
            let text = ExperimentConfig::profile(profile).to_toml()?;
            match out {
                Some(path) => std::fs::write(&path, text).map_err(SimError::io(&path))?,
                None => print!("{text}"),
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
