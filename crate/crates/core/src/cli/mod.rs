//! Scenario-driven command-line front end.
//!
//! Exit codes: 0 on success, 1 when a computation fails, 2 on configuration
//! errors (unreadable or invalid scenarios, bad task options).

pub mod report;
pub mod scenario;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use report::{run_scenario, RunOutcome};
use scenario::{parse_scenario, ConfigError, Scenario, TaskKind, TaskSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_COMPUTE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dv-semigroup", version, about = "Schrödinger semigroups, rate functions and marginal inversion on finite state spaces")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Output {
    /// Report path (a directory when several scenarios are given); stdout if omitted.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Directory for CSV files of measure-valued outputs.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Record wall-clock time per task (reports are then no longer reproducible byte for byte).
    #[arg(long)]
    timings: bool,
}

#[derive(Debug, Args)]
struct Single {
    scenario: PathBuf,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the tasks listed in one or more scenario files.
    Run {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        #[command(flatten)]
        output: Output,
        /// Number of scenarios processed concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Principal eigenvalue, ground state, ground and equilibrium measures.
    Spectral(Single),
    /// Rate function at a measure and the dual eigenvalue.
    Rate(Single),
    /// Compare the marginals generated by two single-particle potentials.
    HkVerify {
        #[command(flatten)]
        single: Single,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        v1: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        v2: Option<Vec<f64>>,
    },
    /// Recover a single-particle potential from a marginal.
    HkInvert(Single),
    /// Reduced functional at a marginal, and the reduced variational principle.
    Ihk(Single),
    /// Monte Carlo estimate of the principal eigenvalue.
    Mc {
        #[command(flatten)]
        single: Single,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Run { scenarios, output, jobs } => run_many(&scenarios, &output, jobs),
        Command::Spectral(s) => run_single(&s, TaskSpec::bare(TaskKind::Spectral)),
        Command::Rate(s) => run_single(&s, TaskSpec::bare(TaskKind::Rate)),
        Command::HkVerify { single, v1, v2 } => {
            let mut spec = TaskSpec::bare(TaskKind::HkVerify);
            spec.v1 = v1;
            spec.v2 = v2;
            run_single(&single, spec)
        }
        Command::HkInvert(s) => run_single(&s, TaskSpec::bare(TaskKind::HkInvert)),
        Command::Ihk(s) => run_single(&s, TaskSpec::bare(TaskKind::Ihk)),
        Command::Mc { single, t, paths, seed } => {
            let mut spec = TaskSpec::bare(TaskKind::Mc);
            spec.t = t;
            spec.paths = paths;
            spec.seed = seed;
            run_single(&single, spec)
        }
    }
}

fn load(path: &Path) -> Result<Scenario, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::at(path.display().to_string(), e))?;
    let stem = path.file_stem().map_or_else(|| "scenario".to_string(), |s| s.to_string_lossy().into_owned());
    parse_scenario(&text, &stem)
}

fn exit_code(outcome: &RunOutcome) -> i32 {
    if outcome.config_error {
        EXIT_CONFIG
    } else if outcome.compute_error {
        EXIT_COMPUTE
    } else {
        EXIT_OK
    }
}

/// Runs one subcommand task, taking options from a matching scenario entry
/// when the command line gives none.
fn run_single(single: &Single, mut spec: TaskSpec) -> i32 {
    let mut sc = match load(&single.scenario) {
        Ok(sc) => sc,
        Err(e) => {
            eprintln!("{}: {e}", single.scenario.display());
            return EXIT_CONFIG;
        }
    };
    if let Some(listed) = sc.tasks.iter().find(|t| t.task == spec.task) {
        let merged = TaskSpec {
            v1: spec.v1.take().or_else(|| listed.v1.clone()),
            v2: spec.v2.take().or_else(|| listed.v2.clone()),
            t: spec.t.or(listed.t),
            paths: spec.paths.or(listed.paths),
            seed: spec.seed.or(listed.seed),
            ..listed.clone()
        };
        spec = merged;
    }
    sc.tasks = vec![spec];
    let outcome = run_scenario(&sc, single.output.timings);
    finish(&sc, &outcome, single.output.out.as_deref(), single.output.csv.as_deref())
}

fn run_many(paths: &[PathBuf], output: &Output, jobs: usize) -> i32 {
    if paths.len() > 1 && output.out.is_none() {
        eprintln!("several scenarios need -o <directory>");
        return EXIT_CONFIG;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("cannot start worker pool: {e}");
            return EXIT_COMPUTE;
        }
    };
    let codes: Vec<i32> = pool.install(|| {
        paths
            .par_iter()
            .map(|path| {
                let sc = match load(path) {
                    Ok(sc) => sc,
                    Err(e) => {
                        eprintln!("{}: {e}", path.display());
                        return EXIT_CONFIG;
                    }
                };
                let outcome = run_scenario(&sc, output.timings);
                let target = match (&output.out, paths.len()) {
                    (Some(dir), n) if n > 1 => Some(dir.join(format!("{}.json", file_stem(path)))),
                    (out, _) => out.clone(),
                };
                finish(&sc, &outcome, target.as_deref(), output.csv.as_deref())
            })
            .collect()
    });
    codes.into_iter().max().unwrap_or(EXIT_OK)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "scenario".to_string(), |s| s.to_string_lossy().into_owned())
}

fn finish(sc: &Scenario, outcome: &RunOutcome, out: Option<&Path>, csv: Option<&Path>) -> i32 {
    let mut text = serde_json::to_string_pretty(&outcome.report).expect("report serializes");
    text.push('\n');
    let written = match out {
        Some(path) => path.parent().filter(|p| !p.as_os_str().is_empty()).map_or(Ok(()), fs::create_dir_all).and_then(|_| fs::write(path, &text)),
        None => std::io::stdout().lock().write_all(text.as_bytes()),
    };
    if let Err(e) = written {
        eprintln!("cannot write report: {e}");
        return EXIT_COMPUTE;
    }
    if let Some(dir) = csv {
        if let Err(e) = write_csv(dir, &sc.name, outcome) {
            eprintln!("cannot write CSV: {e}");
            return EXIT_COMPUTE;
        }
    }
    exit_code(outcome)
}

/// One file per measure: `<dir>/<scenario>.<task>.<field>.csv` with `state,value` rows.
fn write_csv(dir: &Path, name: &str, outcome: &RunOutcome) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for (task, measures) in &outcome.measures {
        for (field, values) in measures {
            let mut body = String::from("state,value\n");
            for (i, v) in values.iter().enumerate() {
                body.push_str(&format!("{i},{v}\n"));
            }
            fs::write(dir.join(format!("{name}.{task}.{field}.csv")), body)?;
        }
    }
    Ok(())
}
