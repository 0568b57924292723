use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use colearn::coordinator::Outcome;
use colearn::experiment::{plot_emit, read_trajectory, run_coordinator, run_experiment, run_worker, ExperimentConfig, PlotMetric};
use colearn::verify::{self, Suite};
use colearn::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_PROTOCOL: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(name = "colearn", version, about = "Collaborative swarm training of small sequence models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Inprocess,
    Coordinator,
    Worker,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Loss,
    BestLoss,
    TestAccuracy,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment grid, or one coordinator or worker role.
    Run {
        #[arg(long, env = "COLEARN_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long, value_enum, env = "COLEARN_MODE", default_value = "inprocess")]
        mode: Mode,
        /// Coordinator address; defaults to `coordinator.listen`.
        #[arg(long, env = "COLEARN_LISTEN")]
        listen: Option<String>,
        /// Coordinator address a worker connects to.
        #[arg(long, env = "COLEARN_CONNECT")]
        connect: Option<String>,
        /// Replaces the config's seed list.
        #[arg(long, env = "COLEARN_SEED")]
        seed: Option<u64>,
        #[arg(long, env = "COLEARN_OUT", default_value = "colearn-out")]
        out: PathBuf,
        /// Worker fault injection: exit before publishing this epoch.
        #[arg(long)]
        exit_before_epoch: Option<u64>,
    },
    /// Run the self-check suites and print a JSON-lines report.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn trajectory logs into a per-epoch CSV, one column per log.
    Plot {
        /// Trajectory files, or directories searched for `particle_*.jsonl`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "loss")]
        metric: Metric,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Protocol(_) | Error::EpochMismatch { .. } | Error::Timeout { .. } | Error::RunFailed(_) => EXIT_PROTOCOL,
        _ => EXIT_FAILURE,
    }
}

fn collect_inputs(inputs: &[PathBuf]) -> std::io::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found = Vec::new();
            collect_dir(p, &mut found)?;
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn collect_dir(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_dir(&path, out)?;
        } else if path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("particle_") && n.ends_with(".jsonl")) {
            out.push(path);
        }
    }
    Ok(())
}

/// File stems when unique, otherwise paths with separators flattened.
fn series_names(files: &[PathBuf]) -> Vec<String> {
    let stems: Vec<String> = files.iter().map(|f| f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()).collect();
    let unique = stems.iter().collect::<std::collections::BTreeSet<_>>().len() == stems.len();
    if unique {
        stems
    } else {
        files.iter().map(|f| f.with_extension("").to_string_lossy().replace(['/', '\\', ','], "_")).collect()
    }
}

fn plot(inputs: &[PathBuf], metric: Metric, out: Option<&Path>) -> colearn::Result<()> {
    let files = collect_inputs(inputs)?;
    let names = series_names(&files);
    let mut series = Vec::with_capacity(files.len());
    for (name, file) in names.into_iter().zip(&files) {
        series.push((name, read_trajectory(file)?));
    }
    let metric = match metric {
        Metric::Loss => PlotMetric::Loss,
        Metric::BestLoss => PlotMetric::BestLoss,
        Metric::TestAccuracy => PlotMetric::TestAccuracy,
    };
    let csv = plot_emit(&series, metric);
    match out {
        Some(path) => std::fs::write(path, csv)?,
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(())
}

struct RunArgs {
    mode: Mode,
    listen: Option<String>,
    connect: Option<String>,
    seed: Option<u64>,
    out: PathBuf,
    exit_before_epoch: Option<u64>,
}

fn run(mut cfg: ExperimentConfig, args: RunArgs) -> colearn::Result<()> {
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    let seed = cfg.seeds[0];
    match args.mode {
        Mode::Inprocess => {
            let result = run_experiment(&cfg, &args.out)?;
            print!("{}", result.results.pretty());
            println!("summary written to {}", result.summary.display());
        }
        Mode::Coordinator => {
            let listen = args.listen.unwrap_or_else(|| cfg.coordinator.listen.clone());
            let outcome = run_coordinator(&cfg, seed, &listen, &args.out, |addr| {
                println!("listening on {addr}");
                let _ = std::io::stdout().flush();
            })?;
            match outcome {
                Outcome::Completed => println!("run completed"),
                Outcome::Failed(msg) => return Err(Error::RunFailed(msg)),
            }
        }
        Mode::Worker => {
            let connect = args.connect.ok_or_else(|| Error::Config { key: "--connect".into(), message: "worker mode needs a coordinator address".into() })?;
            let result = run_worker(&cfg, seed, &connect, args.exit_before_epoch, &args.out)?;
            println!("particle {} finished; best loss {}", result.state.id, result.state.personal_best_loss);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, mode, listen, connect, seed, out, exit_before_epoch } => {
            let Some(config) = config else {
                eprintln!("error: --config (or COLEARN_CONFIG) is required\n");
                let mut cmd = Cli::command();
                cmd.build();
                let _ = cmd.find_subcommand_mut("run").map(|c| c.print_help());
                return ExitCode::from(EXIT_CONFIG);
            };
            ExperimentConfig::load(&config).and_then(|cfg| run(cfg, RunArgs { mode, listen, connect, seed, out, exit_before_epoch }))
        }
        Command::Verify { suite, out } => {
            let report = verify::run(suite);
            let text = report.to_json_lines();
            print!("{text}");
            if let Some(path) = out {
                if let Err(e) = std::fs::write(&path, &text) {
                    eprintln!("error: {}: {e}", path.display());
                    return ExitCode::from(EXIT_FAILURE);
                }
            }
            return if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(EXIT_VERIFY) };
        }
        Command::Plot { inputs, metric, out } => plot(&inputs, metric, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config { .. }) {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
