use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use spinlab_cli::protocols::{execute, Plan, PROTOCOLS};
use spinlab_cli::{fit_csv, parse_assignments, parse_range, FitRequest};

/// Spin-defect pulse-sequence simulator.
#[derive(Parser)]
#[command(name = "spinlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment configuration and write CSV (and SVG) output.
    Run {
        config: PathBuf,
        /// Overrides `sim.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads.
        #[arg(long, env = "SPINLAB_THREADS")]
        threads: Option<usize>,
        /// Also write SVG plots.
        #[arg(long)]
        svg: bool,
        /// Override a config value, `section.key=value` (repeatable).
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
    },
    /// Check a configuration without running it.
    Validate {
        config: PathBuf,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
    },
    /// Fit a model to a result CSV and print the fit block.
    Fit {
        csv: PathBuf,
        #[arg(long)]
        model: String,
        /// Component count of the peak models.
        #[arg(long)]
        lines: Option<usize>,
        /// Fixed parameter values, `name=value[,name=value...]`.
        #[arg(long)]
        fix: Option<String>,
        /// Parameters the model fixes by default that should be fitted.
        #[arg(long, value_delimiter = ',')]
        release: Vec<String>,
        /// Shared line width (Hz) of `lorentzian-sum` / `multi-gaussian`.
        #[arg(long)]
        lw: Option<f64>,
        /// τ (s) of `sinc2`; read from the CSV metadata when absent.
        #[arg(long)]
        tau: Option<f64>,
        /// Axis-to-free-evolution factor of `stretched-exp-cos`.
        #[arg(long)]
        k: Option<f64>,
        /// Subtract a line fitted to this fraction of the axis at each end.
        #[arg(long)]
        baseline_edges: Option<f64>,
        /// Fit only the axis interval `lo,hi`.
        #[arg(long, value_parser = parse_range)]
        range: Option<(f64, f64)>,
    },
    /// List the available protocols.
    ListProtocols,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_ANALYSIS: u8 = 3;

fn load(path: &Path, set: &[String]) -> Result<Plan, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Plan::parse(&text, set).map_err(|e| format!("{}: {e}", path.display()))
}

fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>, threads: Option<usize>, svg: bool, set: &[String]) -> ExitCode {
    let mut set = set.to_vec();
    if let Some(seed) = seed {
        set.push(format!("sim.seed={seed}"));
    }
    let mut plan = match load(config, &set) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    plan.svg |= svg;
    let dir = out.unwrap_or_else(|| PathBuf::from(&plan.out_dir));
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(k) = threads {
        if k == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(EXIT_CONFIG);
        }
        pool = pool.num_threads(k);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    };
    if let Err(e) = std::fs::create_dir_all(&dir) {
        eprintln!("error: {}: {e}", dir.display());
        return ExitCode::FAILURE;
    }
    let start = Instant::now();
    let result = match pool.install(|| execute(&plan)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {}: {e}", plan.name);
            return ExitCode::FAILURE;
        }
    };
    for a in &result.artifacts {
        let path = dir.join(&a.file);
        if let Err(e) = std::fs::write(&path, &a.contents) {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::FAILURE;
        }
        println!("wrote {}", path.display());
    }
    for line in &result.summary {
        println!("{line}");
    }
    eprintln!(
        "{}: {} points in {:.2} s on {} threads",
        plan.name,
        plan.points(),
        start.elapsed().as_secs_f64(),
        pool.current_num_threads()
    );
    if result.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        for f in &result.failures {
            eprintln!("error: {f}");
        }
        ExitCode::from(EXIT_ANALYSIS)
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, seed, out, threads, svg, set } => run(&config, seed, out, threads, svg, &set),
        Command::Validate { config, set } => match load(&config, &set) {
            Ok(plan) => {
                println!("{}: ok ({} protocol, {} jobs, {} points)", config.display(), plan.protocol, plan.jobs.len(), plan.points());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_CONFIG)
            }
        },
        Command::Fit { csv, model, lines, fix, release, lw, tau, k, baseline_edges, range } => {
            let req = match parse_assignments(fix.as_deref().unwrap_or("")) {
                Ok(fixed) => FitRequest { model, lines, fixed, release, lw, tau, k, baseline_edges, range },
                Err(e) => {
                    eprintln!("error: --fix: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let text = match std::fs::read_to_string(&csv) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: {}: {e}", csv.display());
                    return ExitCode::FAILURE;
                }
            };
            match fit_csv(&text, &req) {
                Ok(f) => {
                    print!("{}", f.to_text());
                    if f.converged {
                        ExitCode::SUCCESS
                    } else {
                        eprintln!("error: fit did not converge");
                        ExitCode::from(EXIT_ANALYSIS)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_ANALYSIS)
                }
            }
        }
        Command::ListProtocols => {
            for p in PROTOCOLS {
                println!("{:<13} {}", p.id, p.summary);
            }
            ExitCode::SUCCESS
        }
    }
}
