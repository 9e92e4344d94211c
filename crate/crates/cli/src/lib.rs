//! The `fusekit` command line: `verify`, `costs`, `bench` and `plan`.
//!
//! [`run`] does all the work and returns the text and exit status, so the
//! binary is a thin wrapper and tests can drive commands in-process.
//! Exit status is 0 on success, 1 when a check fails and 2 for usage or
//! input errors.

pub mod bench;
pub mod config;
pub mod costs;
pub mod plan;
pub mod report;
pub mod verify;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{parse_flash_dims, parse_sizes, Format, RunConfig};
use crate::report::Report;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Failure(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error(transparent)]
    Core(#[from] fusekit::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failure(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "fusekit",
    version,
    about = "Fused diffusion kernels: verification, costs, benchmarks and graph planning"
)]
pub struct Cli {
    /// Seed for every randomized input.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Comma-separated bench presets: small, medium, large.
    #[arg(long, global = true, default_value = "small,medium")]
    pub sizes: String,
    /// Relative fault injected into fused_gelu during verify (harness self-test).
    #[arg(long, global = true)]
    pub perturb: Option<f64>,
    /// Worker threads for kernel-internal parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Head dimensions that get tiled attention; empty for none.
    #[arg(long, global = true, default_value = "40")]
    pub flash_dims: String,
    /// Tolerance override as op=value; repeatable.
    #[arg(long = "tol", global = true, value_name = "OP=VALUE")]
    pub tolerances: Vec<String>,
    /// Cases per op in verify, edge cases included.
    #[arg(long, global = true, default_value_t = 60)]
    pub cases: usize,
    /// Timed repetitions per kernel in bench, after one warmup.
    #[arg(long, global = true, default_value_t = 5)]
    pub repeats: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check every fused kernel against its naive oracle.
    Verify,
    /// Print the Winograd cost table and attention footprints.
    Costs,
    /// Time naive vs fused kernels and check instrumented counts.
    Bench,
    /// Apply fusion passes to a graph file.
    Plan {
        graph: PathBuf,
        /// Comma-separated passes (softmax, gn_gelu, flash, winograd); empty for none.
        #[arg(long, default_value = "softmax,gn_gelu,flash,winograd")]
        passes: String,
        /// Where to write the rewritten graph.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Cli {
    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        if self.cases == 0 || self.repeats == 0 {
            return Err(CliError::Usage("--cases and --repeats must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        if let Some(p) = self.perturb {
            if !p.is_finite() {
                return Err(CliError::Usage(format!("--perturb must be finite, got {p}")));
            }
        }
        let cfg = RunConfig {
            seed: self.seed,
            sizes: parse_sizes(&self.sizes)?,
            format: self.format,
            perturb: self.perturb,
            threads: self.threads,
            flash_dims: parse_flash_dims(&self.flash_dims)?,
            cases: self.cases,
            repeats: self.repeats,
            ..RunConfig::default()
        };
        cfg.with_tolerances(&self.tolerances)
    }
}

/// Captured result of one invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub stdout: String,
    pub stderr: String,
    pub code: i32,
}

impl Outcome {
    fn error(e: &CliError) -> Self {
        Outcome {
            stdout: String::new(),
            stderr: format!("error: {e}\n"),
            code: e.exit_code(),
        }
    }
}

fn execute(cli: &Cli, cfg: &RunConfig) -> Result<Report, CliError> {
    match &cli.command {
        Command::Verify => verify::cmd_verify(cfg),
        Command::Costs => Ok(costs::cmd_costs()),
        Command::Bench => bench::cmd_bench(cfg),
        Command::Plan { graph, passes, out } => {
            let passes: Vec<String> = passes
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(String::from)
                .collect();
            plan::cmd_plan(graph, &passes, out.as_deref(), cfg)
        }
    }
}

pub fn run<I, T>(args: I) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                Outcome {
                    stdout: String::new(),
                    stderr: text,
                    code: 2,
                }
            } else {
                Outcome {
                    stdout: text,
                    stderr: String::new(),
                    code: 0,
                }
            };
        }
    };
    let cfg = match cli.run_config() {
        Ok(cfg) => cfg,
        Err(e) => return Outcome::error(&e),
    };

    let result = match cfg.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| execute(&cli, &cfg)),
            Err(e) => Err(CliError::Usage(format!("cannot start {n} threads: {e}"))),
        },
        None => execute(&cli, &cfg),
    };

    match result {
        Ok(report) => {
            let stderr = if report.passed {
                String::new()
            } else {
                let failed = match report.command {
                    "verify" => verify::failed_ops(&report).join(", "),
                    _ => report
                        .notes
                        .iter()
                        .filter(|n| n.starts_with("FAIL"))
                        .cloned()
                        .collect::<Vec<_>>()
                        .join("; "),
                };
                format!("{} failed: {failed}\n", report.command)
            };
            Outcome {
                stdout: report.render(cfg.format),
                stderr,
                code: if report.passed { 0 } else { 1 },
            }
        }
        Err(e) => Outcome::error(&e),
    }
}
