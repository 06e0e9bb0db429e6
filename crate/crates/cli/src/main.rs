use std::path::PathBuf;
use std::process::ExitCode;

use anchorlab::config::{RunConfig, SweepAxis, OUTPUT_DIR_ENV};
use anchorlab::pipeline::{self, write_atomic};
use anchorlab::verify::{verify_props, VerifyOptions};
use anchorlab::Error;
use clap::{Parser, Subcommand};

/// Exact-enumeration laboratory for anchored distribution matching.
#[derive(Parser, Debug)]
#[command(name = "anchorlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// Run-config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Takes precedence over ANCHORLAB_OUT and the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run Stages 1 to 3 end to end and write all artifacts.
    Pipeline(Common),
    /// Check the counterexample values and the estimator and objective properties.
    VerifyProps(Common),
    /// Run one pipeline cell per value of a sweep axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// beta, N, proposal_strength or objective. Defaults to sweep.axis from the config.
        #[arg(long)]
        axis: Option<String>,
        /// Worker threads (default: number of cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Label variance and bias as a function of the subsample size.
    Nstudy(Common),
    /// Recompute diversity metrics from a policy checkpoint.
    Metrics {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint (defaults to policy.ckpt in the output directory).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write exact partition functions and weight statistics per prompt.
    OracleDump(Common),
}

enum Failure {
    Config(String),
    Assertion(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn load(common: &Common) -> Result<RunConfig, Failure> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config("--config is required for this subcommand".into()))?;
    let mut cfg = RunConfig::load(path).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Output directory when no config is given: flag, then environment variable, then `out`.
fn bare_out_dir(common: &Common) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Pipeline(common) => {
            let cfg = load(&common)?;
            let dir = cfg.resolve_output_dir(common.out.as_deref());
            let outcome = pipeline::run_pipeline(&cfg, &dir)?;
            for s in &outcome.manifest.stages {
                println!("{:<8} {}", s.stage, s.status);
            }
            println!("wrote {} files to {}", outcome.manifest.files.len(), dir.display());
            Ok(())
        }
        Command::VerifyProps(common) => {
            let cfg = match &common.config {
                Some(_) => Some(load(&common)?),
                None => None,
            };
            let mut opts = VerifyOptions::default();
            if let Some(c) = &cfg {
                opts.seed = c.seed;
                opts.replications = c.verify.replications;
                opts.envelope_draws = c.verify.envelope_draws;
                opts.training_steps = c.verify.training_steps;
                opts.eta_mode = c.verify.eta_mode;
                opts.fault = c.verify.fault;
            }
            if let Some(s) = common.seed {
                opts.seed = s;
            }
            let report = verify_props(&opts);
            for c in &report.checks {
                println!("{}", c.line());
            }
            let dir = match &cfg {
                Some(c) => c.resolve_output_dir(common.out.as_deref()),
                None => bare_out_dir(&common),
            };
            write_atomic(&dir.join("verify.json"), report.to_json().as_bytes())?;
            if report.all_passed() {
                Ok(())
            } else {
                Err(Failure::Assertion("one or more checks failed".into()))
            }
        }
        Command::Sweep { common, axis, workers } => {
            let cfg = load(&common)?;
            let name = axis
                .or_else(|| cfg.sweep.axis.clone())
                .ok_or_else(|| Failure::Config("no sweep axis given (--axis or sweep.axis)".into()))?;
            let axis = SweepAxis::parse(&name)?;
            let dir = cfg.resolve_output_dir(common.out.as_deref());
            let outcome = pipeline::run_sweep(&cfg, axis, &dir, workers)?;
            println!("wrote {} rows to {}", outcome.rows.len(), outcome.path.display());
            if outcome.failed_cells > 0 {
                return Err(Failure::Runtime(format!("{} sweep cells failed", outcome.failed_cells)));
            }
            Ok(())
        }
        Command::Nstudy(common) => {
            let cfg = load(&common)?;
            let dir = cfg.resolve_output_dir(common.out.as_deref());
            let table = pipeline::run_nstudy(&cfg, &dir)?;
            for a in &table.aggregates {
                println!(
                    "M={:<3} prompts={:<3} var(log Z)={:.4e} rel_bias={:+.4e}",
                    a.m, a.prompts, a.var_log_z_mean, a.rel_bias_mean
                );
            }
            Ok(())
        }
        Command::Metrics { common, checkpoint } => {
            let cfg = load(&common)?;
            let dir = cfg.resolve_output_dir(common.out.as_deref());
            let ckpt = checkpoint.unwrap_or_else(|| dir.join(pipeline::POLICY_FILE));
            let rows = pipeline::run_checkpoint_metrics(&cfg, &ckpt, &dir)?;
            for (r, fwd, rev) in &rows {
                println!(
                    "{} pass@{}={:.4} distinct={:.4} kl_fwd={:.3e} kl_rev={:.3e}",
                    r.prompt_id, r.k, r.pass_at_k, r.distinct_correct_expected, fwd, rev
                );
            }
            Ok(())
        }
        Command::OracleDump(common) => {
            let cfg = load(&common)?;
            let dir = cfg.resolve_output_dir(common.out.as_deref());
            let rows = pipeline::run_oracle_dump(&cfg, &dir)?;
            println!("wrote {} rows to {}", rows.len(), dir.join(pipeline::ORACLE_FILE).display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Assertion(m)) | Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Config(m)) => {
            eprintln!("{m}");
            ExitCode::from(2)
        }
    }
}
