mod config;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use config::{MissingConfig, RunConfigFile};
use qcpo::checkpoint::Checkpoint;
use qcpo::cmdp::{EnvConfig, EnvId};
use qcpo::oracle::{run_suite, Fault, SuiteOptions, CHECK_NAMES};
use qcpo::trainer::{evaluate, IterationMetrics, Trainer};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "qcpo", version, about = "Quantile-constrained policy optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML run config.
    Train {
        config: PathBuf,
        /// Override a config value, e.g. `--set trainer.eps0=0.2`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a saved policy with its parameters frozen.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Outage threshold; defaults to the one the policy was trained with.
        #[arg(long)]
        d_th: Option<f64>,
        #[arg(long)]
        eps0: Option<f64>,
        /// Environment to evaluate on; defaults to the training environment.
        #[arg(long, value_enum)]
        env: Option<EnvArg>,
        /// Sum costs with the training discount instead of gamma = 1.
        #[arg(long)]
        discounted: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the summary here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle checks and print a pass/fail table.
    Verify {
        /// Run only the named checks.
        #[arg(long, value_name = "CHECK")]
        only: Vec<String>,
        /// Inject a deliberate fault to confirm the checks catch it.
        #[arg(long, value_enum)]
        fault: Option<FaultArg>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvArg {
    TwoPath,
    HazardGrid,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    FlipMuSign,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, overrides } => train(config, &overrides),
        Command::Eval {
            checkpoint,
            episodes,
            d_th,
            eps0,
            env,
            discounted,
            seed,
            out,
        } => eval(checkpoint, episodes, d_th, eps0, env, discounted, seed, out),
        Command::Verify { only, fault, seed } => verify(only, fault, seed),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<MissingConfig>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn train(path: PathBuf, overrides: &[String]) -> Result<ExitCode> {
    let cfg = RunConfigFile::load(&path, overrides)?;
    let out = &cfg.output;
    std::fs::create_dir_all(&out.dir)
        .with_context(|| format!("cannot create output directory {}", out.dir.display()))?;
    std::fs::write(out.dir.join("resolved_config.toml"), cfg.to_toml()?)?;

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst))
            .context("cannot install the interrupt handler")?;
    }

    let metrics_path = out.dir.join(&out.metrics);
    let mut csv = BufWriter::new(File::create(&metrics_path)?);
    writeln!(csv, "{}", IterationMetrics::CSV_HEADER)?;
    csv.flush()?;

    let mut trainer = Trainer::new(cfg.env.clone(), cfg.trainer.clone())?;
    let log_every = out.log_every;
    let result = trainer.run(Some(&stop), |m| {
        writeln!(csv, "{}", m.csv_row())?;
        csv.flush()?;
        if log_every > 0 && m.iter % log_every == 0 {
            eprintln!(
                "iter {:>5}  steps {:>9}  return {:>8.3}  outage {:.3}  lambda {:.3}",
                m.iter, m.env_steps, m.avg_return_100ep, m.outage_prob_100ep, m.lambda
            );
        }
        Ok(())
    });
    csv.flush()?;
    // the checkpoint is written even when training stopped early
    let ck_path = out.dir.join(&out.checkpoint);
    trainer.checkpoint().save(&ck_path)?;
    let history = result?;
    if stop.load(Ordering::SeqCst) {
        eprintln!("interrupted after {} iterations", history.len());
    }
    eprintln!("metrics: {}", metrics_path.display());
    eprintln!("checkpoint: {}", ck_path.display());
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn eval(
    path: PathBuf,
    episodes: usize,
    d_th: Option<f64>,
    eps0: Option<f64>,
    env: Option<EnvArg>,
    discounted: bool,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<ExitCode> {
    let ck = Checkpoint::load(&path)?;
    let env_cfg = match env {
        None => ck.env.clone(),
        Some(EnvArg::TwoPath) => EnvConfig {
            env_id: EnvId::TwoPath,
            ..ck.env.clone()
        },
        Some(EnvArg::HazardGrid) => EnvConfig {
            env_id: EnvId::HazardGrid,
            ..ck.env.clone()
        },
    };
    let policy = ck.policy_for(&env_cfg)?;
    let gamma = if discounted { ck.trainer.gamma } else { 1.0 };
    let summary = evaluate(
        &policy,
        &env_cfg,
        episodes,
        d_th.unwrap_or(ck.trainer.d_th),
        eps0.unwrap_or(ck.trainer.eps0),
        gamma,
        seed,
    )?;
    let json = serde_json::to_string_pretty(&summary)?;
    match out {
        Some(p) => std::fs::write(&p, json + "\n")
            .with_context(|| format!("cannot write {}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(only: Vec<String>, fault: Option<FaultArg>, seed: u64) -> Result<ExitCode> {
    if let Some(bad) = only.iter().find(|o| !CHECK_NAMES.contains(&o.as_str())) {
        bail!("unknown check `{bad}`; available: {}", CHECK_NAMES.join(", "));
    }
    let opts = SuiteOptions {
        only: (!only.is_empty()).then_some(only),
        fault: fault.map(|FaultArg::FlipMuSign| Fault::FlipMuSign),
        seed,
    };
    let report = run_suite(&opts);
    print!("{}", report.table());
    Ok(if report.all_passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
