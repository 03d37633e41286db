use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use dppt_core::accountant::{account, default_orders, MechanismParams};
use dppt_core::checkpoint::checkpoint_load;
use dppt_core::config::{schema_json, RunConfig};
use dppt_core::freeze::FreezePlan;
use dppt_core::pipeline::{freeze_sweep, noise_tolerance_sweep, run_pipeline, Artifacts, FREEZE_GRID, NOISE_GRID};
use dppt_core::planner::{curves_csv, default_k_grid, default_z0_grid, plan_scale, sweep_curves, PlanBase, ScaleMode};
use dppt_core::Error;

/// Differentially private pre-training toolkit.
#[derive(Debug, Parser)]
#[command(name = "dppt", version)]
struct Cli {
    /// Overrides the run seed (and noise seed) of any loaded config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run warm start, freeze analysis, DP pre-training and the probe.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Privacy spent by a subsampled Gaussian run.
    Account {
        /// Sampling rate.
        #[arg(long)]
        q: f64,
        /// Noise multiplier.
        #[arg(long)]
        z: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        delta: f64,
    },
    /// Smallest scale factor reaching a target epsilon.
    Plan {
        #[arg(long)]
        z0: f64,
        #[arg(long)]
        target_eps: f64,
        /// batch, equal or headstart
        #[arg(long, default_value = "equal")]
        mode: ScaleMode,
        #[command(flatten)]
        base: BaseArgs,
    },
    /// Epsilon curves, or the noise / freeze experiment sweeps.
    #[command(group(ArgGroup::new("kind").required(true).args(["curves", "noise", "freeze"])))]
    Sweep {
        /// Scale mode for the curves, or `all`.
        #[arg(long)]
        curves: Option<String>,
        /// Run the noise tolerance sweep from this config.
        #[arg(long, value_name = "CONFIG")]
        noise: Option<PathBuf>,
        /// Run the freeze sweep from this config.
        #[arg(long, value_name = "CONFIG")]
        freeze: Option<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        base: BaseArgs,
    },
    /// Layer scores and freeze selection from a warm-start checkpoint.
    FreezeAnalyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        p: f64,
        /// Freeze the complement of the selected layers.
        #[arg(long)]
        freeze_rest: bool,
    },
    /// Print the summary and final metrics of a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Print the JSON schema of the run config.
    Schema,
    /// Print a default run config.
    DefaultConfig,
}

#[derive(Debug, clap::Args)]
struct BaseArgs {
    /// Base dataset size.
    #[arg(long, default_value_t = PlanBase::default().n0)]
    n0: f64,
    /// Base batch size.
    #[arg(long, default_value_t = PlanBase::default().b0)]
    b0: f64,
    /// Training steps.
    #[arg(long = "base-steps", default_value_t = PlanBase::default().steps)]
    base_steps: u64,
}

impl BaseArgs {
    fn base(&self) -> PlanBase {
        PlanBase {
            n0: self.n0,
            b0: self.b0,
            steps: self.base_steps,
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> dppt_core::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?.with_env_overrides();
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    Ok(cfg)
}

fn emit(text: &str, out: Option<&Path>) -> dppt_core::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn report(dir: &Path) -> dppt_core::Result<String> {
    let art = Artifacts::new(dir);
    let summary = std::fs::read_to_string(art.summary())
        .map_err(|e| Error::Config(format!("{}: {e}", art.summary().display())))?;
    let mut out = summary;
    if let Ok(metrics) = std::fs::read_to_string(art.metrics()) {
        let mut last: Vec<(String, String)> = Vec::new();
        for line in metrics.lines().skip(1) {
            let stage = line.split(',').next().unwrap_or_default().to_string();
            match last.iter_mut().find(|(s, _)| *s == stage) {
                Some(entry) => entry.1 = line.to_string(),
                None => last.push((stage, line.to_string())),
            }
        }
        out.push_str("\nfinal rows (stage,step,loss,clip_fraction,eval,wallclock):\n");
        for (_, line) in last {
            out.push_str(&line);
            out.push('\n');
        }
    }
    if art.freeze_report().exists() {
        out.push_str("\nfreeze report:\n");
        out.push_str(&std::fs::read_to_string(art.freeze_report())?);
    }
    Ok(out)
}

fn run(cli: Cli) -> dppt_core::Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = load_config(&config, cli.seed)?;
            let r = run_pipeline(&cfg)?;
            println!("run written to {}", r.out_dir.display());
            println!("dp_pretrain_eval_loss: {}", r.pretrain_eval);
            println!("probe_accuracy: {}", r.probe.accuracy);
            match r.privacy {
                Some(p) => println!("epsilon: {} (delta={})", p.epsilon, p.delta),
                None => println!("epsilon: inf"),
            }
        }
        Command::Account { q, z, steps, delta } => {
            let params = MechanismParams { q, z, steps };
            let r = account(&params, delta, &default_orders())?;
            println!("epsilon={} delta={} order={}", r.epsilon, r.delta, r.optimal_order);
        }
        Command::Plan {
            z0,
            target_eps,
            mode,
            base,
        } => {
            let o = plan_scale(z0, target_eps, mode, &base.base())?;
            let p = o.plan;
            println!(
                "mode={} z0={} k={} batch={} n={} noise={} q={:e} delta={:e} epsilon={} order={}",
                mode.label(),
                z0,
                p.k,
                p.batch(),
                p.dataset(),
                p.noise(),
                p.sampling_rate(),
                o.result.delta,
                o.result.epsilon,
                o.result.optimal_order
            );
        }
        Command::Sweep {
            curves,
            noise,
            freeze,
            out,
            base,
        } => {
            if let Some(mode) = curves {
                let modes = if mode == "all" {
                    ScaleMode::ALL.to_vec()
                } else {
                    vec![mode.parse::<ScaleMode>()?]
                };
                let rows = sweep_curves(&default_z0_grid(), &default_k_grid(), &modes, &base.base())?;
                emit(&curves_csv(&rows), out.as_deref())?;
            } else if let Some(path) = noise {
                let cfg = load_config(&path, cli.seed)?;
                let s = noise_tolerance_sweep(&cfg, &NOISE_GRID)?;
                emit(&s.csv(), out.as_deref())?;
                eprintln!("inversions: {}", s.inversions());
            } else if let Some(path) = freeze {
                let cfg = load_config(&path, cli.seed)?;
                let s = freeze_sweep(&cfg, &FREEZE_GRID)?;
                emit(&s.csv(), out.as_deref())?;
            }
        }
        Command::FreezeAnalyze {
            checkpoint,
            p,
            freeze_rest,
        } => {
            let (tree, acc) = checkpoint_load::<f64>(&checkpoint)?;
            let acc = acc.ok_or_else(|| Error::Format {
                path: checkpoint.clone(),
                reason: "no squared-gradient sidecar next to checkpoint".into(),
            })?;
            let plan = FreezePlan::from_accumulator(&acc, &tree, p, !freeze_rest)?;
            print!("{}", plan.report_csv());
        }
        Command::Report { run_dir } => print!("{}", report(&run_dir)?),
        Command::Schema => print!("{}", schema_json()),
        Command::DefaultConfig => println!("{}", RunConfig::default().to_json()?),
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Json(_) => 2,
        Error::Diverged { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
