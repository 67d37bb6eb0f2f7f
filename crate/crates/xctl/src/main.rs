use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hybrid_rl::agents::{Agent, AgentCheckpoint};
use hybrid_rl::evalkit::{evaluate_policy, DEFAULT_EVAL_EPISODES};
use hybrid_rl::numkit::{corrupted_gradient_error, gradient_suite};
use hybrid_rl::simworld::SimulatorSpec;
use hybrid_rl::xctl::{
    preset, run_experiment, simcheck, ExperimentConfig, ExperimentOutcome, WorldSource, XctlError,
};

#[derive(Parser)]
#[command(
    name = "xctl",
    about = "Train and evaluate the recurrent RL model roster"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment described by a JSON config document.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one of the E1, E2, E3 presets.
    Preset {
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the preset's config document instead of running it.
        #[arg(long)]
        print: bool,
    },
    /// Finite-difference gradient checks for every network family.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Check simulator step frequencies against its tables.
    Simcheck {
        /// Simulator JSON file; defaults to the preset world.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long, default_value_t = 50_000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the world to this file.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Evaluate a saved agent in a saved world.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EVAL_EPISODES)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn fail(e: XctlError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn finish(outcome: ExperimentOutcome) -> ExitCode {
    for rep in &outcome.reports {
        println!("policy {} / {} transitions", rep.policy, rep.data_size);
        for m in &rep.models {
            println!(
                "  {:<22} {:>9.4} ± {:.4}  (n={})",
                m.model, m.mean, m.std, m.n_runs
            );
        }
    }
    println!("results in {}", outcome.output_dir.display());
    if outcome.failures.is_empty() {
        return ExitCode::SUCCESS;
    }
    for (k, e) in &outcome.failures {
        eprintln!("failed: {k}: {e}");
    }
    ExitCode::from(1)
}

fn run(cli: Cli) -> Result<ExitCode, XctlError> {
    match cli.cmd {
        Cmd::Run { config } => {
            let doc = std::fs::read_to_string(&config)
                .map_err(|e| XctlError::Invalid(vec![format!("{}: {e}", config.display())]))?;
            let cfg = ExperimentConfig::from_document(&doc)?;
            Ok(finish(run_experiment(&cfg, Some(&doc))?))
        }
        Cmd::Preset { name, out, print } => {
            let mut cfg = preset(&name)?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            if print {
                print!("{}", cfg.to_document());
                return Ok(ExitCode::SUCCESS);
            }
            Ok(finish(run_experiment(&cfg, None)?))
        }
        Cmd::Gradcheck { instances } => {
            let reports = gradient_suite(instances).map_err(|e| XctlError::Io(e.to_string()))?;
            let mut ok = true;
            for r in &reports {
                let pass = r.max_rel_error < 1e-4;
                ok &= pass;
                println!(
                    "{:<12} {:>3} instances  max rel error {:.3e}  {}",
                    r.name,
                    r.instances,
                    r.max_rel_error,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            let corrupted =
                corrupted_gradient_error(0).map_err(|e| XctlError::Io(e.to_string()))?;
            let caught = corrupted > 1e-4;
            ok &= caught;
            println!(
                "corrupted backward pass: rel error {corrupted:.3e}  {}",
                if caught { "detected" } else { "MISSED" }
            );
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Cmd::Simcheck {
            world,
            steps,
            seed,
            save,
        } => {
            let sim = match world {
                Some(path) => WorldSource::File { path }.build()?,
                None => ExperimentConfig::default().world.build()?,
            };
            if let Some(path) = save {
                sim.save(&path).map_err(|e| XctlError::Io(e.to_string()))?;
            }
            let c = simcheck(&sim, steps, seed)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&c).expect("serializable")
            );
            Ok(if c.max_tv < 0.02 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Cmd::Eval {
            checkpoint,
            world,
            episodes,
            seed,
        } => {
            let ck = AgentCheckpoint::load(&checkpoint)
                .map_err(|e| XctlError::Invalid(vec![e.to_string()]))?;
            let agent =
                Agent::from_checkpoint(&ck).map_err(|e| XctlError::Invalid(vec![e.to_string()]))?;
            let sim = SimulatorSpec::load(&world).map_err(|e| XctlError::World(e.to_string()))?;
            let v = evaluate_policy(&sim, &agent, episodes, seed)
                .map_err(|e| XctlError::Io(e.to_string()))?;
            println!(
                "{} over {} episodes: {:.4} per step, {:.4} discounted",
                ck.kind, v.episodes, v.per_step, v.discounted
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    run(Cli::parse()).unwrap_or_else(fail)
}
