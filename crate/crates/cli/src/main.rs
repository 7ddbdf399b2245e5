use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use idapbc::checkpoint::ModelFile;
use idapbc::config::RunConfig;
use idapbc::controller::{controller_report, residual_summary, ClosedLoop, DesiredSystem};
use idapbc::integrate::{monodromy, simulate_closed_loop, StabilityVerdict, Trajectory, VERDICT_TOLERANCE};
use idapbc::optimize::{save_loss_history, train_with_observer};
use idapbc::phcore::{electromech_plant, ElectromechPlant};
use idapbc::Error;

#[derive(Parser)]
#[command(name = "idapbc", version, about = "Learn sparse IDA-PBC controllers for the electrostatic microactuator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a controller and write models, loss log and final trajectory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Integrate the closed loop over several periods and write `trajectory.csv`.
    Simulate {
        #[command(flatten)]
        run: ModelAndConfig,
        #[arg(long, default_value_t = 1)]
        periods: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monodromy matrix and Floquet multipliers over one period.
    Analyze {
        #[command(flatten)]
        run: ModelAndConfig,
    },
    /// Print the closed-form expressions of a model.
    Export {
        #[arg(long)]
        model: PathBuf,
    },
    /// Matching residual statistics over one period.
    CheckMatching {
        #[command(flatten)]
        run: ModelAndConfig,
    },
}

#[derive(Args)]
struct ModelAndConfig {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: PathBuf,
}

/// Command failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } | Error::NonFinite(_) | Error::SingularMatrix => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out, seed } => cmd_train(&config, out, seed),
        Command::Simulate { run, periods, out } => cmd_simulate(&run, periods, out),
        Command::Analyze { run } => cmd_analyze(&run),
        Command::Export { model } => cmd_export(&model),
        Command::CheckMatching { run } => cmd_check_matching(&run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load(run: &ModelAndConfig) -> Result<(RunConfig, ElectromechPlant, DesiredSystem), Failure> {
    let model = ModelFile::load(&run.model)?;
    let rc = RunConfig::load(&run.config)?;
    let plant = electromech_plant(rc.plant)?;
    Ok((rc, plant, model.controller))
}

fn write_csv(traj: &Trajectory, path: &Path) -> CmdResult {
    let file = std::fs::File::create(path)?;
    traj.write_csv(std::io::BufWriter::new(file))?;
    Ok(())
}

/// Rewrites a divergence error to name the last time with a valid state.
fn divergence(e: Error, horizon: f64, steps: usize) -> Failure {
    match e {
        Error::Divergence { step, .. } => {
            let last = step.saturating_sub(1) as f64 * horizon / steps as f64;
            Failure {
                code: 2,
                message: format!("closed loop diverged at step {step}; last valid time t = {last}"),
            }
        }
        other => other.into(),
    }
}

fn cmd_train(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> CmdResult {
    let mut rc = RunConfig::load(config)?;
    if let Some(s) = seed {
        rc.train.seed = s;
    }
    let out = out.unwrap_or_else(|| rc.out_dir.clone());
    let plant = electromech_plant(rc.plant)?;
    std::fs::create_dir_all(&out)?;
    rc.save(&out.join("config.toml"))?;

    let epochs = rc.train.epochs;
    let every = (epochs / 20).max(1);
    let outcome = train_with_observer(&plant, &rc.train, |epoch, b| {
        if epoch % every == 0 || epoch + 1 == epochs {
            log::info!(
                "epoch {epoch}: loss {:.6} (task {:.6}, matching {:.6}, sparsity {:.3})",
                b.total,
                b.task,
                b.mc,
                b.sparse
            );
        }
    })?;

    let hash = rc.train.hash();
    ModelFile::new(outcome.final_system.clone(), epochs, outcome.final_loss.total, hash.clone())
        .save(&out.join("model.final"))?;
    ModelFile::new(outcome.best_system.clone(), outcome.best_epoch, outcome.best_loss.total, hash)
        .save(&out.join("model.best"))?;
    save_loss_history(&outcome.history, &out.join("loss_history.csv"))?;

    println!("initial loss: {:.6}", outcome.initial_loss.total);
    println!("final loss:   {:.6}", outcome.final_loss.total);
    println!("best loss:    {:.6} (epoch {})", outcome.best_loss.total, outcome.best_epoch);
    println!(
        "active terms: {} of {} (final), {} (best)",
        outcome.final_system.active_term_count(),
        outcome.final_system.term_budget(),
        outcome.best_system.active_term_count()
    );
    match &outcome.final_trajectory {
        Some(traj) => write_csv(traj, &out.join("trajectory_final.csv"))?,
        None => {
            let steps = rc.train.steps();
            let x0 = rc.train.initial_state(&outcome.final_system);
            let gates = outcome.final_system.deterministic_gates();
            let err = simulate_closed_loop(&plant, &outcome.final_system, &gates, &x0, rc.train.horizon, steps)
                .err()
                .unwrap_or(Error::NonFinite("final trajectory".into()));
            return Err(divergence(err, rc.train.horizon, steps));
        }
    }
    println!("outputs written to {}", out.display());
    Ok(())
}

fn cmd_simulate(run: &ModelAndConfig, periods: usize, out: Option<PathBuf>) -> CmdResult {
    if periods == 0 {
        return Err(Failure {
            code: 1,
            message: "--periods must be at least 1".into(),
        });
    }
    let (rc, plant, ds) = load(run)?;
    let out = out.unwrap_or_else(|| rc.out_dir.clone());
    let period = rc.train.horizon;
    let steps = rc.train.steps();
    let horizon = period * periods as f64;
    let total_steps = steps * periods;
    let gates = ds.deterministic_gates();
    let x0 = rc.train.initial_state(&ds);
    let traj = simulate_closed_loop(&plant, &ds, &gates, &x0, horizon, total_steps)
        .map_err(|e| divergence(e, horizon, total_steps))?;
    std::fs::create_dir_all(&out)?;
    write_csv(&traj, &out.join("trajectory.csv"))?;

    let cl = ClosedLoop::from_system(&plant, &ds, &gates)?;
    println!("period  mean |eta|^2");
    for k in 0..periods {
        let window = &traj.states[k * steps..=(k + 1) * steps];
        let summary = residual_summary(&cl, window)?;
        println!("{:>6}  {:.6e}", k + 1, summary.mean);
    }
    let last = traj.final_state().expect("non-empty trajectory");
    println!("x(T) = [{:.6}, {:.6}, {:.6}] at t = {horizon}", last[0], last[1], last[2]);
    println!("wrote {}", out.join("trajectory.csv").display());
    Ok(())
}

fn cmd_analyze(run: &ModelAndConfig) -> CmdResult {
    let (rc, plant, ds) = load(run)?;
    let period = rc.train.horizon;
    let steps = rc.train.steps();
    let gates = ds.deterministic_gates();
    let x0 = rc.train.initial_state(&ds);
    let m = monodromy(&plant, &ds, &gates, &x0, period, steps).map_err(|e| divergence(e, period, steps))?;
    println!("initial state: [{:.4}, {:.4}, {:.4}], period T = {period}", x0[0], x0[1], x0[2]);
    println!("monodromy matrix:");
    for r in 0..m.matrix.rows() {
        let row: Vec<String> = m.matrix.row(r).iter().map(|v| format!("{v:>10.4}")).collect();
        println!("  {}", row.join(" "));
    }
    println!("multipliers (descending modulus):");
    for mu in &m.multipliers {
        println!("  {mu}  |.| = {:.4}", mu.modulus());
    }
    let verdict = StabilityVerdict::classify(&m.multipliers, VERDICT_TOLERANCE);
    println!("verdict: {verdict}");
    Ok(())
}

fn cmd_export(model: &Path) -> CmdResult {
    let file = ModelFile::load(model).map_err(|e| Failure {
        code: 1,
        message: e.to_string(),
    })?;
    print!("{}", controller_report(&file.controller));
    Ok(())
}

fn cmd_check_matching(run: &ModelAndConfig) -> CmdResult {
    let (rc, plant, ds) = load(run)?;
    let period = rc.train.horizon;
    let steps = rc.train.steps();
    let gates = ds.deterministic_gates();
    let x0 = rc.train.initial_state(&ds);
    let traj = simulate_closed_loop(&plant, &ds, &gates, &x0, period, steps)
        .map_err(|e| divergence(e, period, steps))?;
    let cl = ClosedLoop::from_system(&plant, &ds, &gates)?;
    let s = residual_summary(&cl, &traj.states)?;
    println!("matching residual over one period (T = {period}, {} grid points)", traj.len());
    println!("mean |eta|^2 = {:.6e}", s.mean);
    println!("max  |eta|^2 = {:.6e}", s.max);
    for (i, name) in ["q", "p", "Q"].iter().enumerate() {
        println!(
            "eta_{name}: rms {:.6e}, max |.| {:.6e}",
            s.component_rms[i], s.component_max_abs[i]
        );
    }
    Ok(())
}
