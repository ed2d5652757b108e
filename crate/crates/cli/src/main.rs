//! `mpmcouple` command-line front end.
//!
//! Exit codes: 0 success, 2 scene schema error, 3 simulation fault (or any
//! counted fault under `--strict`), 4 gradient audit failure, 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::info;
use mpmcouple::mpm::frame::write_frame_file;
use mpmcouple::runner::{grad_check, run_benchmark, run_optimize, simulate};
use mpmcouple::scene::Scene;
use mpmcouple::trajopt::write_loss_history;
use mpmcouple::SimError;

#[derive(Parser)]
#[command(name = "mpmcouple", version, about = "Differentiable MPM coupled with rigid bodies and cloth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scene's action schedule forward and write frames and a report.
    Simulate(Common),
    /// Run the shaking-container benchmark matrix.
    BenchContact(Common),
    /// Compare adjoint action gradients against finite differences.
    GradCheck(Common),
    /// Optimise the action sequence against the scene's loss.
    Optimize(Common),
}

#[derive(Args)]
struct Common {
    /// Scene JSON file.
    #[arg(long)]
    scene: PathBuf,
    /// Output directory (defaults to `output.dir` of the scene, then `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Abort on CFL violations and fail on any counted fault.
    #[arg(long)]
    strict: bool,
}

enum Failure {
    Schema(anyhow::Error),
    Fault(anyhow::Error),
    Audit(String),
    Other(anyhow::Error),
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config { .. } => Failure::Schema(e.into()),
            SimError::ParticleFault { .. }
            | SimError::OutOfDomain { .. }
            | SimError::Cfl { .. }
            | SimError::Optimization(_) => Failure::Fault(e.into()),
            e => Failure::Other(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn load(c: &Common) -> Result<(Scene, PathBuf), Failure> {
    if !c.scene.is_file() {
        return Err(Failure::Other(anyhow::anyhow!("cannot read scene {}", c.scene.display())));
    }
    let mut scene = Scene::load(&c.scene)?;
    if c.strict {
        scene.sim.strict = true;
    }
    let out = c
        .out
        .clone()
        .or_else(|| scene.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok((scene, out))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn strict_faults(strict: bool, total: usize) -> Result<(), Failure> {
    if strict && total > 0 {
        return Err(Failure::Fault(anyhow::anyhow!("{total} faults recorded in strict mode")));
    }
    Ok(())
}

fn cmd_simulate(c: &Common) -> Result<(), Failure> {
    let (scene, out) = load(c)?;
    let every = scene.output.frame_every;
    let frames = out.join("frames");
    if every > 0 {
        fs::create_dir_all(&frames).context("creating frame directory")?;
    }
    let report = simulate(&scene, |n, w| {
        if every > 0 && n % every == 0 {
            write_frame_file(&w.particles, &frames.join(format!("frame_{n:05}.csv")))?;
        }
        Ok(())
    })?;
    write_json(&out.join("report.json"), &report)?;
    println!(
        "simulated {} steps, {} particles, cfl max {:.4}, faults {}",
        report.steps.len(),
        report.particles,
        report.cfl_max,
        report.faults.total()
    );
    strict_faults(scene.sim.strict, report.faults.total())
}

fn cmd_bench(c: &Common) -> Result<(), Failure> {
    let (scene, out) = load(c)?;
    let report = run_benchmark(&scene)?;
    write_json(&out.join("bench_report.json"), &report)?;
    println!("{:<18} {:>9} {:>11} {:>10} {:>9} {:>8}", "model", "thickness", "penetration", "decrease", "rebound", "time_s");
    for r in &report.rows {
        let dec = r.objective_decrease_mean.map_or("-".to_string(), |d| format!("{d:.3}"));
        println!(
            "{:<18} {:>9} {:>11} {:>10} {:>9.4} {:>8.1}",
            r.model, r.thickness, r.penetration_count, dec, r.rebound_metric, r.wall_time_s
        );
    }
    let faults = report.rows.iter().map(|r| r.faults.total()).sum();
    strict_faults(scene.sim.strict, faults)
}

fn cmd_grad_check(c: &Common) -> Result<(), Failure> {
    let (scene, out) = load(c)?;
    let report = grad_check(&scene)?;
    write_json(&out.join("grad_check.json"), &report)?;
    println!("{:>5} {:>5} {:>14} {:>14} {:>10}", "step", "comp", "adjoint", "fd", "rel_err");
    for p in &report.probes {
        println!(
            "{:>5} {:>5} {:>14.6e} {:>14.6e} {:>10.2e}{}",
            p.step,
            p.component,
            p.adjoint,
            p.finite_difference,
            p.rel_error,
            if p.compared { "" } else { "  (below floor)" }
        );
    }
    println!("max relative error {:.3e} over {} compared components", report.max_rel_error, report.compared);
    if !report.pass {
        return Err(Failure::Audit(format!(
            "gradient audit failed: max relative error {:.3e} ({} compared)",
            report.max_rel_error, report.compared
        )));
    }
    Ok(())
}

fn cmd_optimize(c: &Common) -> Result<(), Failure> {
    let (scene, out) = load(c)?;
    let report = run_optimize(&scene, |r| info!("iteration {}: loss {:.6e}", r.iteration, r.total))?;
    let f = fs::File::create(out.join("loss_history.csv")).context("creating loss history")?;
    write_loss_history(&report.history, std::io::BufWriter::new(f))?;
    write_json(&out.join("best_actions.json"), &report.best_actions)?;
    write_json(&out.join("optimize_report.json"), &report)?;
    println!(
        "initial loss {:.6e}, best loss {:.6e} after {} evaluations",
        report.initial_loss,
        report.best_loss,
        report.history.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(c) => cmd_simulate(c),
        Command::BenchContact(c) => cmd_bench(c),
        Command::GradCheck(c) => cmd_grad_check(c),
        Command::Optimize(c) => cmd_optimize(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Schema(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Fault(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
        Err(Failure::Audit(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(4)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
