//! End-to-end runs driven by a [`Scene`]: forward simulation, the
//! shaking-container benchmark, the gradient audit and trajectory
//! optimisation.
//!
//! Runs return plain reports; writing files is left to the caller.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contact::kernels::ContactModel;
use crate::coupling::{backward, rollout, FaultCounters, World};
use crate::error::{Result, SimError};
use crate::rigid::RigidBody;
use crate::scene::{Scene, ShapeSpec};
use crate::trajopt::{
    evaluate_loss, loss_and_gradient, optimize, penetration_count, IterationRecord, LossTracker, ReboundTracker,
};

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub cfl_max: f64,
    pub faults: FaultCounters,
    pub contacts: usize,
    pub objective_decrease_mean: Option<f64>,
    pub loss: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulationReport {
    /// Resolved scene, sufficient to reproduce the run.
    pub scene: Scene,
    pub particles: usize,
    pub steps: Vec<StepSummary>,
    pub faults: FaultCounters,
    pub cfl_max: f64,
    pub objective_decrease_mean: Option<f64>,
    pub final_loss: Vec<f64>,
    pub final_loss_total: f64,
    pub wall_time_s: f64,
}

/// Simulate the scene's initial action sequence.
///
/// `on_step(n, world)` runs after step `n` (1-based) with the updated world.
pub fn simulate(scene: &Scene, mut on_step: impl FnMut(usize, &World) -> Result<()>) -> Result<SimulationReport> {
    let start = Instant::now();
    let built = scene.build()?;
    let mut world = built.world;
    let mut tracker = LossTracker::new(&built.loss);
    let mut steps = Vec::with_capacity(built.actions.len());
    let mut faults = FaultCounters::default();
    let mut decreases = Vec::new();
    let mut cfl_max: f64 = 0.0;
    for (n, a) in built.actions.iter().enumerate() {
        let r = world.step(a)?;
        tracker.observe(&world);
        faults.add(&r.faults);
        cfl_max = cfl_max.max(r.cfl_max);
        decreases.extend_from_slice(&r.objective_decrease);
        steps.push(StepSummary {
            step: n + 1,
            cfl_max: r.cfl_max,
            faults: r.faults,
            contacts: r.contacts,
            objective_decrease_mean: mean(&r.objective_decrease),
            loss: tracker.values(&world)?,
        });
        on_step(n + 1, &world)?;
    }
    let final_loss = tracker.values(&world)?;
    Ok(SimulationReport {
        scene: scene.clone(),
        particles: world.particles.len(),
        final_loss_total: tracker.total(&final_loss),
        final_loss,
        steps,
        faults,
        cfl_max,
        objective_decrease_mean: mean(&decreases),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// benchmark

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    /// Wall thickness in units of the grid spacing.
    pub thickness: f64,
    pub penetration_count: usize,
    pub particles: usize,
    pub objective_decrease_mean: Option<f64>,
    pub wall_time_s: f64,
    pub rebound_metric: f64,
    pub rebound_events: usize,
    pub faults: FaultCounters,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub scene: Scene,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, model: &str, thickness: f64) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.model == model && r.thickness == thickness)
    }
}

/// Relative normal speed of particle velocity `v` at `x` against `body`;
/// positive when separating.
fn relative_normal_speed(body: &RigidBody, x: crate::Vec2, v: crate::Vec2, n: crate::Vec2) -> f64 {
    let s = body.state;
    let r = x - s.pos;
    let vb = s.vel + r.perp().scale(s.omega);
    (v - vb).dot(n)
}

fn bench_one(scene: &Scene, model: &crate::scene::BenchModel, thickness: f64) -> Result<BenchRow> {
    let start = Instant::now();
    let spec = scene.bench.as_ref().expect("bench section");
    let mut s = scene.clone();
    s.contact.model = model.model;
    if let Some(k) = model.k {
        s.contact.k = Some(k);
    }
    let dx = s.dx();
    let ci = s
        .bodies
        .iter()
        .position(|b| b.name == spec.container)
        .expect("validated container");
    if let ShapeSpec::Annulus { thickness: t, .. } = &mut s.bodies[ci].shape {
        *t = thickness * dx;
    }
    s.bodies[ci].inertia = None;
    s.resolve();
    s.validate()?;
    let built = s.build()?;
    let mut world = built.world;
    let mut rebound = ReboundTracker::new(world.particles.len(), s.contact.params().d_hat, spec.rebound_min_speed);
    let mut faults = FaultCounters::default();
    let mut decreases = Vec::new();
    for a in &built.actions {
        let r = world.step(a)?;
        faults.add(&r.faults);
        decreases.extend_from_slice(&r.objective_decrease);
        let body = &world.bodies[ci];
        let bv = [body.state.vel.x, body.state.vel.y, body.state.omega];
        for p in 0..world.particles.len() {
            let x = world.particles.state.x[p];
            let (d, n) = body.sdf_world(x);
            rebound.observe(p, d, relative_normal_speed(body, x, world.particles.state.v[p], n), bv);
        }
    }
    let body = &world.bodies[ci];
    Ok(BenchRow {
        model: model.label(),
        thickness,
        penetration_count: penetration_count(&world.particles.state.x, &body.shape, body.state.pos),
        particles: world.particles.len(),
        objective_decrease_mean: if model.model == ContactModel::Forecast {
            mean(&decreases)
        } else {
            None
        },
        wall_time_s: start.elapsed().as_secs_f64(),
        rebound_metric: rebound.metric(),
        rebound_events: rebound.events,
        faults,
    })
}

/// Run every (model, thickness) pair of the scene's `bench` section.
///
/// Runs execute in parallel; rows come back in model-major order.
pub fn run_benchmark(scene: &Scene) -> Result<BenchReport> {
    let spec = scene
        .bench
        .as_ref()
        .ok_or_else(|| SimError::config("bench", "scene has no bench section"))?;
    let jobs: Vec<_> = spec
        .models
        .iter()
        .flat_map(|m| spec.thicknesses.iter().map(move |t| (m, *t)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|(m, t)| bench_one(scene, m, *t))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchReport {
        scene: scene.clone(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// gradient audit

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradProbe {
    pub step: usize,
    pub component: usize,
    pub adjoint: f64,
    pub finite_difference: f64,
    pub rel_error: f64,
    /// False when both values are below the magnitude floor.
    pub compared: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub scene: Scene,
    pub loss: f64,
    pub probes: Vec<GradProbe>,
    pub compared: usize,
    pub max_rel_error: f64,
    pub pass: bool,
    pub contacts: usize,
}

/// Compare adjoint action gradients with central finite differences.
pub fn grad_check(scene: &Scene) -> Result<GradCheckReport> {
    let spec = scene.grad_check.clone().unwrap_or(crate::scene::GradCheckSpec {
        eps: 1e-5,
        probes: vec![],
        samples: 24,
        tolerance: 1e-3,
        floor: 1e-8,
    });
    let built = scene.build()?;
    if built.loss.is_empty() {
        return Err(SimError::config("loss.terms", "the gradient audit needs at least one loss term"));
    }
    let world = &built.world;
    let actions = &built.actions;
    let dim = world.action_dim();
    let total = dim * actions.len();
    if total == 0 {
        return Err(SimError::config("control", "the scene has no action components"));
    }
    let probes: Vec<(usize, usize)> = if !spec.probes.is_empty() {
        for (i, p) in spec.probes.iter().enumerate() {
            if p[0] >= actions.len() || p[1] >= dim {
                return Err(SimError::config(format!("grad_check.probes[{i}]"), "probe out of range"));
            }
        }
        spec.probes.iter().map(|p| (p[0], p[1])).collect()
    } else if total <= spec.samples {
        (0..total).map(|k| (k / dim, k % dim)).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.sim.seed);
        let mut idx = rand::seq::index::sample(&mut rng, total, spec.samples).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|k| (k / dim, k % dim)).collect()
    };

    let mut w = world.clone();
    let tape = rollout(&mut w, actions, |_, _| {})?;
    let contacts = tape.reports.iter().map(|r| r.contacts).sum();
    let (loss, _, direct) = evaluate_loss(world, &tape, &built.loss)?;
    let grads = backward(world, &tape, &direct)?;

    let eval = |a: &[Vec<f64>]| -> Result<f64> {
        let mut w = world.clone();
        let tape = rollout(&mut w, a, |_, _| {})?;
        Ok(evaluate_loss(world, &tape, &built.loss)?.0)
    };
    let fds = probes
        .par_iter()
        .map(|&(n, k)| {
            let mut a = actions.clone();
            a[n][k] += spec.eps;
            let lp = eval(&a)?;
            a[n][k] -= 2.0 * spec.eps;
            let lm = eval(&a)?;
            Ok((lp - lm) / (2.0 * spec.eps))
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut out = Vec::with_capacity(probes.len());
    let mut max_rel: f64 = 0.0;
    let mut compared = 0;
    for (&(n, k), &fd) in probes.iter().zip(&fds) {
        let an = grads.actions[n][k];
        let scale = an.abs().max(fd.abs());
        let cmp = scale > spec.floor;
        let rel = if cmp { (an - fd).abs() / scale } else { 0.0 };
        if cmp {
            compared += 1;
            max_rel = max_rel.max(rel);
        }
        out.push(GradProbe {
            step: n,
            component: k,
            adjoint: an,
            finite_difference: fd,
            rel_error: rel,
            compared: cmp,
        });
    }
    Ok(GradCheckReport {
        scene: scene.clone(),
        loss,
        probes: out,
        compared,
        pass: compared > 0 && max_rel < spec.tolerance,
        max_rel_error: max_rel,
        contacts,
    })
}

// ---------------------------------------------------------------------------
// optimisation

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub scene: Scene,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub history: Vec<IterationRecord>,
    pub best_actions: Vec<Vec<f64>>,
    pub wall_time_s: f64,
}

/// Optimise the scene's action sequence under its loss and optimiser.
pub fn run_optimize(scene: &Scene, on_iteration: impl FnMut(&IterationRecord)) -> Result<OptimizeReport> {
    let start = Instant::now();
    let cfg = scene
        .optimizer
        .as_ref()
        .ok_or_else(|| SimError::config("optimizer", "scene has no optimizer section"))?;
    let built = scene.build()?;
    if built.loss.is_empty() {
        return Err(SimError::config("loss.terms", "optimisation needs at least one loss term"));
    }
    let r = optimize(&built.world, built.actions, &built.loss, cfg, &built.projection, on_iteration)?;
    Ok(OptimizeReport {
        scene: scene.clone(),
        initial_loss: r.history.first().map_or(f64::NAN, |h| h.total),
        best_loss: r.best_loss,
        history: r.history,
        best_actions: r.best_actions,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Loss of an explicit action sequence, for checking optimiser output.
pub fn evaluate_actions(scene: &Scene, actions: &[Vec<f64>]) -> Result<f64> {
    let built = scene.build()?;
    Ok(loss_and_gradient(&built.world, actions, &built.loss)?.0)
}
