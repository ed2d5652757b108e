//! Two-way coupled stepping of MPM, rigid bodies and cloth, and the reverse
//! pass over a checkpoint tape.
//!
//! One manipulator step runs `K` MPM substeps with the manipulators acting as
//! moving boundaries, averages the reaction forces over the substeps and then
//! advances every manipulator once. Boundaries are advanced along their
//! step-start velocity during the substeps.

use rayon::prelude::*;
use serde::Serialize;

use crate::cloth::{adjoint_cloth_step, cloth_step, Cloth, ClothKinematics};
use crate::cloth_contact::hash::{nearest_face, SpatialHash};
use crate::cloth_contact::neighborhood::{build_neighborhoods, vertex_faces, NeighborhoodTable};
use crate::cloth_contact::tracing::{
    free_side, side_test, update_penetration_state, PenetrationState, TraceContext, TraceEvent,
};
use crate::contact::kernels::{ContactModel, ContactParams};
use crate::contact::models::{
    forecast_contact, forecast_contact_backward, grid_contact, grid_contact_backward, particle_contact,
    particle_contact_backward, ClothCollider, ClothHit, ColliderGrad, ContactLedger, RigidCollider,
};
use crate::error::{Result, SimError};
use crate::math::{Mat2, Vec2};
use crate::mpm::adjoint::{g2p_backward, grid_update_backward, p2g_backward, stress_backward, walls_backward};
use crate::mpm::constitutive::compute_stress_momentum;
use crate::mpm::grid::{compute_stencils, Grid, Stencil};
use crate::mpm::particles::{ParticleGrad, ParticleSet, ParticleState};
use crate::mpm::transfer::{apply_walls, cfl_number, g2p, grid_update, mass_epsilon, p2g, ClampFlags};
use crate::rigid::{adjoint_integrate_rigid, canonical_vjp, integrate_rigid, RigidBody, RigidState, Wrench};

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub res: usize,
    /// MPM substep.
    pub dt: f64,
    /// MPM substeps per manipulator step.
    pub substeps: usize,
    pub gravity: Vec2,
    pub cfl_limit: f64,
    /// Treat CFL violations as hard errors.
    pub strict: bool,
    pub model: ContactModel,
    pub params: ContactParams,
    /// Penetration tracing against cloth.
    pub tracing: bool,
    pub neighborhood_depth: usize,
}

impl SimConfig {
    pub fn step_dt(&self) -> f64 {
        self.dt * self.substeps as f64
    }
}

/// Particles driven by a shared per-particle impulse action.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpulseGroup {
    pub name: String,
    pub particles: Vec<usize>,
}

#[derive(Clone, Debug)]
struct ClothTopology {
    neighborhoods: NeighborhoodTable,
    vertex_faces: Vec<Vec<usize>>,
}

/// Full coupled state at a manipulator-step boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub particles: ParticleState,
    pub bodies: Vec<RigidState>,
    pub cloths: Vec<ClothKinematics>,
    pub penetration: Vec<Vec<PenetrationState>>,
}

#[derive(Clone, Debug)]
pub struct World {
    pub config: SimConfig,
    pub particles: ParticleSet,
    pub bodies: Vec<RigidBody>,
    pub cloths: Vec<Cloth>,
    pub impulse_groups: Vec<ImpulseGroup>,
    /// Per cloth, per particle.
    pub penetration: Vec<Vec<PenetrationState>>,
    topology: Vec<ClothTopology>,
}

/// Fault counters accumulated over a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct FaultCounters {
    pub domain_clamps: usize,
    pub lpc_failures: usize,
    pub locality_violations: usize,
    pub cfl_violations: usize,
}

impl FaultCounters {
    pub fn total(&self) -> usize {
        self.domain_clamps + self.lpc_failures + self.locality_violations + self.cfl_violations
    }

    pub fn add(&mut self, o: &FaultCounters) {
        self.domain_clamps += o.domain_clamps;
        self.lpc_failures += o.lpc_failures;
        self.locality_violations += o.locality_violations;
        self.cfl_violations += o.cfl_violations;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepReport {
    pub cfl_max: f64,
    pub faults: FaultCounters,
    /// Particles (or nodes) in contact, summed over substeps.
    pub contacts: usize,
    /// Forecast objective decrease of every substep that had contacts.
    pub objective_decrease: Vec<f64>,
    /// Averaged reaction `[fx, fy, torque]` per body.
    pub body_wrench: Vec<[f64; 3]>,
}

/// Intermediate values of one substep needed by the adjoint.
struct SubstepRecord {
    state: ParticleState,
    stencils: Vec<Stencil>,
    stress: Vec<Mat2>,
    extra: Vec<Vec2>,
    grid_hat: Grid,
    grid_v: Vec<Vec2>,
    clamps: Vec<ClampFlags>,
    eps: f64,
    rigid_q: Vec<[f64; 6]>,
    cloth_x: Vec<Vec<Vec2>>,
    cloth_v: Vec<Vec<Vec2>>,
    hits: Vec<Vec<Option<ClothHit>>>,
}

/// Gradient with respect to a coupled state.
///
/// Body gradients are taken with respect to the canonical 6-vector.
#[derive(Clone, Debug, PartialEq)]
pub struct StateGrad {
    pub particles: ParticleGrad,
    pub bodies: Vec<[f64; 6]>,
    pub cloth_x: Vec<Vec<Vec2>>,
    pub cloth_v: Vec<Vec<Vec2>>,
}

impl StateGrad {
    pub fn zeros(world: &World) -> Self {
        let nv: Vec<usize> = world.cloths.iter().map(|c| c.mesh.verts.len()).collect();
        StateGrad {
            particles: ParticleGrad::zeros(world.particles.len()),
            bodies: vec![[0.0; 6]; world.bodies.len()],
            cloth_x: nv.iter().map(|&n| vec![Vec2::ZERO; n]).collect(),
            cloth_v: nv.iter().map(|&n| vec![Vec2::ZERO; n]).collect(),
        }
    }
}

/// Recorded forward run.
#[derive(Clone, Debug)]
pub struct Tape {
    /// `T + 1` step-boundary states.
    pub checkpoints: Vec<Checkpoint>,
    pub actions: Vec<Vec<f64>>,
    pub reports: Vec<StepReport>,
}

/// Output of [`backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    pub actions: Vec<Vec<f64>>,
    pub initial: StateGrad,
}

fn extrapolate(q: &[f64; 6], tau: f64) -> [f64; 6] {
    [q[0] + q[3] * tau, q[1] + q[4] * tau, q[2] + q[5] * tau, q[3], q[4], q[5]]
}

impl World {
    pub fn new(
        config: SimConfig,
        particles: ParticleSet,
        bodies: Vec<RigidBody>,
        cloths: Vec<Cloth>,
        impulse_groups: Vec<ImpulseGroup>,
    ) -> Result<Self> {
        particles.validate()?;
        let mut topology = Vec::new();
        for c in &cloths {
            let nv = c.mesh.verts.len();
            topology.push(ClothTopology {
                neighborhoods: build_neighborhoods(nv, &c.mesh.faces, config.neighborhood_depth)?,
                vertex_faces: vertex_faces(nv, &c.mesh.faces),
            });
        }
        if config.model == ContactModel::Grid && !cloths.is_empty() {
            return Err(SimError::config("contact.model", "the grid model does not support cloth colliders"));
        }
        for g in &impulse_groups {
            if let Some(&bad) = g.particles.iter().find(|&&i| i >= particles.len()) {
                return Err(SimError::config(
                    format!("control.impulses.{}", g.name),
                    format!("particle index {bad} out of range (n = {})", particles.len()),
                ));
            }
        }
        let mut bodies = bodies;
        bodies.iter_mut().for_each(|b| b.sync());
        let penetration = vec![vec![PenetrationState::default(); particles.len()]; cloths.len()];
        Ok(World {
            config,
            particles,
            bodies,
            cloths,
            impulse_groups,
            penetration,
            topology,
        })
    }

    /// Action components per step: bodies, then cloths, then impulse groups.
    pub fn action_dim(&self) -> usize {
        self.bodies.iter().map(|b| b.action_dim()).sum::<usize>()
            + self.cloths.iter().map(|c| c.action_dim()).sum::<usize>()
            + 2 * self.impulse_groups.len()
    }

    /// Split a flat action into body, cloth and impulse slices.
    fn split_action<'a>(&self, a: &'a [f64]) -> (Vec<&'a [f64]>, Vec<&'a [f64]>, Vec<Vec2>) {
        let mut off = 0;
        let mut bodies = Vec::new();
        for b in &self.bodies {
            bodies.push(&a[off..off + b.action_dim()]);
            off += b.action_dim();
        }
        let mut cloths = Vec::new();
        for c in &self.cloths {
            cloths.push(&a[off..off + c.action_dim()]);
            off += c.action_dim();
        }
        let imp = (0..self.impulse_groups.len())
            .map(|g| Vec2::new(a[off + 2 * g], a[off + 2 * g + 1]))
            .collect();
        (bodies, cloths, imp)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            particles: self.particles.state.clone(),
            bodies: self.bodies.iter().map(|b| b.state).collect(),
            cloths: self
                .cloths
                .iter()
                .map(|c| ClothKinematics {
                    x: c.mesh.verts.clone(),
                    v: c.mesh.vel.clone(),
                })
                .collect(),
            penetration: self.penetration.clone(),
        }
    }

    pub fn restore(&mut self, cp: &Checkpoint) {
        self.particles.state = cp.particles.clone();
        for (b, s) in self.bodies.iter_mut().zip(&cp.bodies) {
            b.state = *s;
        }
        for (c, k) in self.cloths.iter_mut().zip(&cp.cloths) {
            c.mesh.verts = k.x.clone();
            c.mesh.vel = k.v.clone();
        }
        self.penetration = cp.penetration.clone();
    }

    fn cloth_verts(&self) -> Vec<usize> {
        self.cloths.iter().map(|c| c.mesh.verts.len()).collect()
    }

    /// Update penetration states against the cloths posed at `cloth_x` and
    /// return the contact hits.
    fn trace(&mut self, cloth_x: &[Vec<Vec2>], faults: &mut FaultCounters) -> Vec<Vec<Option<ClothHit>>> {
        let radius = 2.0 * self.config.params.d_hat;
        let mut all = Vec::with_capacity(self.cloths.len());
        for ci in 0..self.cloths.len() {
            let mut mesh = self.cloths[ci].mesh.clone();
            mesh.verts = cloth_x[ci].clone();
            let hash = SpatialHash::build(&mesh);
            let topo = &self.topology[ci];
            let ctx = TraceContext {
                mesh: &mesh,
                hash: &hash,
                neighborhoods: &topo.neighborhoods,
                vertex_faces: &topo.vertex_faces,
                tracking_radius: radius,
            };
            let xs = &self.particles.state.x;
            let prev = &self.penetration[ci];
            let results: Vec<(PenetrationState, Option<ClothHit>, bool)> = if self.config.tracing {
                (0..xs.len())
                    .into_par_iter()
                    .map(|p| {
                        let (st, ev) = update_penetration_state(xs[p], &prev[p], &ctx);
                        let hit = |st: &PenetrationState| ClothHit {
                            face: st.face.unwrap_or(0),
                            z: st.z,
                            free_side: free_side(st),
                        };
                        match ev {
                            TraceEvent::Untracked => (st, None, false),
                            TraceEvent::Tracked(_) => (st, Some(hit(&st)), false),
                            TraceEvent::LocalityViolation(_) => (st, Some(hit(&st)), true),
                        }
                    })
                    .collect()
            } else {
                (0..xs.len())
                    .into_par_iter()
                    .map(|p| {
                        let hit = nearest_face(xs[p], &mesh, &hash, Some(radius)).map(|nf| ClothHit {
                            face: nf.face,
                            z: false,
                            free_side: side_test(xs[p], &mesh, &topo.vertex_faces, nf.face) as f64,
                        });
                        (prev[p], hit, false)
                    })
                    .collect()
            };
            let mut hits = Vec::with_capacity(results.len());
            for (p, (st, hit, viol)) in results.into_iter().enumerate() {
                self.penetration[ci][p] = st;
                faults.locality_violations += viol as usize;
                hits.push(hit);
            }
            all.push(hits);
        }
        all
    }

    /// One MPM substep with the colliders at the given poses.
    #[allow(clippy::too_many_arguments)]
    fn substep(
        &mut self,
        rigid_q: &[[f64; 6]],
        cloth_x: &[Vec<Vec2>],
        cloth_v: &[Vec<Vec2>],
        impulses: Option<&[Vec2]>,
        ledger: &mut ContactLedger,
        report: &mut StepReport,
        keep: bool,
    ) -> Result<Option<SubstepRecord>> {
        let cfg = self.config.clone();
        let n = self.particles.len();
        let mut grid = Grid::new(cfg.res);
        let cfl = cfl_number(&self.particles.state.v, cfg.dt, grid.dx);
        report.cfl_max = report.cfl_max.max(cfl);
        if cfl >= cfg.cfl_limit {
            report.faults.cfl_violations += 1;
            if cfg.strict {
                return Err(SimError::Cfl { cfl });
            }
        }
        let hits = self.trace(cloth_x, &mut report.faults);
        let mut stencils = Vec::new();
        compute_stencils(&self.particles.state.x, &grid, &mut stencils)?;
        let mut stress = Vec::new();
        compute_stress_momentum(&self.particles.state, &self.particles.props, cfg.dt, grid.dx, &mut stress)?;
        let mut extra = vec![Vec2::ZERO; n];
        if let Some(imp) = impulses {
            for (g, j) in self.impulse_groups.iter().zip(imp) {
                for &p in &g.particles {
                    extra[p] += *j;
                }
            }
        }
        let rigid: Vec<RigidCollider> = self
            .bodies
            .iter()
            .zip(rigid_q)
            .map(|(b, q)| RigidCollider { shape: &b.shape, q: *q })
            .collect();
        let cloth: Vec<ClothCollider> = (0..self.cloths.len())
            .map(|ci| ClothCollider {
                faces: &self.cloths[ci].mesh.faces,
                x: &cloth_x[ci],
                v: &cloth_v[ci],
                hits: &hits[ci],
            })
            .collect();
        let state = &self.particles.state;
        let props = &self.particles.props;
        let mut stats = Default::default();
        if cfg.model == ContactModel::Particle {
            stats = particle_contact(state, &rigid, &cloth, &cfg.params, cfg.dt, &mut extra, ledger);
        }
        p2g(state, props, &stencils, &stress, &extra, &mut grid);
        let eps = mass_epsilon(self.particles.total_mass(), grid.node_count());
        grid_update(&mut grid, cfg.gravity, cfg.dt, eps);
        let grid_hat = keep.then(|| grid.clone());
        match cfg.model {
            ContactModel::Grid => stats = grid_contact(&mut grid, &rigid, &cfg.params, cfg.dt, ledger),
            ContactModel::Forecast => {
                stats = forecast_contact(&mut grid, state, &stencils, &rigid, &cloth, &cfg.params, cfg.dt, ledger)
            }
            ContactModel::Particle => {}
        }
        report.contacts += stats.contacts;
        report.faults.lpc_failures += stats.lpc_failures;
        if let Some(d) = stats.objective_decrease() {
            report.objective_decrease.push(d);
        }
        apply_walls(&mut grid);
        let mut out = ParticleState::zeros(0);
        let mut clamps = Vec::new();
        report.faults.domain_clamps += g2p(&grid, state, props, &stencils, cfg.dt, &mut out, &mut clamps)?;
        drop(rigid);
        drop(cloth);
        let record = grid_hat.map(|grid_hat| SubstepRecord {
            state: std::mem::replace(&mut self.particles.state, ParticleState::zeros(0)),
            stencils,
            stress,
            extra,
            grid_hat,
            grid_v: grid.v,
            clamps,
            eps,
            rigid_q: rigid_q.to_vec(),
            cloth_x: cloth_x.to_vec(),
            cloth_v: cloth_v.to_vec(),
            hits,
        });
        self.particles.state = out;
        Ok(record)
    }

    /// One coupled manipulator step.
    pub fn step(&mut self, action: &[f64]) -> Result<StepReport> {
        self.step_impl(action, false).map(|(r, _, _)| r)
    }

    #[allow(clippy::type_complexity)]
    fn step_impl(&mut self, action: &[f64], keep: bool) -> Result<(StepReport, Vec<SubstepRecord>, ContactLedger)> {
        if action.len() != self.action_dim() {
            return Err(SimError::config(
                "control",
                format!("action has {} components, expected {}", action.len(), self.action_dim()),
            ));
        }
        let cfg = self.config.clone();
        let k_sub = cfg.substeps;
        let q0: Vec<[f64; 6]> = self.bodies.iter().map(|b| b.state.to_array()).collect();
        let x0: Vec<Vec<Vec2>> = self.cloths.iter().map(|c| c.mesh.verts.clone()).collect();
        let v0: Vec<Vec<Vec2>> = self.cloths.iter().map(|c| c.mesh.vel.clone()).collect();
        let (body_act, cloth_act, impulses) = self.split_action(action);
        let (body_act, cloth_act): (Vec<Vec<f64>>, Vec<Vec<f64>>) = (
            body_act.iter().map(|s| s.to_vec()).collect(),
            cloth_act.iter().map(|s| s.to_vec()).collect(),
        );
        let nv = self.cloth_verts();
        let mut avg = ContactLedger::new(self.bodies.len(), &nv);
        let mut ledger = ContactLedger::new(self.bodies.len(), &nv);
        let mut report = StepReport::default();
        let mut records = Vec::new();
        for k in 0..k_sub {
            let tau = k as f64 * cfg.dt;
            let rq: Vec<[f64; 6]> = q0.iter().map(|q| extrapolate(q, tau)).collect();
            let cx: Vec<Vec<Vec2>> = x0
                .iter()
                .zip(&v0)
                .map(|(x, v)| x.iter().zip(v).map(|(a, b)| *a + b.scale(tau)).collect())
                .collect();
            ledger.clear();
            let imp = (k == 0).then_some(impulses.as_slice());
            if let Some(r) = self.substep(&rq, &cx, &v0, imp, &mut ledger, &mut report, keep)? {
                records.push(r);
            }
            avg.add_scaled(&ledger, 1.0 / k_sub as f64);
        }
        let dt_d = cfg.step_dt();
        for (bi, b) in self.bodies.iter_mut().enumerate() {
            let w = avg.bodies[bi];
            let wrench = Wrench {
                force: Vec2::new(w[0], w[1]),
                torque: w[2],
            };
            integrate_rigid(b, &wrench, &body_act[bi], dt_d, cfg.gravity);
        }
        for (ci, c) in self.cloths.iter_mut().enumerate() {
            cloth_step(c, &avg.cloths[ci], &cloth_act[ci], dt_d, cfg.gravity);
        }
        report.body_wrench = avg.bodies.clone();
        Ok((report, records, avg))
    }

    /// Adjoint of one step starting from checkpoint `cp`. `g` holds the
    /// gradient on the step output (bodies in generalized coordinates) and is
    /// replaced by the gradient on the step input. Returns the action gradient.
    fn step_backward(&self, cp: &Checkpoint, action: &[f64], g: &mut StateGrad) -> Result<Vec<f64>> {
        let mut w = self.clone();
        w.restore(cp);
        let start = w.clone();
        let (_, records, avg) = w.step_impl(action, true)?;
        let cfg = &self.config;
        let k_sub = cfg.substeps;
        let dt_d = cfg.step_dt();
        let (body_act, cloth_act, _) = start.split_action(action);
        let nv = start.cloth_verts();
        let mut g_action = Vec::with_capacity(action.len());

        // manipulator step
        let mut g_avg = ContactLedger::new(start.bodies.len(), &nv);
        let mut g_body_gen = vec![[0.0; 6]; start.bodies.len()];
        for (bi, b) in start.bodies.iter().enumerate() {
            let w3 = avg.bodies[bi];
            let wrench = Wrench {
                force: Vec2::new(w3[0], w3[1]),
                torque: w3[2],
            };
            let r = adjoint_integrate_rigid(
                b,
                &b.state.to_array(),
                &wrench,
                body_act[bi],
                dt_d,
                cfg.gravity,
                &g.bodies[bi],
            );
            g_body_gen[bi] = r.state;
            g_avg.bodies[bi] = r.wrench;
            g_action.extend_from_slice(&r.action[..b.action_dim()]);
        }
        let mut g_cx = Vec::new();
        let mut g_cv = Vec::new();
        for (ci, c) in start.cloths.iter().enumerate() {
            let kin = ClothKinematics {
                x: c.mesh.verts.clone(),
                v: c.mesh.vel.clone(),
            };
            let r = adjoint_cloth_step(
                c,
                &kin,
                &avg.cloths[ci],
                cloth_act[ci],
                dt_d,
                cfg.gravity,
                &g.cloth_x[ci],
                &g.cloth_v[ci],
            );
            g_avg.cloths[ci] = r.ext;
            g_action.extend_from_slice(&r.control);
            g_cx.push(r.x);
            g_cv.push(r.v);
        }
        let mut g_ledger = ContactLedger::new(start.bodies.len(), &nv);
        g_ledger.add_scaled(&g_avg, 1.0 / k_sub as f64);

        // MPM substeps in reverse
        let mut g_imp = vec![Vec2::ZERO; start.impulse_groups.len()];
        let mut g_p = std::mem::replace(&mut g.particles, ParticleGrad::zeros(0));
        let mut g_q0 = vec![[0.0; 6]; start.bodies.len()];
        for (k, rec) in records.iter().enumerate().rev() {
            let tau = k as f64 * cfg.dt;
            let (gp, gc) = start.substep_backward(rec, &g_p, &g_ledger, if k == 0 { Some(&mut g_imp) } else { None });
            g_p = gp;
            for (bi, gq) in gc.bodies.iter().enumerate() {
                let t = &mut g_q0[bi];
                for a in 0..6 {
                    t[a] += gq[a];
                }
                t[3] += tau * gq[0];
                t[4] += tau * gq[1];
                t[5] += tau * gq[2];
            }
            for ci in 0..start.cloths.len() {
                for vi in 0..nv[ci] {
                    g_cx[ci][vi] += gc.cloth_x[ci][vi];
                    g_cv[ci][vi] += gc.cloth_v[ci][vi] + gc.cloth_x[ci][vi].scale(tau);
                }
            }
        }
        for (bi, b) in start.bodies.iter().enumerate() {
            let gq = canonical_vjp(b, &b.state.to_array(), &g_q0[bi]);
            for a in 0..6 {
                g_body_gen[bi][a] += gq[a];
            }
        }
        for j in g_imp {
            g_action.push(j.x);
            g_action.push(j.y);
        }
        g.particles = g_p;
        g.bodies = g_body_gen;
        g.cloth_x = g_cx;
        g.cloth_v = g_cv;
        Ok(g_action)
    }

    fn substep_backward(
        &self,
        rec: &SubstepRecord,
        g_out: &ParticleGrad,
        g_ledger: &ContactLedger,
        g_impulses: Option<&mut Vec<Vec2>>,
    ) -> (ParticleGrad, ColliderGrad) {
        let cfg = &self.config;
        let props = &self.particles.props;
        let n = rec.state.len();
        let nodes = rec.grid_hat.node_count();
        let mut grid = rec.grid_hat.clone();
        grid.v.clone_from(&rec.grid_v);
        let rigid: Vec<RigidCollider> = self
            .bodies
            .iter()
            .zip(&rec.rigid_q)
            .map(|(b, q)| RigidCollider { shape: &b.shape, q: *q })
            .collect();
        let cloth: Vec<ClothCollider> = (0..self.cloths.len())
            .map(|ci| ClothCollider {
                faces: &self.cloths[ci].mesh.faces,
                x: &rec.cloth_x[ci],
                v: &rec.cloth_v[ci],
                hits: &rec.hits[ci],
            })
            .collect();
        let mut g_coll = ColliderGrad::new(self.bodies.len(), &self.cloth_verts());
        let mut g_state = ParticleGrad::zeros(n);
        let mut g_gv = vec![Vec2::ZERO; nodes];
        g2p_backward(&grid, &rec.state, props, &rec.stencils, cfg.dt, &rec.clamps, g_out, &mut g_state, &mut g_gv);
        walls_backward(&grid, &mut g_gv);
        let mut g_vhat = vec![Vec2::ZERO; nodes];
        let mut g_m = vec![0.0; nodes];
        match cfg.model {
            ContactModel::Grid => grid_contact_backward(
                &rec.grid_hat,
                &rigid,
                &cfg.params,
                cfg.dt,
                &g_gv,
                g_ledger,
                &mut g_vhat,
                &mut g_m,
                &mut g_coll,
            ),
            ContactModel::Forecast => forecast_contact_backward(
                &rec.grid_hat,
                &rec.state,
                &rec.stencils,
                &rigid,
                &cloth,
                &cfg.params,
                cfg.dt,
                &g_gv,
                g_ledger,
                &mut g_vhat,
                &mut g_m,
                &mut g_state.x,
                &mut g_coll,
            ),
            ContactModel::Particle => g_vhat.copy_from_slice(&g_gv),
        }
        let mut g_p = vec![Vec2::ZERO; nodes];
        grid_update_backward(&rec.grid_hat, rec.eps, &g_vhat, &mut g_p, &mut g_m);
        let mut g_stress = vec![Mat2::ZERO; n];
        let mut g_extra = vec![Vec2::ZERO; n];
        p2g_backward(
            &rec.state,
            props,
            &rec.stencils,
            &rec.stress,
            &rec.extra,
            &rec.grid_hat,
            &g_p,
            &g_m,
            &mut g_state,
            &mut g_stress,
            &mut g_extra,
        );
        stress_backward(&rec.state, props, cfg.dt, rec.grid_hat.dx, &g_stress, &mut g_state);
        if cfg.model == ContactModel::Particle {
            particle_contact_backward(
                &rec.state,
                &rigid,
                &cloth,
                &cfg.params,
                cfg.dt,
                &g_extra,
                g_ledger,
                &mut g_state.x,
                &mut g_coll,
            );
        }
        if let Some(gi) = g_impulses {
            for (g, grp) in gi.iter_mut().zip(&self.impulse_groups) {
                for &p in &grp.particles {
                    *g += g_extra[p];
                }
            }
        }
        (g_state, g_coll)
    }
}

/// Run `actions.len()` coupled steps from the current state, recording a tape.
///
/// `observer` sees the world after every step (frame dumps, metrics).
pub fn rollout(
    world: &mut World,
    actions: &[Vec<f64>],
    mut observer: impl FnMut(usize, &World),
) -> Result<Tape> {
    let mut checkpoints = vec![world.checkpoint()];
    let mut reports = Vec::with_capacity(actions.len());
    for (n, a) in actions.iter().enumerate() {
        reports.push(world.step(a)?);
        checkpoints.push(world.checkpoint());
        observer(n + 1, world);
    }
    Ok(Tape {
        checkpoints,
        actions: actions.to_vec(),
        reports,
    })
}

/// Reverse pass over a tape.
///
/// `direct[n]` is the partial derivative of the loss with respect to the
/// state at step boundary `n` (`T + 1` entries). `world` supplies the static
/// scene description; its dynamic state is ignored.
pub fn backward(world: &World, tape: &Tape, direct: &[StateGrad]) -> Result<Gradients> {
    let t = tape.actions.len();
    if tape.checkpoints.len() != t + 1 || direct.len() != t + 1 {
        return Err(SimError::Tape(format!(
            "tape has {} checkpoints and {} loss gradients for {t} steps",
            tape.checkpoints.len(),
            direct.len()
        )));
    }
    let to_gen = |cp: &Checkpoint, d: &StateGrad| -> StateGrad {
        let mut out = d.clone();
        for (bi, b) in world.bodies.iter().enumerate() {
            out.bodies[bi] = canonical_vjp(b, &cp.bodies[bi].to_array(), &d.bodies[bi]);
        }
        out
    };
    let mut g = to_gen(&tape.checkpoints[t], &direct[t]);
    let mut actions = vec![Vec::new(); t];
    for n in (0..t).rev() {
        actions[n] = world.step_backward(&tape.checkpoints[n], &tape.actions[n], &mut g)?;
        let d = to_gen(&tape.checkpoints[n], &direct[n]);
        add_state_grad(&mut g, &d);
    }
    Ok(Gradients { actions, initial: g })
}

fn add_state_grad(a: &mut StateGrad, b: &StateGrad) {
    a.particles.add_assign(&b.particles);
    for (x, y) in a.bodies.iter_mut().zip(&b.bodies) {
        for k in 0..6 {
            x[k] += y[k];
        }
    }
    for (x, y) in a.cloth_x.iter_mut().zip(&b.cloth_x) {
        for (p, q) in x.iter_mut().zip(y) {
            *p += *q;
        }
    }
    for (x, y) in a.cloth_v.iter_mut().zip(&b.cloth_v) {
        for (p, q) in x.iter_mut().zip(y) {
            *p += *q;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloth_contact::mesh::ClothMesh;
    use crate::contact::sdf::SdfShape;
    use crate::mpm::particles::Material;
    use crate::rigid::{Actuation, HingeJoint};

    fn config(model: ContactModel) -> SimConfig {
        let res = 32;
        SimConfig {
            res,
            dt: 2e-4,
            substeps: 5,
            gravity: Vec2::new(0.0, -9.8),
            cfl_limit: 0.3,
            strict: false,
            model,
            params: ContactParams::for_dx(1.0 / res as f64),
            tracing: true,
            neighborhood_depth: 2,
        }
    }

    fn block(center: Vec2, side: usize, mat: Material, vel: Vec2) -> ParticleSet {
        let mut ps = ParticleSet::new();
        let h = 0.5 / 32.0;
        for i in 0..side {
            for j in 0..side {
                let off = Vec2::new((i as f64 - (side as f64 - 1.0) / 2.0) * h, (j as f64 - (side as f64 - 1.0) / 2.0) * h);
                ps.push(center + off, vel, 1000.0 * h * h, h * h, mat, 0);
            }
        }
        ps
    }

    fn plate(mode: Actuation, y: f64) -> RigidBody {
        RigidBody {
            name: "plate".into(),
            shape: SdfShape::Box {
                half: Vec2::new(0.2, 0.03),
            },
            mass: 2.0,
            inertia: 2.0 * (0.4f64.powi(2) + 0.06f64.powi(2)) / 12.0,
            gravity_scale: 0.0,
            mode,
            state: RigidState {
                pos: Vec2::new(0.5, y),
                ..Default::default()
            },
        }
    }

    fn fd_check(world: &World, actions: &[Vec<f64>], loss: impl Fn(&World) -> f64, grad: impl Fn(&World) -> StateGrad, probes: &[(usize, usize)]) {
        let mut w = world.clone();
        let tape = rollout(&mut w, actions, |_, _| {}).unwrap();
        let mut direct: Vec<StateGrad> = (0..=actions.len()).map(|_| StateGrad::zeros(world)).collect();
        direct[actions.len()] = grad(&w);
        let g = backward(world, &tape, &direct).unwrap();
        let h = 1e-5;
        for &(n, k) in probes {
            let run = |d: f64| {
                let mut w = world.clone();
                let mut a = actions.to_vec();
                a[n][k] += d;
                rollout(&mut w, &a, |_, _| {}).unwrap();
                loss(&w)
            };
            let fd = (run(h) - run(-h)) / (2.0 * h);
            let an = g.actions[n][k];
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            assert!(err < 1e-3, "action[{n}][{k}]: adjoint {an} vs fd {fd}");
        }
    }

    #[test]
    fn wrench_on_plate_drives_particle_loss() {
        let ps = block(Vec2::new(0.5, 0.56), 6, Material::elastic(200.0, 200.0), Vec2::new(0.0, -0.5));
        let w = World::new(
            SimConfig {
                gravity: Vec2::ZERO,
                ..config(ContactModel::Forecast)
            },
            ps,
            vec![plate(Actuation::Dynamic, 0.47)],
            vec![],
            vec![],
        )
        .unwrap();
        let actions = vec![vec![0.0, 5.0, 0.1]; 6];
        let loss = |w: &World| w.particles.state.x.iter().map(|x| x.y + 0.3 * x.x).sum::<f64>();
        let grad = |w: &World| {
            let mut g = StateGrad::zeros(w);
            g.particles.x.iter_mut().for_each(|v| *v = Vec2::new(0.3, 1.0));
            g
        };
        fd_check(&w, &actions, loss, grad, &[(0, 0), (0, 1), (0, 2), (2, 1)]);
    }

    #[test]
    fn impulse_drives_hinge_angle() {
        let ps = block(Vec2::new(0.62, 0.58), 6, Material::elastic(200.0, 200.0), Vec2::new(0.0, -0.3));
        let mut door = plate(
            Actuation::Hinge(HingeJoint {
                anchor_world: Vec2::new(0.3, 0.5),
                anchor_local: Vec2::new(-0.2, 0.0),
                damping: 0.0,
            }),
            0.5,
        );
        door.state.pos = Vec2::new(0.5, 0.5);
        let groups = vec![ImpulseGroup {
            name: "all".into(),
            particles: (0..36).collect(),
        }];
        let w = World::new(
            SimConfig {
                gravity: Vec2::ZERO,
                ..config(ContactModel::Forecast)
            },
            ps,
            vec![door],
            vec![],
            groups,
        )
        .unwrap();
        let actions = vec![vec![0.0, 0.0, -2e-4]; 6];
        let loss = |w: &World| w.bodies[0].state.theta;
        let grad = |w: &World| {
            let mut g = StateGrad::zeros(w);
            g.bodies[0][2] = 1.0;
            g
        };
        fd_check(&w, &actions, loss, grad, &[(0, 2), (0, 1), (1, 2), (0, 0)]);
    }

    #[test]
    fn cloth_control_drives_particle_loss() {
        let ps = block(Vec2::new(0.5, 0.56), 6, Material::elastic(200.0, 200.0), Vec2::new(0.0, -0.4));
        // right to left, so the positive side faces up toward the blob
        let mesh = ClothMesh::strip(Vec2::new(0.7, 0.48), Vec2::new(0.3, 0.48), 8, 0.5).unwrap();
        let cfg = SimConfig {
            gravity: Vec2::ZERO,
            ..config(ContactModel::Forecast)
        };
        let cloth = Cloth::new("rope", mesh, 100.0, 0.0, 0.5, 0.0, vec![0, 8], cfg.step_dt(), None).unwrap();
        let w = World::new(cfg, ps, vec![], vec![cloth], vec![]).unwrap();
        let actions = vec![vec![0.0, 0.1, 0.0, 0.1]; 6];
        let loss = |w: &World| w.particles.state.x.iter().map(|x| x.y * x.y).sum::<f64>();
        let grad = |w: &World| {
            let mut g = StateGrad::zeros(w);
            for (gx, x) in g.particles.x.iter_mut().zip(&w.particles.state.x) {
                *gx = Vec2::new(0.0, 2.0 * x.y);
            }
            g
        };
        fd_check(&w, &actions, loss, grad, &[(0, 1), (0, 3), (2, 1)]);
    }

    #[test]
    fn rollout_is_deterministic_and_checkpoints_replay() {
        let ps = block(Vec2::new(0.5, 0.6), 6, Material::plastic(200.0, 200.0, 0.05), Vec2::ZERO);
        let mut w = World::new(config(ContactModel::Forecast), ps, vec![plate(Actuation::Dynamic, 0.45)], vec![], vec![])
            .unwrap();
        let w0 = w.clone();
        let actions = vec![vec![0.0, 1.0, 0.0]; 8];
        let tape = rollout(&mut w, &actions, |_, _| {}).unwrap();
        let mut w2 = w0.clone();
        let tape2 = rollout(&mut w2, &actions, |_, _| {}).unwrap();
        assert_eq!(tape.checkpoints, tape2.checkpoints);
        let mut w3 = w0.clone();
        w3.restore(&tape.checkpoints[4]);
        w3.step(&actions[4]).unwrap();
        assert_eq!(w3.checkpoint(), tape.checkpoints[5]);
    }

    #[test]
    fn empty_mpm_leaves_manipulators_standalone() {
        let mut b = plate(Actuation::Dynamic, 0.5);
        b.gravity_scale = 1.0;
        let mut w = World::new(config(ContactModel::Forecast), ParticleSet::new(), vec![b.clone()], vec![], vec![])
            .unwrap();
        for _ in 0..5 {
            w.step(&[0.3, 0.0, 0.1]).unwrap();
            integrate_rigid(&mut b, &Wrench::default(), &[0.3, 0.0, 0.1], w.config.step_dt(), w.config.gravity);
        }
        assert_eq!(w.bodies[0].state, b.state);
    }

    #[test]
    fn zero_action_gradient_for_irrelevant_step() {
        let ps = block(Vec2::new(0.5, 0.7), 4, Material::elastic(200.0, 200.0), Vec2::ZERO);
        let w = World::new(config(ContactModel::Forecast), ps, vec![plate(Actuation::Kinematic, 0.3)], vec![], vec![])
            .unwrap();
        let actions = vec![vec![0.0; 3]; 3];
        let mut wr = w.clone();
        let tape = rollout(&mut wr, &actions, |_, _| {}).unwrap();
        let mut direct: Vec<StateGrad> = (0..=3).map(|_| StateGrad::zeros(&w)).collect();
        direct[3].particles.x.iter_mut().for_each(|g| *g = Vec2::new(0.0, 1.0));
        let g = backward(&w, &tape, &direct).unwrap();
        // the plate is far from the blob: its velocity never reaches it
        for a in &g.actions {
            assert!(a.iter().all(|v| *v == 0.0), "{a:?}");
        }
    }

    #[test]
    fn resting_blob_weight_is_carried_by_plate() {
        let ps = block(Vec2::new(0.5, 0.53 + 0.08), 10, Material::elastic(2000.0, 2000.0), Vec2::ZERO);
        let weight = ps.total_mass() * 9.8;
        let mut cfg = config(ContactModel::Forecast);
        cfg.substeps = 10;
        cfg.dt = 1e-4;
        let mut w = World::new(cfg, ps, vec![plate(Actuation::Kinematic, 0.5)], vec![], vec![]).unwrap();
        let mut last = Vec::new();
        for n in 0..600 {
            let r = w.step(&[0.0; 3]).unwrap();
            if n >= 500 {
                last.push(r.body_wrench[0][1]);
            }
        }
        let mean = last.iter().sum::<f64>() / last.len() as f64;
        assert!((mean + weight).abs() < 0.05 * weight, "support {mean} vs weight {weight}");
    }
}
