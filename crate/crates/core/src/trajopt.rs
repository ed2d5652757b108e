//! Losses, first-order trajectory optimisation and benchmark metrics.

use serde::{Deserialize, Serialize};

use crate::contact::sdf::SdfShape;
use crate::coupling::{backward, rollout, StateGrad, Tape, World};
use crate::error::{Result, SimError};
use crate::math::Vec2;

// ---------------------------------------------------------------------------
// Chamfer distance

/// Uniform-grid point lookup for nearest-neighbour queries.
pub struct PointGrid<'a> {
    pts: &'a [Vec2],
    cell: f64,
    lo: [i64; 2],
    dims: [i64; 2],
    start: Vec<usize>,
    items: Vec<usize>,
}

impl<'a> PointGrid<'a> {
    pub fn build(pts: &'a [Vec2]) -> Self {
        let (mut mn, mut mx) = (Vec2::new(f64::INFINITY, f64::INFINITY), Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
        for p in pts {
            mn = Vec2::new(mn.x.min(p.x), mn.y.min(p.y));
            mx = Vec2::new(mx.x.max(p.x), mx.y.max(p.y));
        }
        let ext = (mx.x - mn.x).max(mx.y - mn.y).max(1e-9);
        let cell = ext / (pts.len() as f64).sqrt().max(1.0);
        let key = |p: Vec2| [(p.x / cell).floor() as i64, (p.y / cell).floor() as i64];
        let lo = key(mn);
        let hi = key(mx);
        let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1];
        let ncell = (dims[0] * dims[1]) as usize;
        let mut count = vec![0usize; ncell + 1];
        let idx_of = |p: Vec2| {
            let k = key(p);
            ((k[0] - lo[0]) * dims[1] + (k[1] - lo[1])) as usize
        };
        for p in pts {
            count[idx_of(*p) + 1] += 1;
        }
        for i in 0..ncell {
            count[i + 1] += count[i];
        }
        let mut fill = count.clone();
        let mut items = vec![0; pts.len()];
        for (i, p) in pts.iter().enumerate() {
            let c = idx_of(*p);
            items[fill[c]] = i;
            fill[c] += 1;
        }
        PointGrid {
            pts,
            cell,
            lo,
            dims,
            start: count,
            items,
        }
    }

    /// Index of the nearest point (lowest index on ties) and squared distance.
    pub fn nearest(&self, x: Vec2) -> (usize, f64) {
        let hi = [self.lo[0] + self.dims[0] - 1, self.lo[1] + self.dims[1] - 1];
        let k = [
            ((x.x / self.cell).floor() as i64).clamp(self.lo[0], hi[0]),
            ((x.y / self.cell).floor() as i64).clamp(self.lo[1], hi[1]),
        ];
        let mut best = (usize::MAX, f64::INFINITY);
        let max_ring = (k[0] - self.lo[0])
            .max(hi[0] - k[0])
            .max(k[1] - self.lo[1])
            .max(hi[1] - k[1]);
        for q in 0..=max_ring {
            // with k clamped into the grid, cells of ring q are at least
            // (q - 1) cells away along one axis
            let ring_min = (q - 1).max(0) as f64 * self.cell;
            if best.0 != usize::MAX && ring_min * ring_min > best.1 {
                break;
            }
            for i in (k[0] - q)..=(k[0] + q) {
                for j in (k[1] - q)..=(k[1] + q) {
                    if (i - k[0]).abs() != q && (j - k[1]).abs() != q {
                        continue;
                    }
                    let (li, lj) = (i - self.lo[0], j - self.lo[1]);
                    if li < 0 || lj < 0 || li >= self.dims[0] || lj >= self.dims[1] {
                        continue;
                    }
                    let c = (li * self.dims[1] + lj) as usize;
                    for &pi in &self.items[self.start[c]..self.start[c + 1]] {
                        let d = (self.pts[pi] - x).norm_sq();
                        if d < best.1 || (d == best.1 && pi < best.0) {
                            best = (pi, d);
                        }
                    }
                }
            }
        }
        best
    }
}

/// Chamfer loss and its gradient with respect to `a`.
///
/// Mean squared nearest distance from `a` to `b` plus the reverse term,
/// with correspondences frozen.
pub fn chamfer(a: &[Vec2], b: &[Vec2]) -> Result<(f64, Vec<Vec2>)> {
    if a.is_empty() || b.is_empty() {
        return Err(SimError::config("loss.chamfer", "point sets must be nonempty"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let gb = PointGrid::build(b);
    let ga = PointGrid::build(a);
    let mut loss = 0.0;
    let mut grad = vec![Vec2::ZERO; a.len()];
    for (i, x) in a.iter().enumerate() {
        let (j, d) = gb.nearest(*x);
        loss += d / na;
        grad[i] += (*x - b[j]).scale(2.0 / na);
    }
    for y in b {
        let (i, d) = ga.nearest(*y);
        loss += d / nb;
        grad[i] += (a[i] - *y).scale(2.0 / nb);
    }
    Ok((loss, grad))
}

/// Exhaustive Chamfer loss, the reference for [`chamfer`].
pub fn chamfer_brute(a: &[Vec2], b: &[Vec2]) -> f64 {
    let one = |a: &[Vec2], b: &[Vec2]| {
        a.iter()
            .map(|x| b.iter().map(|y| (*x - *y).norm_sq()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / a.len() as f64
    };
    one(a, b) + one(b, a)
}

// ---------------------------------------------------------------------------
// losses

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossTerm {
    /// Chamfer distance between the final positions of `block` particles and
    /// a target point set.
    Chamfer {
        #[serde(default = "one")]
        weight: f64,
        #[serde(default)]
        block: Option<u32>,
        target: Vec<[f64; 2]>,
    },
    /// Squared distance of a body's final pose `[x, y, theta]` to a target.
    Pose {
        #[serde(default = "one")]
        weight: f64,
        body: usize,
        target: [f64; 3],
    },
    /// Mean squared body speed over all steps.
    Velocity {
        #[serde(default = "one")]
        weight: f64,
        body: usize,
    },
    /// Squared error of the final joint angle of a hinge body.
    HingeAngle {
        #[serde(default = "one")]
        weight: f64,
        body: usize,
        target: f64,
    },
    /// Mean squared distance of cloth vertices to targets at the final step.
    ClothPose {
        #[serde(default = "one")]
        weight: f64,
        cloth: usize,
        vertices: Vec<usize>,
        targets: Vec<[f64; 2]>,
    },
}

fn one() -> f64 {
    1.0
}

impl LossTerm {
    pub fn weight(&self) -> f64 {
        match self {
            LossTerm::Chamfer { weight, .. }
            | LossTerm::Pose { weight, .. }
            | LossTerm::Velocity { weight, .. }
            | LossTerm::HingeAngle { weight, .. }
            | LossTerm::ClothPose { weight, .. } => *weight,
        }
    }

    pub fn validate(&self, world: &World, path: &str) -> Result<()> {
        if !(self.weight() >= 0.0) {
            return Err(SimError::config(format!("{path}.weight"), "weights must be non-negative"));
        }
        let body_ok = |b: usize| {
            if b < world.bodies.len() {
                Ok(())
            } else {
                Err(SimError::config(format!("{path}.body"), format!("no body with index {b}")))
            }
        };
        match self {
            LossTerm::Chamfer { target, block, .. } => {
                if target.is_empty() {
                    return Err(SimError::config(format!("{path}.target"), "target point set is empty"));
                }
                let n = world
                    .particles
                    .props
                    .block
                    .iter()
                    .filter(|b| block.map_or(true, |k| **b == k))
                    .count();
                if n == 0 {
                    return Err(SimError::config(format!("{path}.block"), "no particles selected"));
                }
                Ok(())
            }
            LossTerm::Pose { body, .. } | LossTerm::Velocity { body, .. } => body_ok(*body),
            LossTerm::HingeAngle { body, .. } => {
                body_ok(*body)?;
                if !matches!(world.bodies[*body].mode, crate::rigid::Actuation::Hinge(_)) {
                    return Err(SimError::config(format!("{path}.body"), "body is not a hinge"));
                }
                Ok(())
            }
            LossTerm::ClothPose {
                cloth,
                vertices,
                targets,
                ..
            } => {
                let Some(c) = world.cloths.get(*cloth) else {
                    return Err(SimError::config(format!("{path}.cloth"), format!("no cloth with index {cloth}")));
                };
                if vertices.len() != targets.len() || vertices.is_empty() {
                    return Err(SimError::config(
                        format!("{path}.targets"),
                        "vertices and targets must be nonempty and of equal length",
                    ));
                }
                if let Some(v) = vertices.iter().find(|&&v| v >= c.mesh.verts.len()) {
                    return Err(SimError::config(format!("{path}.vertices"), format!("vertex {v} out of range")));
                }
                Ok(())
            }
        }
    }
}

/// Evaluate every term on a tape and build the per-step state gradients.
///
/// Returns `(total, per-term values, gradients)`.
pub fn evaluate_loss(world: &World, tape: &Tape, terms: &[LossTerm]) -> Result<(f64, Vec<f64>, Vec<StateGrad>)> {
    let t = tape.actions.len();
    let mut grads: Vec<StateGrad> = (0..=t).map(|_| StateGrad::zeros(world)).collect();
    let last = &tape.checkpoints[t];
    let mut values = Vec::with_capacity(terms.len());
    for term in terms {
        let w = term.weight();
        let v = match term {
            LossTerm::Chamfer { block, target, .. } => {
                let sel: Vec<usize> = (0..world.particles.len())
                    .filter(|&i| block.map_or(true, |k| world.particles.props.block[i] == k))
                    .collect();
                let pts: Vec<Vec2> = sel.iter().map(|&i| last.particles.x[i]).collect();
                let tgt: Vec<Vec2> = target.iter().map(|p| Vec2::new(p[0], p[1])).collect();
                let (l, g) = chamfer(&pts, &tgt)?;
                for (k, &i) in sel.iter().enumerate() {
                    grads[t].particles.x[i] += g[k].scale(w);
                }
                l
            }
            LossTerm::Pose { body, target, .. } => {
                let s = last.bodies[*body];
                let e = [s.pos.x - target[0], s.pos.y - target[1], s.theta - target[2]];
                for k in 0..3 {
                    grads[t].bodies[*body][k] += 2.0 * w * e[k];
                }
                e.iter().map(|x| x * x).sum()
            }
            LossTerm::Velocity { body, .. } => {
                let mut l = 0.0;
                for n in 1..=t {
                    let s = tape.checkpoints[n].bodies[*body];
                    l += s.vel.norm_sq() / t as f64;
                    grads[n].bodies[*body][3] += 2.0 * w * s.vel.x / t as f64;
                    grads[n].bodies[*body][4] += 2.0 * w * s.vel.y / t as f64;
                }
                l
            }
            LossTerm::HingeAngle { body, target, .. } => {
                let e = last.bodies[*body].theta - target;
                grads[t].bodies[*body][2] += 2.0 * w * e;
                e * e
            }
            LossTerm::ClothPose {
                cloth,
                vertices,
                targets,
                ..
            } => {
                let x = &last.cloths[*cloth].x;
                let n = vertices.len() as f64;
                let mut l = 0.0;
                for (&v, tg) in vertices.iter().zip(targets) {
                    let e = x[v] - Vec2::new(tg[0], tg[1]);
                    l += e.norm_sq() / n;
                    grads[t].cloth_x[*cloth][v] += e.scale(2.0 * w / n);
                }
                l
            }
        };
        values.push(v);
    }
    let total = terms.iter().zip(&values).map(|(t, v)| t.weight() * v).sum();
    Ok((total, values, grads))
}

/// Loss values accumulated step by step without keeping a tape.
///
/// After `T` calls to [`LossTracker::observe`] the values equal those of
/// [`evaluate_loss`] on a `T`-step tape.
#[derive(Clone, Debug)]
pub struct LossTracker {
    terms: Vec<LossTerm>,
    speed_sq: Vec<f64>,
    steps: usize,
}

impl LossTracker {
    pub fn new(terms: &[LossTerm]) -> Self {
        LossTracker {
            terms: terms.to_vec(),
            speed_sq: vec![0.0; terms.len()],
            steps: 0,
        }
    }

    /// Record the state reached at the end of a step.
    pub fn observe(&mut self, world: &World) {
        self.steps += 1;
        for (t, acc) in self.terms.iter().zip(&mut self.speed_sq) {
            if let LossTerm::Velocity { body, .. } = t {
                *acc += world.bodies[*body].state.vel.norm_sq();
            }
        }
    }

    /// Unweighted term values for the current state.
    pub fn values(&self, world: &World) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.terms.len());
        for (t, acc) in self.terms.iter().zip(&self.speed_sq) {
            out.push(match t {
                LossTerm::Chamfer { block, target, .. } => {
                    let pts: Vec<Vec2> = (0..world.particles.len())
                        .filter(|&i| block.map_or(true, |k| world.particles.props.block[i] == k))
                        .map(|i| world.particles.state.x[i])
                        .collect();
                    let tgt: Vec<Vec2> = target.iter().map(|p| Vec2::new(p[0], p[1])).collect();
                    chamfer(&pts, &tgt)?.0
                }
                LossTerm::Pose { body, target, .. } => {
                    let s = world.bodies[*body].state;
                    (s.pos.x - target[0]).powi(2) + (s.pos.y - target[1]).powi(2) + (s.theta - target[2]).powi(2)
                }
                LossTerm::Velocity { .. } => {
                    if self.steps == 0 {
                        0.0
                    } else {
                        acc / self.steps as f64
                    }
                }
                LossTerm::HingeAngle { body, target, .. } => (world.bodies[*body].state.theta - target).powi(2),
                LossTerm::ClothPose {
                    cloth,
                    vertices,
                    targets,
                    ..
                } => {
                    let x = &world.cloths[*cloth].mesh.verts;
                    vertices
                        .iter()
                        .zip(targets)
                        .map(|(&v, tg)| (x[v] - Vec2::new(tg[0], tg[1])).norm_sq())
                        .sum::<f64>()
                        / vertices.len() as f64
                }
            });
        }
        Ok(out)
    }

    pub fn total(&self, values: &[f64]) -> f64 {
        self.terms.iter().zip(values).map(|(t, v)| t.weight() * v).sum()
    }
}

/// Write the loss history as CSV `iteration,total,term_0,...`.
pub fn write_loss_history<W: std::io::Write>(history: &[IterationRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let nterms = history.first().map_or(0, |h| h.terms.len());
    let mut header = vec!["iteration".to_string(), "total".to_string()];
    header.extend((0..nterms).map(|i| format!("term_{i}")));
    out.write_record(&header)?;
    for h in history {
        let mut row = vec![h.iteration.to_string(), format!("{:e}", h.total)];
        row.extend(h.terms.iter().map(|t| format!("{t:e}")));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// optimisers

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub iterations: usize,
}

fn default_algorithm() -> Algorithm {
    Algorithm::Adam
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(SimError::config("optimizer.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(SimError::config("optimizer.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(SimError::config("optimizer.beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(SimError::config("optimizer.eps", "must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u32,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], st: &mut AdamState, cfg: &OptimizerConfig, lr: f64) {
    st.t += 1;
    let b1t = 1.0 - cfg.beta1.powi(st.t as i32);
    let b2t = 1.0 - cfg.beta2.powi(st.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
        st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = st.m[i] / b1t;
        let vh = st.v[i] / b2t;
        params[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
}

pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

/// Per-component box `[lo, hi]`; `None` leaves a component free.
pub type Projection = Vec<Option<[f64; 2]>>;

/// Clamp every action component into its box.
pub fn project(actions: &mut [Vec<f64>], boxes: &Projection) {
    for a in actions.iter_mut() {
        for (v, b) in a.iter_mut().zip(boxes) {
            if let Some([lo, hi]) = b {
                *v = v.clamp(*lo, *hi);
            }
        }
    }
}

/// Loss of one optimisation iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub total: f64,
    pub terms: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct OptimizeResult {
    pub best_actions: Vec<Vec<f64>>,
    pub best_loss: f64,
    pub history: Vec<IterationRecord>,
}

/// Generic optimisation loop over a flat parameter vector.
///
/// `eval` returns the loss and gradient. A non-finite loss or gradient halves
/// the learning rate and retakes the previous step once; a second
/// consecutive failure aborts.
pub fn optimize_with<F>(
    init: Vec<Vec<f64>>,
    cfg: &OptimizerConfig,
    boxes: &Projection,
    mut eval: F,
) -> Result<OptimizeResult>
where
    F: FnMut(&[Vec<f64>]) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)>,
{
    cfg.validate()?;
    let mut actions = init;
    project(&mut actions, boxes);
    let shape: Vec<usize> = actions.iter().map(|a| a.len()).collect();
    let n: usize = shape.iter().sum();
    let step = |from: &[Vec<f64>], g: &[f64], adam: &mut AdamState, lr: f64| {
        let mut flat: Vec<f64> = from.iter().flatten().copied().collect();
        match cfg.algorithm {
            Algorithm::Adam => adam_step(&mut flat, g, adam, cfg, lr),
            Algorithm::Sgd => sgd_step(&mut flat, g, lr),
        }
        let mut out = Vec::with_capacity(shape.len());
        let mut off = 0;
        for &len in &shape {
            out.push(flat[off..off + len].to_vec());
            off += len;
        }
        project(&mut out, boxes);
        out
    };
    let mut adam = AdamState::new(n);
    let mut lr = cfg.learning_rate;
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut history = Vec::new();
    // iterate, gradient and optimiser state before the last step
    let mut prev: Option<(Vec<Vec<f64>>, Vec<f64>, AdamState)> = None;
    let mut retried = false;
    let mut it = 0;
    loop {
        let (loss, terms, grad) = eval(&actions)?;
        let flat_g: Vec<f64> = grad.iter().flatten().copied().collect();
        let finite = loss.is_finite() && flat_g.iter().all(|g| g.is_finite());
        if !finite {
            let Some((from, g, st)) = prev.as_ref().filter(|_| !retried) else {
                return Err(SimError::Optimization(format!(
                    "non-finite loss or gradient at iteration {it} (lr = {lr:e})"
                )));
            };
            retried = true;
            lr *= 0.5;
            adam = st.clone();
            actions = step(from, g, &mut adam, lr);
            continue;
        }
        retried = false;
        history.push(IterationRecord {
            iteration: it,
            total: loss,
            terms,
        });
        if best.as_ref().map_or(true, |(b, _)| loss < *b) {
            best = Some((loss, actions.clone()));
        }
        if it == cfg.iterations {
            break;
        }
        let before = adam.clone();
        let next = step(&actions, &flat_g, &mut adam, lr);
        prev = Some((std::mem::replace(&mut actions, next), flat_g, before));
        it += 1;
    }
    let (best_loss, best_actions) = best.expect("at least one evaluation");
    Ok(OptimizeResult {
        best_actions,
        best_loss,
        history,
    })
}

/// Roll out, evaluate the loss and back-propagate once.
pub fn loss_and_gradient(
    world: &World,
    actions: &[Vec<f64>],
    terms: &[LossTerm],
) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    let mut w = world.clone();
    let tape = rollout(&mut w, actions, |_, _| {})?;
    let (total, values, grads) = evaluate_loss(world, &tape, terms)?;
    if !total.is_finite() {
        return Ok((total, values, actions.iter().map(|a| vec![f64::NAN; a.len()]).collect()));
    }
    let g = backward(world, &tape, &grads)?;
    Ok((total, values, g.actions))
}

/// Optimise the action sequence of a scene.
pub fn optimize(
    world: &World,
    init: Vec<Vec<f64>>,
    terms: &[LossTerm],
    cfg: &OptimizerConfig,
    boxes: &Projection,
    mut on_iteration: impl FnMut(&IterationRecord),
) -> Result<OptimizeResult> {
    let mut count = 0;
    optimize_with(init, cfg, boxes, |a| {
        let r = loss_and_gradient(world, a, terms)?;
        on_iteration(&IterationRecord {
            iteration: count,
            total: r.0,
            terms: r.1.clone(),
        });
        count += 1;
        Ok(r)
    })
}

// ---------------------------------------------------------------------------
// benchmark metrics

/// Particles outside the container's outer surface.
///
/// For an annulus container centred at `center`, a particle is outside when
/// its distance from the centre exceeds the outer radius.
pub fn penetration_count(x: &[Vec2], shape: &SdfShape, center: Vec2) -> usize {
    let outer = match shape {
        SdfShape::AnnulusContainer { radius, thickness, .. } => radius + 0.5 * thickness,
        SdfShape::Circle { radius } => *radius,
        _ => f64::INFINITY,
    };
    x.iter().filter(|p| (**p - center).norm() > outer).count()
}

/// Running tally of contact events for the rebound metric.
///
/// An event starts when a particle enters the contact band of a body and
/// ends when it leaves the band. The incoming speed is the approach speed at
/// the last observation before entry, the outgoing speed the separation
/// speed at the first observation after exit; the event is a rebound when
/// the latter exceeds `ratio` times the former. Events during which the
/// body's velocity changed are discarded, so both speeds are measured in one
/// inertial frame.
#[derive(Clone, Debug)]
pub struct ReboundTracker {
    pub ratio: f64,
    /// Incoming relative normal speeds below this are ignored.
    pub min_speed: f64,
    band: f64,
    last: Vec<Option<(f64, [f64; 3])>>,
    open: Vec<Option<(f64, [f64; 3])>>,
    pub events: usize,
    pub rebounds: usize,
    pub discarded: usize,
}

impl ReboundTracker {
    pub fn new(n: usize, band: f64, min_speed: f64) -> Self {
        ReboundTracker {
            ratio: 1.2,
            min_speed,
            band,
            last: vec![None; n],
            open: vec![None; n],
            events: 0,
            rebounds: 0,
            discarded: 0,
        }
    }

    /// Feed one observation of particle `p`: signed distance `d`, relative
    /// normal velocity `vn` (positive separating) and the body velocity
    /// `[vx, vy, omega]`.
    pub fn observe(&mut self, p: usize, d: f64, vn: f64, body_vel: [f64; 3]) {
        let inside = d < self.band;
        match self.open[p] {
            None => {
                if inside {
                    if let Some((prev, v0)) = self.last[p] {
                        if -prev >= self.min_speed {
                            self.open[p] = Some((-prev, v0));
                        }
                    }
                }
            }
            Some((vin, v0)) => {
                if !inside {
                    if v0 != body_vel {
                        self.discarded += 1;
                    } else {
                        self.events += 1;
                        if vn > self.ratio * vin {
                            self.rebounds += 1;
                        }
                    }
                    self.open[p] = None;
                }
            }
        }
        // only pre-contact observations seed an event
        self.last[p] = (!inside).then_some((vn, body_vel));
    }

    /// Fraction of completed events that were rebounds.
    pub fn metric(&self) -> f64 {
        if self.events == 0 {
            0.0
        } else {
            self.rebounds as f64 / self.events as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chamfer_examples() {
        let a = [Vec2::new(0.0, 0.0)];
        let b = [Vec2::new(3.0, 4.0)];
        assert_eq!(chamfer(&a, &b).unwrap().0, 50.0);
        let pts = [Vec2::new(0.1, 0.2), Vec2::new(0.5, 0.5)];
        assert_eq!(chamfer(&pts, &pts).unwrap().0, 0.0);
        assert!(chamfer(&[], &pts).is_err());
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<Vec2> = (0..500).map(|_| Vec2::new(rng.gen(), rng.gen())).collect();
        let b: Vec<Vec2> = (0..300).map(|_| Vec2::new(rng.gen_range(0.2..0.9), rng.gen())).collect();
        let (l, _) = chamfer(&a, &b).unwrap();
        assert!((l - chamfer_brute(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn chamfer_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<Vec2> = (0..20).map(|_| Vec2::new(rng.gen(), rng.gen())).collect();
        let b: Vec<Vec2> = (0..15).map(|_| Vec2::new(rng.gen(), rng.gen())).collect();
        let (_, g) = chamfer(&a, &b).unwrap();
        let h = 1e-7;
        for i in 0..a.len() {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap[i].x += h;
            am[i].x -= h;
            let fd = (chamfer_brute(&ap, &b) - chamfer_brute(&am, &b)) / (2.0 * h);
            assert!((fd - g[i].x).abs() < 1e-6, "{i}: {} vs {fd}", g[i].x);
        }
    }

    proptest! {
        #[test]
        fn chamfer_is_symmetric(
            a in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..30),
            b in prop::collection::vec((-2.0f64..3.0, 0.0f64..0.01), 1..30),
        ) {
            let a: Vec<Vec2> = a.into_iter().map(|(x, y)| Vec2::new(x, y)).collect();
            let b: Vec<Vec2> = b.into_iter().map(|(x, y)| Vec2::new(x, y)).collect();
            let ab = chamfer(&a, &b).unwrap().0;
            let ba = chamfer(&b, &a).unwrap().0;
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
            prop_assert_eq!(chamfer(&a, &a).unwrap().0, 0.0);
            prop_assert!((ab - chamfer_brute(&a, &b)).abs() <= 1e-12 * ab.max(1.0));
        }

        #[test]
        fn projection_is_idempotent(v in prop::collection::vec(-3.0f64..3.0, 1..8)) {
            let boxes: Projection = (0..v.len()).map(|i| (i % 2 == 0).then_some([-1.0, 1.0])).collect();
            let mut once = vec![v.clone()];
            project(&mut once, &boxes);
            let mut twice = once.clone();
            project(&mut twice, &boxes);
            prop_assert_eq!(once, twice);
        }
    }

    fn adam_cfg(lr: f64, iterations: usize) -> OptimizerConfig {
        OptimizerConfig {
            algorithm: Algorithm::Adam,
            learning_rate: lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iterations,
        }
    }

    #[test]
    fn adam_first_step() {
        let cfg = adam_cfg(0.1, 1);
        let mut p = [0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut st, &cfg, cfg.learning_rate);
        // m_hat = 1, v_hat = 1
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        let mut q = [0.3];
        let mut st = AdamState::new(1);
        adam_step(&mut q, &[0.0], &mut st, &cfg, 0.1);
        assert_eq!(q[0], 0.3);
    }

    #[test]
    fn projection_clamps() {
        let mut a = vec![vec![1.5, -2.0]];
        project(&mut a, &vec![Some([-1.0, 1.0]), None]);
        assert_eq!(a, vec![vec![1.0, -2.0]]);
    }

    fn quadratic(a: &[Vec<f64>]) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
        let l: f64 = a.iter().flatten().map(|x| x * x).sum();
        Ok((l, vec![l], a.iter().map(|r| r.iter().map(|x| 2.0 * x).collect()).collect()))
    }

    #[test]
    fn adam_solves_quadratic() {
        let init = vec![vec![1.0, -2.0, 0.5], vec![3.0, 0.1, -1.0]];
        let mut cfg = adam_cfg(0.05, 500);
        let r = optimize_with(init.clone(), &cfg, &vec![], quadratic).unwrap();
        assert!(r.best_actions.iter().flatten().all(|x| x.abs() < 1e-6), "{:?}", r.best_actions);
        cfg.iterations = 0;
        let r = optimize_with(init.clone(), &cfg, &vec![], quadratic).unwrap();
        assert_eq!(r.best_actions, init);
    }

    #[test]
    fn sgd_descends_monotonically() {
        let cfg = OptimizerConfig {
            algorithm: Algorithm::Sgd,
            ..adam_cfg(0.1, 50)
        };
        let r = optimize_with(vec![vec![1.0, -3.0]], &cfg, &vec![], quadratic).unwrap();
        for w in r.history.windows(2) {
            assert!(w[1].total <= w[0].total);
        }
    }

    #[test]
    fn best_so_far_is_returned() {
        // overshooting steps make the loss oscillate
        let cfg = OptimizerConfig {
            algorithm: Algorithm::Sgd,
            ..adam_cfg(1.05, 10)
        };
        let r = optimize_with(vec![vec![1.0]], &cfg, &vec![], quadratic).unwrap();
        let min = r.history.iter().map(|h| h.total).fold(f64::INFINITY, f64::min);
        assert_eq!(r.best_loss, min);
        assert_eq!(quadratic(&r.best_actions).unwrap().0, min);
    }

    #[test]
    fn non_finite_loss_halves_rate_then_aborts() {
        let mut calls = 0;
        let cfg = adam_cfg(0.1, 5);
        let r = optimize_with(vec![vec![1.0]], &cfg, &vec![], |a| {
            calls += 1;
            if calls == 3 {
                return Ok((f64::NAN, vec![f64::NAN], vec![vec![f64::NAN]]));
            }
            quadratic(a)
        });
        assert!(r.is_ok());
        let r = optimize_with(vec![vec![1.0]], &cfg, &vec![], |a| {
            if a[0][0] < 1.0 {
                return Ok((f64::INFINITY, vec![0.0], vec![vec![0.0]]));
            }
            quadratic(a)
        });
        assert!(matches!(r, Err(SimError::Optimization(_))));
    }

    #[test]
    fn rebound_events() {
        let still = [0.0; 3];
        let mut t = ReboundTracker::new(3, 0.01, 0.0);
        // inelastic: arrives at 1, stopped in the band, leaves at 0.2
        t.observe(0, 0.02, -1.0, still);
        t.observe(0, 0.005, 0.0, still);
        t.observe(0, 0.015, 0.2, still);
        // elastic gain: arrives at 1, leaves at 2
        t.observe(1, 0.02, -1.0, still);
        t.observe(1, 0.005, -1.0, still);
        t.observe(1, 0.02, 2.0, still);
        // the wall reversed mid-contact: not an event
        t.observe(2, 0.02, -1.0, [1.0, 0.0, 0.0]);
        t.observe(2, 0.005, -1.0, [1.0, 0.0, 0.0]);
        t.observe(2, 0.02, 2.0, [-1.0, 0.0, 0.0]);
        assert_eq!(t.events, 2);
        assert_eq!(t.discarded, 1);
        assert_eq!(t.rebounds, 1);
        assert_eq!(t.metric(), 0.5);
    }

    #[test]
    fn penetration_count_examples() {
        let shape = SdfShape::AnnulusContainer {
            radius: 0.2,
            thickness: 0.02,
            opening: 0.0,
        };
        let c = Vec2::new(0.5, 0.5);
        let mut x = vec![Vec2::new(0.5, 0.5), Vec2::new(0.6, 0.5)];
        assert_eq!(penetration_count(&x, &shape, c), 0);
        x.push(Vec2::new(0.75, 0.5));
        assert_eq!(penetration_count(&x, &shape, c), 1);
    }
}
