//! Grid, particle-penalty and forecast contact models with their adjoints.
//!
//! Colliders are posed for the current MPM substep by the caller. Rigid
//! colliders carry the canonical 6-vector `[px, py, theta, vx, vy, omega]`;
//! the legal-position correction advances that pose by one more substep.
//! Cloth colliders carry vertex positions and velocities plus a per-particle
//! hit record (nearest face and penetration state) computed by the tracer.

use rayon::prelude::*;

use crate::cloth_contact::mesh::{closest_on_segment, segment_normal};
use crate::cloth_contact::tracing::{cloth_contact_velocity, signed_distance_cloth};
use crate::contact::kernels::{
    bc_friction, body_contact_velocity, legal_position_correction, smooth_blend, ContactParams, Legalized,
};
use crate::contact::sdf::{sdf_query, SdfShape};
use crate::math::{c, local_jacobian, vjp, Real, Vec2, V2};
use crate::mpm::grid::{Grid, Stencil};
use crate::mpm::particles::ParticleState;

pub struct RigidCollider<'a> {
    pub shape: &'a SdfShape,
    pub q: [f64; 6],
}

/// Nearest face and penetration record of one particle against a cloth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClothHit {
    pub face: usize,
    pub z: bool,
    pub free_side: f64,
}

pub struct ClothCollider<'a> {
    pub faces: &'a [[usize; 2]],
    pub x: &'a [Vec2],
    pub v: &'a [Vec2],
    /// One entry per particle; `None` beyond the tracking radius.
    pub hits: &'a [Option<ClothHit>],
}

/// Reaction forces on the colliders during one substep.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContactLedger {
    /// `[fx, fy, torque]` per rigid collider, torque about the centre of mass.
    pub bodies: Vec<[f64; 3]>,
    /// Force per cloth vertex.
    pub cloths: Vec<Vec<Vec2>>,
}

impl ContactLedger {
    pub fn new(rigid: usize, cloth_verts: &[usize]) -> Self {
        ContactLedger {
            bodies: vec![[0.0; 3]; rigid],
            cloths: cloth_verts.iter().map(|&n| vec![Vec2::ZERO; n]).collect(),
        }
    }

    pub fn clear(&mut self) {
        self.bodies.iter_mut().for_each(|b| *b = [0.0; 3]);
        self.cloths.iter_mut().for_each(|c| c.fill(Vec2::ZERO));
    }

    /// `self += other * s`.
    pub fn add_scaled(&mut self, other: &ContactLedger, s: f64) {
        for (a, b) in self.bodies.iter_mut().zip(&other.bodies) {
            for k in 0..3 {
                a[k] += s * b[k];
            }
        }
        for (a, b) in self.cloths.iter_mut().zip(&other.cloths) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y.scale(s);
            }
        }
    }

    /// Total linear force on all colliders.
    pub fn total_force(&self) -> Vec2 {
        let mut f = Vec2::ZERO;
        for b in &self.bodies {
            f += Vec2::new(b[0], b[1]);
        }
        for cl in &self.cloths {
            for v in cl {
                f += *v;
            }
        }
        f
    }
}

/// Gradient of a loss with respect to the collider inputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColliderGrad {
    pub bodies: Vec<[f64; 6]>,
    pub cloth_x: Vec<Vec<Vec2>>,
    pub cloth_v: Vec<Vec<Vec2>>,
}

impl ColliderGrad {
    pub fn new(rigid: usize, cloth_verts: &[usize]) -> Self {
        ColliderGrad {
            bodies: vec![[0.0; 6]; rigid],
            cloth_x: cloth_verts.iter().map(|&n| vec![Vec2::ZERO; n]).collect(),
            cloth_v: cloth_verts.iter().map(|&n| vec![Vec2::ZERO; n]).collect(),
        }
    }
}

/// Per-substep diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ContactStats {
    /// Points (particles or nodes) inside some contact region.
    pub contacts: usize,
    /// Legal-position corrections still inside after the iteration cap.
    pub lpc_failures: usize,
    /// Forecast objective before and after the grid update.
    pub objective_before: f64,
    pub objective_after: f64,
}

impl ContactStats {
    /// Relative decrease of the forecast objective, if it was non-zero.
    pub fn objective_decrease(&self) -> Option<f64> {
        (self.objective_before > 1e-30).then(|| 1.0 - self.objective_after / self.objective_before)
    }
}

#[inline]
fn v2<T: Real>(z: &[T], i: usize) -> V2<T> {
    V2::new(z[i], z[i + 1])
}

#[inline]
fn body_pose<T: Real>(q: &[T]) -> (V2<T>, T, V2<T>, T) {
    (V2::new(q[0], q[1]), q[2], V2::new(q[3], q[4]), q[5])
}

/// Reaction force on a body and torque about its centre of mass for an
/// MPM-side momentum change `dp` at contact point `xc`.
#[inline]
fn reaction<T: Real>(dp: V2<T>, xc: V2<T>, com: V2<T>, dt: f64) -> (V2<T>, T) {
    let f = dp * c::<T>(-1.0 / dt);
    (f, (xc - com).cross(f))
}

// ---------------------------------------------------------------------------
// rigid kernels

/// Forecast response of one particle to one rigid body.
///
/// Inputs `[x(2), v_in(2), m_tilde, q(6)]`, outputs `[v_out(2), F(2), torque]`.
pub fn forecast_rigid_kernel<T: Real>(
    z: &[T; 11],
    shape: &SdfShape,
    p: &ContactParams,
    dt: f64,
) -> ([T; 5], bool, Legalized) {
    let x = v2(z, 0);
    let v_in = v2(z, 2);
    let m = z[4];
    let (pos, th, vel, om) = body_pose(&z[5..]);
    let (d, n) = sdf_query(shape, x, pos, th);
    if d.re() >= p.d_hat {
        return ([v_in.x, v_in.y, c(0.0), c(0.0), c(0.0)], false, Legalized::Untouched);
    }
    let xc = x - n * d;
    let vc = body_contact_velocity(vel, om, pos, xc);
    let v1 = smooth_blend(bc_friction(v_in, vc, n, p.mu), v_in, d, p.beta);
    let pos2 = pos + vel.scale(dt);
    let th2 = th + om * dt;
    let (v2o, st) = legal_position_correction(x, v1, dt, |y| sdf_query(shape, y, pos2, th2));
    let dp = (v2o - v_in) * (m * p.alpha);
    let (f, tau) = reaction(dp, xc, pos, dt);
    ([v2o.x, v2o.y, f.x, f.y, tau], true, st)
}

/// Grid-model response of one node to one rigid body.
///
/// Inputs `[v(2), m, q(6)]` at node position `xn`, outputs `[v_out(2), F(2), torque]`.
pub fn grid_rigid_kernel<T: Real>(
    z: &[T; 9],
    xn: Vec2,
    shape: &SdfShape,
    p: &ContactParams,
    dt: f64,
) -> ([T; 5], bool) {
    let x = xn.lift::<T>();
    let v_in = v2(z, 0);
    let m = z[2];
    let (pos, th, vel, om) = body_pose(&z[3..]);
    let (d, n) = sdf_query(shape, x, pos, th);
    if d.re() >= p.d_hat {
        return ([v_in.x, v_in.y, c(0.0), c(0.0), c(0.0)], false);
    }
    let xc = x - n * d;
    let vc = body_contact_velocity(vel, om, pos, xc);
    let v = smooth_blend(bc_friction(v_in, vc, n, p.mu), v_in, d, p.beta);
    let (f, tau) = reaction((v - v_in) * m, xc, pos, dt);
    ([v.x, v.y, f.x, f.y, tau], true)
}

/// Penalty momentum of one particle against one rigid body.
///
/// Inputs `[x(2), q(6)]`, outputs `[dp(2), F(2), torque]`.
pub fn particle_rigid_kernel<T: Real>(z: &[T; 8], shape: &SdfShape, p: &ContactParams, dt: f64) -> ([T; 5], bool) {
    let x = v2(z, 0);
    let (pos, th, _, _) = body_pose(&z[2..]);
    let (d, n) = sdf_query(shape, x, pos, th);
    if d.re() >= 0.0 {
        return ([c(0.0); 5], false);
    }
    let dp = n * (d * (-p.k * dt));
    let xc = x - n * d;
    let (f, tau) = reaction(dp, xc, pos, dt);
    ([dp.x, dp.y, f.x, f.y, tau], true)
}

// ---------------------------------------------------------------------------
// cloth kernels

/// Forecast response of one particle to one cloth face.
///
/// Inputs `[x(2), pa(2), pb(2), va(2), vb(2), v_in(2), m_tilde]`, outputs
/// `[v_out(2), fa(2), fb(2)]`.
pub fn forecast_cloth_kernel<T: Real>(
    z: &[T; 13],
    hit: &ClothHit,
    p: &ContactParams,
    dt: f64,
) -> ([T; 6], bool, Legalized) {
    let x = v2(z, 0);
    let (pa, pb, va, vb) = (v2(z, 2), v2(z, 4), v2(z, 6), v2(z, 8));
    let v_in = v2(z, 10);
    let m = z[12];
    let (d, n, t) = signed_distance_cloth(x, pa, pb, hit.z, hit.free_side);
    let zero = c::<T>(0.0);
    if d.re() >= p.d_hat {
        return ([v_in.x, v_in.y, zero, zero, zero, zero], false, Legalized::Untouched);
    }
    let vc = cloth_contact_velocity(va, vb, t);
    let v1 = smooth_blend(bc_friction(v_in, vc, n, p.mu), v_in, d, p.beta);
    // supporting line of the face one substep ahead, oriented to the free side
    let (qa, qb) = (pa + va.scale(dt), pb + vb.scale(dt));
    let nf = segment_normal(qa, qb).scale(hit.free_side);
    let (v2o, st) = legal_position_correction(x, v1, dt, |y| ((y - qa).dot(nf), nf));
    let f = (v2o - v_in) * (m * (-p.alpha / dt));
    let fa = f * (c::<T>(1.0) - t);
    let fb = f * t;
    ([v2o.x, v2o.y, fa.x, fa.y, fb.x, fb.y], true, st)
}

/// Penalty momentum of one particle against one cloth face.
///
/// Inputs `[x(2), pa(2), pb(2)]`, outputs `[dp(2), fa(2), fb(2)]`.
pub fn particle_cloth_kernel<T: Real>(z: &[T; 6], hit: &ClothHit, p: &ContactParams, dt: f64) -> ([T; 6], bool) {
    let (d, n, t) = signed_distance_cloth(v2(z, 0), v2(z, 2), v2(z, 4), hit.z, hit.free_side);
    if d.re() >= 0.0 {
        return ([c(0.0); 6], false);
    }
    let dp = n * (d * (-p.k * dt));
    let f = dp * c::<T>(-1.0 / dt);
    let fa = f * (c::<T>(1.0) - t);
    let fb = f * t;
    ([dp.x, dp.y, fa.x, fa.y, fb.x, fb.y], true)
}

fn cloth_inputs(cc: &ClothCollider, face: usize) -> ([usize; 2], [f64; 8]) {
    let [a, b] = cc.faces[face];
    let (pa, pb, va, vb) = (cc.x[a], cc.x[b], cc.v[a], cc.v[b]);
    ([a, b], [pa.x, pa.y, pb.x, pb.y, va.x, va.y, vb.x, vb.y])
}

/// Unsigned closest-point parameter, used for diagnostics.
pub fn cloth_hit_point(cc: &ClothCollider, x: Vec2, face: usize) -> Vec2 {
    let [a, b] = cc.faces[face];
    closest_on_segment(x, cc.x[a], cc.x[b]).1
}

// ---------------------------------------------------------------------------
// per-point reaction records

#[derive(Clone, Copy, Debug)]
enum Reaction {
    Body(usize, [f64; 3]),
    Cloth(usize, [usize; 2], Vec2, Vec2),
}

fn record(ledger: &mut ContactLedger, r: &Reaction) {
    match *r {
        Reaction::Body(b, w) => {
            for k in 0..3 {
                ledger.bodies[b][k] += w[k];
            }
        }
        Reaction::Cloth(ci, [a, b], fa, fb) => {
            ledger.cloths[ci][a] += fa;
            ledger.cloths[ci][b] += fb;
        }
    }
}

// ---------------------------------------------------------------------------
// grid model

/// Apply the grid contact model in place on `grid.v`.
///
/// Cloth colliders are not supported by this model and must be rejected at
/// scene validation.
pub fn grid_contact(
    grid: &mut Grid,
    rigid: &[RigidCollider],
    p: &ContactParams,
    dt: f64,
    ledger: &mut ContactLedger,
) -> ContactStats {
    let mut stats = ContactStats::default();
    if rigid.is_empty() {
        return stats;
    }
    let grid_ref = &*grid;
    let results: Vec<(Vec2, Vec<Reaction>)> = (0..grid_ref.node_count())
        .into_par_iter()
        .map(|idx| {
            let m = grid_ref.m[idx];
            let mut v = grid_ref.v[idx];
            let mut hits = Vec::new();
            if m <= 0.0 {
                return (v, hits);
            }
            let xn = grid_ref.node_pos(idx);
            for (b, rc) in rigid.iter().enumerate() {
                let mut z = [0.0; 9];
                z[0] = v.x;
                z[1] = v.y;
                z[2] = m;
                z[3..].copy_from_slice(&rc.q);
                let (out, hit) = grid_rigid_kernel(&z, xn, rc.shape, p, dt);
                if hit {
                    v = Vec2::new(out[0], out[1]);
                    hits.push(Reaction::Body(b, [out[2], out[3], out[4]]));
                }
            }
            (v, hits)
        })
        .collect();
    for (idx, (v, hits)) in results.into_iter().enumerate() {
        grid.v[idx] = v;
        if !hits.is_empty() {
            stats.contacts += 1;
        }
        for r in &hits {
            record(ledger, r);
        }
    }
    stats
}

/// Adjoint of [`grid_contact`]. `grid_hat` holds the pre-contact velocities.
pub fn grid_contact_backward(
    grid_hat: &Grid,
    rigid: &[RigidCollider],
    p: &ContactParams,
    dt: f64,
    g_v: &[Vec2],
    g_ledger: &ContactLedger,
    g_vhat: &mut [Vec2],
    g_m: &mut [f64],
    g_coll: &mut ColliderGrad,
) {
    if rigid.is_empty() {
        for (a, b) in g_vhat.iter_mut().zip(g_v) {
            *a += *b;
        }
        return;
    }
    let per_node: Vec<(Vec2, f64, Vec<(usize, [f64; 6])>)> = (0..grid_hat.node_count())
        .into_par_iter()
        .map(|idx| {
            let m = grid_hat.m[idx];
            if m <= 0.0 {
                return (g_v[idx], 0.0, Vec::new());
            }
            let xn = grid_hat.node_pos(idx);
            // forward chain inputs
            let mut vs = Vec::with_capacity(rigid.len());
            let mut v = grid_hat.v[idx];
            for rc in rigid {
                vs.push(v);
                let mut z = [0.0; 9];
                z[0] = v.x;
                z[1] = v.y;
                z[2] = m;
                z[3..].copy_from_slice(&rc.q);
                let (out, _) = grid_rigid_kernel(&z, xn, rc.shape, p, dt);
                v = Vec2::new(out[0], out[1]);
            }
            let mut gv = g_v[idx];
            let mut gm = 0.0;
            let mut gq = Vec::new();
            for (b, rc) in rigid.iter().enumerate().rev() {
                let mut z = [0.0; 9];
                z[0] = vs[b].x;
                z[1] = vs[b].y;
                z[2] = m;
                z[3..].copy_from_slice(&rc.q);
                let mut hit = false;
                let (_, jac) = local_jacobian(&z, |zz| {
                    let (o, h) = grid_rigid_kernel(zz, xn, rc.shape, p, dt);
                    hit = h;
                    o
                });
                if !hit {
                    continue;
                }
                let gl = g_ledger.bodies[b];
                let g = vjp(&jac, &[gv.x, gv.y, gl[0], gl[1], gl[2]]);
                gv = Vec2::new(g[0], g[1]);
                gm += g[2];
                gq.push((b, [g[3], g[4], g[5], g[6], g[7], g[8]]));
            }
            (gv, gm, gq)
        })
        .collect();
    for (idx, (gv, gm, gq)) in per_node.into_iter().enumerate() {
        g_vhat[idx] += gv;
        g_m[idx] += gm;
        for (b, g) in gq {
            for k in 0..6 {
                g_coll.bodies[b][k] += g[k];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// particle model

/// Penalty momenta added to each particle's P2G scatter.
pub fn particle_contact(
    state: &ParticleState,
    rigid: &[RigidCollider],
    cloth: &[ClothCollider],
    p: &ContactParams,
    dt: f64,
    extra: &mut [Vec2],
    ledger: &mut ContactLedger,
) -> ContactStats {
    let mut stats = ContactStats::default();
    if rigid.is_empty() && cloth.is_empty() {
        return stats;
    }
    let results: Vec<(Vec2, Vec<Reaction>)> = (0..state.len())
        .into_par_iter()
        .map(|pi| {
            let x = state.x[pi];
            let mut dp = Vec2::ZERO;
            let mut hits = Vec::new();
            for (b, rc) in rigid.iter().enumerate() {
                let mut z = [0.0; 8];
                z[0] = x.x;
                z[1] = x.y;
                z[2..].copy_from_slice(&rc.q);
                let (out, hit) = particle_rigid_kernel(&z, rc.shape, p, dt);
                if hit {
                    dp += Vec2::new(out[0], out[1]);
                    hits.push(Reaction::Body(b, [out[2], out[3], out[4]]));
                }
            }
            for (ci, cc) in cloth.iter().enumerate() {
                let Some(h) = cc.hits[pi] else { continue };
                let (vids, fi) = cloth_inputs(cc, h.face);
                let z = [x.x, x.y, fi[0], fi[1], fi[2], fi[3]];
                let (out, hit) = particle_cloth_kernel(&z, &h, p, dt);
                if hit {
                    dp += Vec2::new(out[0], out[1]);
                    hits.push(Reaction::Cloth(
                        ci,
                        vids,
                        Vec2::new(out[2], out[3]),
                        Vec2::new(out[4], out[5]),
                    ));
                }
            }
            (dp, hits)
        })
        .collect();
    for (pi, (dp, hits)) in results.into_iter().enumerate() {
        extra[pi] += dp;
        if !hits.is_empty() {
            stats.contacts += 1;
        }
        for r in &hits {
            record(ledger, r);
        }
    }
    stats
}

/// Adjoint of [`particle_contact`] given the gradient on the penalty momenta.
#[allow(clippy::too_many_arguments)]
pub fn particle_contact_backward(
    state: &ParticleState,
    rigid: &[RigidCollider],
    cloth: &[ClothCollider],
    p: &ContactParams,
    dt: f64,
    g_extra: &[Vec2],
    g_ledger: &ContactLedger,
    g_x: &mut [Vec2],
    g_coll: &mut ColliderGrad,
) {
    if rigid.is_empty() && cloth.is_empty() {
        return;
    }
    let per: Vec<(Vec2, Vec<CollGrad>)> = (0..state.len())
        .into_par_iter()
        .map(|pi| {
            let x = state.x[pi];
            let ge = g_extra[pi];
            let mut gx = Vec2::ZERO;
            let mut out = Vec::new();
            for (b, rc) in rigid.iter().enumerate() {
                let mut z = [0.0; 8];
                z[0] = x.x;
                z[1] = x.y;
                z[2..].copy_from_slice(&rc.q);
                let mut hit = false;
                let (_, jac) = local_jacobian(&z, |zz| {
                    let (o, h) = particle_rigid_kernel(zz, rc.shape, p, dt);
                    hit = h;
                    o
                });
                if !hit {
                    continue;
                }
                let gl = g_ledger.bodies[b];
                let g = vjp(&jac, &[ge.x, ge.y, gl[0], gl[1], gl[2]]);
                gx += Vec2::new(g[0], g[1]);
                out.push(CollGrad::Body(b, [g[2], g[3], g[4], g[5], g[6], g[7]]));
            }
            for (ci, cc) in cloth.iter().enumerate() {
                let Some(h) = cc.hits[pi] else { continue };
                let (vids, fi) = cloth_inputs(cc, h.face);
                let z = [x.x, x.y, fi[0], fi[1], fi[2], fi[3]];
                let mut hit = false;
                let (_, jac) = local_jacobian(&z, |zz| {
                    let (o, hh) = particle_cloth_kernel(zz, &h, p, dt);
                    hit = hh;
                    o
                });
                if !hit {
                    continue;
                }
                let gla = g_ledger.cloths[ci][vids[0]];
                let glb = g_ledger.cloths[ci][vids[1]];
                let g = vjp(&jac, &[ge.x, ge.y, gla.x, gla.y, glb.x, glb.y]);
                gx += Vec2::new(g[0], g[1]);
                out.push(CollGrad::Cloth(
                    ci,
                    vids,
                    [Vec2::new(g[2], g[3]), Vec2::new(g[4], g[5])],
                    [Vec2::ZERO; 2],
                ));
            }
            (gx, out)
        })
        .collect();
    for (pi, (gx, gc)) in per.into_iter().enumerate() {
        g_x[pi] += gx;
        for g in gc {
            g.apply(g_coll);
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum CollGrad {
    Body(usize, [f64; 6]),
    /// cloth index, vertices, position grads, velocity grads
    Cloth(usize, [usize; 2], [Vec2; 2], [Vec2; 2]),
}

impl CollGrad {
    fn apply(self, g: &mut ColliderGrad) {
        match self {
            CollGrad::Body(b, q) => {
                for k in 0..6 {
                    g.bodies[b][k] += q[k];
                }
            }
            CollGrad::Cloth(ci, [a, b], gx, gv) => {
                g.cloth_x[ci][a] += gx[0];
                g.cloth_x[ci][b] += gx[1];
                g.cloth_v[ci][a] += gv[0];
                g.cloth_v[ci][b] += gv[1];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// forecast model

/// Forecast target of one particle: sequentially applies every collider.
/// Returns the per-collider input velocities, the target and reactions.
fn forecast_particle(
    pi: usize,
    x: Vec2,
    v_init: Vec2,
    m_t: f64,
    rigid: &[RigidCollider],
    cloth: &[ClothCollider],
    p: &ContactParams,
    dt: f64,
) -> (Vec2, Vec<Reaction>, usize) {
    let mut v = v_init;
    let mut hits = Vec::new();
    let mut fails = 0;
    for (b, rc) in rigid.iter().enumerate() {
        let mut z = [0.0; 11];
        z[..2].copy_from_slice(&x.to_array());
        z[2..4].copy_from_slice(&v.to_array());
        z[4] = m_t;
        z[5..].copy_from_slice(&rc.q);
        let (out, hit, st) = forecast_rigid_kernel(&z, rc.shape, p, dt);
        if hit {
            v = Vec2::new(out[0], out[1]);
            hits.push(Reaction::Body(b, [out[2], out[3], out[4]]));
            fails += (st == Legalized::Failed) as usize;
        }
    }
    for (ci, cc) in cloth.iter().enumerate() {
        let Some(h) = cc.hits[pi] else { continue };
        let (vids, fi) = cloth_inputs(cc, h.face);
        let mut z = [0.0; 13];
        z[..2].copy_from_slice(&x.to_array());
        z[2..10].copy_from_slice(&fi);
        z[10..12].copy_from_slice(&v.to_array());
        z[12] = m_t;
        let (out, hit, st) = forecast_cloth_kernel(&z, &h, p, dt);
        if hit {
            v = Vec2::new(out[0], out[1]);
            hits.push(Reaction::Cloth(ci, vids, Vec2::new(out[2], out[3]), Vec2::new(out[4], out[5])));
            fails += (st == Legalized::Failed) as usize;
        }
    }
    (v, hits, fails)
}

fn gather(grid: &Grid, st: &Stencil, x: Vec2) -> (Vec2, f64) {
    let mut v = Vec2::ZERO;
    let mut m = 0.0;
    for (idx, w, _, _) in st.nodes(grid.shape(), x) {
        v += grid.v[idx].scale(w);
        m += grid.m[idx] * w;
    }
    (v, m)
}

/// Apply the forecast contact model in place on `grid.v`.
///
/// `grid.v` must hold the pre-contact velocities and `stencils` the current
/// particle stencils.
#[allow(clippy::too_many_arguments)]
pub fn forecast_contact(
    grid: &mut Grid,
    state: &ParticleState,
    stencils: &[Stencil],
    rigid: &[RigidCollider],
    cloth: &[ClothCollider],
    p: &ContactParams,
    dt: f64,
    ledger: &mut ContactLedger,
) -> ContactStats {
    let mut stats = ContactStats::default();
    if rigid.is_empty() && cloth.is_empty() {
        return stats;
    }
    let g: &Grid = grid;
    let per: Vec<(Vec2, Vec2, Vec<Reaction>, usize)> = (0..state.len())
        .into_par_iter()
        .map(|pi| {
            let x = state.x[pi];
            let (v_init, m_t) = gather(g, &stencils[pi], x);
            let (v_tgt, hits, fails) = forecast_particle(pi, x, v_init, m_t, rigid, cloth, p, dt);
            (v_init - v_tgt, v_tgt, hits, fails)
        })
        .collect();
    if per.iter().all(|r| r.2.is_empty()) {
        return stats;
    }
    let shape = grid.shape();
    let mut dv = vec![Vec2::ZERO; grid.node_count()];
    for (pi, (r, _, hits, fails)) in per.iter().enumerate() {
        if hits.is_empty() {
            continue;
        }
        stats.contacts += 1;
        stats.lpc_failures += fails;
        stats.objective_before += r.norm_sq();
        for h in hits {
            record(ledger, h);
        }
        for (idx, w, _, _) in stencils[pi].nodes(shape, state.x[pi]) {
            dv[idx] += r.scale(w);
        }
    }
    for (v, d) in grid.v.iter_mut().zip(&dv) {
        *v -= d.scale(p.alpha);
    }
    // objective after the update, over all particles
    let g: &Grid = grid;
    stats.objective_after = (0..state.len())
        .into_par_iter()
        .map(|pi| {
            let (v, _) = gather(g, &stencils[pi], state.x[pi]);
            (v - per[pi].1).norm_sq()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    stats
}

/// Adjoint of [`forecast_contact`]. `grid_hat` holds the pre-contact
/// velocities and the grid masses.
#[allow(clippy::too_many_arguments)]
pub fn forecast_contact_backward(
    grid_hat: &Grid,
    state: &ParticleState,
    stencils: &[Stencil],
    rigid: &[RigidCollider],
    cloth: &[ClothCollider],
    p: &ContactParams,
    dt: f64,
    g_v: &[Vec2],
    g_ledger: &ContactLedger,
    g_vhat: &mut [Vec2],
    g_m: &mut [f64],
    g_x: &mut [Vec2],
    g_coll: &mut ColliderGrad,
) {
    for (a, b) in g_vhat.iter_mut().zip(g_v) {
        *a += *b;
    }
    if rigid.is_empty() && cloth.is_empty() {
        return;
    }
    let shape = grid_hat.shape();
    let alpha = p.alpha;
    struct PerParticle {
        gx: Vec2,
        g_vinit: Vec2,
        g_mt: f64,
        coll: Vec<CollGrad>,
    }
    let per: Vec<Option<PerParticle>> = (0..state.len())
        .into_par_iter()
        .map(|pi| {
            let x = state.x[pi];
            let st = &stencils[pi];
            let (v_init, m_t) = gather(grid_hat, st, x);
            // forward chain, recording the input velocity of every collider
            let mut v = v_init;
            let mut rigid_in = Vec::with_capacity(rigid.len());
            let mut any = false;
            for rc in rigid {
                rigid_in.push(v);
                let mut z = [0.0; 11];
                z[..2].copy_from_slice(&x.to_array());
                z[2..4].copy_from_slice(&v.to_array());
                z[4] = m_t;
                z[5..].copy_from_slice(&rc.q);
                let (out, hit, _) = forecast_rigid_kernel(&z, rc.shape, p, dt);
                if hit {
                    v = Vec2::new(out[0], out[1]);
                    any = true;
                }
            }
            let mut cloth_in = Vec::with_capacity(cloth.len());
            for cc in cloth {
                cloth_in.push(v);
                let Some(h) = cc.hits[pi] else { continue };
                let (_, fi) = cloth_inputs(cc, h.face);
                let mut z = [0.0; 13];
                z[..2].copy_from_slice(&x.to_array());
                z[2..10].copy_from_slice(&fi);
                z[10..12].copy_from_slice(&v.to_array());
                z[12] = m_t;
                let (out, hit, _) = forecast_cloth_kernel(&z, &h, p, dt);
                if hit {
                    v = Vec2::new(out[0], out[1]);
                    any = true;
                }
            }
            if !any {
                return None;
            }
            let r = v_init - v;
            // v_i -= alpha w_ip r_p
            let mut g_r = Vec2::ZERO;
            let mut gx = Vec2::ZERO;
            for (idx, w, dw, _) in st.nodes(shape, x) {
                g_r -= g_v[idx].scale(alpha * w);
                gx -= dw.scale(alpha * g_v[idx].dot(r));
            }
            let mut g_vinit = g_r;
            let mut gv = -g_r;
            let mut g_mt = 0.0;
            let mut coll = Vec::new();
            for (ci, cc) in cloth.iter().enumerate().rev() {
                let Some(h) = cc.hits[pi] else { continue };
                let (vids, fi) = cloth_inputs(cc, h.face);
                let vin = cloth_in[ci];
                let mut z = [0.0; 13];
                z[..2].copy_from_slice(&x.to_array());
                z[2..10].copy_from_slice(&fi);
                z[10..12].copy_from_slice(&vin.to_array());
                z[12] = m_t;
                let mut hit = false;
                let (_, jac) = local_jacobian(&z, |zz| {
                    let (o, hh, _) = forecast_cloth_kernel(zz, &h, p, dt);
                    hit = hh;
                    o
                });
                if !hit {
                    continue;
                }
                let gla = g_ledger.cloths[ci][vids[0]];
                let glb = g_ledger.cloths[ci][vids[1]];
                let g = vjp(&jac, &[gv.x, gv.y, gla.x, gla.y, glb.x, glb.y]);
                gx += Vec2::new(g[0], g[1]);
                coll.push(CollGrad::Cloth(
                    ci,
                    vids,
                    [Vec2::new(g[2], g[3]), Vec2::new(g[4], g[5])],
                    [Vec2::new(g[6], g[7]), Vec2::new(g[8], g[9])],
                ));
                gv = Vec2::new(g[10], g[11]);
                g_mt += g[12];
            }
            for (b, rc) in rigid.iter().enumerate().rev() {
                let vin = rigid_in[b];
                let mut z = [0.0; 11];
                z[..2].copy_from_slice(&x.to_array());
                z[2..4].copy_from_slice(&vin.to_array());
                z[4] = m_t;
                z[5..].copy_from_slice(&rc.q);
                let mut hit = false;
                let (_, jac) = local_jacobian(&z, |zz| {
                    let (o, hh, _) = forecast_rigid_kernel(zz, rc.shape, p, dt);
                    hit = hh;
                    o
                });
                if !hit {
                    continue;
                }
                let gl = g_ledger.bodies[b];
                let g = vjp(&jac, &[gv.x, gv.y, gl[0], gl[1], gl[2]]);
                gx += Vec2::new(g[0], g[1]);
                gv = Vec2::new(g[2], g[3]);
                g_mt += g[4];
                coll.push(CollGrad::Body(b, [g[5], g[6], g[7], g[8], g[9], g[10]]));
            }
            g_vinit += gv;
            Some(PerParticle { gx, g_vinit, g_mt, coll })
        })
        .collect();
    for (pi, pp) in per.into_iter().enumerate() {
        let Some(pp) = pp else { continue };
        let x = state.x[pi];
        let mut gx = pp.gx;
        // v_init = sum w v_hat, m_tilde = sum w m
        for (idx, w, dw, _) in stencils[pi].nodes(shape, x) {
            g_vhat[idx] += pp.g_vinit.scale(w);
            g_m[idx] += pp.g_mt * w;
            gx += dw.scale(pp.g_vinit.dot(grid_hat.v[idx]) + pp.g_mt * grid_hat.m[idx]);
        }
        g_x[pi] += gx;
        for g in pp.coll {
            g.apply(g_coll);
        }
    }
}
