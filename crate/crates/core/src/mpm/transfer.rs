//! MLS-MPM particle/grid transfers.

use crate::error::{Result, SimError};
use crate::math::{Mat2, Vec2};
use crate::mpm::constitutive::update_deformation;
use crate::mpm::grid::{Grid, Stencil};
use crate::mpm::particles::{ParticleProps, ParticleState};

/// Scatter mass and momentum to the grid.
///
/// `stress[p]` is the affine stress momentum term and `extra[p]` any
/// additional particle momentum (penalty forces, registered impulses).
pub fn p2g(
    state: &ParticleState,
    props: &ParticleProps,
    stencils: &[Stencil],
    stress: &[Mat2],
    extra: &[Vec2],
    grid: &mut Grid,
) {
    grid.clear();
    for p in 0..state.len() {
        let m = props.mass[p];
        let affine = stress[p] + state.c[p].scale(m);
        let mom = state.v[p].scale(m) + extra[p];
        let xp = state.x[p];
        for (idx, w, _, off) in stencils[p].nodes(grid.shape(), xp) {
            grid.m[idx] += w * m;
            grid.p[idx] += (mom + affine.mul_vec(off)).scale(w);
        }
    }
}

/// Threshold below which a node is treated as empty.
pub fn mass_epsilon(total_mass: f64, node_count: usize) -> f64 {
    1e-12 * total_mass / node_count.max(1) as f64
}

/// Momentum to velocity plus gravity. Empty nodes get zero velocity.
pub fn grid_update(grid: &mut Grid, gravity: Vec2, dt: f64, mass_eps: f64) {
    for idx in 0..grid.node_count() {
        let m = grid.m[idx];
        grid.v[idx] = if m > mass_eps {
            grid.p[idx].scale(1.0 / m) + gravity.scale(dt)
        } else {
            Vec2::ZERO
        };
    }
}

/// Sticky walls: zero velocity on the boundary band.
pub fn apply_walls(grid: &mut Grid) {
    for idx in 0..grid.node_count() {
        if grid.is_wall(idx) {
            grid.v[idx] = Vec2::ZERO;
        }
    }
}

/// Per-particle record of which coordinates hit the domain clamp in G2P.
pub type ClampFlags = [bool; 2];

/// Gather velocities back and advect.
///
/// Returns the number of particles that had to be clamped into the domain.
pub fn g2p(
    grid: &Grid,
    state: &ParticleState,
    props: &ParticleProps,
    stencils: &[Stencil],
    dt: f64,
    out: &mut ParticleState,
    clamps: &mut Vec<ClampFlags>,
) -> Result<usize> {
    let n = state.len();
    let k = 4.0 / (grid.dx * grid.dx);
    let (lo, hi) = grid.safe_bounds();
    out.x.resize(n, Vec2::ZERO);
    out.v.resize(n, Vec2::ZERO);
    out.c.resize(n, Mat2::ZERO);
    out.f.resize(n, Mat2::ZERO);
    out.j.resize(n, 0.0);
    clamps.clear();
    let mut faults = 0;
    for p in 0..n {
        let xp = state.x[p];
        let mut v = Vec2::ZERO;
        let mut cm = Mat2::ZERO;
        for (idx, w, _, off) in stencils[p].nodes(grid.shape(), xp) {
            let vi = grid.v[idx];
            v += vi.scale(w);
            cm += vi.outer(off).scale(w * k);
        }
        let (f, j) = update_deformation(&props.material[p], &cm, &state.f[p], state.j[p], dt);
        let mut x = xp + v.scale(dt);
        let mut flags = [false; 2];
        if !(x.x >= lo && x.x <= hi) {
            x.x = x.x.clamp(lo, hi);
            flags[0] = true;
        }
        if !(x.y >= lo && x.y <= hi) {
            x.y = x.y.clamp(lo, hi);
            flags[1] = true;
        }
        if flags[0] || flags[1] {
            faults += 1;
        }
        if !(x.is_finite() && v.is_finite() && f.is_finite() && j.is_finite()) {
            return Err(SimError::ParticleFault {
                particle: p,
                reason: "non-finite state after G2P".into(),
            });
        }
        out.x[p] = x;
        out.v[p] = v;
        out.c[p] = cm;
        out.f[p] = f;
        out.j[p] = j;
        clamps.push(flags);
    }
    Ok(faults)
}

/// Largest `|v| dt / dx` over particles.
pub fn cfl_number(v: &[Vec2], dt: f64, dx: f64) -> f64 {
    v.iter().map(|v| v.norm()).fold(0.0, f64::max) * dt / dx
}

/// Error when the CFL number reaches `limit`.
pub fn cfl_check(v: &[Vec2], dt: f64, dx: f64, limit: f64) -> Result<f64> {
    let cfl = cfl_number(v, dt, dx);
    if cfl >= limit {
        Err(SimError::Cfl { cfl })
    } else {
        Ok(cfl)
    }
}
