//! Reverse-mode adjoints of the MPM stages.
//!
//! Each function takes the forward inputs of its stage (recomputed by the
//! caller) together with the gradient of the stage outputs and accumulates
//! gradients onto the stage inputs.

use crate::math::{local_jacobian, vjp, Mat2, Vec2, M2};
use crate::mpm::constitutive::{stress_momentum, update_deformation};
use crate::mpm::grid::{Grid, Stencil};
use crate::mpm::particles::{ParticleGrad, ParticleProps, ParticleState};
use crate::mpm::transfer::ClampFlags;

/// Adjoint of [`crate::mpm::transfer::p2g`].
#[allow(clippy::too_many_arguments)]
pub fn p2g_backward(
    state: &ParticleState,
    props: &ParticleProps,
    stencils: &[Stencil],
    stress: &[Mat2],
    extra: &[Vec2],
    grid: &Grid,
    g_p: &[Vec2],
    g_m: &[f64],
    g_state: &mut ParticleGrad,
    g_stress: &mut [Mat2],
    g_extra: &mut [Vec2],
) {
    for p in 0..state.len() {
        let m = props.mass[p];
        let affine = stress[p] + state.c[p].scale(m);
        let mom = state.v[p].scale(m) + extra[p];
        let xp = state.x[p];
        let mut gx = Vec2::ZERO;
        let mut gmom = Vec2::ZERO;
        let mut gaff = Mat2::ZERO;
        for (idx, w, dw, off) in stencils[p].nodes(grid.shape(), xp) {
            let gp = g_p[idx];
            let contrib = mom + affine.mul_vec(off);
            gx += dw.scale(gp.dot(contrib) + g_m[idx] * m);
            // d off / d x_p = -I
            gx -= affine.transpose().mul_vec(gp).scale(w);
            gmom += gp.scale(w);
            gaff += gp.outer(off).scale(w);
        }
        g_state.x[p] += gx;
        g_state.v[p] += gmom.scale(m);
        g_state.c[p] += gaff.scale(m);
        g_stress[p] += gaff;
        g_extra[p] += gmom;
    }
}

/// Adjoint of [`crate::mpm::transfer::grid_update`].
pub fn grid_update_backward(grid: &Grid, mass_eps: f64, g_v: &[Vec2], g_p: &mut [Vec2], g_m: &mut [f64]) {
    for idx in 0..grid.node_count() {
        let m = grid.m[idx];
        if m > mass_eps {
            let inv = 1.0 / m;
            g_p[idx] += g_v[idx].scale(inv);
            g_m[idx] -= g_v[idx].dot(grid.p[idx]) * inv * inv;
        }
    }
}

/// Adjoint of [`crate::mpm::transfer::apply_walls`].
pub fn walls_backward(grid: &Grid, g_v: &mut [Vec2]) {
    for (idx, g) in g_v.iter_mut().enumerate() {
        if grid.is_wall(idx) {
            *g = Vec2::ZERO;
        }
    }
}

fn lift_m2<T: Copy>(s: &[T]) -> M2<T> {
    M2::new(s[0], s[1], s[2], s[3])
}

/// Adjoint of [`crate::mpm::transfer::g2p`].
///
/// `grid.v` must hold the final grid velocities used by the forward gather.
#[allow(clippy::too_many_arguments)]
pub fn g2p_backward(
    grid: &Grid,
    state: &ParticleState,
    props: &ParticleProps,
    stencils: &[Stencil],
    dt: f64,
    clamps: &[ClampFlags],
    g_out: &ParticleGrad,
    g_state: &mut ParticleGrad,
    g_grid_v: &mut [Vec2],
) {
    let k = 4.0 / (grid.dx * grid.dx);
    for p in 0..state.len() {
        let xp = state.x[p];
        let mat = props.material[p];

        // recompute the gathered C
        let mut cm = Mat2::ZERO;
        for (idx, w, _, off) in stencils[p].nodes(grid.shape(), xp) {
            cm += grid.v[idx].outer(off).scale(w * k);
        }

        let mut gx_new = g_out.x[p];
        if clamps[p][0] {
            gx_new.x = 0.0;
        }
        if clamps[p][1] {
            gx_new.y = 0.0;
        }
        let gv = g_out.v[p] + gx_new.scale(dt);
        g_state.x[p] += gx_new;

        // deformation update: inputs (C, F, J) -> outputs (F, J)
        let mut inp = [0.0; 9];
        inp[..4].copy_from_slice(&cm.to_array());
        inp[4..8].copy_from_slice(&state.f[p].to_array());
        inp[8] = state.j[p];
        let (_, jac) = local_jacobian(&inp, |z| {
            let (f, j) = update_deformation(&mat, &lift_m2(&z[..4]), &lift_m2(&z[4..8]), z[8], dt);
            [f.xx, f.xy, f.yx, f.yy, j]
        });
        let gf = g_out.f[p].to_array();
        let gdef = vjp(&jac, &[gf[0], gf[1], gf[2], gf[3], g_out.j[p]]);
        let gc = g_out.c[p] + Mat2::from_slice(&gdef[..4]);
        g_state.f[p] += Mat2::from_slice(&gdef[4..8]);
        g_state.j[p] += gdef[8];

        let mut gx = Vec2::ZERO;
        let gct = gc.transpose();
        for (idx, w, dw, off) in stencils[p].nodes(grid.shape(), xp) {
            let vi = grid.v[idx];
            g_grid_v[idx] += gv.scale(w) + gc.mul_vec(off).scale(w * k);
            gx += dw.scale(gv.dot(vi) + k * vi.dot(gc.mul_vec(off)));
            gx -= gct.mul_vec(vi).scale(k * w);
        }
        g_state.x[p] += gx;
    }
}

/// Adjoint of [`crate::mpm::constitutive::compute_stress_momentum`].
pub fn stress_backward(
    state: &ParticleState,
    props: &ParticleProps,
    dt: f64,
    dx: f64,
    g_stress: &[Mat2],
    g_state: &mut ParticleGrad,
) {
    for p in 0..state.len() {
        let g = g_stress[p].to_array();
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        let mat = props.material[p];
        let vol = props.vol[p];
        let mut inp = [0.0; 5];
        inp[..4].copy_from_slice(&state.f[p].to_array());
        inp[4] = state.j[p];
        let (_, jac) = local_jacobian(&inp, |z| {
            let s = stress_momentum(&mat, &lift_m2(&z[..4]), z[4], vol, dt, dx);
            [s.xx, s.xy, s.yx, s.yy]
        });
        let gi = vjp(&jac, &g);
        g_state.f[p] += Mat2::from_slice(&gi[..4]);
        g_state.j[p] += gi[4];
    }
}
