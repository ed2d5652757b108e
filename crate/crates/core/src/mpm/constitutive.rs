//! Fixed-corotated elasticity, singular-value clamp plasticity and a
//! pressure-only weakly compressible liquid.

use crate::error::{Result, SimError};
use crate::math::{c, clamp_re, polar_rotation, svd2, Mat2, Real, M2};
use crate::mpm::particles::{Material, MaterialKind, ParticleProps, ParticleState};

/// Kirchhoff stress `tau = P F^T`.
pub fn kirchhoff_stress<T: Real>(mat: &Material, f: &M2<T>, j: T) -> M2<T> {
    match mat.kind {
        MaterialKind::Elastic | MaterialKind::Plastic => {
            let r = polar_rotation(f);
            let det = f.det();
            let dev = (*f - r).mul_mat(&f.transpose()).scale(2.0 * mat.mu);
            let vol = (det - c::<T>(1.0)) * det * mat.lambda;
            dev + M2::diag(vol, vol)
        }
        MaterialKind::Liquid => {
            let p = (j - c::<T>(1.0)) * j * mat.lambda;
            M2::diag(p, p)
        }
    }
}

/// Scale that turns Kirchhoff stress into the MLS-MPM affine momentum term.
#[inline]
pub fn stress_scale(vol: f64, dt: f64, dx: f64) -> f64 {
    -dt * vol * 4.0 / (dx * dx)
}

/// Internal-force momentum term of one particle, as the D x D affine matrix
/// that multiplies the node offset `x_i - x_p` during P2G.
pub fn stress_momentum<T: Real>(mat: &Material, f: &M2<T>, j: T, vol: f64, dt: f64, dx: f64) -> M2<T> {
    kirchhoff_stress(mat, f, j).scale(stress_scale(vol, dt, dx))
}

/// Evaluate the stress momentum term of every particle.
pub fn compute_stress_momentum(
    state: &ParticleState,
    props: &ParticleProps,
    dt: f64,
    dx: f64,
    out: &mut Vec<Mat2>,
) -> Result<()> {
    out.clear();
    for p in 0..state.len() {
        let mat = &props.material[p];
        if mat.is_solid() && !(state.f[p].det() > 0.0) {
            return Err(SimError::ParticleFault {
                particle: p,
                reason: format!("det(F) = {} is not positive", state.f[p].det()),
            });
        }
        let s = stress_momentum(mat, &state.f[p], state.j[p], props.vol[p], dt, dx);
        if !s.is_finite() {
            return Err(SimError::ParticleFault {
                particle: p,
                reason: "non-finite stress".into(),
            });
        }
        out.push(s);
    }
    Ok(())
}

/// Clamp the singular values of `f` into `[1 - yield, 1 + yield]`.
pub fn plastic_clamp<T: Real>(f: &M2<T>, yield_stress: f64) -> M2<T> {
    let lo = 1.0 - yield_stress;
    let hi = 1.0 + yield_stress;
    let svd = svd2(f);
    let (s0, s1) = (svd.s0.re(), svd.s1.re());
    if s0 >= lo && s0 <= hi && s1 >= lo && s1 <= hi {
        return *f;
    }
    let c0 = clamp_re(svd.s0, lo, hi);
    let c1 = clamp_re(svd.s1, lo, hi);
    if (s0 - s1).abs() < 1e-12 {
        // isotropic scaling: the factorisation angles are not individually
        // defined, only their sum.
        let ang = svd.phi + svd.theta;
        return M2::rotation(ang.cos(), ang.sin()).mul_scalar(c0);
    }
    svd.compose(c0, c1)
}

/// `F <- post((I + dt C) F)` and the liquid volume-ratio update.
pub fn update_deformation<T: Real>(mat: &Material, c_new: &M2<T>, f: &M2<T>, j: T, dt: f64) -> (M2<T>, T) {
    match mat.kind {
        MaterialKind::Elastic => ((M2::identity() + c_new.scale(dt)).mul_mat(f), j),
        MaterialKind::Plastic => {
            let trial = (M2::identity() + c_new.scale(dt)).mul_mat(f);
            (plastic_clamp(&trial, mat.yield_stress), j)
        }
        MaterialKind::Liquid => (*f, j * (c::<T>(1.0) + c_new.trace() * dt)),
    }
}
