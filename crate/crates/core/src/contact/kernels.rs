//! Per-point contact response: friction boundary condition, smoothness
//! blending and legal-position correction.

use serde::{Deserialize, Serialize};

use crate::math::{c, max_re, min_re, Real, V2};

/// Which MPM contact model handles rigid bodies and cloth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContactModel {
    Grid,
    Particle,
    Forecast,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactParams {
    /// Contact threshold distance.
    pub d_hat: f64,
    /// Coulomb friction coefficient.
    pub mu: f64,
    /// Smoothness decay rate.
    pub beta: f64,
    /// Forecast gradient step.
    pub alpha: f64,
    /// Penalty stiffness of the particle model (N/m).
    pub k: f64,
}

impl ContactParams {
    /// Defaults scaled to grid spacing `dx`.
    pub fn for_dx(dx: f64) -> Self {
        ContactParams {
            d_hat: dx,
            mu: 0.5,
            beta: 3.0 / dx,
            alpha: 0.2,
            k: 400.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.d_hat > 0.0) {
            return Err(format!("d_hat must be positive, got {}", self.d_hat));
        }
        if !(self.mu >= 0.0) {
            return Err(format!("mu must be non-negative, got {}", self.mu));
        }
        if !(self.beta > 0.0) {
            return Err(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(self.k > 0.0) {
            return Err(format!("k must be positive, got {}", self.k));
        }
        Ok(())
    }
}

/// Drop the approaching normal velocity and decay the tangential one.
///
/// Separating contacts are returned unchanged.
pub fn bc_friction<T: Real>(v_in: V2<T>, v_c: V2<T>, n: V2<T>, mu: f64) -> V2<T> {
    let v_rel = v_in - v_c;
    let vn = v_rel.dot(n);
    if vn.re() >= 0.0 {
        return v_in;
    }
    let vt = v_rel - n * vn;
    let vt_norm = vt.norm();
    if vt_norm.re() == 0.0 {
        return v_c;
    }
    // |v_n| = -vn on this branch
    let factor = max_re(c::<T>(1.0) + vn * mu / vt_norm, c(0.0));
    vt * factor + v_c
}

/// Blend weight `min(exp(-beta d), 1)`.
#[inline]
pub fn blend_weight<T: Real>(d: T, beta: f64) -> T {
    min_re((-d * beta).exp(), c(1.0))
}

pub fn smooth_blend<T: Real>(v_out: V2<T>, v_in: V2<T>, d: T, beta: f64) -> V2<T> {
    let s = blend_weight(d, beta);
    v_out * s + v_in * (c::<T>(1.0) - s)
}

/// Outcome of [`legal_position_correction`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Legalized {
    Untouched,
    Corrected,
    /// The trial point was still inside after the iteration cap.
    Failed,
}

pub const LEGAL_ITERATIONS: usize = 3;

/// Push the advected point `x + v dt` out of the solid described by `sdf`.
pub fn legal_position_correction<T: Real>(
    x: V2<T>,
    v: V2<T>,
    dt: f64,
    sdf: impl Fn(V2<T>) -> (T, V2<T>),
) -> (V2<T>, Legalized) {
    let mut v = v;
    let mut status = Legalized::Untouched;
    for _ in 0..LEGAL_ITERATIONS {
        let trial = x + v.scale(dt);
        let (d, n) = sdf(trial);
        if d.re() >= 0.0 {
            return (v, status);
        }
        v -= n * (d * (1.0 / dt));
        status = Legalized::Corrected;
    }
    let (d, _) = sdf(x + v.scale(dt));
    if d.re() < 0.0 {
        status = Legalized::Failed;
    }
    (v, status)
}

/// Velocity of a rigid body at world point `x`.
#[inline]
pub fn body_contact_velocity<T: Real>(v_com: V2<T>, omega: T, com: V2<T>, x: V2<T>) -> V2<T> {
    v_com + (x - com).perp() * omega
}
