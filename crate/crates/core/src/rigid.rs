//! Planar rigid bodies: free (dynamic), kinematic and single-hinge.
//!
//! The body frame origin is the centre of mass. Every body exposes a
//! canonical 6-vector `[px, py, theta, vx, vy, omega]`; a hinge body is
//! parameterised by its joint angle and rate only, stored in the `theta` and
//! `omega` slots, and its canonical position and velocity are derived from
//! them.

use crate::contact::sdf::{sdf_query, SdfShape};
use crate::math::{c, local_jacobian, vjp, Real, Vec2, V2};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HingeJoint {
    /// Fixed pivot in world coordinates.
    pub anchor_world: Vec2,
    /// Pivot in body coordinates (relative to the centre of mass).
    pub anchor_local: Vec2,
    /// Viscous joint damping (N m s).
    pub damping: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Actuation {
    /// Follows a prescribed twist; ignores forces.
    Kinematic,
    /// Free body driven by contact forces, gravity and an action wrench.
    Dynamic,
    /// One rotational degree of freedom about a fixed pivot, driven by torque.
    Hinge(HingeJoint),
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RigidState {
    pub pos: Vec2,
    pub theta: f64,
    pub vel: Vec2,
    pub omega: f64,
}

impl RigidState {
    pub fn to_array(&self) -> [f64; 6] {
        [self.pos.x, self.pos.y, self.theta, self.vel.x, self.vel.y, self.omega]
    }

    pub fn from_array(a: &[f64; 6]) -> Self {
        RigidState {
            pos: Vec2::new(a[0], a[1]),
            theta: a[2],
            vel: Vec2::new(a[3], a[4]),
            omega: a[5],
        }
    }
}

/// Force and torque (about the centre of mass) acting on a body.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Wrench {
    pub force: Vec2,
    pub torque: f64,
}

impl Wrench {
    pub fn to_array(&self) -> [f64; 3] {
        [self.force.x, self.force.y, self.torque]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RigidBody {
    pub name: String,
    pub shape: SdfShape,
    pub mass: f64,
    /// Rotational inertia about the centre of mass.
    pub inertia: f64,
    pub gravity_scale: f64,
    pub mode: Actuation,
    pub state: RigidState,
}

impl RigidBody {
    /// Number of action components per step.
    pub fn action_dim(&self) -> usize {
        match self.mode {
            Actuation::Kinematic | Actuation::Dynamic => 3,
            Actuation::Hinge(_) => 1,
        }
    }

    /// Re-derive the canonical position and velocity of a hinge body.
    pub fn sync(&mut self) {
        let canon = canonical(self, &self.state.to_array());
        self.state = RigidState::from_array(&canon);
    }

    /// Signed distance and normal of the posed body at a world point.
    pub fn sdf_world(&self, x: Vec2) -> (f64, Vec2) {
        rigid_sdf_world(&self.shape, &self.state.to_array(), x)
    }
}

pub fn rigid_sdf_world<T: Real>(shape: &SdfShape, canon: &[T; 6], x: V2<T>) -> (T, V2<T>) {
    sdf_query(shape, x, V2::new(canon[0], canon[1]), canon[2])
}

fn hinge_com<T: Real>(j: &HingeJoint, theta: T) -> (V2<T>, V2<T>) {
    let ra = j.anchor_local.lift::<T>().rotate(theta.cos(), theta.sin());
    (j.anchor_world.lift::<T>() - ra, ra)
}

/// Canonical 6-vector from generalized coordinates.
pub fn canonical_generic<T: Real>(body: &RigidBody, q: &[T; 6]) -> [T; 6] {
    match body.mode {
        Actuation::Hinge(j) => {
            let (com, ra) = hinge_com(&j, q[2]);
            // d/dt (-R a) = -omega perp(R a)
            let vel = ra.perp() * (-q[5]);
            [com.x, com.y, q[2], vel.x, vel.y, q[5]]
        }
        _ => *q,
    }
}

pub fn canonical(body: &RigidBody, q: &[f64; 6]) -> [f64; 6] {
    canonical_generic(body, q)
}

/// Pull a gradient on the canonical 6-vector back to generalized coordinates.
pub fn canonical_vjp(body: &RigidBody, q: &[f64; 6], g: &[f64; 6]) -> [f64; 6] {
    match body.mode {
        Actuation::Hinge(_) => {
            let (_, jac) = local_jacobian(q, |z| canonical_generic(body, z));
            vjp(&jac, g)
        }
        _ => *g,
    }
}

/// One semi-implicit Euler step in generalized coordinates.
pub fn integrate_generic<T: Real>(
    body: &RigidBody,
    q: &[T; 6],
    wrench: &[T; 3],
    action: &[T; 3],
    dt: f64,
    gravity: Vec2,
) -> [T; 6] {
    let g = gravity.scale(body.gravity_scale);
    match body.mode {
        Actuation::Kinematic => [
            q[0] + action[0] * dt,
            q[1] + action[1] * dt,
            q[2] + action[2] * dt,
            action[0],
            action[1],
            action[2],
        ],
        Actuation::Dynamic => {
            let vx = q[3] + (wrench[0] + action[0]) * (dt / body.mass) + g.x * dt;
            let vy = q[4] + (wrench[1] + action[1]) * (dt / body.mass) + g.y * dt;
            let w = q[5] + (wrench[2] + action[2]) * (dt / body.inertia);
            [q[0] + vx * dt, q[1] + vy * dt, q[2] + w * dt, vx, vy, w]
        }
        Actuation::Hinge(j) => {
            let i_anchor = body.inertia + body.mass * j.anchor_local.norm_sq();
            let (_, ra) = hinge_com(&j, q[2]);
            let r = -ra;
            let f = V2::new(wrench[0] + c::<T>(body.mass * g.x), wrench[1] + c::<T>(body.mass * g.y));
            let torque = wrench[2] + r.cross(f) - q[5] * j.damping + action[0];
            let w = q[5] + torque * (dt / i_anchor);
            let th = q[2] + w * dt;
            canonical_generic(body, &[q[0], q[1], th, q[3], q[4], w])
        }
    }
}

fn pad_action(action: &[f64]) -> [f64; 3] {
    let mut a = [0.0; 3];
    for (d, s) in a.iter_mut().zip(action) {
        *d = *s;
    }
    a
}

/// Advance the body one manipulator step with the averaged contact wrench.
pub fn integrate_rigid(body: &mut RigidBody, wrench: &Wrench, action: &[f64], dt: f64, gravity: Vec2) {
    let q = body.state.to_array();
    let next = integrate_generic(body, &q, &wrench.to_array(), &pad_action(action), dt, gravity);
    body.state = RigidState::from_array(&next);
}

/// Gradients of one step with respect to its inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RigidStepGrad {
    pub state: [f64; 6],
    pub wrench: [f64; 3],
    pub action: [f64; 3],
}

/// Reverse-mode derivative of [`integrate_rigid`].
///
/// `g_next` is the gradient on the canonical next state; the returned state
/// gradient is in generalized coordinates.
pub fn adjoint_integrate_rigid(
    body: &RigidBody,
    q: &[f64; 6],
    wrench: &Wrench,
    action: &[f64],
    dt: f64,
    gravity: Vec2,
    g_next: &[f64; 6],
) -> RigidStepGrad {
    let mut x = [0.0; 12];
    x[..6].copy_from_slice(q);
    x[6..9].copy_from_slice(&wrench.to_array());
    x[9..].copy_from_slice(&pad_action(action));
    let (_, jac) = local_jacobian(&x, |z| {
        let qq = [z[0], z[1], z[2], z[3], z[4], z[5]];
        integrate_generic(body, &qq, &[z[6], z[7], z[8]], &[z[9], z[10], z[11]], dt, gravity)
    });
    let g = vjp(&jac, g_next);
    let mut out = RigidStepGrad {
        state: [g[0], g[1], g[2], g[3], g[4], g[5]],
        wrench: [g[6], g[7], g[8]],
        action: [g[9], g[10], g[11]],
    };
    if let Actuation::Hinge(_) = body.mode {
        // only the joint angle and rate are free
        out.state = [0.0, 0.0, out.state[2], 0.0, 0.0, out.state[5]];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body(mode: Actuation) -> RigidBody {
        RigidBody {
            name: "b".into(),
            shape: SdfShape::Circle { radius: 0.1 },
            mass: 2.0,
            inertia: 0.01,
            gravity_scale: 1.0,
            mode,
            state: RigidState {
                pos: Vec2::new(0.5, 0.5),
                ..Default::default()
            },
        }
    }

    #[test]
    fn free_body_drifts_uniformly() {
        let mut b = body(Actuation::Dynamic);
        b.state.vel = Vec2::new(0.3, -0.1);
        b.state.omega = 0.7;
        for k in 1..=50 {
            integrate_rigid(&mut b, &Wrench::default(), &[0.0; 3], 1e-3, Vec2::ZERO);
            assert_eq!(b.state.vel, Vec2::new(0.3, -0.1));
            assert_eq!(b.state.omega, 0.7);
            let t = k as f64 * 1e-3;
            assert!((b.state.pos - Vec2::new(0.5 + 0.3 * t, 0.5 - 0.1 * t)).norm() < 1e-13);
        }
    }

    #[test]
    fn free_fall_discrete_sum() {
        let mut b = body(Actuation::Dynamic);
        let g = Vec2::new(0.0, -9.8);
        let (n, dt) = (100, 1e-3);
        for _ in 0..n {
            integrate_rigid(&mut b, &Wrench::default(), &[0.0; 3], dt, g);
        }
        assert!((b.state.vel.y + 9.8 * n as f64 * dt).abs() < 1e-12);
        // y_N = y_0 - g dt^2 N (N + 1) / 2
        let y = 0.5 - 9.8 * dt * dt * (n * (n + 1)) as f64 / 2.0;
        assert!((b.state.pos.y - y).abs() < 1e-12);
    }

    #[test]
    fn kinematic_follows_action_and_ignores_forces() {
        let mut b = body(Actuation::Kinematic);
        let w = Wrench {
            force: Vec2::new(100.0, 100.0),
            torque: 5.0,
        };
        integrate_rigid(&mut b, &w, &[0.1, 0.2, 0.3], 0.5, Vec2::new(0.0, -9.8));
        assert!((b.state.pos - Vec2::new(0.55, 0.6)).norm() < 1e-15);
        assert_eq!(b.state.vel, Vec2::new(0.1, 0.2));
        let g = adjoint_integrate_rigid(&b, &b.state.to_array(), &w, &[0.1, 0.2, 0.3], 0.5, Vec2::ZERO, &[1.0; 6]);
        assert_eq!(g.wrench, [0.0; 3]);
    }

    #[test]
    fn wrench_to_pose_derivative() {
        let b = body(Actuation::Dynamic);
        let dt = 0.01;
        let g = adjoint_integrate_rigid(
            &b,
            &b.state.to_array(),
            &Wrench::default(),
            &[0.0; 3],
            dt,
            Vec2::ZERO,
            &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        );
        assert!((g.wrench[0] - dt * dt / b.mass).abs() < 1e-15);
        assert_eq!(g.wrench[1], 0.0);
    }

    fn hinge_body() -> RigidBody {
        let joint = HingeJoint {
            anchor_world: Vec2::new(0.5, 0.8),
            anchor_local: Vec2::new(0.0, 0.2),
            damping: 0.0,
        };
        let mut b = body(Actuation::Hinge(joint));
        b.shape = SdfShape::Box {
            half: Vec2::new(0.02, 0.2),
        };
        b.state.theta = 0.05;
        b.sync();
        b
    }

    #[test]
    fn hinge_anchor_stays_fixed() {
        let mut b = hinge_body();
        let Actuation::Hinge(j) = b.mode else { unreachable!() };
        for _ in 0..10_000 {
            integrate_rigid(&mut b, &Wrench::default(), &[0.0], 1e-4, Vec2::new(0.0, -9.8));
            let anchor = b.state.pos + j.anchor_local.rotate(b.state.theta.cos(), b.state.theta.sin());
            assert!((anchor - j.anchor_world).norm() < 1e-9);
        }
    }

    #[test]
    fn hinge_small_angle_period() {
        let mut b = hinge_body();
        let Actuation::Hinge(j) = b.mode else { unreachable!() };
        let l = j.anchor_local.norm();
        let ia = b.inertia + b.mass * l * l;
        let period = std::f64::consts::TAU * (ia / (b.mass * 9.8 * l)).sqrt();
        let dt = 1e-4;
        // count upward zero crossings of theta over ten periods
        let mut crossings = Vec::new();
        let mut prev = b.state.theta;
        let mut t = 0.0;
        while crossings.len() < 11 {
            integrate_rigid(&mut b, &Wrench::default(), &[0.0], dt, Vec2::new(0.0, -9.8));
            t += dt;
            let th = b.state.theta;
            if prev < 0.0 && th >= 0.0 {
                crossings.push(t - dt * th / (th - prev));
            }
            prev = th;
        }
        let measured = (crossings[10] - crossings[0]) / 10.0;
        assert!((measured - period).abs() / period < 0.02, "{measured} vs {period}");
    }

    #[test]
    fn rollout_gradient_matches_finite_difference() {
        let g = Vec2::new(0.0, -9.8);
        let dt = 1e-3;
        for mut b in [body(Actuation::Dynamic), hinge_body()] {
            let w = Wrench {
                force: Vec2::new(0.3, 0.1),
                torque: 0.02,
            };
            b.state.omega = 0.4;
            b.sync();
            let loss_of = |b0: &RigidBody| {
                let mut b = b0.clone();
                for _ in 0..20 {
                    integrate_rigid(&mut b, &w, &[0.1, -0.2, 0.05], dt, g);
                }
                let s = b.state.to_array();
                s[0] * 1.3 + s[1] * s[2] + s[4] * 0.7 + s[5] * s[5]
            };
            // reverse pass
            let mut states = vec![b.state.to_array()];
            let mut cur = b.clone();
            for _ in 0..20 {
                integrate_rigid(&mut cur, &w, &[0.1, -0.2, 0.05], dt, g);
                states.push(cur.state.to_array());
            }
            let s = states[20];
            let mut gq = [1.3, s[2], s[1], 0.0, 0.7, 2.0 * s[5]];
            for k in (0..20).rev() {
                let gc = canonical_vjp(&b, &states[k + 1], &gq);
                let gr = adjoint_integrate_rigid(&b, &states[k], &w, &[0.1, -0.2, 0.05], dt, g, &gc);
                gq = gr.state;
            }
            // gq is now the generalized gradient on the initial state; the
            // canonical slots 3..5 of a hinge body are not free variables
            let free: &[usize] = match b.mode {
                Actuation::Hinge(_) => &[2, 5],
                _ => &[0, 1, 2, 3, 4, 5],
            };
            let h = 1e-6;
            for &i in free {
                let mut a = b.clone();
                let mut m = b.clone();
                let mut sa = a.state.to_array();
                let mut sm = m.state.to_array();
                sa[i] += h;
                sm[i] -= h;
                a.state = RigidState::from_array(&sa);
                m.state = RigidState::from_array(&sm);
                a.sync();
                m.sync();
                let fd = (loss_of(&a) - loss_of(&m)) / (2.0 * h);
                let rel = (fd - gq[i]).abs() / fd.abs().max(gq[i].abs()).max(1e-12);
                assert!(rel < 1e-6, "component {i}: {} vs {fd}", gq[i]);
            }
        }
    }
}
