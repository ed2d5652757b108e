//! Mass-spring rope/strip dynamics with kinematic control vertices.

use crate::cloth_contact::mesh::ClothMesh;
use crate::error::{Result, SimError};
use crate::math::{c, local_jacobian, Real, Vec2, V2};

/// Bending hinge at an interior vertex: `(i, v, k)` with `v` the shared vertex.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BendHinge {
    pub verts: [usize; 3],
    pub rest_angle: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cloth {
    pub name: String,
    pub mesh: ClothMesh,
    /// Stretch stiffness (N/m).
    pub ks: f64,
    /// Bending stiffness (N m / rad^2).
    pub kb: f64,
    /// Mass-proportional damping (1/s).
    pub damping: f64,
    pub gravity_scale: f64,
    /// Kinematic control vertices, driven by velocity actions.
    pub control: Vec<usize>,
    pub hinges: Vec<BendHinge>,
    /// Integration substeps per manipulator step.
    pub substeps: usize,
}

/// Signed turning angle between `v - i` and `k - v`.
pub fn turning_angle<T: Real>(pi: V2<T>, pv: V2<T>, pk: V2<T>) -> T {
    let e1 = pv - pi;
    let e2 = pk - pv;
    e1.cross(e2).atan2(e1.dot(e2))
}

fn build_hinges(mesh: &ClothMesh) -> Vec<BendHinge> {
    let vf = crate::cloth_contact::neighborhood::vertex_faces(mesh.verts.len(), &mesh.faces);
    let mut out = Vec::new();
    for (v, faces) in vf.iter().enumerate() {
        if faces.len() != 2 {
            continue;
        }
        let other = |f: usize| {
            let [a, b] = mesh.faces[f];
            if a == v {
                b
            } else {
                a
            }
        };
        // order the pair along the face that ends at v when possible
        let (f0, f1) = if mesh.faces[faces[0]][1] == v {
            (faces[0], faces[1])
        } else {
            (faces[1], faces[0])
        };
        let (i, k) = (other(f0), other(f1));
        let rest = turning_angle(mesh.verts[i], mesh.verts[v], mesh.verts[k]);
        out.push(BendHinge {
            verts: [i, v, k],
            rest_angle: rest,
        });
    }
    out
}

/// Largest stable substep `0.5 sqrt(m_min / ks)`.
pub fn stable_dt(mesh: &ClothMesh, ks: f64) -> f64 {
    let m = mesh.mass.iter().cloned().fold(f64::INFINITY, f64::min);
    if ks <= 0.0 {
        f64::INFINITY
    } else {
        0.5 * (m / ks).sqrt()
    }
}

impl Cloth {
    /// Assemble a cloth; `substeps = None` picks the smallest stable count.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        mesh: ClothMesh,
        ks: f64,
        kb: f64,
        damping: f64,
        gravity_scale: f64,
        control: Vec<usize>,
        step_dt: f64,
        substeps: Option<usize>,
    ) -> Result<Self> {
        let name = name.into();
        if !(ks >= 0.0 && kb >= 0.0 && damping >= 0.0) {
            return Err(SimError::config(
                format!("cloths.{name}"),
                "stiffness and damping must be non-negative",
            ));
        }
        let mut seen = vec![false; mesh.verts.len()];
        for &v in &control {
            if v >= seen.len() || std::mem::replace(&mut seen[v], true) {
                return Err(SimError::config(
                    format!("cloths.{name}.control"),
                    format!("control vertex {v} is out of range or repeated"),
                ));
            }
        }
        let limit = stable_dt(&mesh, ks);
        let substeps = match substeps {
            Some(n) => {
                if step_dt / n as f64 >= limit {
                    return Err(SimError::config(
                        format!("cloths.{name}.substeps"),
                        format!(
                            "{n} substeps give dt = {:.3e}, above the stability bound {:.3e}",
                            step_dt / n as f64,
                            limit
                        ),
                    ));
                }
                n
            }
            None => (step_dt / limit).floor() as usize + 1,
        };
        let hinges = build_hinges(&mesh);
        Ok(Cloth {
            name,
            mesh,
            ks,
            kb,
            damping,
            gravity_scale,
            control,
            hinges,
            substeps,
        })
    }

    pub fn action_dim(&self) -> usize {
        2 * self.control.len()
    }

    fn is_control(&self) -> Vec<bool> {
        let mut m = vec![false; self.mesh.verts.len()];
        for &v in &self.control {
            m[v] = true;
        }
        m
    }

    /// Internal (stretch + bending) forces at positions `x`.
    pub fn internal_forces(&self, x: &[Vec2], out: &mut [Vec2]) {
        out.fill(Vec2::ZERO);
        for (f, &[a, b]) in self.mesh.faces.iter().enumerate() {
            let fs = stretch_force(x[a], x[b], self.mesh.rest_len[f], self.ks);
            out[a] += fs[0];
            out[b] += fs[1];
        }
        if self.kb > 0.0 {
            for h in &self.hinges {
                let [i, v, k] = h.verts;
                let fb = bend_force(x[i], x[v], x[k], h.rest_angle, self.kb);
                out[i] += fb[0];
                out[v] += fb[1];
                out[k] += fb[2];
            }
        }
    }

    /// Total stretch and bending energy plus kinetic energy.
    pub fn energy(&self, x: &[Vec2], v: &[Vec2]) -> f64 {
        let mut e = 0.0;
        for (f, &[a, b]) in self.mesh.faces.iter().enumerate() {
            let d = (x[b] - x[a]).norm() - self.mesh.rest_len[f];
            e += 0.5 * self.ks * d * d;
        }
        for h in &self.hinges {
            let [i, j, k] = h.verts;
            let d = turning_angle(x[i], x[j], x[k]) - h.rest_angle;
            e += 0.5 * self.kb * d * d;
        }
        for (vi, m) in v.iter().zip(&self.mesh.mass) {
            e += 0.5 * m * vi.norm_sq();
        }
        e
    }
}

/// Hooke force on the two endpoints of a spring.
pub fn stretch_force<T: Real>(a: V2<T>, b: V2<T>, rest: f64, ks: f64) -> [V2<T>; 2] {
    let d = b - a;
    let l = d.norm();
    let f = d * ((l - rest) * ks / l);
    [f, -f]
}

/// Bending force `-kb (theta - theta0) d theta / dx` on a hinge triple.
pub fn bend_force<T: Real>(pi: V2<T>, pv: V2<T>, pk: V2<T>, rest: f64, kb: f64) -> [V2<T>; 3] {
    let e1 = pv - pi;
    let e2 = pk - pv;
    let th = e1.cross(e2).atan2(e1.dot(e2));
    let g1 = e1.perp() * (c::<T>(1.0) / e1.norm_sq());
    let g2 = e2.perp() * (c::<T>(1.0) / e2.norm_sq());
    // d theta / d(pi, pv, pk)
    let s = -(th - rest) * kb;
    [g1 * s, (-g1 - g2) * s, g2 * s]
}

/// Cloth state at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct ClothKinematics {
    pub x: Vec<Vec2>,
    pub v: Vec<Vec2>,
}

/// Advance one manipulator step of length `dt` with constant external
/// vertex forces and control-vertex velocities `control_vel`.
pub fn cloth_step(cloth: &mut Cloth, ext: &[Vec2], control_vel: &[f64], dt: f64, gravity: Vec2) {
    let mut k = ClothKinematics {
        x: cloth.mesh.verts.clone(),
        v: cloth.mesh.vel.clone(),
    };
    let h = dt / cloth.substeps as f64;
    let mut buf = vec![Vec2::ZERO; k.x.len()];
    for _ in 0..cloth.substeps {
        cloth_substep(cloth, &mut k, ext, control_vel, h, gravity, &mut buf);
    }
    cloth.mesh.verts = k.x;
    cloth.mesh.vel = k.v;
}

fn cloth_substep(
    cloth: &Cloth,
    k: &mut ClothKinematics,
    ext: &[Vec2],
    control_vel: &[f64],
    h: f64,
    gravity: Vec2,
    buf: &mut [Vec2],
) {
    cloth.internal_forces(&k.x, buf);
    let g = gravity.scale(cloth.gravity_scale);
    let ctrl = cloth.is_control();
    for i in 0..k.x.len() {
        if ctrl[i] {
            continue;
        }
        let m = cloth.mesh.mass[i];
        let f = buf[i] + ext[i] + k.v[i].scale(-cloth.damping * m) + g.scale(m);
        k.v[i] += f.scale(h / m);
        k.x[i] += k.v[i].scale(h);
    }
    for (c_idx, &i) in cloth.control.iter().enumerate() {
        k.v[i] = Vec2::new(control_vel[2 * c_idx], control_vel[2 * c_idx + 1]);
        k.x[i] += k.v[i].scale(h);
    }
}

/// Gradients of [`cloth_step`] with respect to its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ClothStepGrad {
    pub x: Vec<Vec2>,
    pub v: Vec<Vec2>,
    pub ext: Vec<Vec2>,
    pub control: Vec<f64>,
}

/// Reverse-mode derivative of [`cloth_step`] starting from `start`.
#[allow(clippy::too_many_arguments)]
pub fn adjoint_cloth_step(
    cloth: &Cloth,
    start: &ClothKinematics,
    ext: &[Vec2],
    control_vel: &[f64],
    dt: f64,
    gravity: Vec2,
    g_x_next: &[Vec2],
    g_v_next: &[Vec2],
) -> ClothStepGrad {
    let n = start.x.len();
    let h = dt / cloth.substeps as f64;
    // recompute substep inputs
    let mut states = Vec::with_capacity(cloth.substeps);
    let mut k = start.clone();
    let mut buf = vec![Vec2::ZERO; n];
    for _ in 0..cloth.substeps {
        states.push(k.clone());
        cloth_substep(cloth, &mut k, ext, control_vel, h, gravity, &mut buf);
    }
    let ctrl = cloth.is_control();
    let mut gx = g_x_next.to_vec();
    let mut gv = g_v_next.to_vec();
    let mut g_ext = vec![Vec2::ZERO; n];
    let mut g_ctrl = vec![0.0; control_vel.len()];
    for s in states.iter().rev() {
        // x' = x + h v', v' = v + h/m F(x, v)
        let mut gvp = vec![Vec2::ZERO; n];
        for i in 0..n {
            gvp[i] = gv[i] + gx[i].scale(h);
        }
        let mut gx_prev = gx.clone();
        let mut gv_prev = vec![Vec2::ZERO; n];
        for (c_idx, &i) in cloth.control.iter().enumerate() {
            g_ctrl[2 * c_idx] += gvp[i].x;
            g_ctrl[2 * c_idx + 1] += gvp[i].y;
        }
        // scaled force adjoint: lambda_i = h/m_i gv'_i on free vertices
        let mut lam = vec![Vec2::ZERO; n];
        for i in 0..n {
            if ctrl[i] {
                continue;
            }
            let m = cloth.mesh.mass[i];
            lam[i] = gvp[i].scale(h / m);
            gv_prev[i] = gvp[i].scale(1.0 - h * cloth.damping);
            g_ext[i] += lam[i];
        }
        // internal force Jacobians
        for (f, &[a, b]) in cloth.mesh.faces.iter().enumerate() {
            let rest = cloth.mesh.rest_len[f];
            let inp = [s.x[a].x, s.x[a].y, s.x[b].x, s.x[b].y];
            let (_, jac) = local_jacobian(&inp, |z| {
                let fs = stretch_force(V2::new(z[0], z[1]), V2::new(z[2], z[3]), rest, cloth.ks);
                [fs[0].x, fs[0].y, fs[1].x, fs[1].y]
            });
            let g = crate::math::vjp(&jac, &[lam[a].x, lam[a].y, lam[b].x, lam[b].y]);
            gx_prev[a] += Vec2::new(g[0], g[1]);
            gx_prev[b] += Vec2::new(g[2], g[3]);
        }
        if cloth.kb > 0.0 {
            for hg in &cloth.hinges {
                let [i, v, kk] = hg.verts;
                let inp = [s.x[i].x, s.x[i].y, s.x[v].x, s.x[v].y, s.x[kk].x, s.x[kk].y];
                let (_, jac) = local_jacobian(&inp, |z| {
                    let fb = bend_force(
                        V2::new(z[0], z[1]),
                        V2::new(z[2], z[3]),
                        V2::new(z[4], z[5]),
                        hg.rest_angle,
                        cloth.kb,
                    );
                    [fb[0].x, fb[0].y, fb[1].x, fb[1].y, fb[2].x, fb[2].y]
                });
                let g = crate::math::vjp(&jac, &[lam[i].x, lam[i].y, lam[v].x, lam[v].y, lam[kk].x, lam[kk].y]);
                gx_prev[i] += Vec2::new(g[0], g[1]);
                gx_prev[v] += Vec2::new(g[2], g[3]);
                gx_prev[kk] += Vec2::new(g[4], g[5]);
            }
        }
        gx = gx_prev;
        gv = gv_prev;
    }
    ClothStepGrad {
        x: gx,
        v: gv,
        ext: g_ext,
        control: g_ctrl,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rope(control: Vec<usize>, kb: f64, damping: f64) -> Cloth {
        let mesh = ClothMesh::strip(Vec2::new(0.2, 0.6), Vec2::new(0.8, 0.6), 8, 0.5).unwrap();
        Cloth::new("rope", mesh, 200.0, kb, damping, 1.0, control, 1e-3, None).unwrap()
    }

    #[test]
    fn straight_rest_rope_is_stationary() {
        let mut c = rope(vec![], 0.01, 0.1);
        let x0 = c.mesh.verts.clone();
        let ext = vec![Vec2::ZERO; x0.len()];
        for _ in 0..100 {
            cloth_step(&mut c, &ext, &[], 1e-3, Vec2::ZERO);
        }
        assert_eq!(c.mesh.verts, x0);
    }

    #[test]
    fn spring_force_is_hookean() {
        let f = stretch_force(Vec2::new(0.0, 0.0), Vec2::new(0.0, 1.5), 1.0, 10.0);
        assert!((f[0] - Vec2::new(0.0, 5.0)).norm() < 1e-14);
        assert!((f[1] + f[0]).norm() < 1e-15);
    }

    #[test]
    fn bend_force_matches_energy_gradient() {
        let (pi, pv, pk) = (Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.1), Vec2::new(1.8, 0.7));
        let kb = 0.3;
        let rest = 0.1;
        let e = |a: Vec2, b: Vec2, c: Vec2| {
            let d = turning_angle(a, b, c) - rest;
            0.5 * kb * d * d
        };
        let f = bend_force(pi, pv, pk, rest, kb);
        let h = 1e-7;
        let pts = [pi, pv, pk];
        for (v, fv) in f.iter().enumerate() {
            for axis in 0..2 {
                let mut p = pts;
                let mut m = pts;
                let dv = if axis == 0 { Vec2::new(h, 0.0) } else { Vec2::new(0.0, h) };
                p[v] += dv;
                m[v] -= dv;
                let fd = -(e(p[0], p[1], p[2]) - e(m[0], m[1], m[2])) / (2.0 * h);
                let an = if axis == 0 { fv.x } else { fv.y };
                assert!((fd - an).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn unpinned_momentum_is_conserved() {
        let mut c = rope(vec![], 0.05, 0.0);
        for (i, v) in c.mesh.verts.iter_mut().enumerate() {
            v.y += 0.02 * (i as f64).sin();
        }
        for (i, v) in c.mesh.vel.iter_mut().enumerate() {
            *v = Vec2::new(0.1 * (i as f64).cos(), -0.2);
        }
        let p = |c: &Cloth| {
            c.mesh
                .vel
                .iter()
                .zip(&c.mesh.mass)
                .fold(Vec2::ZERO, |a, (v, m)| a + v.scale(*m))
        };
        let ext = vec![Vec2::ZERO; c.mesh.verts.len()];
        let p0 = p(&c);
        for _ in 0..20 {
            cloth_step(&mut c, &ext, &[], 1e-3, Vec2::ZERO);
            assert!((p(&c) - p0).norm() < 1e-12);
        }
    }

    #[test]
    fn damped_energy_does_not_grow() {
        let mut c = rope(vec![], 0.01, 2.0);
        for (i, v) in c.mesh.verts.iter_mut().enumerate() {
            v.y += 0.03 * (i as f64 * 0.9).sin();
        }
        let ext = vec![Vec2::ZERO; c.mesh.verts.len()];
        let mut e = c.energy(&c.mesh.verts, &c.mesh.vel);
        let start = e;
        for _ in 0..10 {
            for _ in 0..100 {
                cloth_step(&mut c, &ext, &[], 1e-3, Vec2::ZERO);
            }
            let e2 = c.energy(&c.mesh.verts, &c.mesh.vel);
            assert!(e2 <= e + 1e-9, "{e2} > {e}");
            e = e2;
        }
        assert!(e < start);
    }

    #[test]
    fn pinned_hanging_rope_is_symmetric() {
        let mut c = rope(vec![0, 8], 0.001, 5.0);
        let ext = vec![Vec2::ZERO; 9];
        for _ in 0..3000 {
            cloth_step(&mut c, &ext, &[0.0; 4], 1e-3, Vec2::new(0.0, -9.8));
        }
        for i in 0..9 {
            let a = c.mesh.verts[i];
            let b = c.mesh.verts[8 - i];
            assert!((a.x - 0.5 + (b.x - 0.5)).abs() < 1e-6);
            assert!((a.y - b.y).abs() < 1e-6);
        }
        assert!(c.mesh.verts[4].y < 0.6);
    }

    #[test]
    fn unstable_explicit_substeps_are_rejected() {
        let mesh = ClothMesh::strip(Vec2::new(0.2, 0.6), Vec2::new(0.8, 0.6), 8, 0.5).unwrap();
        let err = Cloth::new("r", mesh, 1e6, 0.0, 0.0, 1.0, vec![], 1e-2, Some(1)).unwrap_err();
        assert!(err.to_string().contains("cloths.r.substeps"));
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let mut c = rope(vec![0], 0.02, 0.5);
        for (i, v) in c.mesh.verts.iter_mut().enumerate() {
            v.y += 0.02 * (i as f64).cos();
        }
        let n = c.mesh.verts.len();
        let ext: Vec<Vec2> = (0..n).map(|i| Vec2::new(0.01 * i as f64, -0.02)).collect();
        let ctrl = [0.05, -0.1];
        let g = Vec2::new(0.0, -9.8);
        let dt = 1e-3;
        let steps = 20;
        let w: Vec<Vec2> = (0..n).map(|i| Vec2::new((i as f64).sin(), 1.0)).collect();
        let loss = |c0: &Cloth, ext: &[Vec2], ctrl: &[f64]| {
            let mut c = c0.clone();
            for _ in 0..steps {
                cloth_step(&mut c, ext, ctrl, dt, g);
            }
            c.mesh.verts.iter().zip(&w).map(|(x, w)| x.dot(*w)).sum::<f64>()
                + c.mesh.vel.iter().map(|v| 0.1 * v.norm_sq()).sum::<f64>()
        };
        // reverse
        let mut traj = Vec::new();
        let mut cur = c.clone();
        for _ in 0..steps {
            traj.push(ClothKinematics {
                x: cur.mesh.verts.clone(),
                v: cur.mesh.vel.clone(),
            });
            cloth_step(&mut cur, &ext, &ctrl, dt, g);
        }
        let mut gx = w.clone();
        let mut gv: Vec<Vec2> = cur.mesh.vel.iter().map(|v| v.scale(0.2)).collect();
        let mut g_ext = vec![Vec2::ZERO; n];
        let mut g_ctrl = [0.0; 2];
        for s in traj.iter().rev() {
            let r = adjoint_cloth_step(&c, s, &ext, &ctrl, dt, g, &gx, &gv);
            gx = r.x;
            gv = r.v;
            for i in 0..n {
                g_ext[i] += r.ext[i];
            }
            g_ctrl[0] += r.control[0];
            g_ctrl[1] += r.control[1];
        }
        let h = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-10);
        for i in [2, 5, 8] {
            let mut a = c.clone();
            let mut b = c.clone();
            a.mesh.verts[i].y += h;
            b.mesh.verts[i].y -= h;
            let fd = (loss(&a, &ext, &ctrl) - loss(&b, &ext, &ctrl)) / (2.0 * h);
            assert!(rel(gx[i].y, fd) < 1e-5, "x[{i}]: {} vs {fd}", gx[i].y);
            let mut ea = ext.clone();
            let mut eb = ext.clone();
            ea[i].x += h;
            eb[i].x -= h;
            let fd = (loss(&c, &ea, &ctrl) - loss(&c, &eb, &ctrl)) / (2.0 * h);
            assert!(rel(g_ext[i].x, fd) < 1e-5, "ext[{i}]: {} vs {fd}", g_ext[i].x);
        }
        assert_eq!(g_ext[0], Vec2::ZERO);
        let fd = (loss(&c, &ext, &[ctrl[0], ctrl[1] + h]) - loss(&c, &ext, &[ctrl[0], ctrl[1] - h])) / (2.0 * h);
        assert!(rel(g_ctrl[1], fd) < 1e-5, "{} vs {fd}", g_ctrl[1]);
    }

    #[test]
    fn single_free_vertex_force_sensitivity() {
        let mesh = ClothMesh::strip(Vec2::new(0.4, 0.5), Vec2::new(0.6, 0.5), 1, 1.0).unwrap();
        let c = Cloth::new("s", mesh, 0.0, 0.0, 0.0, 0.0, vec![0], 1e-3, Some(1)).unwrap();
        let start = ClothKinematics {
            x: c.mesh.verts.clone(),
            v: c.mesh.vel.clone(),
        };
        let ext = vec![Vec2::ZERO; 2];
        let r = adjoint_cloth_step(
            &c,
            &start,
            &ext,
            &[0.0, 0.0],
            1e-3,
            Vec2::ZERO,
            &[Vec2::ZERO, Vec2::new(1.0, 0.0)],
            &[Vec2::ZERO; 2],
        );
        let m = c.mesh.mass[1];
        assert!((r.ext[1].x - 1e-6 / m).abs() < 1e-18);
        assert_eq!(r.ext[0], Vec2::ZERO);
    }
}
