//! Signed distance fields in body frame.
//!
//! All queries are generic over [`Real`] so contact kernels can be
//! differentiated with respect to both the query point and the body pose.

use std::sync::Arc;

use crate::math::{c, Real, Vec2, V2};

#[inline]
fn sign_re<T: Real>(x: T) -> f64 {
    if x.re() < 0.0 {
        -1.0
    } else {
        1.0
    }
}

#[inline]
fn abs_re<T: Real>(x: T) -> T {
    if x.re() < 0.0 {
        -x
    } else {
        x
    }
}

/// Analytic or sampled shape, expressed in the body frame with the centre of
/// mass at the origin.
#[derive(Clone, Debug, PartialEq)]
pub enum SdfShape {
    Circle {
        radius: f64,
    },
    Box {
        half: Vec2,
    },
    /// Ring of midline radius `radius` and wall `thickness`, with an opening
    /// of half-angle `opening` (radians) centred on the local +y axis.
    AnnulusContainer {
        radius: f64,
        thickness: f64,
        opening: f64,
    },
    /// Segment from `(-half_length, 0)` to `(half_length, 0)` inflated by `radius`.
    Capsule {
        half_length: f64,
        radius: f64,
    },
    Sampled(Arc<SampledSdf>),
}

impl SdfShape {
    /// Signed distance and outward unit normal at body-frame point `p`.
    pub fn eval<T: Real>(&self, p: V2<T>) -> (T, V2<T>) {
        match self {
            SdfShape::Circle { radius } => {
                let r = p.norm();
                if r.re() == 0.0 {
                    return (r - *radius, V2::new(c(1.0), c(0.0)));
                }
                (r - *radius, V2::new(p.x / r, p.y / r))
            }
            SdfShape::Box { half } => box_sdf(p, *half),
            SdfShape::AnnulusContainer {
                radius,
                thickness,
                opening,
            } => annulus_sdf(p, *radius, 0.5 * thickness, *opening),
            SdfShape::Capsule { half_length, radius } => {
                let cx = if p.x.re() > *half_length {
                    c(*half_length)
                } else if p.x.re() < -*half_length {
                    c(-*half_length)
                } else {
                    p.x
                };
                let w = V2::new(p.x - cx, p.y);
                let l = w.norm();
                if l.re() == 0.0 {
                    return (l - *radius, V2::new(c(1.0), c(0.0)));
                }
                (l - *radius, V2::new(w.x / l, w.y / l))
            }
            SdfShape::Sampled(s) => s.eval(p),
        }
    }

    /// Half extents of an axis-aligned box containing the solid.
    pub fn half_extent(&self) -> Vec2 {
        match self {
            SdfShape::Circle { radius } => Vec2::new(*radius, *radius),
            SdfShape::Box { half } => *half,
            SdfShape::AnnulusContainer { radius, thickness, .. } => {
                let r = radius + 0.5 * thickness;
                Vec2::new(r, r)
            }
            SdfShape::Capsule { half_length, radius } => Vec2::new(half_length + radius, *radius),
            SdfShape::Sampled(s) => s.size.scale(0.5),
        }
    }
}

fn box_sdf<T: Real>(p: V2<T>, half: Vec2) -> (T, V2<T>) {
    let sx = sign_re(p.x);
    let sy = sign_re(p.y);
    let qx = abs_re(p.x) - half.x;
    let qy = abs_re(p.y) - half.y;
    if qx.re() > 0.0 || qy.re() > 0.0 {
        let ox = if qx.re() > 0.0 { qx } else { c(0.0) };
        let oy = if qy.re() > 0.0 { qy } else { c(0.0) };
        let l = (ox * ox + oy * oy).sqrt();
        (l, V2::new(ox / l * sx, oy / l * sy))
    } else if qx.re() >= qy.re() {
        (qx, V2::new(c(sx), c(0.0)))
    } else {
        (qy, V2::new(c(0.0), c(sy)))
    }
}

fn annulus_sdf<T: Real>(p: V2<T>, ra: f64, rb: f64, opening: f64) -> (T, V2<T>) {
    // Mirror so the arc is centred on +y of the mirrored frame, i.e. on -y of
    // the body frame; the opening then faces up.
    let sx = sign_re(p.x);
    let q = V2::new(abs_re(p.x), -p.y);
    let ta = std::f64::consts::PI - opening;
    let (s, co) = (ta.sin(), ta.cos());
    let (d, nq) = if opening > 0.0 && (co * q.x.re() > s * q.y.re()) {
        let w = V2::new(q.x - s * ra, q.y - co * ra);
        let l = w.norm();
        if l.re() == 0.0 {
            (l - rb, V2::new(c(1.0), c(0.0)))
        } else {
            (l - rb, V2::new(w.x / l, w.y / l))
        }
    } else {
        let r = q.norm();
        if r.re() == 0.0 {
            (c::<T>(ra - rb), V2::new(c(1.0), c(0.0)))
        } else {
            let g = r - ra;
            let sg = sign_re(g);
            (abs_re(g) - rb, V2::new(q.x / r * sg, q.y / r * sg))
        }
    };
    (d, V2::new(nq.x * sx, -nq.y))
}

/// Distance field sampled on a regular lattice and queried bilinearly.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSdf {
    pub lo: Vec2,
    pub size: Vec2,
    /// Cells per axis; the lattice has `res + 1` samples per axis.
    pub res: usize,
    pub values: Vec<f64>,
}

impl SampledSdf {
    /// Sample `shape` on a lattice of `res` cells over its padded bounding box.
    pub fn from_shape(shape: &SdfShape, res: usize, pad: f64) -> Self {
        let h = shape.half_extent();
        let half = Vec2::new(h.x + pad, h.y + pad);
        let lo = -half;
        let size = half.scale(2.0);
        let n = res + 1;
        let mut values = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let p = Vec2::new(
                    lo.x + size.x * i as f64 / res as f64,
                    lo.y + size.y * j as f64 / res as f64,
                );
                values.push(shape.eval(p).0);
            }
        }
        SampledSdf { lo, size, res, values }
    }

    pub fn spacing(&self) -> Vec2 {
        Vec2::new(self.size.x / self.res as f64, self.size.y / self.res as f64)
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * (self.res + 1) + j]
    }

    /// Bilinear interpolation at a point inside the box.
    fn interp<T: Real>(&self, p: V2<T>) -> T {
        let h = self.spacing();
        let u = (p.x - self.lo.x) * (1.0 / h.x);
        let v = (p.y - self.lo.y) * (1.0 / h.y);
        let last = (self.res - 1) as f64;
        let i = u.re().floor().clamp(0.0, last);
        let j = v.re().floor().clamp(0.0, last);
        let fu = u - i;
        let fv = v - j;
        let (i, j) = (i as usize, j as usize);
        let one = c::<T>(1.0);
        let a = (one - fu) * self.at(i, j) + fu * self.at(i + 1, j);
        let b = (one - fu) * self.at(i, j + 1) + fu * self.at(i + 1, j + 1);
        (one - fv) * a + fv * b
    }

    fn clamp_point<T: Real>(&self, p: V2<T>) -> V2<T> {
        let hi = self.lo + self.size;
        let cl = |x: T, lo: f64, hi: f64| {
            if x.re() < lo {
                c(lo)
            } else if x.re() > hi {
                c(hi)
            } else {
                x
            }
        };
        V2::new(cl(p.x, self.lo.x, hi.x), cl(p.y, self.lo.y, hi.y))
    }

    pub fn eval<T: Real>(&self, p: V2<T>) -> (T, V2<T>) {
        let pc = self.clamp_point(p);
        let off = p - pc;
        let o = off.norm();
        if o.re() > 0.0 {
            // outside the sampled box: conservative distance
            return (self.interp(pc) + o, V2::new(off.x / o, off.y / o));
        }
        let d = self.interp(p);
        let h = self.spacing();
        let gx = self.interp(self.clamp_point(V2::new(p.x + h.x, p.y)))
            - self.interp(self.clamp_point(V2::new(p.x - h.x, p.y)));
        let gy = self.interp(self.clamp_point(V2::new(p.x, p.y + h.y)))
            - self.interp(self.clamp_point(V2::new(p.x, p.y - h.y)));
        let g = V2::new(gx * (0.5 / h.x), gy * (0.5 / h.y));
        let gn = g.norm();
        if gn.re() == 0.0 {
            return (d, V2::new(c(1.0), c(0.0)));
        }
        (d, V2::new(g.x / gn, g.y / gn))
    }
}

/// Transform a world point into a body frame at pose `(pos, theta)`.
#[inline]
pub fn world_to_local<T: Real>(x: V2<T>, pos: V2<T>, theta: T) -> V2<T> {
    (x - pos).rotate(theta.cos(), -theta.sin())
}

/// Signed distance and world-frame normal of `shape` posed at `(pos, theta)`.
pub fn sdf_query<T: Real>(shape: &SdfShape, x: V2<T>, pos: V2<T>, theta: T) -> (T, V2<T>) {
    let (co, s) = (theta.cos(), theta.sin());
    let local = (x - pos).rotate(co, -s);
    let (d, n) = shape.eval(local);
    (d, n.rotate(co, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn q(shape: &SdfShape, x: f64, y: f64) -> (f64, Vec2) {
        shape.eval(Vec2::new(x, y))
    }

    #[test]
    fn circle_values_and_tie_break() {
        let s = SdfShape::Circle { radius: 0.1 };
        let (d, n) = q(&s, 0.2, 0.0);
        assert!((d - 0.1).abs() < 1e-15);
        assert_eq!(n, Vec2::new(1.0, 0.0));
        let (d, n) = q(&s, 0.0, 0.0);
        assert!((d + 0.1).abs() < 1e-15);
        assert_eq!(n, Vec2::new(1.0, 0.0));
    }

    #[test]
    fn box_inside_outside_corner() {
        let s = SdfShape::Box {
            half: Vec2::new(0.2, 0.1),
        };
        let (d, n) = q(&s, 0.0, 0.05);
        assert!((d + 0.05).abs() < 1e-15);
        assert_eq!(n, Vec2::new(0.0, 1.0));
        let (d, n) = q(&s, -0.5, 0.0);
        assert!((d - 0.3).abs() < 1e-15);
        assert_eq!(n, Vec2::new(-1.0, 0.0));
        let (d, n) = q(&s, 0.23, 0.14);
        assert!((d - 0.05).abs() < 1e-12);
        assert!((n - Vec2::new(0.6, 0.8)).norm() < 1e-12);
    }

    #[test]
    fn closed_annulus_is_a_ring() {
        let s = SdfShape::AnnulusContainer {
            radius: 0.2,
            thickness: 0.02,
            opening: 0.0,
        };
        for k in 0..16 {
            let a = k as f64 * 0.4;
            let (d, n) = q(&s, 0.15 * a.cos(), 0.15 * a.sin());
            assert!((d - 0.04).abs() < 1e-12);
            // inside the cavity the normal points back toward the centre
            assert!((n + Vec2::new(a.cos(), a.sin())).norm() < 1e-12);
            let (d, _) = q(&s, 0.2 * a.cos(), 0.2 * a.sin());
            assert!((d + 0.01).abs() < 1e-12);
        }
    }

    #[test]
    fn opened_annulus_has_gap_on_top() {
        let s = SdfShape::AnnulusContainer {
            radius: 0.2,
            thickness: 0.02,
            opening: 0.5,
        };
        // top of the ring lies in the gap
        let (d, _) = q(&s, 0.0, 0.2);
        let tip = Vec2::new(0.2 * 0.5f64.sin(), 0.2 * 0.5f64.cos());
        assert!((d - ((Vec2::new(0.0, 0.2) - tip).norm() - 0.01)).abs() < 1e-12);
        // bottom is solid
        let (d, n) = q(&s, 0.0, -0.2);
        assert!((d + 0.01).abs() < 1e-12);
        assert!(n.norm() > 0.99);
        // mirror symmetry
        let (a, na) = q(&s, 0.13, 0.17);
        let (b, nb) = q(&s, -0.13, 0.17);
        assert!((a - b).abs() < 1e-15);
        assert!((na.x + nb.x).abs() < 1e-15 && (na.y - nb.y).abs() < 1e-15);
    }

    #[test]
    fn capsule_ends_and_side() {
        let s = SdfShape::Capsule {
            half_length: 0.1,
            radius: 0.02,
        };
        let (d, n) = q(&s, 0.0, 0.05);
        assert!((d - 0.03).abs() < 1e-15);
        assert_eq!(n, Vec2::new(0.0, 1.0));
        let (d, n) = q(&s, 0.15, 0.0);
        assert!((d - 0.03).abs() < 1e-15);
        assert_eq!(n, Vec2::new(1.0, 0.0));
    }

    #[test]
    fn analytic_normals_are_unit_and_match_gradient() {
        let shapes = [
            SdfShape::Circle { radius: 0.1 },
            SdfShape::Box {
                half: Vec2::new(0.1, 0.05),
            },
            SdfShape::AnnulusContainer {
                radius: 0.2,
                thickness: 0.03,
                opening: 0.6,
            },
            SdfShape::Capsule {
                half_length: 0.1,
                radius: 0.03,
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-7;
        for s in &shapes {
            for _ in 0..200 {
                let p = Vec2::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
                let (_, n) = s.eval(p);
                assert!((n.norm() - 1.0).abs() < 1e-12);
                let gx = (s.eval(p + Vec2::new(h, 0.0)).0 - s.eval(p - Vec2::new(h, 0.0)).0) / (2.0 * h);
                let gy = (s.eval(p + Vec2::new(0.0, h)).0 - s.eval(p - Vec2::new(0.0, h)).0) / (2.0 * h);
                let g = Vec2::new(gx, gy);
                // skip medial-axis points where the distance is not differentiable
                if (g.norm() - 1.0).abs() < 1e-5 {
                    assert!((g - n).norm() < 1e-5, "{s:?} at {p:?}: {g:?} vs {n:?}");
                }
            }
        }
    }

    #[test]
    fn sampled_circle_matches_analytic() {
        let circle = SdfShape::Circle { radius: 0.1 };
        // 1/256 spacing over a unit box
        let sampled = SampledSdf::from_shape(&circle, 256, 0.4);
        assert!((sampled.spacing().x - 1.0 / 256.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = Vec2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            let a = circle.eval(p).0;
            let b = sampled.eval(p).0;
            assert!((a - b).abs() < 2e-3, "{p:?}: {a} vs {b}");
        }
    }

    #[test]
    fn sampled_outside_box_is_conservative() {
        let circle = SdfShape::Circle { radius: 0.1 };
        let sampled = SampledSdf::from_shape(&circle, 64, 0.05);
        for p in [Vec2::new(1.0, 0.0), Vec2::new(-0.4, 0.7), Vec2::new(0.0, -3.0)] {
            let (d, n) = sampled.eval(p);
            assert!(d >= circle.eval(p).0 - 1e-3);
            assert!(d > 0.0);
            assert!((n.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn posed_query_rotates_and_translates() {
        let s = SdfShape::Box {
            half: Vec2::new(0.2, 0.05),
        };
        let pos = Vec2::new(0.3, 0.4);
        let th = std::f64::consts::FRAC_PI_2;
        // the long axis now points along world y
        let (d, n) = sdf_query(&s, Vec2::new(0.3, 0.4 + 0.3), pos, th);
        assert!((d - 0.1).abs() < 1e-12);
        assert!((n - Vec2::new(0.0, 1.0)).norm() < 1e-12);
        let (d0, _) = sdf_query(&s, Vec2::new(0.1, 0.2), Vec2::ZERO, 0.0);
        let (d1, _) = sdf_query(&s, Vec2::new(0.1, 0.2) + pos, pos, 0.0);
        assert!((d0 - d1).abs() < 1e-15);
    }
}
