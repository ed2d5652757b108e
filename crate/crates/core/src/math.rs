//! Small 2D vector/matrix types that work for both `f64` and dual numbers.
//!
//! Every nonlinear kernel in the crate is written once over [`Real`] and is
//! evaluated with `f64` in the forward pass and with `DualSVec64<N>` when the
//! adjoint needs its local Jacobian.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use nalgebra::SVector;
use num_dual::{DualNum, DualSVec64};

/// Scalar usable inside differentiable kernels.
pub trait Real: DualNum<Primitive = f64> + Copy {}
impl<T: DualNum<Primitive = f64> + Copy> Real for T {}

#[inline]
pub fn c<T: Real>(v: f64) -> T {
    T::from(v)
}

/// Select the larger operand by primal value.
#[inline]
pub fn max_re<T: Real>(a: T, b: T) -> T {
    if a.re() >= b.re() {
        a
    } else {
        b
    }
}

#[inline]
pub fn min_re<T: Real>(a: T, b: T) -> T {
    if a.re() <= b.re() {
        a
    } else {
        b
    }
}

#[inline]
pub fn clamp_re<T: Real>(x: T, lo: f64, hi: f64) -> T {
    if x.re() < lo {
        c(lo)
    } else if x.re() > hi {
        c(hi)
    } else {
        x
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct V2<T> {
    pub x: T,
    pub y: T,
}

pub type Vec2 = V2<f64>;

impl<T> V2<T> {
    #[inline]
    pub const fn new(x: T, y: T) -> Self {
        Self { x, y }
    }
}

impl Vec2 {
    pub const ZERO: Vec2 = V2 { x: 0.0, y: 0.0 };

    #[inline]
    pub fn lift<T: Real>(self) -> V2<T> {
        V2::new(c(self.x), c(self.y))
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    #[inline]
    pub fn to_array(self) -> [f64; 2] {
        [self.x, self.y]
    }

    #[inline]
    pub fn from_slice(s: &[f64]) -> Self {
        V2::new(s[0], s[1])
    }
}

impl<T: Real> V2<T> {
    #[inline]
    pub fn zero() -> Self {
        V2::new(c(0.0), c(0.0))
    }
    #[inline]
    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y
    }
    /// z-component of the 3D cross product.
    #[inline]
    pub fn cross(self, o: Self) -> T {
        self.x * o.y - self.y * o.x
    }
    /// Counter-clockwise perpendicular, `(-y, x)`.
    #[inline]
    pub fn perp(self) -> Self {
        V2::new(-self.y, self.x)
    }
    #[inline]
    pub fn norm_sq(self) -> T {
        self.dot(self)
    }
    #[inline]
    pub fn norm(self) -> T {
        self.norm_sq().sqrt()
    }
    #[inline]
    pub fn scale(self, s: f64) -> Self {
        V2::new(self.x * s, self.y * s)
    }
    #[inline]
    pub fn re(self) -> Vec2 {
        V2::new(self.x.re(), self.y.re())
    }
    #[inline]
    pub fn rotate(self, cos: T, sin: T) -> Self {
        V2::new(cos * self.x - sin * self.y, sin * self.x + cos * self.y)
    }
    #[inline]
    pub fn outer(self, o: Self) -> M2<T> {
        M2::new(self.x * o.x, self.x * o.y, self.y * o.x, self.y * o.y)
    }
}

impl<T: Real> Add for V2<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        V2::new(self.x + o.x, self.y + o.y)
    }
}
impl<T: Real> Sub for V2<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        V2::new(self.x - o.x, self.y - o.y)
    }
}
impl<T: Real> Neg for V2<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        V2::new(-self.x, -self.y)
    }
}
impl<T: Real> Mul<T> for V2<T> {
    type Output = Self;
    #[inline]
    fn mul(self, s: T) -> Self {
        V2::new(self.x * s, self.y * s)
    }
}
impl<T: Real> AddAssign for V2<T> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        self.x += o.x;
        self.y += o.y;
    }
}
impl<T: Real> SubAssign for V2<T> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        self.x -= o.x;
        self.y -= o.y;
    }
}

/// Row-major 2x2 matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct M2<T> {
    pub xx: T,
    pub xy: T,
    pub yx: T,
    pub yy: T,
}

pub type Mat2 = M2<f64>;

impl<T> M2<T> {
    #[inline]
    pub const fn new(xx: T, xy: T, yx: T, yy: T) -> Self {
        Self { xx, xy, yx, yy }
    }
}

impl Mat2 {
    pub const ZERO: Mat2 = M2::new(0.0, 0.0, 0.0, 0.0);
    pub const IDENTITY: Mat2 = M2::new(1.0, 0.0, 0.0, 1.0);

    #[inline]
    pub fn lift<T: Real>(self) -> M2<T> {
        M2::new(c(self.xx), c(self.xy), c(self.yx), c(self.yy))
    }

    #[inline]
    pub fn to_array(self) -> [f64; 4] {
        [self.xx, self.xy, self.yx, self.yy]
    }

    #[inline]
    pub fn from_slice(s: &[f64]) -> Self {
        M2::new(s[0], s[1], s[2], s[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl<T: Real> M2<T> {
    #[inline]
    pub fn zero() -> Self {
        M2::new(c(0.0), c(0.0), c(0.0), c(0.0))
    }
    #[inline]
    pub fn identity() -> Self {
        M2::new(c(1.0), c(0.0), c(0.0), c(1.0))
    }
    #[inline]
    pub fn diag(a: T, b: T) -> Self {
        M2::new(a, c(0.0), c(0.0), b)
    }
    #[inline]
    pub fn rotation(cos: T, sin: T) -> Self {
        M2::new(cos, -sin, sin, cos)
    }
    #[inline]
    pub fn det(&self) -> T {
        self.xx * self.yy - self.xy * self.yx
    }
    #[inline]
    pub fn trace(&self) -> T {
        self.xx + self.yy
    }
    #[inline]
    pub fn transpose(&self) -> Self {
        M2::new(self.xx, self.yx, self.xy, self.yy)
    }
    #[inline]
    pub fn mul_vec(&self, v: V2<T>) -> V2<T> {
        V2::new(self.xx * v.x + self.xy * v.y, self.yx * v.x + self.yy * v.y)
    }
    #[inline]
    pub fn mul_mat(&self, o: &Self) -> Self {
        M2::new(
            self.xx * o.xx + self.xy * o.yx,
            self.xx * o.xy + self.xy * o.yy,
            self.yx * o.xx + self.yy * o.yx,
            self.yx * o.xy + self.yy * o.yy,
        )
    }
    #[inline]
    pub fn scale(&self, s: f64) -> Self {
        M2::new(self.xx * s, self.xy * s, self.yx * s, self.yy * s)
    }
    #[inline]
    pub fn mul_scalar(&self, s: T) -> Self {
        M2::new(self.xx * s, self.xy * s, self.yx * s, self.yy * s)
    }
    #[inline]
    pub fn re(&self) -> Mat2 {
        M2::new(self.xx.re(), self.xy.re(), self.yx.re(), self.yy.re())
    }
    /// Frobenius inner product.
    #[inline]
    pub fn ddot(&self, o: &Self) -> T {
        self.xx * o.xx + self.xy * o.xy + self.yx * o.yx + self.yy * o.yy
    }
}

impl<T: Real> Add for M2<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        M2::new(self.xx + o.xx, self.xy + o.xy, self.yx + o.yx, self.yy + o.yy)
    }
}
impl<T: Real> Sub for M2<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        M2::new(self.xx - o.xx, self.xy - o.xy, self.yx - o.yx, self.yy - o.yy)
    }
}
impl<T: Real> AddAssign for M2<T> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Rotation factor of the polar decomposition `F = R S`.
///
/// For a scaled rotation with zero symmetric part the angle is undefined; the
/// identity is returned in that case.
pub fn polar_rotation<T: Real>(f: &M2<T>) -> M2<T> {
    let a = f.yx - f.xy;
    let b = f.xx + f.yy;
    if a.re() == 0.0 && b.re() == 0.0 {
        return M2::identity();
    }
    let n = (a * a + b * b).sqrt();
    M2::rotation(b / n, a / n)
}

/// Closed-form 2x2 SVD `F = rot(phi) * diag(s0, s1) * rot(theta)`.
///
/// `s0 >= |s1|`; `s1` is negative when `det F < 0`.
#[derive(Clone, Copy, Debug)]
pub struct Svd2<T> {
    pub phi: T,
    pub theta: T,
    pub s0: T,
    pub s1: T,
}

pub fn svd2<T: Real>(f: &M2<T>) -> Svd2<T> {
    let e = (f.xx + f.yy) * 0.5;
    let fq = (f.xx - f.yy) * 0.5;
    let g = (f.yx + f.xy) * 0.5;
    let h = (f.yx - f.xy) * 0.5;
    let q = (e * e + h * h).sqrt();
    let r = (fq * fq + g * g).sqrt();
    let a1 = if fq.re() == 0.0 && g.re() == 0.0 {
        c(0.0)
    } else {
        g.atan2(fq)
    };
    let a2 = if e.re() == 0.0 && h.re() == 0.0 {
        c(0.0)
    } else {
        h.atan2(e)
    };
    Svd2 {
        phi: (a2 + a1) * 0.5,
        theta: (a2 - a1) * 0.5,
        s0: q + r,
        s1: q - r,
    }
}

impl<T: Real> Svd2<T> {
    pub fn compose(&self, s0: T, s1: T) -> M2<T> {
        let u = M2::rotation(self.phi.cos(), self.phi.sin());
        let v = M2::rotation(self.theta.cos(), self.theta.sin());
        u.mul_mat(&M2::diag(s0, s1)).mul_mat(&v)
    }
}

/// Evaluate `f` and its Jacobian at `x` with forward-mode dual numbers.
///
/// Returns `(value, jacobian)` with `jacobian[out][inp]`.
pub fn local_jacobian<const N: usize, const M: usize>(
    x: &[f64; N],
    f: impl FnOnce(&[DualSVec64<N>; N]) -> [DualSVec64<N>; M],
) -> ([f64; M], [[f64; N]; M]) {
    let xs = SVector::<f64, N>::from(*x);
    let (val, jac) = num_dual::jacobian(
        |v: SVector<DualSVec64<N>, N>| {
            let arr: [DualSVec64<N>; N] = std::array::from_fn(|i| v[i]);
            SVector::<DualSVec64<N>, M>::from(f(&arr))
        },
        &xs,
    );
    let value = std::array::from_fn(|i| val[i]);
    let j = std::array::from_fn(|r| std::array::from_fn(|k| jac[(r, k)]));
    (value, j)
}

/// Vector-Jacobian product `J^T g`.
pub fn vjp<const N: usize, const M: usize>(jac: &[[f64; N]; M], g: &[f64; M]) -> [f64; N] {
    let mut out = [0.0; N];
    for (row, gr) in jac.iter().zip(g) {
        if *gr == 0.0 {
            continue;
        }
        for (o, j) in out.iter_mut().zip(row) {
            *o += j * gr;
        }
    }
    out
}
