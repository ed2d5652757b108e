use crate::error::{Result, SimError};
use crate::math::Vec2;

/// Width of the sticky wall band, in cells.
pub const WALL_MARGIN: usize = 3;

/// Eulerian background grid over the unit square.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub res: usize,
    pub dx: f64,
    pub p: Vec<Vec2>,
    pub m: Vec<f64>,
    pub v: Vec<Vec2>,
}

impl Grid {
    pub fn new(res: usize) -> Self {
        let n = res * res;
        Grid {
            res,
            dx: 1.0 / res as f64,
            p: vec![Vec2::ZERO; n],
            m: vec![0.0; n],
            v: vec![Vec2::ZERO; n],
        }
    }

    pub fn clear(&mut self) {
        self.p.fill(Vec2::ZERO);
        self.m.fill(0.0);
        self.v.fill(Vec2::ZERO);
    }

    pub fn node_count(&self) -> usize {
        self.res * self.res
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.res + j
    }

    #[inline]
    pub fn node_pos(&self, idx: usize) -> Vec2 {
        let i = idx / self.res;
        let j = idx % self.res;
        Vec2::new(i as f64 * self.dx, j as f64 * self.dx)
    }

    #[inline]
    pub fn is_wall(&self, idx: usize) -> bool {
        let i = idx / self.res;
        let j = idx % self.res;
        let hi = self.res - WALL_MARGIN;
        i < WALL_MARGIN || j < WALL_MARGIN || i >= hi || j >= hi
    }

    /// Range particles must stay in so their 3x3 stencil fits on the grid.
    pub fn safe_bounds(&self) -> (f64, f64) {
        (self.dx, (self.res - 2) as f64 * self.dx)
    }

    pub fn shape(&self) -> GridShape {
        GridShape {
            res: self.res,
            dx: self.dx,
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.m.iter().sum()
    }

    pub fn total_momentum(&self) -> Vec2 {
        self.p.iter().fold(Vec2::ZERO, |a, b| a + *b)
    }
}

/// Resolution and spacing, detached from the node buffers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridShape {
    pub res: usize,
    pub dx: f64,
}

/// Quadratic B-spline stencil of one particle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil {
    pub base: [usize; 2],
    pub w: [[f64; 3]; 2],
    /// Weight derivatives with respect to world position (already scaled by 1/dx).
    pub dw: [[f64; 3]; 2],
}

impl Stencil {
    pub fn new(x: Vec2, grid: &Grid) -> Option<Self> {
        let inv_dx = 1.0 / grid.dx;
        let mut base = [0usize; 2];
        let mut w = [[0.0; 3]; 2];
        let mut dw = [[0.0; 3]; 2];
        for (axis, xa) in [x.x, x.y].into_iter().enumerate() {
            let s = xa * inv_dx;
            let b = (s - 0.5).floor();
            if !(b >= 0.0 && b + 2.0 <= (grid.res - 1) as f64) {
                return None;
            }
            let fx = s - b;
            base[axis] = b as usize;
            w[axis] = [
                0.5 * (1.5 - fx) * (1.5 - fx),
                0.75 - (fx - 1.0) * (fx - 1.0),
                0.5 * (fx - 0.5) * (fx - 0.5),
            ];
            dw[axis] = [
                -(1.5 - fx) * inv_dx,
                -2.0 * (fx - 1.0) * inv_dx,
                (fx - 0.5) * inv_dx,
            ];
        }
        Some(Stencil { base, w, dw })
    }

    /// Iterate `(node index, weight, weight gradient, node - particle offset)`.
    #[inline]
    pub fn nodes(&self, grid: GridShape, x: Vec2) -> impl Iterator<Item = (usize, f64, Vec2, Vec2)> + '_ {
        (0..3).flat_map(move |a| {
            (0..3).map(move |b| {
                let i = self.base[0] + a;
                let j = self.base[1] + b;
                let idx = i * grid.res + j;
                let weight = self.w[0][a] * self.w[1][b];
                let grad = Vec2::new(self.dw[0][a] * self.w[1][b], self.w[0][a] * self.dw[1][b]);
                let offset = Vec2::new(i as f64 * grid.dx - x.x, j as f64 * grid.dx - x.y);
                (idx, weight, grad, offset)
            })
        })
    }
}

pub fn compute_stencils(x: &[Vec2], grid: &Grid, out: &mut Vec<Stencil>) -> Result<()> {
    out.clear();
    for (p, &xp) in x.iter().enumerate() {
        match Stencil::new(xp, grid) {
            Some(s) => out.push(s),
            None => {
                return Err(SimError::OutOfDomain {
                    particle: p,
                    x: xp.x,
                    y: xp.y,
                })
            }
        }
    }
    Ok(())
}
