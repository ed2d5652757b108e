//! Polyline cloth geometry (segments are the faces of a 2D mesh).

use crate::error::{Result, SimError};
use crate::math::{c, Real, Vec2, V2};

#[derive(Clone, Debug, PartialEq)]
pub struct ClothMesh {
    pub verts: Vec<Vec2>,
    pub vel: Vec<Vec2>,
    pub faces: Vec<[usize; 2]>,
    pub rest_len: Vec<f64>,
    /// Lumped vertex mass.
    pub mass: Vec<f64>,
}

impl ClothMesh {
    /// Build a mesh with vertex masses from a uniform line density.
    pub fn new(verts: Vec<Vec2>, faces: Vec<[usize; 2]>, line_density: f64) -> Result<Self> {
        validate_topology(verts.len(), &faces)?;
        let mut rest_len = Vec::with_capacity(faces.len());
        let mut mass = vec![0.0; verts.len()];
        for (f, &[a, b]) in faces.iter().enumerate() {
            let l = (verts[b] - verts[a]).norm();
            if !(l > 0.0) {
                return Err(SimError::Mesh(format!("face {f} has zero length")));
            }
            rest_len.push(l);
            mass[a] += 0.5 * l * line_density;
            mass[b] += 0.5 * l * line_density;
        }
        if let Some(v) = mass.iter().position(|m| *m <= 0.0) {
            return Err(SimError::Mesh(format!("vertex {v} is not used by any face")));
        }
        let n = verts.len();
        Ok(ClothMesh {
            verts,
            vel: vec![Vec2::ZERO; n],
            faces,
            rest_len,
            mass,
        })
    }

    /// Open strip from `a` to `b` with `segments` faces.
    pub fn strip(a: Vec2, b: Vec2, segments: usize, line_density: f64) -> Result<Self> {
        if segments == 0 {
            return Err(SimError::Mesh("a strip needs at least one segment".into()));
        }
        let verts = (0..=segments)
            .map(|i| a + (b - a).scale(i as f64 / segments as f64))
            .collect();
        let faces = (0..segments).map(|i| [i, i + 1]).collect();
        Self::new(verts, faces, line_density)
    }

    /// Closed counter-clockwise polygon approximating a circle.
    pub fn circle_loop(center: Vec2, radius: f64, segments: usize, line_density: f64) -> Result<Self> {
        if segments < 3 {
            return Err(SimError::Mesh("a loop needs at least three segments".into()));
        }
        let verts = (0..segments)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / segments as f64;
                center + Vec2::new(a.cos(), a.sin()).scale(radius)
            })
            .collect();
        let faces = (0..segments).map(|i| [i, (i + 1) % segments]).collect();
        Self::new(verts, faces, line_density)
    }

    /// Parse `v x y [z]` and `l`/`f` records; indices are 1-based, and a
    /// polyline record with k vertices contributes k - 1 segments.
    pub fn from_obj(text: &str, line_density: f64) -> Result<Self> {
        let mut verts = Vec::new();
        let mut faces = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let tag = it.next().unwrap_or("");
            let err = |m: &str| SimError::Mesh(format!("line {}: {m}", ln + 1));
            match tag {
                "v" => {
                    let nums: Vec<f64> = it
                        .map(|s| s.parse::<f64>().map_err(|_| err("bad vertex coordinate")))
                        .collect::<Result<_>>()?;
                    if nums.len() < 2 {
                        return Err(err("vertex needs at least two coordinates"));
                    }
                    verts.push(Vec2::new(nums[0], nums[1]));
                }
                "l" | "f" => {
                    let idx: Vec<usize> = it
                        .map(|s| {
                            let head = s.split('/').next().unwrap_or("");
                            head.parse::<usize>()
                                .ok()
                                .filter(|&i| i >= 1)
                                .map(|i| i - 1)
                                .ok_or_else(|| err("bad vertex index"))
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < 2 {
                        return Err(err("segment record needs two indices"));
                    }
                    for w in idx.windows(2) {
                        faces.push([w[0], w[1]]);
                    }
                }
                _ => {}
            }
        }
        Self::new(verts, faces, line_density)
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Largest current segment length.
    pub fn max_face_extent(&self) -> f64 {
        self.faces
            .iter()
            .map(|&[a, b]| (self.verts[b] - self.verts[a]).norm())
            .fold(0.0, f64::max)
    }

    /// Unit normal of face `f` at the current positions.
    pub fn face_normal(&self, f: usize) -> Vec2 {
        let [a, b] = self.faces[f];
        segment_normal(self.verts[a], self.verts[b])
    }
}

fn validate_topology(nv: usize, faces: &[[usize; 2]]) -> Result<()> {
    let mut count = vec![0usize; nv];
    for (f, &[a, b]) in faces.iter().enumerate() {
        if a >= nv || b >= nv {
            return Err(SimError::Mesh(format!("face {f} references a missing vertex")));
        }
        if a == b {
            return Err(SimError::Mesh(format!("face {f} is degenerate")));
        }
        count[a] += 1;
        count[b] += 1;
    }
    if let Some(v) = count.iter().position(|&k| k > 2) {
        return Err(SimError::Mesh(format!("vertex {v} is shared by more than two faces")));
    }
    Ok(())
}

/// Normal `(d.y, -d.x) / |d|`: counter-clockwise loops get outward normals.
#[inline]
pub fn segment_normal<T: Real>(a: V2<T>, b: V2<T>) -> V2<T> {
    let d = b - a;
    let l = d.norm();
    V2::new(d.y / l, -d.x / l)
}

/// Closest point on segment `ab`: `(t, point, distance)` with `t` in `[0, 1]`.
pub fn closest_on_segment<T: Real>(x: V2<T>, a: V2<T>, b: V2<T>) -> (T, V2<T>, T) {
    let d = b - a;
    let t = (x - a).dot(d) / d.norm_sq();
    let t = if t.re() <= 0.0 {
        c(0.0)
    } else if t.re() >= 1.0 {
        c(1.0)
    } else {
        t
    };
    let p = a + d * t;
    (t, p, (x - p).norm())
}
