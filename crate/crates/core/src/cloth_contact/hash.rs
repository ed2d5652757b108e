//! Uniform-grid spatial hash over cloth faces and exact nearest-face search.

use crate::cloth_contact::mesh::{closest_on_segment, ClothMesh};
use crate::math::Vec2;

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialHash {
    pub cell: f64,
    origin: [i64; 2],
    dims: [i64; 2],
    buckets: Vec<Vec<usize>>,
}

impl SpatialHash {
    /// Bucket every face into all cells its bounding box overlaps.
    pub fn build(mesh: &ClothMesh) -> Self {
        let cell = (2.0 * mesh.max_face_extent()).max(1e-9);
        let mut lo = [i64::MAX; 2];
        let mut hi = [i64::MIN; 2];
        for v in &mesh.verts {
            let k = Self::key_of(cell, *v);
            for a in 0..2 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
        }
        if mesh.verts.is_empty() {
            lo = [0, 0];
            hi = [0, 0];
        }
        let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1];
        let mut buckets = vec![Vec::new(); (dims[0] * dims[1]) as usize];
        for (f, &[a, b]) in mesh.faces.iter().enumerate() {
            let ka = Self::key_of(cell, mesh.verts[a]);
            let kb = Self::key_of(cell, mesh.verts[b]);
            for i in ka[0].min(kb[0])..=ka[0].max(kb[0]) {
                for j in ka[1].min(kb[1])..=ka[1].max(kb[1]) {
                    buckets[((i - lo[0]) * dims[1] + (j - lo[1])) as usize].push(f);
                }
            }
        }
        SpatialHash {
            cell,
            origin: lo,
            dims,
            buckets,
        }
    }

    #[inline]
    fn key_of(cell: f64, x: Vec2) -> [i64; 2] {
        [(x.x / cell).floor() as i64, (x.y / cell).floor() as i64]
    }

    fn bucket(&self, i: i64, j: i64) -> Option<&[usize]> {
        let (li, lj) = (i - self.origin[0], j - self.origin[1]);
        if li < 0 || lj < 0 || li >= self.dims[0] || lj >= self.dims[1] {
            return None;
        }
        Some(&self.buckets[(li * self.dims[1] + lj) as usize])
    }

    /// Chebyshev ring index beyond which no occupied cell remains.
    fn max_ring(&self, k: [i64; 2]) -> i64 {
        let dx = (k[0] - self.origin[0]).abs().max((k[0] - (self.origin[0] + self.dims[0] - 1)).abs());
        let dy = (k[1] - self.origin[1]).abs().max((k[1] - (self.origin[1] + self.dims[1] - 1)).abs());
        dx.max(dy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NearestFace {
    pub face: usize,
    /// Barycentric weights of the two face vertices.
    pub bary: [f64; 2],
    pub dist: f64,
}

#[inline]
fn better(d: f64, f: usize, best: &Option<NearestFace>) -> bool {
    match best {
        None => true,
        Some(b) => d < b.dist || (d == b.dist && f < b.face),
    }
}

fn face_query(x: Vec2, mesh: &ClothMesh, f: usize) -> NearestFace {
    let [a, b] = mesh.faces[f];
    let (t, _, d) = closest_on_segment(x, mesh.verts[a], mesh.verts[b]);
    NearestFace {
        face: f,
        bary: [1.0 - t, t],
        dist: d,
    }
}

/// Nearest face by exhaustive search (reference implementation).
pub fn nearest_face_brute(x: Vec2, mesh: &ClothMesh) -> Option<NearestFace> {
    let mut best = None;
    for f in 0..mesh.face_count() {
        let q = face_query(x, mesh, f);
        if better(q.dist, f, &best) {
            best = Some(q);
        }
    }
    best
}

/// Nearest face through the hash, with ties broken by lowest face id.
///
/// Returns `None` when no face lies within `max_dist`.
pub fn nearest_face(x: Vec2, mesh: &ClothMesh, hash: &SpatialHash, max_dist: Option<f64>) -> Option<NearestFace> {
    let k = SpatialHash::key_of(hash.cell, x);
    let last = hash.max_ring(k);
    let mut best: Option<NearestFace> = None;
    let mut q = 0i64;
    while q <= last {
        // every cell in ring q lies at least (q - 1) cells away
        let ring_min = (q - 1).max(0) as f64 * hash.cell;
        if let Some(b) = &best {
            if ring_min > b.dist {
                break;
            }
        }
        if let Some(r) = max_dist {
            if ring_min > r {
                break;
            }
        }
        for i in (k[0] - q)..=(k[0] + q) {
            for j in (k[1] - q)..=(k[1] + q) {
                if (i - k[0]).abs() != q && (j - k[1]).abs() != q {
                    continue;
                }
                if let Some(bucket) = hash.bucket(i, j) {
                    for &f in bucket {
                        let cand = face_query(x, mesh, f);
                        if better(cand.dist, f, &best) {
                            best = Some(cand);
                        }
                    }
                }
            }
        }
        q += 1;
    }
    match (best, max_dist) {
        (Some(b), Some(r)) if b.dist > r => None,
        (b, _) => b,
    }
}
