//! Binary penetration state of particles relative to a cloth mesh.

use crate::cloth_contact::hash::{nearest_face, NearestFace, SpatialHash};
use crate::cloth_contact::mesh::{closest_on_segment, segment_normal, ClothMesh};
use crate::cloth_contact::neighborhood::{relative_sign, NeighborhoodTable};
use crate::math::{c, Real, Vec2, V2};

/// Penetration record of one particle against one cloth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenetrationState {
    /// `true` once the particle is on the penetrated side.
    pub z: bool,
    /// Face of the last tracked contact.
    pub face: Option<usize>,
    /// Side of the particle relative to `face`'s own normal at the last update.
    pub side: i8,
    /// Unsigned distance at the last update.
    pub dist: f64,
}

impl Default for PenetrationState {
    fn default() -> Self {
        PenetrationState {
            z: false,
            face: None,
            side: 1,
            dist: f64::INFINITY,
        }
    }
}

/// Side of `x` relative to face `f`'s normal, `+1` or `-1`.
///
/// When the closest point is a vertex shared with a neighbour, the averaged
/// (pseudo) normal of the two faces decides.
pub fn side_test(x: Vec2, mesh: &ClothMesh, vertex_faces: &[Vec<usize>], f: usize) -> i8 {
    let [a, b] = mesh.faces[f];
    let (pa, pb) = (mesh.verts[a], mesh.verts[b]);
    let (t, cp, _) = closest_on_segment(x, pa, pb);
    let n = segment_normal(pa, pb);
    let mut dir = n;
    if t == 0.0 || t == 1.0 {
        let v = if t == 0.0 { a } else { b };
        if let Some(&g) = vertex_faces[v].iter().find(|&&g| g != f) {
            let [ga, gb] = mesh.faces[g];
            let s = relative_sign(mesh.faces[f], mesh.faces[g], v) as f64;
            dir = n + segment_normal(mesh.verts[ga], mesh.verts[gb]).scale(s);
            if dir.norm() < 1e-12 {
                dir = n;
            }
        }
    }
    if (x - cp).dot(dir) < 0.0 {
        -1
    } else {
        1
    }
}

/// Outcome of one state update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TraceEvent {
    /// Beyond the tracking radius: state retained.
    Untracked,
    Tracked(NearestFace),
    /// The new nearest face left the previous face's neighbourhood; the
    /// state was re-seeded from the local side test.
    LocalityViolation(NearestFace),
}

pub struct TraceContext<'a> {
    pub mesh: &'a ClothMesh,
    pub hash: &'a SpatialHash,
    pub neighborhoods: &'a NeighborhoodTable,
    pub vertex_faces: &'a [Vec<usize>],
    pub tracking_radius: f64,
}

/// Advance the penetration state of a particle at `x`.
pub fn update_penetration_state(x: Vec2, prev: &PenetrationState, ctx: &TraceContext) -> (PenetrationState, TraceEvent) {
    let Some(nf) = nearest_face(x, ctx.mesh, ctx.hash, Some(ctx.tracking_radius)) else {
        return (*prev, TraceEvent::Untracked);
    };
    let j = nf.face;
    let side_j = side_test(x, ctx.mesh, ctx.vertex_faces, j);
    let seed = |side: i8| PenetrationState {
        z: side < 0,
        face: Some(j),
        side,
        dist: nf.dist,
    };
    match prev.face {
        None => (seed(side_j), TraceEvent::Tracked(nf)),
        Some(i) => match ctx.neighborhoods.sign(i, j) {
            Some(s_ij) => {
                let flipped = s_ij * side_j != prev.side;
                (
                    PenetrationState {
                        z: prev.z ^ flipped,
                        face: Some(j),
                        side: side_j,
                        dist: nf.dist,
                    },
                    TraceEvent::Tracked(nf),
                )
            }
            None => (seed(side_j), TraceEvent::LocalityViolation(nf)),
        },
    }
}

/// Side (relative to the face's own normal) on which `z = 0` lies.
#[inline]
pub fn free_side(state: &PenetrationState) -> f64 {
    let s = state.side as f64;
    if state.z {
        -s
    } else {
        s
    }
}

/// Signed distance to a cloth face and the normal pointing toward the
/// unpenetrated side.
///
/// With `traced == false` the distance is unsigned.
pub fn signed_distance_cloth<T: Real>(x: V2<T>, pa: V2<T>, pb: V2<T>, z: bool, free_side: f64) -> (T, V2<T>, T) {
    let (t, cp, dist) = closest_on_segment(x, pa, pb);
    let sgn = if z { -1.0 } else { 1.0 };
    let n = if dist.re() > 0.0 {
        let u = x - cp;
        V2::new(u.x / dist, u.y / dist).scale(sgn)
    } else {
        segment_normal(pa, pb).scale(free_side)
    };
    (dist * sgn, n, t)
}

/// Velocity of the face point with barycentric weights `(1 - t, t)`.
#[inline]
pub fn cloth_contact_velocity<T: Real>(va: V2<T>, vb: V2<T>, t: T) -> V2<T> {
    va * (c::<T>(1.0) - t) + vb * t
}

/// Split `force` over the two face vertices by barycentric weight.
pub fn distribute_cloth_force(force: Vec2, face: [usize; 2], bary: [f64; 2], out: &mut [Vec2]) {
    out[face[0]] += force.scale(bary[0]);
    out[face[1]] += force.scale(bary[1]);
}
