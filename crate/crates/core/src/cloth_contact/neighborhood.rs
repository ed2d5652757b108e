//! Breadth-first face neighbourhoods with a locally consistent orientation.

use std::collections::VecDeque;

use crate::error::{Result, SimError};

/// Per seed face: the faces within BFS depth `k` and the orientation sign of
/// each relative to the seed.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodTable {
    pub depth: usize,
    pub members: Vec<Vec<(usize, i8)>>,
}

impl NeighborhoodTable {
    /// Orientation sign of `face` relative to `seed`, if it is a neighbour.
    pub fn sign(&self, seed: usize, face: usize) -> Option<i8> {
        self.members[seed]
            .iter()
            .find(|(f, _)| *f == face)
            .map(|&(_, s)| s)
    }
}

/// Faces incident to each vertex.
pub fn vertex_faces(nv: usize, faces: &[[usize; 2]]) -> Vec<Vec<usize>> {
    let mut vf = vec![Vec::new(); nv];
    for (f, &[a, b]) in faces.iter().enumerate() {
        vf[a].push(f);
        vf[b].push(f);
    }
    vf
}

/// Sign relating the orientation of two faces sharing vertex `v`.
///
/// Coherently oriented neighbours enter and leave the shared vertex; faces
/// that both start (or both end) there are flipped relative to each other.
pub fn relative_sign(fa: [usize; 2], fb: [usize; 2], v: usize) -> i8 {
    let a_starts = fa[0] == v;
    let b_starts = fb[0] == v;
    if a_starts == b_starts {
        -1
    } else {
        1
    }
}

pub fn build_neighborhoods(nv: usize, faces: &[[usize; 2]], depth: usize) -> Result<NeighborhoodTable> {
    let vf = vertex_faces(nv, faces);
    let mut members = Vec::with_capacity(faces.len());
    for seed in 0..faces.len() {
        let mut sign: Vec<Option<(i8, usize)>> = vec![None; faces.len()];
        let mut order = vec![(seed, 1i8)];
        sign[seed] = Some((1, 0));
        let mut queue = VecDeque::from([seed]);
        while let Some(f) = queue.pop_front() {
            let (sf, df) = sign[f].expect("queued faces carry a sign");
            if df == depth {
                continue;
            }
            for &v in &faces[f] {
                for &g in &vf[v] {
                    if g == f {
                        continue;
                    }
                    let sg = sf * relative_sign(faces[f], faces[g], v);
                    match sign[g] {
                        None => {
                            sign[g] = Some((sg, df + 1));
                            order.push((g, sg));
                            queue.push_back(g);
                        }
                        Some((s, _)) if s != sg => {
                            return Err(SimError::Orientation { a: f, b: g });
                        }
                        _ => {}
                    }
                }
            }
        }
        members.push(order);
    }
    Ok(NeighborhoodTable { depth, members })
}
