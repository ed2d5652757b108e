//! Penetration tracing against thin (non-volumetric) cloth meshes.

pub mod hash;
pub mod mesh;
pub mod neighborhood;
pub mod tracing;

pub use hash::{nearest_face, nearest_face_brute, NearestFace, SpatialHash};
pub use mesh::ClothMesh;
pub use neighborhood::{build_neighborhoods, NeighborhoodTable};
pub use tracing::{
    cloth_contact_velocity, distribute_cloth_force, signed_distance_cloth, update_penetration_state,
    PenetrationState, TraceContext, TraceEvent,
};
