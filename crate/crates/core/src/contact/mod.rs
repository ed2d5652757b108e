//! MPM contact models against rigid bodies and cloth.

pub mod kernels;
pub mod models;
pub mod sdf;

pub use kernels::{
    bc_friction, body_contact_velocity, legal_position_correction, smooth_blend, ContactModel, ContactParams,
};
pub use models::{
    forecast_contact, forecast_contact_backward, grid_contact, grid_contact_backward, particle_contact,
    particle_contact_backward, ClothCollider, ClothHit, ColliderGrad, ContactLedger, ContactStats, RigidCollider,
};
pub use sdf::{sdf_query, SampledSdf, SdfShape};
