//! 2D MLS-MPM core: particles, grid, constitutive models and transfers.

pub mod adjoint;
pub mod constitutive;
pub mod frame;
pub mod grid;
pub mod particles;
pub mod transfer;

pub use constitutive::{kirchhoff_stress, plastic_clamp, stress_momentum};
pub use grid::{Grid, Stencil};
pub use particles::{
    apply_particle_impulse, Material, MaterialKind, ParticleGrad, ParticleProps, ParticleSet, ParticleState,
    PendingImpulses,
};
pub use transfer::{apply_walls, cfl_check, g2p, grid_update, p2g};
