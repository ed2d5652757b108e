use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::math::{Mat2, Vec2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaterialKind {
    Elastic,
    Plastic,
    Liquid,
}

/// Constitutive parameters shared by all particles of a block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Material {
    pub kind: MaterialKind,
    /// Lamé parameters (Pa).
    pub mu: f64,
    pub lambda: f64,
    /// Half-width of the admissible singular-value band for plastic clamping.
    pub yield_stress: f64,
}

impl Material {
    pub fn elastic(mu: f64, lambda: f64) -> Self {
        Material {
            kind: MaterialKind::Elastic,
            mu,
            lambda,
            yield_stress: 0.0,
        }
    }

    pub fn plastic(mu: f64, lambda: f64, yield_stress: f64) -> Self {
        Material {
            kind: MaterialKind::Plastic,
            mu,
            lambda,
            yield_stress,
        }
    }

    pub fn liquid(bulk: f64) -> Self {
        Material {
            kind: MaterialKind::Liquid,
            mu: 0.0,
            lambda: bulk,
            yield_stress: 0.0,
        }
    }

    /// Lamé parameters from Young's modulus and Poisson ratio.
    pub fn lame(e: f64, nu: f64) -> (f64, f64) {
        let mu = e / (2.0 * (1.0 + nu));
        let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
        (mu, lambda)
    }

    pub fn is_solid(&self) -> bool {
        self.kind != MaterialKind::Liquid
    }
}

/// Differentiable per-particle state. Also used as the gradient container.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParticleState {
    pub x: Vec<Vec2>,
    pub v: Vec<Vec2>,
    /// Affine velocity matrix (APIC/MLS).
    pub c: Vec<Mat2>,
    /// Deformation gradient.
    pub f: Vec<Mat2>,
    /// Volume ratio, tracked for liquids only.
    pub j: Vec<f64>,
}

pub type ParticleGrad = ParticleState;

impl ParticleState {
    pub fn zeros(n: usize) -> Self {
        ParticleState {
            x: vec![Vec2::ZERO; n],
            v: vec![Vec2::ZERO; n],
            c: vec![Mat2::ZERO; n],
            f: vec![Mat2::ZERO; n],
            j: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn add_assign(&mut self, o: &ParticleState) {
        for (a, b) in self.x.iter_mut().zip(&o.x) {
            *a += *b;
        }
        for (a, b) in self.v.iter_mut().zip(&o.v) {
            *a += *b;
        }
        for (a, b) in self.c.iter_mut().zip(&o.c) {
            *a += *b;
        }
        for (a, b) in self.f.iter_mut().zip(&o.f) {
            *a += *b;
        }
        for (a, b) in self.j.iter_mut().zip(&o.j) {
            *a += *b;
        }
    }
}

/// Per-particle constants.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParticleProps {
    pub mass: Vec<f64>,
    /// Rest volume (area in 2D).
    pub vol: Vec<f64>,
    pub material: Vec<Material>,
    /// Index of the scene block the particle was sampled from.
    pub block: Vec<u32>,
}

/// Lagrangian MPM state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParticleSet {
    pub state: ParticleState,
    pub props: ParticleProps,
}

impl ParticleSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.state.len()
    }

    pub fn is_empty(&self) -> bool {
        self.state.is_empty()
    }

    pub fn push(&mut self, x: Vec2, v: Vec2, mass: f64, vol: f64, material: Material, block: u32) {
        self.state.x.push(x);
        self.state.v.push(v);
        self.state.c.push(Mat2::ZERO);
        self.state.f.push(Mat2::IDENTITY);
        self.state.j.push(1.0);
        self.props.mass.push(mass);
        self.props.vol.push(vol);
        self.props.material.push(material);
        self.props.block.push(block);
    }

    pub fn total_mass(&self) -> f64 {
        self.props.mass.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &m) in self.props.mass.iter().enumerate() {
            if !(m > 0.0) {
                return Err(SimError::ParticleFault {
                    particle: i,
                    reason: format!("non-positive mass {m}"),
                });
            }
        }
        Ok(())
    }
}

/// Particle impulses registered for the next P2G only.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PendingImpulses {
    pub per_particle: Vec<Vec2>,
}

impl PendingImpulses {
    pub fn new(n: usize) -> Self {
        PendingImpulses {
            per_particle: vec![Vec2::ZERO; n],
        }
    }

    /// Drain the registered impulses, leaving zeros behind.
    pub fn take(&mut self) -> Vec<Vec2> {
        let n = self.per_particle.len();
        std::mem::replace(&mut self.per_particle, vec![Vec2::ZERO; n])
    }
}

/// Register `impulse` on every particle of `selection` for the next P2G.
pub fn apply_particle_impulse(
    pending: &mut PendingImpulses,
    selection: &[usize],
    impulse: Vec2,
) -> Result<()> {
    let n = pending.per_particle.len();
    if let Some(&bad) = selection.iter().find(|&&i| i >= n) {
        return Err(SimError::config(
            "control.impulses.selection",
            format!("particle index {bad} out of range (n = {n})"),
        ));
    }
    for &i in selection {
        pending.per_particle[i] += impulse;
    }
    Ok(())
}
