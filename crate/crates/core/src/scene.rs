//! JSON scene files: schema, validation and construction of a [`World`].
//!
//! Every optional field is filled in by [`Scene::resolve`], so serialising a
//! parsed scene yields a self-contained description that re-parses to the
//! same configuration.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloth::Cloth;
use crate::cloth_contact::mesh::ClothMesh;
use crate::contact::kernels::{ContactModel, ContactParams};
use crate::contact::sdf::{SampledSdf, SdfShape};
use crate::coupling::{ImpulseGroup, SimConfig, World};
use crate::error::{Result, SimError};
use crate::math::Vec2;
use crate::mpm::grid::Grid;
use crate::mpm::particles::{Material, ParticleSet};
use crate::rigid::{Actuation, HingeJoint, RigidBody, RigidState};
use crate::trajopt::{LossTerm, OptimizerConfig, Projection};

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}

// ---------------------------------------------------------------------------
// schema

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub sim: SimSection,
    #[serde(default)]
    pub mpm: MpmSection,
    #[serde(default)]
    pub bodies: Vec<BodySpec>,
    #[serde(default)]
    pub cloths: Vec<ClothSpec>,
    pub contact: ContactSection,
    #[serde(default)]
    pub control: ControlSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub bench: Option<BenchSpec>,
    #[serde(default)]
    pub grad_check: Option<GradCheckSpec>,
    /// Directory relative paths are resolved against; not serialised.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub res: usize,
    /// MPM time step.
    pub dt: f64,
    /// MPM substeps per manipulator step.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Manipulator steps to simulate.
    pub steps: usize,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 2],
    #[serde(default)]
    pub strict: bool,
    #[serde(default = "default_cfl")]
    pub cfl_limit: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_dim() -> usize {
    2
}
fn default_substeps() -> usize {
    10
}
fn default_gravity() -> [f64; 2] {
    [0.0, -9.8]
}
fn default_cfl() -> f64 {
    0.3
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpmSection {
    #[serde(default)]
    pub blocks: Vec<BlockSpec>,
}

/// Axis-aligned box or disc in world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Region {
    Box { center: [f64; 2], half: [f64; 2] },
    Circle { center: [f64; 2], radius: f64 },
}

impl Region {
    pub fn contains(&self, p: Vec2) -> bool {
        match self {
            Region::Box { center, half } => {
                (p.x - center[0]).abs() <= half[0] && (p.y - center[1]).abs() <= half[1]
            }
            Region::Circle { center, radius } => (p - Vec2::new(center[0], center[1])).norm() <= *radius,
        }
    }

    /// Lower corner and size of the bounding box.
    pub fn bounds(&self) -> (Vec2, Vec2) {
        match self {
            Region::Box { center, half } => (
                Vec2::new(center[0] - half[0], center[1] - half[1]),
                Vec2::new(2.0 * half[0], 2.0 * half[1]),
            ),
            Region::Circle { center, radius } => (
                Vec2::new(center[0] - radius, center[1] - radius),
                Vec2::new(2.0 * radius, 2.0 * radius),
            ),
        }
    }

    fn validate(&self, path: &str) -> Result<()> {
        let ok = match self {
            Region::Box { half, .. } => half[0] > 0.0 && half[1] > 0.0,
            Region::Circle { radius, .. } => *radius > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::config(path, "region extent must be positive"))
        }
    }

    /// Cell-centred lattice points of spacing `h` inside the region.
    pub fn lattice(&self, h: f64) -> Vec<Vec2> {
        let (lo, size) = self.bounds();
        let nx = (size.x / h).round().max(1.0) as usize;
        let ny = (size.y / h).round().max(1.0) as usize;
        let mut out = Vec::new();
        for i in 0..nx {
            for j in 0..ny {
                let p = Vec2::new(lo.x + (i as f64 + 0.5) * h, lo.y + (j as f64 + 0.5) * h);
                if self.contains(p) {
                    out.push(p);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaterialSpec {
    Elastic { youngs: f64, poisson: f64 },
    Plastic { youngs: f64, poisson: f64, yield_stress: f64 },
    Liquid { bulk: f64 },
}

impl MaterialSpec {
    fn build(&self, path: &str) -> Result<Material> {
        let lame = |e: f64, nu: f64| {
            if !(e > 0.0) {
                return Err(SimError::config(format!("{path}.youngs"), "must be positive"));
            }
            if !(0.0..0.5).contains(&nu) {
                return Err(SimError::config(format!("{path}.poisson"), "must lie in [0, 0.5)"));
            }
            Ok(Material::lame(e, nu))
        };
        match *self {
            MaterialSpec::Elastic { youngs, poisson } => {
                let (mu, la) = lame(youngs, poisson)?;
                Ok(Material::elastic(mu, la))
            }
            MaterialSpec::Plastic {
                youngs,
                poisson,
                yield_stress,
            } => {
                let (mu, la) = lame(youngs, poisson)?;
                if !(yield_stress > 0.0) {
                    return Err(SimError::config(format!("{path}.yield_stress"), "must be positive"));
                }
                Ok(Material::plastic(mu, la, yield_stress))
            }
            MaterialSpec::Liquid { bulk } => {
                if !(bulk > 0.0) {
                    return Err(SimError::config(format!("{path}.bulk"), "must be positive"));
                }
                Ok(Material::liquid(bulk))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub region: Region,
    pub material: MaterialSpec,
    /// kg/m^2.
    pub density: f64,
    /// Particles per cell along each axis.
    #[serde(default = "default_ppc")]
    pub ppc: usize,
    /// Uniform jitter as a fraction of the lattice spacing.
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub velocity: [f64; 2],
}

fn default_ppc() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeSpec {
    Circle { radius: f64 },
    Box { half: [f64; 2] },
    Annulus { radius: f64, thickness: f64, #[serde(default)] opening: f64 },
    Capsule { half_length: f64, radius: f64 },
}

impl ShapeSpec {
    fn sdf(&self) -> SdfShape {
        match *self {
            ShapeSpec::Circle { radius } => SdfShape::Circle { radius },
            ShapeSpec::Box { half } => SdfShape::Box {
                half: Vec2::new(half[0], half[1]),
            },
            ShapeSpec::Annulus {
                radius,
                thickness,
                opening,
            } => SdfShape::AnnulusContainer {
                radius,
                thickness,
                opening,
            },
            ShapeSpec::Capsule { half_length, radius } => SdfShape::Capsule { half_length, radius },
        }
    }

    fn validate(&self, path: &str) -> Result<()> {
        let ok = match *self {
            ShapeSpec::Circle { radius } => radius > 0.0,
            ShapeSpec::Box { half } => half[0] > 0.0 && half[1] > 0.0,
            ShapeSpec::Annulus {
                radius,
                thickness,
                opening,
            } => radius > 0.0 && thickness > 0.0 && thickness < 2.0 * radius && (0.0..std::f64::consts::PI).contains(&opening),
            ShapeSpec::Capsule { half_length, radius } => half_length >= 0.0 && radius > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::config(path, "invalid shape dimensions"))
        }
    }

    /// Rotational inertia of a uniform body of mass `m`.
    pub fn inertia(&self, m: f64) -> f64 {
        match *self {
            ShapeSpec::Circle { radius } => 0.5 * m * radius * radius,
            ShapeSpec::Box { half } => m * (half[0] * half[0] + half[1] * half[1]) / 3.0,
            ShapeSpec::Annulus { radius, thickness, .. } => {
                let (ri, ro) = (radius - 0.5 * thickness, radius + 0.5 * thickness);
                0.5 * m * (ri * ri + ro * ro)
            }
            ShapeSpec::Capsule { half_length, radius } => {
                let (a, b) = (half_length + radius, radius);
                m * (a * a + b * b) / 3.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModeSpec {
    Kinematic,
    Dynamic,
    Hinge {
        /// Pivot in world coordinates.
        anchor: [f64; 2],
        #[serde(default)]
        damping: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodySpec {
    pub name: String,
    pub shape: ShapeSpec,
    /// Bake the shape into a sampled SDF with this many cells per axis.
    #[serde(default)]
    pub sdf_resolution: Option<usize>,
    pub mass: f64,
    #[serde(default)]
    pub inertia: Option<f64>,
    pub mode: ModeSpec,
    pub position: [f64; 2],
    #[serde(default)]
    pub angle: f64,
    #[serde(default)]
    pub velocity: [f64; 2],
    #[serde(default)]
    pub omega: f64,
    #[serde(default = "one")]
    pub gravity_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeshSpec {
    /// Open polyline from `from` to `to`; its positive side is on the right
    /// of the travel direction.
    Strip {
        from: [f64; 2],
        to: [f64; 2],
        segments: usize,
    },
    /// Closed counter-clockwise polygon.
    Loop {
        center: [f64; 2],
        radius: f64,
        segments: usize,
    },
    Obj { path: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClothSpec {
    pub name: String,
    pub mesh: MeshSpec,
    /// kg/m.
    pub line_density: f64,
    /// Stretch stiffness (N/m).
    pub ks: f64,
    #[serde(default)]
    pub kb: f64,
    #[serde(default)]
    pub damping: f64,
    #[serde(default = "one")]
    pub gravity_scale: f64,
    /// Velocity-controlled vertices.
    #[serde(default)]
    pub control: Vec<usize>,
    #[serde(default)]
    pub substeps: Option<usize>,
    #[serde(default)]
    pub velocity: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactSection {
    pub model: ContactModel,
    #[serde(default)]
    pub d_hat: Option<f64>,
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub k: Option<f64>,
    #[serde(default = "yes")]
    pub tracing: bool,
    #[serde(default = "default_depth")]
    pub neighborhood_depth: usize,
}

fn default_depth() -> usize {
    2
}

impl ContactSection {
    /// Contact parameters; valid after [`Scene::resolve`].
    pub fn params(&self) -> ContactParams {
        ContactParams {
            d_hat: self.d_hat.unwrap_or(f64::NAN),
            mu: self.mu.unwrap_or(f64::NAN),
            beta: self.beta.unwrap_or(f64::NAN),
            alpha: self.alpha.unwrap_or(f64::NAN),
            k: self.k.unwrap_or(f64::NAN),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    #[serde(default)]
    pub impulses: Vec<ImpulseSpec>,
    /// Initial action sequence, one signal per action component.
    #[serde(default)]
    pub schedule: Vec<ScheduleEntry>,
    #[serde(default)]
    pub bounds: Vec<BoundSpec>,
}

/// Particles driven by one shared impulse; selected by block and/or region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpulseSpec {
    pub name: String,
    #[serde(default)]
    pub block: Option<u32>,
    #[serde(default)]
    pub region: Option<Region>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Signal {
    Constant {
        value: f64,
    },
    /// `amplitude * sin(2 pi t / period + phase)` at the step start time.
    Sine {
        amplitude: f64,
        period: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `amplitude * sign(sin(2 pi t / period + phase))`: constant speed with
    /// periodic reversals.
    Square {
        amplitude: f64,
        period: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Explicit values, each held for `hold` steps; the last value persists.
    Steps {
        values: Vec<f64>,
        #[serde(default = "one_step")]
        hold: usize,
    },
}

fn one_step() -> usize {
    1
}

impl Signal {
    pub fn at(&self, step: usize, step_dt: f64) -> f64 {
        match self {
            Signal::Constant { value } => *value,
            Signal::Sine {
                amplitude,
                period,
                phase,
            } => amplitude * (std::f64::consts::TAU * step as f64 * step_dt / period + phase).sin(),
            Signal::Square {
                amplitude,
                period,
                phase,
            } => {
                let s = (std::f64::consts::TAU * step as f64 * step_dt / period + phase).sin();
                if s >= 0.0 {
                    *amplitude
                } else {
                    -amplitude
                }
            }
            Signal::Steps { values, hold } => values[(step / hold).min(values.len() - 1)],
        }
    }
}

/// Signal for one action component of a named body, cloth or impulse group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub target: String,
    pub component: usize,
    pub signal: Signal,
}

/// Projection box; `component = None` covers all components of the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSpec {
    pub target: String,
    #[serde(default)]
    pub component: Option<usize>,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    #[serde(default)]
    pub terms: Vec<LossTerm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Write a frame every this many steps; 0 disables frames.
    #[serde(default = "default_frame_every")]
    pub frame_every: usize,
    #[serde(default)]
    pub dir: Option<String>,
}

fn default_frame_every() -> usize {
    1
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            frame_every: default_frame_every(),
            dir: None,
        }
    }
}

/// Model x wall-thickness matrix for the shaking-container benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    /// Name of the annulus container body.
    pub container: String,
    /// Wall thicknesses in units of the grid spacing.
    pub thicknesses: Vec<f64>,
    pub models: Vec<BenchModel>,
    /// Incoming normal speed below which contacts are not rebound events.
    #[serde(default = "default_rebound_speed")]
    pub rebound_min_speed: f64,
}

fn default_rebound_speed() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchModel {
    pub model: ContactModel,
    /// Penalty stiffness override for the particle model.
    #[serde(default)]
    pub k: Option<f64>,
}

impl BenchModel {
    pub fn label(&self) -> String {
        match (self.model, self.k) {
            (ContactModel::Particle, Some(k)) => format!("particle(k={k})"),
            (m, _) => format!("{m:?}").to_lowercase(),
        }
    }
}

/// Finite-difference audit settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckSpec {
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Explicit `[step, component]` probes; empty means sample `samples`
    /// components from the scene seed.
    #[serde(default)]
    pub probes: Vec<[usize; 2]>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Components whose adjoint and FD magnitudes are both below this are
    /// not compared.
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn default_eps() -> f64 {
    1e-5
}
fn default_samples() -> usize {
    24
}
fn default_tolerance() -> f64 {
    1e-3
}
fn default_floor() -> f64 {
    1e-8
}

// ---------------------------------------------------------------------------
// parsing and validation

/// Map a serde error to a configuration error naming the JSON path.
fn schema_error(e: serde_path_to_error::Error<serde_json::Error>) -> SimError {
    let path = e.path().to_string();
    let path = if path == "." { "<root>".to_string() } else { path };
    SimError::config(path, e.into_inner().to_string())
}

/// Built scene ready to simulate.
#[derive(Clone, Debug)]
pub struct Built {
    pub world: World,
    pub actions: Vec<Vec<f64>>,
    pub projection: Projection,
    pub loss: Vec<LossTerm>,
}

impl Scene {
    /// Parse, fill defaults and validate.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut scene: Scene = serde_path_to_error::deserialize(de).map_err(schema_error)?;
        scene.resolve();
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut s = Self::from_json_str(&text)?;
        s.base_dir = path.parent().map(Path::to_path_buf);
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.sim.res as f64
    }

    pub fn step_dt(&self) -> f64 {
        self.sim.dt * self.sim.substeps as f64
    }

    /// Fill every defaulted field so the scene serialises completely.
    pub fn resolve(&mut self) {
        let d = ContactParams::for_dx(if self.sim.res > 0 { self.dx() } else { 1.0 });
        let c = &mut self.contact;
        c.d_hat.get_or_insert(d.d_hat);
        c.mu.get_or_insert(d.mu);
        c.beta.get_or_insert(d.beta);
        c.alpha.get_or_insert(d.alpha);
        c.k.get_or_insert(d.k);
        for b in &mut self.bodies {
            if b.inertia.is_none() {
                b.inertia = Some(b.shape.inertia(b.mass));
            }
        }
    }

    /// Checks that do not need the built world.
    pub fn validate(&self) -> Result<()> {
        let s = &self.sim;
        if s.dim != 2 {
            return Err(SimError::config("sim.dim", "only 2D scenes are supported"));
        }
        if s.res < 8 {
            return Err(SimError::config("sim.res", "grid resolution must be at least 8"));
        }
        if !(s.dt > 0.0) {
            return Err(SimError::config("sim.dt", "must be positive"));
        }
        if s.substeps == 0 {
            return Err(SimError::config("sim.substeps", "must be at least 1"));
        }
        if s.steps == 0 {
            return Err(SimError::config("sim.steps", "must be at least 1"));
        }
        if !(s.cfl_limit > 0.0) {
            return Err(SimError::config("sim.cfl_limit", "must be positive"));
        }
        if !s.gravity.iter().all(|g| g.is_finite()) {
            return Err(SimError::config("sim.gravity", "must be finite"));
        }
        for (i, b) in self.mpm.blocks.iter().enumerate() {
            let p = format!("mpm.blocks[{i}]");
            if !(b.density > 0.0) {
                return Err(SimError::config(format!("{p}.density"), "density must be positive"));
            }
            if b.ppc == 0 {
                return Err(SimError::config(format!("{p}.ppc"), "must be at least 1"));
            }
            if !(0.0..1.0).contains(&b.jitter) {
                return Err(SimError::config(format!("{p}.jitter"), "must lie in [0, 1)"));
            }
            b.region.validate(&format!("{p}.region"))?;
            b.material.build(&format!("{p}.material"))?;
        }
        let mut names: HashMap<String, String> = HashMap::new();
        let mut claim = |name: &str, path: String| {
            if let Some(prev) = names.insert(name.to_string(), path.clone()) {
                return Err(SimError::config(
                    format!("{path}.name"),
                    format!("name `{name}` already used by {prev}"),
                ));
            }
            Ok(())
        };
        for (i, b) in self.bodies.iter().enumerate() {
            let p = format!("bodies[{i}]");
            claim(&b.name, p.clone())?;
            b.shape.validate(&format!("{p}.shape"))?;
            if !(b.mass > 0.0) {
                return Err(SimError::config(format!("{p}.mass"), "mass must be positive"));
            }
            if !(b.inertia.unwrap_or(1.0) > 0.0) {
                return Err(SimError::config(format!("{p}.inertia"), "inertia must be positive"));
            }
            if b.sdf_resolution.is_some_and(|r| r < 4) {
                return Err(SimError::config(format!("{p}.sdf_resolution"), "must be at least 4"));
            }
            if let ModeSpec::Hinge { damping, .. } = b.mode {
                if !(damping >= 0.0) {
                    return Err(SimError::config(format!("{p}.mode.damping"), "must be non-negative"));
                }
            }
        }
        for (i, c) in self.cloths.iter().enumerate() {
            let p = format!("cloths[{i}]");
            claim(&c.name, p.clone())?;
            if !(c.line_density > 0.0) {
                return Err(SimError::config(format!("{p}.line_density"), "must be positive"));
            }
        }
        for (i, g) in self.control.impulses.iter().enumerate() {
            claim(&g.name, format!("control.impulses[{i}]"))?;
            if g.block.is_none() && g.region.is_none() {
                return Err(SimError::config(
                    format!("control.impulses[{i}]"),
                    "select particles by block, region or both",
                ));
            }
        }
        self.contact
            .params()
            .validate()
            .map_err(|m| SimError::config("contact", m))?;
        if let Some(o) = &self.optimizer {
            o.validate()?;
        }
        if self.loss.terms.iter().any(|t| !(t.weight() >= 0.0)) {
            return Err(SimError::config("loss.terms", "weights must be non-negative"));
        }
        if let Some(b) = &self.bench {
            if b.thicknesses.is_empty() || b.thicknesses.iter().any(|t| !(*t > 0.0)) {
                return Err(SimError::config("bench.thicknesses", "need positive thicknesses"));
            }
            if b.models.is_empty() {
                return Err(SimError::config("bench.models", "need at least one model"));
            }
            match self.bodies.iter().find(|x| x.name == b.container) {
                Some(BodySpec {
                    shape: ShapeSpec::Annulus { .. },
                    ..
                }) => {}
                _ => return Err(SimError::config("bench.container", "must name an annulus body")),
            }
        }
        if let Some(g) = &self.grad_check {
            if !(g.eps > 0.0) {
                return Err(SimError::config("grad_check.eps", "must be positive"));
            }
        }
        for (i, e) in self.control.schedule.iter().enumerate() {
            let ok = match &e.signal {
                Signal::Constant { value } => value.is_finite(),
                Signal::Sine { period, .. } | Signal::Square { period, .. } => *period > 0.0,
                Signal::Steps { values, hold } => !values.is_empty() && *hold > 0,
            };
            if !ok {
                return Err(SimError::config(format!("control.schedule[{i}].signal"), "invalid signal"));
            }
        }
        for (i, b) in self.control.bounds.iter().enumerate() {
            if !(b.lo <= b.hi) {
                return Err(SimError::config(format!("control.bounds[{i}]"), "lo must not exceed hi"));
            }
        }
        Ok(())
    }

    /// Sample all particle blocks with the seeded jitter.
    pub fn particles(&self) -> Result<ParticleSet> {
        let dx = self.dx();
        let (lo, hi) = Grid::new(self.sim.res).safe_bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(self.sim.seed);
        let mut ps = ParticleSet::new();
        for (i, b) in self.mpm.blocks.iter().enumerate() {
            let p = format!("mpm.blocks[{i}]");
            let mat = b.material.build(&format!("{p}.material"))?;
            let h = dx / b.ppc as f64;
            let pts = b.region.lattice(h);
            if pts.is_empty() {
                return Err(SimError::config(format!("{p}.region"), "region contains no particles"));
            }
            for x in pts {
                let j = if b.jitter > 0.0 {
                    Vec2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)).scale(b.jitter * h)
                } else {
                    Vec2::ZERO
                };
                let x = x + j;
                if x.x < lo || x.y < lo || x.x > hi || x.y > hi {
                    return Err(SimError::config(
                        format!("{p}.region"),
                        format!("particle at ({:.4}, {:.4}) lies outside the simulation domain", x.x, x.y),
                    ));
                }
                let v = Vec2::new(b.velocity[0], b.velocity[1]);
                ps.push(x, v, b.density * h * h, h * h, mat, i as u32);
            }
        }
        Ok(ps)
    }

    fn body(&self, i: usize) -> Result<RigidBody> {
        let b = &self.bodies[i];
        let pos = Vec2::new(b.position[0], b.position[1]);
        let mode = match b.mode {
            ModeSpec::Kinematic => Actuation::Kinematic,
            ModeSpec::Dynamic => Actuation::Dynamic,
            ModeSpec::Hinge { anchor, damping } => {
                let aw = Vec2::new(anchor[0], anchor[1]);
                let (s, c) = b.angle.sin_cos();
                let d = aw - pos;
                // rotate the world offset back into the body frame
                let al = Vec2::new(c * d.x + s * d.y, -s * d.x + c * d.y);
                Actuation::Hinge(HingeJoint {
                    anchor_world: aw,
                    anchor_local: al,
                    damping,
                })
            }
        };
        let mut shape = b.shape.sdf();
        if let Some(r) = b.sdf_resolution {
            shape = SdfShape::Sampled(Arc::new(SampledSdf::from_shape(&shape, r, 2.0 * self.dx())));
        }
        let mut body = RigidBody {
            name: b.name.clone(),
            shape,
            mass: b.mass,
            inertia: b.inertia.unwrap_or_else(|| b.shape.inertia(b.mass)),
            gravity_scale: b.gravity_scale,
            mode,
            state: RigidState {
                pos,
                theta: b.angle,
                vel: Vec2::new(b.velocity[0], b.velocity[1]),
                omega: b.omega,
            },
        };
        body.sync();
        Ok(body)
    }

    fn cloth(&self, i: usize) -> Result<Cloth> {
        let c = &self.cloths[i];
        let p = format!("cloths[{i}]");
        let wrap = |e: SimError| match e {
            SimError::Mesh(m) => SimError::config(format!("{p}.mesh"), m),
            e => e,
        };
        let mut mesh = match &c.mesh {
            MeshSpec::Strip { from, to, segments } => ClothMesh::strip(
                Vec2::new(from[0], from[1]),
                Vec2::new(to[0], to[1]),
                *segments,
                c.line_density,
            ),
            MeshSpec::Loop {
                center,
                radius,
                segments,
            } => ClothMesh::circle_loop(Vec2::new(center[0], center[1]), *radius, *segments, c.line_density),
            MeshSpec::Obj { path } => {
                let full = match &self.base_dir {
                    Some(d) => d.join(path),
                    None => PathBuf::from(path),
                };
                let text = std::fs::read_to_string(&full)
                    .map_err(|e| SimError::config(format!("{p}.mesh.path"), format!("{}: {e}", full.display())))?;
                ClothMesh::from_obj(&text, c.line_density)
            }
        }
        .map_err(wrap)?;
        for v in &mut mesh.vel {
            *v = Vec2::new(c.velocity[0], c.velocity[1]);
        }
        Cloth::new(
            c.name.clone(),
            mesh,
            c.ks,
            c.kb,
            c.damping,
            c.gravity_scale,
            c.control.clone(),
            self.step_dt(),
            c.substeps,
        )
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            res: self.sim.res,
            dt: self.sim.dt,
            substeps: self.sim.substeps,
            gravity: Vec2::new(self.sim.gravity[0], self.sim.gravity[1]),
            cfl_limit: self.sim.cfl_limit,
            strict: self.sim.strict,
            model: self.contact.model,
            params: self.contact.params(),
            tracing: self.contact.tracing,
            neighborhood_depth: self.contact.neighborhood_depth,
        }
    }

    /// Offset and width of each named action target.
    pub fn action_layout(&self, world: &World) -> HashMap<String, (usize, usize)> {
        let mut out = HashMap::new();
        let mut off = 0;
        for b in &world.bodies {
            out.insert(b.name.clone(), (off, b.action_dim()));
            off += b.action_dim();
        }
        for c in &world.cloths {
            out.insert(c.name.clone(), (off, c.action_dim()));
            off += c.action_dim();
        }
        for g in &world.impulse_groups {
            out.insert(g.name.clone(), (off, 2));
            off += 2;
        }
        out
    }

    /// Construct the world, the initial actions, projection and loss terms.
    pub fn build(&self) -> Result<Built> {
        let particles = self.particles()?;
        let bodies = (0..self.bodies.len()).map(|i| self.body(i)).collect::<Result<Vec<_>>>()?;
        let cloths = (0..self.cloths.len()).map(|i| self.cloth(i)).collect::<Result<Vec<_>>>()?;
        let mut groups = Vec::new();
        for (i, g) in self.control.impulses.iter().enumerate() {
            let sel: Vec<usize> = (0..particles.len())
                .filter(|&k| g.block.map_or(true, |b| particles.props.block[k] == b))
                .filter(|&k| g.region.as_ref().map_or(true, |r| r.contains(particles.state.x[k])))
                .collect();
            if sel.is_empty() {
                return Err(SimError::config(format!("control.impulses[{i}]"), "selection is empty"));
            }
            groups.push(ImpulseGroup {
                name: g.name.clone(),
                particles: sel,
            });
        }
        let world = World::new(self.sim_config(), particles, bodies, cloths, groups)?;
        let layout = self.action_layout(&world);
        let dim = world.action_dim();
        let lookup = |target: &str, comp: Option<usize>, path: String| -> Result<(usize, usize)> {
            let &(off, w) = layout
                .get(target)
                .ok_or_else(|| SimError::config(format!("{path}.target"), format!("no actuated target `{target}`")))?;
            match comp {
                Some(c) if c >= w => Err(SimError::config(
                    format!("{path}.component"),
                    format!("`{target}` has {w} action components"),
                )),
                Some(c) => Ok((off + c, off + c + 1)),
                None => Ok((off, off + w)),
            }
        };
        let dt = self.step_dt();
        let mut actions = vec![vec![0.0; dim]; self.sim.steps];
        for (i, e) in self.control.schedule.iter().enumerate() {
            let (k, _) = lookup(&e.target, Some(e.component), format!("control.schedule[{i}]"))?;
            for (n, a) in actions.iter_mut().enumerate() {
                a[k] = e.signal.at(n, dt);
            }
        }
        let mut projection: Projection = vec![None; dim];
        for (i, b) in self.control.bounds.iter().enumerate() {
            let (s, e) = lookup(&b.target, b.component, format!("control.bounds[{i}]"))?;
            for slot in &mut projection[s..e] {
                *slot = Some([b.lo, b.hi]);
            }
        }
        for (i, t) in self.loss.terms.iter().enumerate() {
            t.validate(&world, &format!("loss.terms[{i}]"))?;
        }
        Ok(Built {
            world,
            actions,
            projection,
            loss: self.loss.terms.clone(),
        })
    }
}
