//! Domain types shared by every stage of the simulator: particles, the
//! background grid, material and solver parameters, and the scene
//! configuration read from JSON.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Lagrangian particle state stored as parallel arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParticleSet {
    pub mass: Vec<f64>,
    pub position: Vec<Vec3>,
    pub velocity: Vec<Vec3>,
    pub deformation_gradient: Vec<Mat3>,
    pub ref_volume: Vec<f64>,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    /// Appends an undeformed particle at rest.
    pub fn push_at_rest(&mut self, position: Vec3, mass: f64, volume: f64) {
        self.mass.push(mass);
        self.position.push(position);
        self.velocity.push(Vec3::zeros());
        self.deformation_gradient.push(Mat3::identity());
        self.ref_volume.push(volume);
    }

    pub fn extend(&mut self, other: &ParticleSet) {
        self.mass.extend_from_slice(&other.mass);
        self.position.extend_from_slice(&other.position);
        self.velocity.extend_from_slice(&other.velocity);
        self.deformation_gradient
            .extend_from_slice(&other.deformation_gradient);
        self.ref_volume.extend_from_slice(&other.ref_volume);
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn momentum(&self) -> Vec3 {
        self.mass
            .iter()
            .zip(&self.velocity)
            .fold(Vec3::zeros(), |acc, (m, v)| acc + *m * v)
    }

    /// Axis-aligned bounding box of the particle positions.
    pub fn bounds(&self) -> Option<Aabb> {
        let first = self.position.first()?;
        let (mut lo, mut hi) = (*first, *first);
        for p in &self.position {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        Some(Aabb::new(lo, hi))
    }

    /// Checks array lengths, positive masses/volumes, admissible F and
    /// finite state.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.position.len() != n
            || self.velocity.len() != n
            || self.deformation_gradient.len() != n
            || self.ref_volume.len() != n
        {
            return Err(Error::Invariant(
                "particle arrays have inconsistent lengths".into(),
            ));
        }
        for i in 0..n {
            if !(self.mass[i] > 0.0) || !(self.ref_volume[i] > 0.0) {
                return Err(Error::Invariant(format!(
                    "particle {i} has non-positive mass or volume"
                )));
            }
            let det = self.deformation_gradient[i].determinant();
            if !(det > 0.0) {
                return Err(Error::InvertedElement { det });
            }
            if !self.position[i].iter().all(|c| c.is_finite())
                || !self.velocity[i].iter().all(|c| c.is_finite())
            {
                return Err(Error::NonFinite(format!("particle {i}")));
            }
        }
        Ok(())
    }
}

/// Axis-aligned box in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb {
            min: min.into(),
            max: max.into(),
        }
    }

    pub fn lo(&self) -> Vec3 {
        Vec3::from(self.min)
    }

    pub fn hi(&self) -> Vec3 {
        Vec3::from(self.max)
    }

    pub fn extent(&self) -> Vec3 {
        self.hi() - self.lo()
    }

    /// Closed containment test.
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn inside_domain(&self, grid_lim: f64) -> bool {
        (0..3).all(|a| self.min[a] >= 0.0 && self.max[a] <= grid_lim)
    }
}

/// Classification of a grid node for the current step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NodeClass {
    #[default]
    Inactive,
    Free,
    Dirichlet,
}

/// Nodes with mass at or below this fraction of the largest nodal mass stay
/// inactive.
pub const ACTIVE_MASS_FRACTION: f64 = 1e-12;

/// Eulerian background grid. Nodes sit at `h * (i, j, k)` for
/// `0 <= i, j, k <= resolution`.
#[derive(Clone, Debug)]
pub struct GridState {
    pub resolution: usize,
    pub spacing: f64,
    pub grid_lim: f64,
    pub node_mass: Vec<f64>,
    pub node_velocity: Vec<Vec3>,
    pub node_accel: Vec<Vec3>,
    pub delta_u: Vec<Vec3>,
    pub node_class: Vec<NodeClass>,
    pub dirichlet_velocity: Vec<Vec3>,
}

impl GridState {
    pub fn new(resolution: usize, grid_lim: f64) -> Result<Self> {
        if resolution < 4 {
            return Err(Error::param(
                "grid_resolution",
                format!("{resolution} < 4; the cubic stencil spans 4 nodes per axis"),
            ));
        }
        if !(grid_lim > 0.0) || !grid_lim.is_finite() {
            return Err(Error::param("grid_lim", "must be positive and finite"));
        }
        let n = (resolution + 1).pow(3);
        Ok(GridState {
            resolution,
            spacing: grid_lim / resolution as f64,
            grid_lim,
            node_mass: vec![0.0; n],
            node_velocity: vec![Vec3::zeros(); n],
            node_accel: vec![Vec3::zeros(); n],
            delta_u: vec![Vec3::zeros(); n],
            node_class: vec![NodeClass::Inactive; n],
            dirichlet_velocity: vec![Vec3::zeros(); n],
        })
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.resolution + 1
    }

    pub fn node_count(&self) -> usize {
        self.node_mass.len()
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        let n = self.nodes_per_axis();
        (i * n + j) * n + k
    }

    pub fn node_coords(&self, index: usize) -> [usize; 3] {
        let n = self.nodes_per_axis();
        [index / (n * n), (index / n) % n, index % n]
    }

    pub fn node_position(&self, index: usize) -> Vec3 {
        let [i, j, k] = self.node_coords(index);
        Vec3::new(i as f64, j as f64, k as f64) * self.spacing
    }

    /// Zeroes every nodal quantity and marks all nodes inactive.
    pub fn reset(&mut self) {
        self.node_mass.fill(0.0);
        self.node_velocity.fill(Vec3::zeros());
        self.node_accel.fill(Vec3::zeros());
        self.delta_u.fill(Vec3::zeros());
        self.node_class.fill(NodeClass::Inactive);
        self.dirichlet_velocity.fill(Vec3::zeros());
    }

    pub fn active_mass_threshold(&self) -> f64 {
        let max = self.node_mass.iter().cloned().fold(0.0, f64::max);
        ACTIVE_MASS_FRACTION * max
    }

    pub fn is_active(&self, index: usize) -> bool {
        self.node_class[index] != NodeClass::Inactive
    }

    pub fn free_nodes(&self) -> Vec<usize> {
        (0..self.node_count())
            .filter(|&i| self.node_class[i] == NodeClass::Free)
            .collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.node_mass.iter().sum()
    }

    /// Sum of `m_I v_I` over all nodes.
    pub fn momentum(&self) -> Vec3 {
        self.node_mass
            .iter()
            .zip(&self.node_velocity)
            .fold(Vec3::zeros(), |acc, (m, v)| acc + *m * v)
    }
}

/// Allocates a zeroed grid for the configured domain.
pub fn build_grid(config: &SimConfig) -> Result<GridState> {
    GridState::new(config.grid_resolution, config.grid_lim)
}

/// Newmark parameters. The default is the average-acceleration rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewmarkParams {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for NewmarkParams {
    fn default() -> Self {
        NewmarkParams {
            beta: 0.25,
            gamma: 0.5,
        }
    }
}

impl NewmarkParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 0.5) {
            return Err(Error::param("newmark.beta", "must lie in (0, 1/2]"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::param("newmark.gamma", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterialModel {
    #[default]
    NeoHookean,
}

/// Isotropic material with Lamé parameters derived from `(E, nu)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MaterialSpec", into = "MaterialSpec")]
pub struct MaterialParams {
    pub density: f64,
    pub youngs: f64,
    pub poisson: f64,
    pub lame_lambda: f64,
    pub lame_mu: f64,
    pub model: MaterialModel,
}

impl MaterialParams {
    pub fn new(density: f64, youngs: f64, poisson: f64) -> Result<Self> {
        if !(density > 0.0) || !density.is_finite() {
            return Err(Error::param("material.density", "must be positive"));
        }
        let (lame_lambda, lame_mu) = lame_from_young_poisson(youngs, poisson)?;
        Ok(MaterialParams {
            density,
            youngs,
            poisson,
            lame_lambda,
            lame_mu,
            model: MaterialModel::NeoHookean,
        })
    }

    /// P-wave modulus `lambda + 2 mu`.
    pub fn p_wave_modulus(&self) -> f64 {
        self.lame_lambda + 2.0 * self.lame_mu
    }

    /// Dilatational wave speed.
    pub fn wave_speed(&self) -> f64 {
        (self.p_wave_modulus() / self.density).sqrt()
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaterialSpec {
    density: f64,
    #[serde(rename = "E")]
    youngs: f64,
    #[serde(rename = "nu")]
    poisson: f64,
    #[serde(default)]
    model: MaterialModel,
}

impl TryFrom<MaterialSpec> for MaterialParams {
    type Error = Error;

    fn try_from(s: MaterialSpec) -> Result<Self> {
        let mut m = MaterialParams::new(s.density, s.youngs, s.poisson)?;
        m.model = s.model;
        Ok(m)
    }
}

impl From<MaterialParams> for MaterialSpec {
    fn from(m: MaterialParams) -> Self {
        MaterialSpec {
            density: m.density,
            youngs: m.youngs,
            poisson: m.poisson,
            model: m.model,
        }
    }
}

/// Isotropic conversion from Young's modulus and Poisson ratio to Lamé
/// parameters `(lambda, mu)`.
pub fn lame_from_young_poisson(youngs: f64, poisson: f64) -> Result<(f64, f64)> {
    if !(youngs > 0.0) || !youngs.is_finite() {
        return Err(Error::param("material.E", "must be positive and finite"));
    }
    if !(poisson > -1.0 && poisson < 0.5) {
        return Err(Error::param(
            "material.nu",
            format!("{poisson} outside (-1, 0.5); the incompressible limit is singular"),
        ));
    }
    let lambda = youngs * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson));
    let mu = youngs / (2.0 * (1.0 + poisson));
    Ok((lambda, mu))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForcingMode {
    #[default]
    EisenstatWalker,
    Fixed,
}

/// Newton-GMRES controls.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    /// Absolute tolerance on the free-node residual norm, scaled by the
    /// square root of the free dof count.
    pub newton_tol: f64,
    /// Relative tolerance `|R| / |R_0|`.
    pub newton_rel_tol: f64,
    pub newton_max_iters: usize,
    pub gmres_max_iters: usize,
    pub forcing_mode: ForcingMode,
    pub fixed_eta: f64,
    pub ew_gamma: f64,
    pub ew_alpha: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    pub armijo_c: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    pub line_search_enabled: bool,
    pub jvp_target_perturbation: f64,
    /// Adds the stress-dependent term to the preconditioner diagonal.
    pub geometric_stiffness: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            newton_tol: 1e-8,
            newton_rel_tol: 1e-6,
            newton_max_iters: 30,
            gmres_max_iters: 100,
            forcing_mode: ForcingMode::EisenstatWalker,
            fixed_eta: 1e-4,
            ew_gamma: 0.9,
            ew_alpha: 2.0,
            eta_min: 1e-6,
            eta_max: 0.5,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            max_backtracks: 12,
            line_search_enabled: true,
            jvp_target_perturbation: 1e-4,
            geometric_stiffness: false,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.newton_tol >= 0.0) || !(self.newton_rel_tol >= 0.0) {
            return Err(Error::param("solver.newton_tol", "must be non-negative"));
        }
        if self.newton_max_iters == 0 {
            return Err(Error::param("solver.newton_max_iters", "must be >= 1"));
        }
        if self.gmres_max_iters == 0 {
            return Err(Error::param("solver.gmres_max_iters", "must be >= 1"));
        }
        if !(self.eta_min > 0.0 && self.eta_min <= self.eta_max && self.eta_max < 1.0) {
            return Err(Error::param(
                "solver.eta_min/eta_max",
                "require 0 < eta_min <= eta_max < 1",
            ));
        }
        if !(self.fixed_eta > 0.0 && self.fixed_eta < 1.0) {
            return Err(Error::param("solver.fixed_eta", "must lie in (0, 1)"));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::param("solver.armijo_c", "must lie in (0, 1)"));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::param(
                "solver.backtrack_factor",
                "must lie in (0, 1)",
            ));
        }
        if !(self.jvp_target_perturbation > 0.0) {
            return Err(Error::param(
                "solver.jvp_target_perturbation",
                "must be positive",
            ));
        }
        Ok(())
    }
}

/// Time schedule as written in scene files. `substep_dt` is the 1x value;
/// the multiplier scales it at run time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub substep_dt: f64,
    pub frame_dt: f64,
    pub frame_num: usize,
    #[serde(default = "one")]
    pub dt_multiplier: u32,
}

fn one() -> u32 {
    1
}

/// Boundary conditions understood by the stepper.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundaryCondition {
    /// Per-particle force applied to every particle in `region` for
    /// `num_dt` substeps starting at `start_time`.
    ParticleImpulse {
        region: Aabb,
        force: [f64; 3],
        num_dt: usize,
        start_time: f64,
    },
    /// Grid nodes inside `region` follow the prescribed velocity.
    DirichletRegion {
        region: Aabb,
        #[serde(default)]
        velocity: [f64; 3],
    },
}

/// Where the initial particles come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ParticleSource {
    Box {
        region: Aabb,
        spacing: f64,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        spacing: f64,
    },
    /// Point-set file; every point receives `particle_volume`. With
    /// `fill_resolution` set, the hollow interior is filled as well.
    Points {
        path: PathBuf,
        particle_volume: f64,
        #[serde(default)]
        fill_resolution: Option<usize>,
    },
}

/// Full scene description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_scene")]
    pub scene: String,
    pub grid_lim: f64,
    pub grid_resolution: usize,
    pub time: TimeConfig,
    pub material: MaterialParams,
    #[serde(default)]
    pub newmark: NewmarkParams,
    #[serde(default)]
    pub solver: SolverParams,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
    #[serde(default)]
    pub boundary_conditions: Vec<BoundaryCondition>,
    pub particles: ParticleSource,
    #[serde(default = "default_clamp_margin")]
    pub clamp_margin: f64,
}

fn default_scene() -> String {
    "scene".into()
}

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -9.8]
}

fn default_clamp_margin() -> f64 {
    1e-6
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: SimConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_json(&text)?;
        // Point-set paths are relative to the config file.
        if let ParticleSource::Points { path: p, .. } = &mut config.particles {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn gravity(&self) -> Vec3 {
        Vec3::from(self.gravity)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.grid_lim > 0.0) || !self.grid_lim.is_finite() {
            return Err(Error::param("grid_lim", "must be positive and finite"));
        }
        if self.grid_resolution < 4 {
            return Err(Error::param("grid_resolution", "must be >= 4"));
        }
        let t = &self.time;
        if !(t.substep_dt > 0.0) {
            return Err(Error::param("time.substep_dt", "must be positive"));
        }
        if !(t.frame_dt >= t.substep_dt) {
            return Err(Error::param("time.frame_dt", "must be >= substep_dt"));
        }
        if t.dt_multiplier < 1 {
            return Err(Error::param("time.dt_multiplier", "must be >= 1"));
        }
        if !(self.clamp_margin >= 0.0 && 2.0 * self.clamp_margin < self.grid_lim) {
            return Err(Error::param(
                "clamp_margin",
                "must satisfy 0 <= eps < grid_lim/2",
            ));
        }
        self.newmark.validate()?;
        self.solver.validate()?;
        for bc in &self.boundary_conditions {
            let region = match bc {
                BoundaryCondition::ParticleImpulse { region, num_dt, .. } => {
                    if *num_dt == 0 {
                        return Err(Error::param("boundary_conditions.num_dt", "must be >= 1"));
                    }
                    region
                }
                BoundaryCondition::DirichletRegion { region, .. } => region,
            };
            if (0..3).any(|a| region.min[a] > region.max[a]) {
                return Err(Error::param(
                    "boundary_conditions.region",
                    "min must not exceed max",
                ));
            }
        }
        match &self.particles {
            ParticleSource::Box { region, spacing } => {
                if !region.inside_domain(self.grid_lim) {
                    return Err(Error::param(
                        "particles.region",
                        "box must lie inside [0, grid_lim]^3",
                    ));
                }
                if !(*spacing > 0.0) {
                    return Err(Error::param("particles.spacing", "must be positive"));
                }
            }
            ParticleSource::Sphere {
                center,
                radius,
                spacing,
            } => {
                if !(*radius > 0.0) || !(*spacing > 0.0) {
                    return Err(Error::param("particles.radius/spacing", "must be positive"));
                }
                if (0..3).any(|a| center[a] - radius < 0.0 || center[a] + radius > self.grid_lim) {
                    return Err(Error::param(
                        "particles.center",
                        "sphere must lie inside [0, grid_lim]^3",
                    ));
                }
            }
            ParticleSource::Points {
                particle_volume,
                fill_resolution,
                ..
            } => {
                if !(*particle_volume > 0.0) {
                    return Err(Error::param(
                        "particles.particle_volume",
                        "must be positive",
                    ));
                }
                if matches!(fill_resolution, Some(r) if *r < 4) {
                    return Err(Error::param("particles.fill_resolution", "must be >= 4"));
                }
            }
        }
        Ok(())
    }
}

/// Number of lattice sites along one axis of an extent; tolerant to
/// round-off for lattice-aligned extents.
fn lattice_count(extent: f64, spacing: f64) -> usize {
    let n = extent / spacing;
    (n + 1e-9).floor().max(0.0) as usize
}

/// Seeds a regular lattice of particles at the centers of `spacing`-sized
/// cells covering `region`.
pub fn seed_particles_box(
    region: &Aabb,
    spacing: f64,
    material: &MaterialParams,
) -> Result<ParticleSet> {
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::param("spacing", "must be positive and finite"));
    }
    let extent = region.extent();
    let counts = [0, 1, 2].map(|a| lattice_count(extent[a], spacing));
    if counts.contains(&0) {
        return Err(Error::EmptySet(format!(
            "box with extent {:?} holds no lattice site at spacing {spacing}",
            region.extent().as_slice()
        )));
    }
    let volume = spacing.powi(3);
    let mass = material.density * volume;
    let lo = region.lo();
    let mut set = ParticleSet::default();
    for i in 0..counts[0] {
        for j in 0..counts[1] {
            for k in 0..counts[2] {
                let offset = Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5);
                set.push_at_rest(lo + offset * spacing, mass, volume);
            }
        }
    }
    Ok(set)
}

/// Lattice particles whose cell centers fall inside the sphere.
pub fn seed_particles_sphere(
    center: Vec3,
    radius: f64,
    spacing: f64,
    material: &MaterialParams,
) -> Result<ParticleSet> {
    let r = Vec3::repeat(radius);
    let cube = seed_particles_box(&Aabb::new(center - r, center + r), spacing, material)?;
    let mut set = ParticleSet::default();
    for (i, p) in cube.position.iter().enumerate() {
        if (p - center).norm() <= radius {
            set.push_at_rest(*p, cube.mass[i], cube.ref_volume[i]);
        }
    }
    if set.is_empty() {
        return Err(Error::EmptySet("sphere holds no lattice site".into()));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn jelly() -> MaterialParams {
        MaterialParams::new(1000.0, 1e5, 0.3).unwrap()
    }

    #[test]
    fn lame_nu_zero() {
        let (l, m) = lame_from_young_poisson(1.0, 0.0).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(m, 0.5);
    }

    #[test]
    fn lame_typical() {
        let (l, m) = lame_from_young_poisson(1e7, 0.3).unwrap();
        // 1e7 * 0.3 / (1.3 * 0.4) and 1e7 / 2.6
        assert_relative_eq!(l, 5.769_230_769_230_77e6, max_relative = 1e-12);
        assert_relative_eq!(m, 3.846_153_846_153_846e6, max_relative = 1e-12);
    }

    #[test]
    fn lame_incompressible_rejected() {
        assert!(matches!(
            lame_from_young_poisson(2.0, 0.5),
            Err(Error::Parameter { .. })
        ));
        assert!(lame_from_young_poisson(-1.0, 0.2).is_err());
    }

    proptest! {
        #[test]
        fn lame_round_trip(e in 1e-3f64..1e10, nu in -0.99f64..0.499) {
            let (l, m) = lame_from_young_poisson(e, nu).unwrap();
            let e_back = m * (3.0 * l + 2.0 * m) / (l + m);
            let nu_back = l / (2.0 * (l + m));
            prop_assert!((e_back - e).abs() <= 1e-12 * e);
            prop_assert!((nu_back - nu).abs() <= 1e-12 * nu.abs().max(1e-300) || (nu_back - nu).abs() < 1e-15);
        }

        #[test]
        fn seeded_mass_matches_volume(nx in 1usize..6, ny in 1usize..6, nz in 1usize..6) {
            let s = 0.125;
            let region = Aabb { min: [0.25; 3], max: [0.25 + nx as f64 * s, 0.25 + ny as f64 * s, 0.25 + nz as f64 * s] };
            let set = seed_particles_box(&region, s, &jelly()).unwrap();
            let e = region.extent();
            let expected = jelly().density * e.x * e.y * e.z;
            prop_assert!((set.total_mass() - expected).abs() <= 1e-12 * expected);
        }
    }

    #[test]
    fn unit_cube_lattice() {
        let m = jelly();
        let set = seed_particles_box(
            &Aabb {
                min: [0.0; 3],
                max: [1.0; 3],
            },
            0.5,
            &m,
        )
        .unwrap();
        assert_eq!(set.len(), 8);
        assert_relative_eq!(set.total_mass(), m.density, max_relative = 1e-12);
        for f in &set.deformation_gradient {
            assert_eq!(*f, Mat3::identity());
            assert_eq!(f.determinant(), 1.0);
        }
        set.validate().unwrap();
    }

    #[test]
    fn zero_extent_box_rejected() {
        let r = Aabb {
            min: [0.5; 3],
            max: [0.5, 0.7, 0.7],
        };
        assert!(matches!(
            seed_particles_box(&r, 0.1, &jelly()),
            Err(Error::EmptySet(_))
        ));
    }

    #[test]
    fn grid_spacing_and_zeroing() {
        let g = GridState::new(10, 1.0).unwrap();
        assert_relative_eq!(g.spacing, 0.1);
        assert!(g.node_mass.iter().all(|&m| m == 0.0));
        assert!(g.node_class.iter().all(|&c| c == NodeClass::Inactive));
        assert!(matches!(
            GridState::new(2, 1.0),
            Err(Error::Parameter { .. })
        ));
    }

    #[test]
    fn node_index_round_trip() {
        let g = GridState::new(5, 1.0).unwrap();
        for idx in 0..g.node_count() {
            let [i, j, k] = g.node_coords(idx);
            assert_eq!(g.node_index(i, j, k), idx);
        }
    }

    #[test]
    fn config_parses_appendix_keys() {
        let text = r#"{
            "grid_lim": 1.0,
            "grid_resolution": 16,
            "time": { "substep_dt": 1e-4, "frame_dt": 4e-2, "frame_num": 125 },
            "material": { "density": 1000, "E": 1e5, "nu": 0.3 },
            "boundary_conditions": [
                { "type": "particle_impulse", "region": { "min": [0,0,0], "max": [1,1,1] },
                  "force": [-0.18, 0, 0], "num_dt": 1, "start_time": 0.0 }
            ],
            "particles": { "type": "box", "region": { "min": [0.4,0.4,0.4], "max": [0.6,0.6,0.6] }, "spacing": 0.05 }
        }"#;
        let c = SimConfig::from_json(text).unwrap();
        assert_eq!(c.time.frame_num, 125);
        assert_eq!(c.time.dt_multiplier, 1);
        assert_eq!(c.newmark, NewmarkParams::default());
        assert_relative_eq!(c.material.lame_mu, 1e5 / 2.6, max_relative = 1e-12);
        let back = SimConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn config_field_errors() {
        let bad = r#"{ "grid_lim": 1.0, "grid_resolution": 16,
            "time": { "substep_dt": 1e-2, "frame_dt": 1e-3, "frame_num": 1 },
            "material": { "density": 1000, "E": 1e5, "nu": 0.3 },
            "particles": { "type": "box", "region": { "min": [0.4,0.4,0.4], "max": [0.6,0.6,0.6] }, "spacing": 0.05 } }"#;
        let err = SimConfig::from_json(bad).unwrap_err().to_string();
        assert!(err.contains("frame_dt"), "{err}");
        let missing = r#"{ "grid_lim": 1.0 }"#;
        assert!(matches!(
            SimConfig::from_json(missing),
            Err(Error::Config(_))
        ));
    }
}
