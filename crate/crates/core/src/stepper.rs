//! Frame and substep orchestration for explicit and implicit integration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::constitutive::{NeoHookean, StressModel};
use crate::error::{Error, Result};
use crate::fill::{classify_interior, fill_particles, voxelize};
use crate::implicit::ImplicitStep;
use crate::model::{
    build_grid, seed_particles_box, seed_particles_sphere, BoundaryCondition, GridState,
    MaterialModel, MaterialParams, NewmarkParams, NodeClass, ParticleSet, ParticleSource,
    SimConfig, SolverParams, TimeConfig, Vec3,
};
use crate::solver::{newton_solve, NewtonReport, NonlinearSystem};
use crate::trace::{ClampMask, SubstepRecord, Trace, TraceMeta, FORMAT_VERSION};
use crate::transfers::{compute_stencils, g2p_advect, p2g, Advection};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Explicit,
    Implicit,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Explicit => "explicit",
            Method::Implicit => "implicit",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explicit" => Ok(Method::Explicit),
            "implicit" => Ok(Method::Implicit),
            other => Err(Error::param("method", format!("unknown method {other:?}"))),
        }
    }
}

/// Substep schedule after applying the multiplier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub substep_dt: f64,
    pub frame_dt: f64,
    pub frame_num: usize,
    pub steps_per_frame: usize,
    pub multiplier: u32,
}

impl StepSchedule {
    /// `substep_dt` becomes `k * substep_dt`; `steps_per_frame` is
    /// `round(frame_dt / substep_dt)`, at least 1.
    pub fn new(time: &TimeConfig) -> Result<Self> {
        if time.dt_multiplier < 1 {
            return Err(Error::param("time.dt_multiplier", "must be >= 1"));
        }
        if !(time.substep_dt > 0.0) || !(time.frame_dt > 0.0) {
            return Err(Error::param(
                "time",
                "substep_dt and frame_dt must be positive",
            ));
        }
        let substep_dt = time.substep_dt * time.dt_multiplier as f64;
        let steps_per_frame = ((time.frame_dt / substep_dt).round() as usize).max(1);
        Ok(StepSchedule {
            substep_dt,
            frame_dt: time.frame_dt,
            frame_num: time.frame_num,
            steps_per_frame,
            multiplier: time.dt_multiplier,
        })
    }

    /// Effective time between frames.
    pub fn frame_interval(&self) -> f64 {
        self.steps_per_frame as f64 * self.substep_dt
    }

    pub fn total_substeps(&self) -> usize {
        self.steps_per_frame * self.frame_num
    }
}

/// Clips every coordinate to `[eps, grid_lim - eps]` and flags the
/// particles that moved. Velocities are left alone.
pub fn clamp_particles(particles: &mut ParticleSet, grid_lim: f64, eps: f64) -> ClampMask {
    let mut mask = ClampMask::new(particles.len());
    let (lo, hi) = (eps, grid_lim - eps);
    for (i, x) in particles.position.iter_mut().enumerate() {
        let mut clipped = false;
        for c in x.iter_mut() {
            // NaN compares false everywhere and is left for the caller.
            if *c < lo {
                *c = lo;
                clipped = true;
            } else if *c > hi {
                *c = hi;
                clipped = true;
            }
        }
        if clipped {
            mask.set(i);
        }
    }
    mask
}

/// First substep index at or after `start_time`.
pub fn impulse_start(start_time: f64, dt: f64) -> usize {
    (start_time / dt - 1e-9).ceil().max(0.0) as usize
}

/// Applies a particle impulse if `substep` lies in its window. Each
/// particle in the region receives `dv = (force / k) dt / m_p`. Returns the
/// momentum added.
pub fn apply_impulse(
    particles: &mut ParticleSet,
    bc: &BoundaryCondition,
    substep: usize,
    dt: f64,
    k: u32,
) -> Vec3 {
    let BoundaryCondition::ParticleImpulse {
        region,
        force,
        num_dt,
        start_time,
    } = bc
    else {
        return Vec3::zeros();
    };
    let first = impulse_start(*start_time, dt);
    if substep < first || substep >= first + num_dt {
        return Vec3::zeros();
    }
    let f = Vec3::from(*force) / k as f64;
    let mut added = Vec3::zeros();
    let mut hits = 0;
    for p in 0..particles.len() {
        if region.contains(&particles.position[p]) {
            let dv = f * (dt / particles.mass[p]);
            particles.velocity[p] += dv;
            added += dv * particles.mass[p];
            hits += 1;
        }
    }
    if hits == 0 {
        log::warn!("impulse region {region:?} holds no particles at substep {substep}");
    }
    added
}

/// One explicit (symplectic Euler) substep; positions are not clamped.
pub fn explicit_substep(
    particles: &mut ParticleSet,
    grid: &mut GridState,
    model: &dyn StressModel,
    gravity: &Vec3,
    bcs: &[BoundaryCondition],
    dt: f64,
) -> Result<()> {
    let stencils = compute_stencils(particles, grid)?;
    p2g(particles, &stencils, grid, model, gravity, bcs)?;
    let mut v_next = vec![Vec3::zeros(); grid.node_count()];
    for n in 0..grid.node_count() {
        v_next[n] = match grid.node_class[n] {
            NodeClass::Inactive => Vec3::zeros(),
            NodeClass::Free => grid.node_velocity[n] + grid.node_accel[n] * dt,
            NodeClass::Dirichlet => grid.dirichlet_velocity[n],
        };
    }
    g2p_advect(&v_next, particles, &stencils, dt, Advection::Velocity)
}

/// One implicit Newmark substep; positions are not clamped. A
/// non-converged Newton solve still advances with its best iterate.
#[allow(clippy::too_many_arguments)]
pub fn implicit_substep(
    particles: &mut ParticleSet,
    grid: &mut GridState,
    model: &dyn StressModel,
    material: &MaterialParams,
    gravity: &Vec3,
    bcs: &[BoundaryCondition],
    dt: f64,
    newmark: &NewmarkParams,
    solver: &SolverParams,
) -> Result<NewtonReport> {
    let stencils = compute_stencils(particles, grid)?;
    let external = p2g(particles, &stencils, grid, model, gravity, bcs)?;
    let (du, v_next, report) = {
        let mut system = ImplicitStep::new(
            particles,
            &stencils,
            grid,
            &external,
            model,
            dt,
            *newmark,
            material.p_wave_modulus(),
            solver.geometric_stiffness,
        );
        let x0 = initial_guess(&mut system)?;
        let (x, report) = newton_solve(&mut system, x0, solver);
        (system.expand(&x), system.end_velocity(&x), report)
    };
    g2p_advect(
        &v_next,
        particles,
        &stencils,
        dt,
        Advection::Displacement(&du),
    )?;
    grid.delta_u = du;
    Ok(report)
}

/// Kinematic predictor, else constant velocity, else zero increment: the
/// first guess whose residual can be evaluated.
fn initial_guess(system: &mut ImplicitStep<'_>) -> Result<Vec<f64>> {
    let mut r = vec![0.0; system.dim()];
    let mut last = None;
    let candidates = [
        system.predictor(),
        system.constant_velocity_guess(),
        vec![0.0; system.dim()],
    ];
    for (i, x0) in candidates.into_iter().enumerate() {
        match system.residual(&x0, &mut r) {
            Ok(()) => {
                if i > 0 {
                    log::debug!("predictor inadmissible, using fallback guess {i}");
                }
                return Ok(x0);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one candidate"))
}

/// Particles described by the configured source.
pub fn particles_from_source(config: &SimConfig) -> Result<ParticleSet> {
    let mat = &config.material;
    match &config.particles {
        ParticleSource::Box { region, spacing } => seed_particles_box(region, *spacing, mat),
        ParticleSource::Sphere {
            center,
            radius,
            spacing,
        } => seed_particles_sphere(Vec3::from(*center), *radius, *spacing, mat),
        ParticleSource::Points {
            path,
            particle_volume,
            fill_resolution,
        } => {
            let points = crate::trace::read_points(path)?;
            if points.is_empty() {
                return Err(Error::EmptySet(format!(
                    "{} holds no points",
                    path.display()
                )));
            }
            let mut set = ParticleSet::default();
            for p in &points {
                set.push_at_rest(*p, mat.density * particle_volume, *particle_volume);
            }
            if let Some(res) = fill_resolution {
                let interior = classify_interior(&voxelize(&points, config.grid_lim, *res)?);
                let filled = fill_particles(&interior, mat);
                if filled.is_empty() {
                    log::warn!("particle filling found no interior voxels");
                }
                set.extend(&filled);
            }
            Ok(set)
        }
    }
}

/// Grid and particle totals seen by one P2G.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransferTotals {
    pub particle_mass: f64,
    pub grid_mass: f64,
    pub particle_momentum: Vec3,
    pub grid_momentum: Vec3,
}

/// What one substep produced.
#[derive(Clone, Debug)]
pub struct SubstepOutcome {
    pub clamped: ClampMask,
    pub report: Option<NewtonReport>,
    pub transfer: TransferTotals,
    pub impulse: Vec3,
}

/// A running simulation.
pub struct Simulation {
    config: SimConfig,
    method: Method,
    schedule: StepSchedule,
    particles: ParticleSet,
    grid: GridState,
    model: NeoHookean,
    substep: usize,
    imparted: Vec3,
}

impl Simulation {
    pub fn new(config: SimConfig, method: Method) -> Result<Self> {
        let particles = particles_from_source(&config)?;
        Self::with_particles(config, method, particles)
    }

    pub fn with_particles(
        config: SimConfig,
        method: Method,
        particles: ParticleSet,
    ) -> Result<Self> {
        config.validate()?;
        particles.validate()?;
        if let Some(b) = particles.bounds() {
            if !b.inside_domain(config.grid_lim) {
                return Err(Error::param(
                    "particles",
                    "initial particles must lie inside [0, grid_lim]^3",
                ));
            }
        }
        let schedule = StepSchedule::new(&config.time)?;
        let grid = build_grid(&config)?;
        let model = match config.material.model {
            MaterialModel::NeoHookean => NeoHookean {
                lambda: config.material.lame_lambda,
                mu: config.material.lame_mu,
            },
        };
        Ok(Simulation {
            config,
            method,
            schedule,
            particles,
            grid,
            model,
            substep: 0,
            imparted: Vec3::zeros(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn schedule(&self) -> &StepSchedule {
        &self.schedule
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.particles
    }

    pub fn grid(&self) -> &GridState {
        &self.grid
    }

    pub fn substep_index(&self) -> usize {
        self.substep
    }

    pub fn imparted_momentum(&self) -> Vec3 {
        self.imparted
    }

    /// Impulse forces after the `1/k` rescaling.
    pub fn scaled_impulse_forces(&self) -> Vec<[f64; 3]> {
        let k = self.schedule.multiplier as f64;
        self.config
            .boundary_conditions
            .iter()
            .filter_map(|bc| match bc {
                BoundaryCondition::ParticleImpulse { force, .. } => Some(force.map(|f| f / k)),
                _ => None,
            })
            .collect()
    }

    /// Advances one substep: impulses, transfer and update, clamping.
    pub fn substep(&mut self) -> Result<SubstepOutcome> {
        let dt = self.schedule.substep_dt;
        let k = self.schedule.multiplier;
        let mut impulse = Vec3::zeros();
        for bc in &self.config.boundary_conditions {
            impulse += apply_impulse(&mut self.particles, bc, self.substep, dt, k);
        }
        self.imparted += impulse;

        let gravity = self.config.gravity();
        let particle_mass = self.particles.total_mass();
        let particle_momentum = self.particles.momentum();
        let report = match self.method {
            Method::Explicit => {
                explicit_substep(
                    &mut self.particles,
                    &mut self.grid,
                    &self.model,
                    &gravity,
                    &self.config.boundary_conditions,
                    dt,
                )?;
                None
            }
            Method::Implicit => Some(implicit_substep(
                &mut self.particles,
                &mut self.grid,
                &self.model,
                &self.config.material,
                &gravity,
                &self.config.boundary_conditions,
                dt,
                &self.config.newmark,
                &self.config.solver,
            )?),
        };
        let transfer = TransferTotals {
            particle_mass,
            grid_mass: self.grid.total_mass(),
            particle_momentum,
            grid_momentum: self.grid.momentum(),
        };
        let finite = |v: &Vec3| v.iter().all(|c| c.is_finite());
        if let Some(p) = (0..self.particles.len())
            .find(|&p| !finite(&self.particles.position[p]) || !finite(&self.particles.velocity[p]))
        {
            return Err(Error::NonFinite(format!(
                "particle {p} after substep {}",
                self.substep
            )));
        }
        let clamped = clamp_particles(
            &mut self.particles,
            self.config.grid_lim,
            self.config.clamp_margin,
        );
        self.substep += 1;
        Ok(SubstepOutcome {
            clamped,
            report,
            transfer,
            impulse,
        })
    }
}

fn record(substep: usize, frame: usize, r: &NewtonReport) -> SubstepRecord {
    SubstepRecord {
        substep,
        frame,
        converged: r.converged,
        stagnated: r.stagnated,
        newton_iters: r.newton_iters,
        gmres_iters: r.gmres_iters_per_newton.clone(),
        r0: r.initial_residual_norm,
        r_end: r.final_residual_norm,
        tolerance: r.tolerance,
        wall_time: r.wall_time,
        fallback_used: r.fallback_used,
    }
}

/// Runs the full schedule and records one frame after every
/// `steps_per_frame` substeps. Runtime failures (non-finite state, an
/// inverted explicit update) end the run early with `meta.aborted` set.
pub fn run_simulation(config: &SimConfig, method: Method) -> Result<Trace> {
    let sim = Simulation::new(config.clone(), method)?;
    Ok(run(sim))
}

/// [`run_simulation`] for an already constructed simulation.
pub fn run(mut sim: Simulation) -> Trace {
    let schedule = *sim.schedule();
    let meta = TraceMeta {
        format_version: FORMAT_VERSION,
        scene: sim.config.scene.clone(),
        method: sim.method.to_string(),
        particle_count: sim.particles.len(),
        frame_count: 0,
        grid_lim: sim.config.grid_lim,
        frame_dt: schedule.frame_dt,
        substep_dt: schedule.substep_dt,
        steps_per_frame: schedule.steps_per_frame,
        multiplier: schedule.multiplier,
        clamp_margin: sim.config.clamp_margin,
        impulse_forces: sim.scaled_impulse_forces(),
        imparted_momentum: [0.0; 3],
        expected_frames: schedule.frame_num,
        aborted: false,
        abort_reason: None,
        telemetry_records: 0,
    };
    let mut trace = Trace::new(
        meta,
        sim.particles.mass.clone(),
        sim.particles.ref_volume.clone(),
    );
    'frames: for frame in 0..schedule.frame_num {
        let mut mask = ClampMask::new(sim.particles.len());
        for _ in 0..schedule.steps_per_frame {
            let index = sim.substep;
            match sim.substep() {
                Ok(out) => {
                    mask.union_with(&out.clamped);
                    if let Some(r) = &out.report {
                        trace.telemetry.push(record(index, frame, r));
                    }
                }
                Err(e) => {
                    log::warn!("run aborted at substep {index} (frame {frame}): {e}");
                    trace.meta.aborted = true;
                    trace.meta.abort_reason = Some(format!("substep {index}: {e}"));
                    break 'frames;
                }
            }
        }
        trace.push_frame(&sim.particles.position, mask);
    }
    trace.meta.imparted_momentum = sim.imparted.into();
    trace.meta.telemetry_records = trace.telemetry.len();
    trace
}
