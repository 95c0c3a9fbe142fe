//! Particle-to-grid scatter, grid-to-particle gather and grid-field
//! gradients (PIC transfers).
//!
//! Per-particle work runs on the rayon pool; every accumulation into grid
//! nodes happens afterwards in particle index order, so results do not
//! depend on the thread count.

use rayon::prelude::*;

use crate::constitutive::StressModel;
use crate::error::{Error, Result};
use crate::model::{BoundaryCondition, GridState, Mat3, NodeClass, ParticleSet, Vec3};
use crate::shape::{stencil_for, Stencil};

/// Stencils of every particle at its current position.
pub fn compute_stencils(particles: &ParticleSet, grid: &GridState) -> Result<Vec<Stencil>> {
    particles
        .position
        .par_iter()
        .map(|x| stencil_for(x, grid))
        .collect()
}

/// `sum_I f_I (x) grad w_Ip` for a nodal vector field.
pub fn grid_field_gradient(field: &[Vec3], stencil: &Stencil) -> Mat3 {
    let mut g = Mat3::zeros();
    for (n, _, grad) in stencil.iter() {
        g += field[n] * grad.transpose();
    }
    g
}

/// Gradient of a nodal field (velocity or displacement increment) at an
/// arbitrary position.
pub fn grid_incremental_gradient(
    field: &[Vec3],
    position: &Vec3,
    grid: &GridState,
) -> Result<Mat3> {
    Ok(grid_field_gradient(field, &stencil_for(position, grid)?))
}

pub fn interpolate(field: &[Vec3], stencil: &Stencil) -> Vec3 {
    stencil
        .iter()
        .fold(Vec3::zeros(), |acc, (n, w, _)| acc + w * field[n])
}

/// Accumulates `f_I -= A_p grad w_Ip` for per-particle 3x3 factors `A_p`.
pub(crate) fn scatter_stress(factors: &[Mat3], stencils: &[Stencil], out: &mut [Vec3]) {
    for (a, stencil) in factors.iter().zip(stencils) {
        for (n, _, grad) in stencil.iter() {
            out[n] -= a * grad;
        }
    }
}

/// Internal nodal forces of the current particle state,
/// `f_I = -sum_p V0_p P(F_p) F_p^T grad w_Ip = -sum_p V0_p tau_p grad w_Ip`.
pub fn internal_forces_at_rest_state(
    particles: &ParticleSet,
    stencils: &[Stencil],
    model: &dyn StressModel,
    node_count: usize,
) -> Result<Vec<Vec3>> {
    let factors: Vec<Mat3> = particles
        .deformation_gradient
        .par_iter()
        .zip(particles.ref_volume.par_iter())
        .map(|(f, v0)| Ok(model.kirchhoff(f)? * *v0))
        .collect::<Result<_>>()?;
    let mut force = vec![Vec3::zeros(); node_count];
    scatter_stress(&factors, stencils, &mut force);
    Ok(force)
}

/// Scatters mass and momentum, classifies nodes, and sets the start-of-step
/// velocity, external force and acceleration `a = (f_int + f_ext) / m` on
/// active nodes. Returns the nodal external force.
pub fn p2g(
    particles: &ParticleSet,
    stencils: &[Stencil],
    grid: &mut GridState,
    model: &dyn StressModel,
    gravity: &Vec3,
    bcs: &[BoundaryCondition],
) -> Result<Vec<Vec3>> {
    grid.reset();
    let nodes = grid.node_count();
    let mut momentum = vec![Vec3::zeros(); nodes];
    for (p, stencil) in stencils.iter().enumerate() {
        let m = particles.mass[p];
        let mv = m * particles.velocity[p];
        for (n, w, _) in stencil.iter() {
            grid.node_mass[n] += w * m;
            momentum[n] += w * mv;
        }
    }

    let threshold = grid.active_mass_threshold();
    for n in 0..nodes {
        if grid.node_mass[n] > threshold && grid.node_mass[n] > 0.0 {
            grid.node_class[n] = NodeClass::Free;
            grid.node_velocity[n] = momentum[n] / grid.node_mass[n];
        }
    }
    for bc in bcs {
        if let BoundaryCondition::DirichletRegion { region, velocity } = bc {
            for n in 0..nodes {
                if grid.node_class[n] != NodeClass::Inactive
                    && region.contains(&grid.node_position(n))
                {
                    grid.node_class[n] = NodeClass::Dirichlet;
                    grid.dirichlet_velocity[n] = Vec3::from(*velocity);
                }
            }
        }
    }

    let internal = internal_forces_at_rest_state(particles, stencils, model, nodes)?;
    let mut external = vec![Vec3::zeros(); nodes];
    for n in 0..nodes {
        if grid.node_class[n] == NodeClass::Inactive {
            continue;
        }
        external[n] = grid.node_mass[n] * gravity;
        grid.node_accel[n] = (internal[n] + external[n]) / grid.node_mass[n];
    }
    Ok(external)
}

/// How particle positions advance during the gather.
#[derive(Clone, Copy, Debug)]
pub enum Advection<'a> {
    /// `x += dt * v_p` with the gathered velocity.
    Velocity,
    /// `x += sum_I w_Ip du_I` with a nodal displacement increment.
    Displacement(&'a [Vec3]),
}

/// Gathers end-of-step grid velocities to particles, advects them and
/// updates `F <- (I + dt grad v) F`.
pub fn g2p_advect(
    node_velocity: &[Vec3],
    particles: &mut ParticleSet,
    stencils: &[Stencil],
    dt: f64,
    advection: Advection<'_>,
) -> Result<()> {
    let updates: Vec<(Vec3, Vec3, Mat3)> = stencils
        .par_iter()
        .zip(particles.position.par_iter())
        .zip(particles.deformation_gradient.par_iter())
        .map(|((stencil, x), f)| {
            let v = interpolate(node_velocity, stencil);
            let grad_v = grid_field_gradient(node_velocity, stencil);
            let dx = match advection {
                Advection::Velocity => dt * v,
                Advection::Displacement(du) => interpolate(du, stencil),
            };
            let f_new = (Mat3::identity() + grad_v * dt) * f;
            let det = f_new.determinant();
            if !(det > 0.0) {
                return Err(Error::InvertedElement { det });
            }
            Ok((x + dx, v, f_new))
        })
        .collect::<Result<_>>()?;
    for (p, (x, v, f)) in updates.into_iter().enumerate() {
        particles.position[p] = x;
        particles.velocity[p] = v;
        particles.deformation_gradient[p] = f;
    }
    Ok(())
}
