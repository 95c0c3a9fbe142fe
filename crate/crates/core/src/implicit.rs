//! Newmark kinematics, Dirichlet constraints, trial internal forces, the
//! within-step momentum residual and its diagonal preconditioner.
//!
//! The unknown of an implicit step is the nodal displacement increment
//! `du` on free nodes, flattened node by node as `(x, y, z)` triples in
//! ascending node order.

use rayon::prelude::*;

use crate::constitutive::{first_piola, update_deformation_gradient, StressModel};
use crate::error::{Error, Result};
use crate::model::{GridState, Mat3, NewmarkParams, NodeClass, ParticleSet, SolverParams, Vec3};
use crate::shape::Stencil;
use crate::solver::{newton_solve, NewtonReport, NonlinearSystem};
use crate::transfers::grid_field_gradient;

/// End-of-step acceleration implied by a displacement increment.
#[inline]
pub fn newmark_accel(du: &Vec3, v_n: &Vec3, a_n: &Vec3, dt: f64, beta: f64) -> Vec3 {
    (du - v_n * dt - a_n * (dt * dt * (0.5 - beta))) / (beta * dt * dt)
}

/// End-of-step velocity implied by a displacement increment.
#[inline]
pub fn newmark_velocity(du: &Vec3, v_n: &Vec3, a_n: &Vec3, dt: f64, beta: f64, gamma: f64) -> Vec3 {
    let a_next = newmark_accel(du, v_n, a_n, dt, beta);
    v_n + (a_n * (1.0 - gamma) + a_next * gamma) * dt
}

/// Displacement increment of a node whose end-of-step velocity is
/// prescribed: `du = (v_tar - v_hist) / S` with `S = gamma / (beta dt)`.
#[inline]
pub fn dirichlet_increment(
    v_tar: &Vec3,
    v_n: &Vec3,
    a_n: &Vec3,
    dt: f64,
    beta: f64,
    gamma: f64,
) -> Vec3 {
    let s = gamma / (beta * dt);
    let v_hist =
        v_n * (1.0 - gamma / beta) + a_n * (dt * (1.0 - gamma - gamma * (0.5 - beta) / beta));
    (v_tar - v_hist) / s
}

/// Nodal internal forces at a trial state together with the material
/// stiffness diagonal and the trial deformation gradients.
#[derive(Clone, Debug)]
pub struct InternalForces {
    pub force: Vec<Vec3>,
    pub k_diag: Vec<f64>,
    pub trial_f: Vec<Mat3>,
}

/// End-of-step nodal velocities for a full nodal increment field. Inactive
/// nodes stay at rest.
pub fn end_of_step_velocity(
    grid: &GridState,
    du: &[Vec3],
    dt: f64,
    newmark: &NewmarkParams,
) -> Vec<Vec3> {
    (0..grid.node_count())
        .map(|n| match grid.node_class[n] {
            NodeClass::Inactive => Vec3::zeros(),
            _ => newmark_velocity(
                &du[n],
                &grid.node_velocity[n],
                &grid.node_accel[n],
                dt,
                newmark.beta,
                newmark.gamma,
            ),
        })
        .collect()
}

/// Trial internal forces for a full nodal increment field.
///
/// Each particle's trial deformation is `F = (I + dt grad v^{n+1}) F_n`;
/// the nodal force is `f_I = -sum_p V0_p P(F) F_n^T grad w_Ip`, i.e. the
/// first Piola stress paired with the reference-configuration weight
/// gradient. `k_diag` sums `V0 (lambda + 2 mu) |grad w|^2`, plus
/// `V0 max(0, grad w . tau grad w)` when `geometric` is set.
#[allow(clippy::too_many_arguments)]
pub fn internal_forces(
    particles: &ParticleSet,
    stencils: &[Stencil],
    grid: &GridState,
    du: &[Vec3],
    dt: f64,
    newmark: &NewmarkParams,
    model: &dyn StressModel,
    p_wave_modulus: f64,
    geometric: bool,
) -> Result<InternalForces> {
    let v_next = end_of_step_velocity(grid, du, dt, newmark);
    let per_particle: Vec<(Mat3, Mat3, Mat3)> = stencils
        .par_iter()
        .zip(particles.deformation_gradient.par_iter())
        .zip(particles.ref_volume.par_iter())
        .map(|((stencil, f_n), v0)| {
            let grad_v = grid_field_gradient(&v_next, stencil);
            let f = update_deformation_gradient(f_n, &grad_v, dt)?;
            let tau = model.kirchhoff(&f)?;
            let p = first_piola(&tau, &f)?;
            Ok((p * f_n.transpose() * *v0, tau * *v0, f))
        })
        .collect::<Result<_>>()?;

    let nodes = grid.node_count();
    let mut force = vec![Vec3::zeros(); nodes];
    let mut k_diag = vec![0.0; nodes];
    let mut trial_f = Vec::with_capacity(per_particle.len());
    for (p, (stencil, (factor, tau_v0, f))) in stencils.iter().zip(per_particle).enumerate() {
        let v0 = particles.ref_volume[p];
        for (n, _, grad) in stencil.iter() {
            force[n] -= factor * grad;
            let mut k = v0 * p_wave_modulus * grad.norm_squared();
            if geometric {
                k += grad.dot(&(tau_v0 * grad)).max(0.0);
            }
            k_diag[n] += k;
        }
        trial_f.push(f);
    }
    if force.iter().any(|f| !f.iter().all(|c| c.is_finite())) {
        return Err(Error::NonFinite("internal force".into()));
    }
    Ok(InternalForces {
        force,
        k_diag,
        trial_f,
    })
}

/// Residual `R_I = f_ext + f_int - m_I a^{n+1}_I` over the listed free
/// nodes, flattened.
pub fn momentum_residual(
    grid: &GridState,
    free: &[usize],
    du: &[Vec3],
    internal: &[Vec3],
    external: &[Vec3],
    dt: f64,
    beta: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; 3 * free.len()];
    for (slot, &n) in free.iter().enumerate() {
        let a = newmark_accel(
            &du[n],
            &grid.node_velocity[n],
            &grid.node_accel[n],
            dt,
            beta,
        );
        let r = external[n] + internal[n] - a * grid.node_mass[n];
        out[3 * slot..3 * slot + 3].copy_from_slice(r.as_slice());
    }
    out
}

/// Diagonal right preconditioner `W_I = m_I / (beta dt^2) + K_I`, repeated
/// for the three components of each free node.
pub fn preconditioner_diag(
    grid: &GridState,
    free: &[usize],
    k_diag: &[f64],
    dt: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    let mut w = Vec::with_capacity(3 * free.len());
    for &n in free {
        let wi = grid.node_mass[n] / (beta * dt * dt) + k_diag[n];
        if !(wi > 0.0) || !wi.is_finite() {
            return Err(Error::Invariant(format!(
                "preconditioner entry {wi} at node {n} is not strictly positive"
            )));
        }
        w.extend([wi; 3]);
    }
    Ok(w)
}

/// The nonlinear system of one implicit substep after P2G: unknowns are the
/// free-node increments, Dirichlet increments are fixed by the prescribed
/// velocities.
pub struct ImplicitStep<'a> {
    particles: &'a ParticleSet,
    stencils: &'a [Stencil],
    grid: &'a GridState,
    external: &'a [Vec3],
    model: &'a dyn StressModel,
    dt: f64,
    newmark: NewmarkParams,
    p_wave_modulus: f64,
    geometric: bool,
    free: Vec<usize>,
    /// Full nodal increment with Dirichlet entries filled in; free entries
    /// are overwritten on every evaluation.
    full: Vec<Vec3>,
    k_diag: Vec<f64>,
}

impl<'a> ImplicitStep<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        particles: &'a ParticleSet,
        stencils: &'a [Stencil],
        grid: &'a GridState,
        external: &'a [Vec3],
        model: &'a dyn StressModel,
        dt: f64,
        newmark: NewmarkParams,
        p_wave_modulus: f64,
        geometric: bool,
    ) -> Self {
        let free = grid.free_nodes();
        let mut full = vec![Vec3::zeros(); grid.node_count()];
        for (n, slot) in full.iter_mut().enumerate() {
            if grid.node_class[n] == NodeClass::Dirichlet {
                *slot = dirichlet_increment(
                    &grid.dirichlet_velocity[n],
                    &grid.node_velocity[n],
                    &grid.node_accel[n],
                    dt,
                    newmark.beta,
                    newmark.gamma,
                );
            }
        }
        // Material stiffness does not depend on the increment.
        let mut k_diag = vec![0.0; grid.node_count()];
        for (p, stencil) in stencils.iter().enumerate() {
            let v0 = particles.ref_volume[p];
            for (n, _, grad) in stencil.iter() {
                k_diag[n] += v0 * p_wave_modulus * grad.norm_squared();
            }
        }
        ImplicitStep {
            particles,
            stencils,
            grid,
            external,
            model,
            dt,
            newmark,
            p_wave_modulus,
            geometric,
            free,
            full,
            k_diag,
        }
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.free
    }

    /// Kinematic predictor `dt v_n + dt^2/2 a_n` on free nodes.
    pub fn predictor(&self) -> Vec<f64> {
        let dt = self.dt;
        self.flatten(|n| {
            self.grid.node_velocity[n] * dt + self.grid.node_accel[n] * (0.5 * dt * dt)
        })
    }

    /// Zero-acceleration guess `dt v_n` on free nodes.
    pub fn constant_velocity_guess(&self) -> Vec<f64> {
        self.flatten(|n| self.grid.node_velocity[n] * self.dt)
    }

    fn flatten(&self, f: impl Fn(usize) -> Vec3) -> Vec<f64> {
        self.free.iter().flat_map(|&n| f(n).data.0[0]).collect()
    }

    /// Full nodal increment for a free-node vector.
    pub fn expand(&self, x: &[f64]) -> Vec<Vec3> {
        let mut full = self.full.clone();
        self.scatter_into(x, &mut full);
        full
    }

    fn scatter_into(&self, x: &[f64], full: &mut [Vec3]) {
        for (slot, &n) in self.free.iter().enumerate() {
            full[n] = Vec3::new(x[3 * slot], x[3 * slot + 1], x[3 * slot + 2]);
        }
    }

    pub fn internal_forces_at(&self, full: &[Vec3]) -> Result<InternalForces> {
        internal_forces(
            self.particles,
            self.stencils,
            self.grid,
            full,
            self.dt,
            &self.newmark,
            self.model,
            self.p_wave_modulus,
            self.geometric,
        )
    }

    /// End-of-step nodal velocities for a free-node vector.
    pub fn end_velocity(&self, x: &[f64]) -> Vec<Vec3> {
        end_of_step_velocity(self.grid, &self.expand(x), self.dt, &self.newmark)
    }
}

impl NonlinearSystem for ImplicitStep<'_> {
    fn dim(&self) -> usize {
        3 * self.free.len()
    }

    fn residual(&mut self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let mut full = std::mem::take(&mut self.full);
        self.scatter_into(x, &mut full);
        let forces = self.internal_forces_at(&full);
        self.full = full;
        let forces = forces?;
        if self.geometric {
            self.k_diag = forces.k_diag;
        }
        let r = momentum_residual(
            self.grid,
            &self.free,
            &self.full,
            &forces.force,
            self.external,
            self.dt,
            self.newmark.beta,
        );
        out.copy_from_slice(&r);
        Ok(())
    }

    fn preconditioner(&mut self, _x: &[f64]) -> Vec<f64> {
        preconditioner_diag(
            self.grid,
            &self.free,
            &self.k_diag,
            self.dt,
            self.newmark.beta,
        )
        .unwrap_or_else(|_| {
            // Free nodes carry positive mass, so this only triggers on a
            // corrupted state; fall back to the identity.
            vec![1.0; 3 * self.free.len()]
        })
    }
}

/// A point mass on a linear spring, `m u'' = -k u`, advanced with the same
/// Newmark kinematics and Newton solver as the grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearOscillator {
    pub mass: f64,
    pub stiffness: f64,
}

/// Displacement, velocity and acceleration of a [`LinearOscillator`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OscillatorState {
    pub u: Vec3,
    pub v: Vec3,
    pub a: Vec3,
}

impl LinearOscillator {
    pub fn omega(&self) -> f64 {
        (self.stiffness / self.mass).sqrt()
    }

    /// Largest stable step of symplectic Euler, `2 / omega`.
    pub fn explicit_critical_dt(&self) -> f64 {
        2.0 / self.omega()
    }

    pub fn state(&self, u: Vec3, v: Vec3) -> OscillatorState {
        OscillatorState {
            u,
            v,
            a: -u * (self.stiffness / self.mass),
        }
    }

    /// Implicit Newmark step: solves `-k (u + du) - m a^{n+1}(du) = 0`.
    pub fn implicit_step(
        &self,
        s: &OscillatorState,
        dt: f64,
        newmark: &NewmarkParams,
        solver: &SolverParams,
    ) -> (OscillatorState, NewtonReport) {
        let mut system = SpringResidual {
            osc: *self,
            s: *s,
            dt,
            newmark: *newmark,
        };
        let guess = s.v * dt + s.a * (0.5 * dt * dt);
        let (x, report) = newton_solve(&mut system, guess.as_slice().to_vec(), solver);
        let du = Vec3::from_column_slice(&x);
        let a = newmark_accel(&du, &s.v, &s.a, dt, newmark.beta);
        let v = newmark_velocity(&du, &s.v, &s.a, dt, newmark.beta, newmark.gamma);
        (OscillatorState { u: s.u + du, v, a }, report)
    }

    /// Symplectic Euler step, the explicit counterpart.
    pub fn explicit_step(&self, s: &OscillatorState, dt: f64) -> OscillatorState {
        let v = s.v + s.a * dt;
        let u = s.u + v * dt;
        self.state(u, v)
    }
}

struct SpringResidual {
    osc: LinearOscillator,
    s: OscillatorState,
    dt: f64,
    newmark: NewmarkParams,
}

impl NonlinearSystem for SpringResidual {
    fn dim(&self) -> usize {
        3
    }

    fn residual(&mut self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let du = Vec3::from_column_slice(x);
        let a = newmark_accel(&du, &self.s.v, &self.s.a, self.dt, self.newmark.beta);
        let r = -(self.s.u + du) * self.osc.stiffness - a * self.osc.mass;
        out.copy_from_slice(r.as_slice());
        Ok(())
    }

    fn preconditioner(&mut self, _x: &[f64]) -> Vec<f64> {
        let w = self.osc.mass / (self.newmark.beta * self.dt * self.dt) + self.osc.stiffness;
        vec![w; 3]
    }
}
