//! Hyperelastic stress and deformation-gradient updates.
//!
//! The only implemented law is compressible Neo-Hookean with a logarithmic
//! volumetric term,
//!
//! ```text
//! psi(F) = mu/2 (tr(F F^T) - 3) - mu ln J + lambda/2 (ln J)^2
//! tau    = mu (F F^T - I) + lambda ln J I
//! ```
//!
//! Other laws plug in through [`StressModel`].

use crate::error::{Error, Result};
use crate::model::{Mat3, MaterialModel, MaterialParams};

/// Kirchhoff and first Piola-Kirchhoff stress of one particle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StressState {
    pub kirchhoff: Mat3,
    pub first_piola: Mat3,
}

/// A constitutive law evaluated from the deformation gradient alone.
pub trait StressModel: Sync {
    fn kirchhoff(&self, f: &Mat3) -> Result<Mat3>;

    fn stress(&self, f: &Mat3) -> Result<StressState> {
        let tau = self.kirchhoff(f)?;
        Ok(StressState {
            kirchhoff: tau,
            first_piola: first_piola(&tau, f)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeoHookean {
    pub lambda: f64,
    pub mu: f64,
}

impl StressModel for NeoHookean {
    fn kirchhoff(&self, f: &Mat3) -> Result<Mat3> {
        kirchhoff_neo_hookean(f, self.lambda, self.mu)
    }
}

/// Stress model selected by the material parameters.
pub fn model_for(material: &MaterialParams) -> impl StressModel {
    match material.model {
        MaterialModel::NeoHookean => NeoHookean {
            lambda: material.lame_lambda,
            mu: material.lame_mu,
        },
    }
}

pub fn kirchhoff_neo_hookean(f: &Mat3, lambda: f64, mu: f64) -> Result<Mat3> {
    let j = f.determinant();
    if !(j > 0.0) {
        return Err(Error::InvertedElement { det: j });
    }
    Ok(mu * (f * f.transpose() - Mat3::identity()) + Mat3::identity() * (lambda * j.ln()))
}

/// `P = tau F^{-T}`.
pub fn first_piola(tau: &Mat3, f: &Mat3) -> Result<Mat3> {
    let inv = f.try_inverse().ok_or(Error::SingularMatrix)?;
    Ok(tau * inv.transpose())
}

/// Trial update `F = (I + dt grad_v) F_n`. Inadmissible results
/// (`det <= 0`) come back as [`Error::InvertedElement`].
pub fn update_deformation_gradient(f_n: &Mat3, grad_v: &Mat3, dt: f64) -> Result<Mat3> {
    let f = (Mat3::identity() + grad_v * dt) * f_n;
    let det = f.determinant();
    if !(det > 0.0) {
        return Err(Error::InvertedElement { det });
    }
    Ok(f)
}
