//! Separable cubic B-spline interpolation between particles and grid nodes.

use crate::error::{Error, Result};
use crate::model::{GridState, Vec3};

/// Maximum number of nodes a particle touches (4 per axis).
pub const STENCIL_SIZE: usize = 64;

/// 1D cubic B-spline with support `[-2, 2]`.
#[inline]
pub fn bspline1d(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * a * a * a - a * a + 2.0 / 3.0
    } else if a < 2.0 {
        let t = 2.0 - a;
        t * t * t / 6.0
    } else {
        0.0
    }
}

/// Derivative of [`bspline1d`]; odd in `x`.
#[inline]
pub fn bspline1d_grad(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        1.5 * x * a - 2.0 * x
    } else if a < 2.0 {
        let t = 2.0 - a;
        -0.5 * t * t * x.signum()
    } else {
        0.0
    }
}

/// Nodes influenced by one particle together with weights and weight
/// gradients (with respect to the particle position, in 1/m).
#[derive(Clone, Debug)]
pub struct Stencil {
    len: usize,
    nodes: [usize; STENCIL_SIZE],
    weights: [f64; STENCIL_SIZE],
    gradients: [Vec3; STENCIL_SIZE],
}

impl Stencil {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes[..self.len]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights[..self.len]
    }

    pub fn gradients(&self) -> &[Vec3] {
        &self.gradients[..self.len]
    }

    /// `(node, weight, gradient)` triples.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64, &Vec3)> + '_ {
        self.nodes()
            .iter()
            .zip(self.weights())
            .zip(self.gradients())
            .map(|((&n, &w), g)| (n, w, g))
    }
}

/// Builds the stencil of a particle. Particles within `2h` of a wall get a
/// truncated stencil, so the partition of unity only holds in the interior.
pub fn stencil_for(position: &Vec3, grid: &GridState) -> Result<Stencil> {
    let lim = grid.grid_lim;
    if !position.iter().all(|&c| (0.0..=lim).contains(&c)) {
        return Err(Error::OutOfDomain {
            x: position.x,
            y: position.y,
            z: position.z,
            limit: lim,
        });
    }
    let h = grid.spacing;
    let inv_h = 1.0 / h;
    let last = grid.resolution as i64;

    // Per-axis node indices, values and derivatives.
    let mut idx = [[0usize; 4]; 3];
    let mut val = [[0.0f64; 4]; 3];
    let mut der = [[0.0f64; 4]; 3];
    let mut count = [0usize; 3];
    for a in 0..3 {
        let xs = position[a] * inv_h;
        let base = xs.floor() as i64 - 1;
        for off in 0..4 {
            let node = base + off;
            if node < 0 || node > last {
                continue;
            }
            let d = xs - node as f64;
            let c = count[a];
            idx[a][c] = node as usize;
            val[a][c] = bspline1d(d);
            der[a][c] = bspline1d_grad(d) * inv_h;
            count[a] += 1;
        }
    }

    let mut stencil = Stencil {
        len: 0,
        nodes: [0; STENCIL_SIZE],
        weights: [0.0; STENCIL_SIZE],
        gradients: [Vec3::zeros(); STENCIL_SIZE],
    };
    for i in 0..count[0] {
        for j in 0..count[1] {
            for k in 0..count[2] {
                let (wx, wy, wz) = (val[0][i], val[1][j], val[2][k]);
                let n = stencil.len;
                stencil.nodes[n] = grid.node_index(idx[0][i], idx[1][j], idx[2][k]);
                stencil.weights[n] = wx * wy * wz;
                stencil.gradients[n] = Vec3::new(
                    der[0][i] * wy * wz,
                    wx * der[1][j] * wz,
                    wx * wy * der[2][k],
                );
                stencil.len += 1;
            }
        }
    }
    Ok(stencil)
}
