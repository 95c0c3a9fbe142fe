//! Interior filling of hollow point sets by voxel occupancy and axis-ray
//! parity.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{MaterialParams, ParticleSet, Vec3};

/// Boolean voxel lattice over `[0, grid_lim]^3`, `resolution` voxels per
/// axis, indexed `(i * n + j) * n + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub resolution: usize,
    pub grid_lim: f64,
    pub cells: Vec<bool>,
}

impl VoxelGrid {
    pub fn new(resolution: usize, grid_lim: f64) -> Self {
        VoxelGrid {
            resolution,
            grid_lim,
            cells: vec![false; resolution.pow(3)],
        }
    }

    pub fn voxel_size(&self) -> f64 {
        self.grid_lim / self.resolution as f64
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.resolution + j) * self.resolution + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.cells[self.index(i, j, k)]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.voxel_size()
    }

    /// `(i, j, k)` of every set voxel, in index order.
    pub fn set_voxels(&self) -> Vec<[usize; 3]> {
        let n = self.resolution;
        (0..self.cells.len())
            .filter(|&c| self.cells[c])
            .map(|c| [c / (n * n), (c / n) % n, c % n])
            .collect()
    }
}

/// Marks every voxel containing at least one point.
pub fn voxelize(points: &[Vec3], grid_lim: f64, resolution: usize) -> Result<VoxelGrid> {
    if resolution < 4 {
        return Err(Error::param("resolution", format!("{resolution} < 4")));
    }
    if !(grid_lim > 0.0) {
        return Err(Error::param("grid_lim", "must be positive"));
    }
    let mut grid = VoxelGrid::new(resolution, grid_lim);
    let inv = resolution as f64 / grid_lim;
    for p in points {
        if !p.iter().all(|&c| (0.0..=grid_lim).contains(&c)) {
            return Err(Error::OutOfDomain {
                x: p.x,
                y: p.y,
                z: p.z,
                limit: grid_lim,
            });
        }
        let idx = p.map(|c| ((c * inv) as usize).min(resolution - 1));
        let cell = grid.index(idx.x, idx.y, idx.z);
        grid.cells[cell] = true;
    }
    Ok(grid)
}

/// Number of occupied runs met walking from `start` (exclusive) along
/// `axis` in direction `step`.
fn runs_crossed(occ: &VoxelGrid, start: [usize; 3], axis: usize, step: isize) -> usize {
    let n = occ.resolution as isize;
    let mut c = start.map(|x| x as isize);
    let mut inside_run = false;
    let mut runs = 0;
    loop {
        c[axis] += step;
        if c[axis] < 0 || c[axis] >= n {
            return runs;
        }
        let hit = occ.get(c[0] as usize, c[1] as usize, c[2] as usize);
        if hit && !inside_run {
            runs += 1;
        }
        inside_run = hit;
    }
}

/// Interior voxels: unoccupied voxels for which at least 4 of the 6 axis
/// rays cross an odd number of occupied runs.
pub fn classify_interior(occ: &VoxelGrid) -> VoxelGrid {
    let n = occ.resolution;
    let cells: Vec<bool> = (0..occ.cells.len())
        .into_par_iter()
        .map(|c| {
            if occ.cells[c] {
                return false;
            }
            let v = [c / (n * n), (c / n) % n, c % n];
            let votes = (0..3)
                .flat_map(|axis| [(axis, 1isize), (axis, -1isize)])
                .filter(|&(axis, step)| runs_crossed(occ, v, axis, step) % 2 == 1)
                .count();
            votes >= 4
        })
        .collect();
    VoxelGrid {
        cells,
        ..occ.clone()
    }
}

/// One particle at rest at the center of every interior voxel.
pub fn fill_particles(interior: &VoxelGrid, material: &MaterialParams) -> ParticleSet {
    let volume = interior.voxel_size().powi(3);
    let mut set = ParticleSet::default();
    for [i, j, k] in interior.set_voxels() {
        set.push_at_rest(interior.center(i, j, k), material.density * volume, volume);
    }
    set
}

/// Where a particle of a merged set came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Source,
    Filled,
}

/// Source particles followed by filled ones, with per-particle tags.
#[derive(Clone, Debug, Default)]
pub struct FilledSet {
    pub particles: ParticleSet,
    pub origin: Vec<Origin>,
}

pub fn merge(source: &ParticleSet, filled: &ParticleSet) -> FilledSet {
    let mut particles = source.clone();
    particles.extend(filled);
    let mut origin = vec![Origin::Source; source.len()];
    origin.resize(particles.len(), Origin::Filled);
    FilledSet { particles, origin }
}

/// Voxel centers of the interior of a point set.
pub fn fill_points(points: &[Vec3], grid_lim: f64, resolution: usize) -> Result<Vec<Vec3>> {
    let interior = classify_interior(&voxelize(points, grid_lim, resolution)?);
    Ok(interior
        .set_voxels()
        .into_iter()
        .map(|[i, j, k]| interior.center(i, j, k))
        .collect())
}
