//! Scene voxelization: a ground-plane grid of `a x b` cells extruded into
//! `n` height voxels of `h_vox` mm each. Height planes sit at voxel
//! centers, `h_l = (l + 0.5) * h_vox`.

use crate::camera::WorldPoint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VoxelError {
    #[error("invalid voxel grid: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    /// World coordinates of the grid's (x, y) corner, mm.
    pub origin: (f64, f64),
    /// Ground cell edge length, mm.
    pub cell_xy: f64,
    /// Ground-plane extent in cells along y.
    pub a: usize,
    /// Ground-plane extent in cells along x.
    pub b: usize,
    /// Number of voxels along z.
    pub n: usize,
    /// Voxel height, mm.
    pub h_vox: f64,
}

impl VoxelGridSpec {
    pub fn new(
        origin: (f64, f64),
        cell_xy: f64,
        a: usize,
        b: usize,
        n: usize,
        h_vox: f64,
    ) -> Result<Self, VoxelError> {
        if a < 1 || b < 1 || n < 1 {
            return Err(VoxelError::Invalid(format!(
                "extents must be at least 1, got a={a} b={b} n={n}"
            )));
        }
        if !(cell_xy > 0.0) || !(h_vox > 0.0) {
            return Err(VoxelError::Invalid(format!(
                "cell sizes must be positive, got cell_xy={cell_xy} h_vox={h_vox}"
            )));
        }
        Ok(VoxelGridSpec {
            origin,
            cell_xy,
            a,
            b,
            n,
            h_vox,
        })
    }

    /// Square grid centered on the world origin.
    pub fn centered(cells: usize, cell_xy: f64, n: usize, h_vox: f64) -> Result<Self, VoxelError> {
        let half = cells as f64 * cell_xy / 2.0;
        VoxelGridSpec::new((-half, -half), cell_xy, cells, cells, n, h_vox)
    }

    pub fn ground_cells(&self) -> usize {
        self.a * self.b
    }

    pub fn voxel_count(&self) -> usize {
        self.n * self.a * self.b
    }

    /// Dims of a density volume over this grid: `[1, n, a, b]`.
    pub fn volume_dims(&self) -> Vec<usize> {
        vec![1, self.n, self.a, self.b]
    }

    /// Height plane of z-slice `l`, at the voxel center.
    pub fn height_plane(&self, l: usize) -> f64 {
        (l as f64 + 0.5) * self.h_vox
    }

    pub fn height_planes(&self) -> Vec<f64> {
        (0..self.n).map(|l| self.height_plane(l)).collect()
    }

    /// Total height spanned by the grid, mm.
    pub fn height_span(&self) -> f64 {
        self.n as f64 * self.h_vox
    }

    /// World (x, y) of ground cell (iy, ix) center.
    pub fn cell_center(&self, iy: usize, ix: usize) -> (f64, f64) {
        (
            self.origin.0 + (ix as f64 + 0.5) * self.cell_xy,
            self.origin.1 + (iy as f64 + 0.5) * self.cell_xy,
        )
    }

    /// Whether `p` falls inside the grid's bounding box.
    pub fn contains(&self, p: WorldPoint) -> bool {
        let (x0, y0) = self.origin;
        p.x >= x0
            && p.x < x0 + self.b as f64 * self.cell_xy
            && p.y >= y0
            && p.y < y0 + self.a as f64 * self.cell_xy
            && p.z >= 0.0
            && p.z < self.height_span()
    }

    /// Flat index (into `[1, n, a, b]` volumes) of the voxel containing `p`.
    pub fn voxel_index(&self, p: WorldPoint) -> Option<usize> {
        let ix = ((p.x - self.origin.0) / self.cell_xy).floor();
        let iy = ((p.y - self.origin.1) / self.cell_xy).floor();
        let iz = (p.z / self.h_vox).floor();
        if ix < 0.0 || iy < 0.0 || iz < 0.0 {
            return None;
        }
        let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
        if ix >= self.b || iy >= self.a || iz >= self.n {
            return None;
        }
        Some((iz * self.a + iy) * self.b + ix)
    }
}
