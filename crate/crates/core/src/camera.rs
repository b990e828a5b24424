//! Pinhole camera model and world <-> image mappings.
//!
//! Conventions: world is Z-up in millimetres with the ground plane at Z=0;
//! the camera frame is x-right, y-down, z-forward. `R` maps world to camera
//! and `t` is the translation in the camera frame, so a world point `p`
//! lands at `K (R p + t)`.

use crate::tensor::Tensor;
use crate::voxel::VoxelGridSpec;
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("viewing ray is parallel to the height plane")]
    DegenerateRay,
}

/// 3D point in world coordinates (mm); Z is height above the ground plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        WorldPoint { x, y, z }
    }

    fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

/// Intrinsics and extrinsics of one fixed camera.
#[derive(Debug, Clone)]
pub struct CameraParams {
    k: Matrix3<f64>,
    r: Matrix3<f64>,
    t: Vector3<f64>,
    image_size: (usize, usize), // (width, height) in pixels
    // cached derived quantities; cameras are immutable
    k_inv: Matrix3<f64>,
    r_t: Matrix3<f64>,
    center: Vector3<f64>,
}

pub const BEHIND_CAMERA_SENTINEL: f64 = -1e6;

impl CameraParams {
    pub fn new(
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        image_size: (usize, usize),
    ) -> Result<Self, GeometryError> {
        let rtr = r.transpose() * r;
        let dev = (rtr - Matrix3::identity()).abs().max();
        if dev >= 1e-6 {
            return Err(GeometryError::InvalidCamera(format!(
                "R not orthonormal (max |R^T R - I| = {dev:.2e})"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() >= 1e-6 {
            return Err(GeometryError::InvalidCamera(format!(
                "det(R) = {det}, expected 1"
            )));
        }
        if k[(1, 0)].abs() > 0.0 || k[(2, 0)].abs() > 0.0 || k[(2, 1)].abs() > 0.0 {
            return Err(GeometryError::InvalidCamera(
                "K must be upper triangular".into(),
            ));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(GeometryError::InvalidCamera(
                "K focal entries must be positive".into(),
            ));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(GeometryError::InvalidCamera("empty image".into()));
        }
        let k_inv = k
            .try_inverse()
            .ok_or_else(|| GeometryError::InvalidCamera("K is singular".into()))?;
        let r_t = r.transpose();
        let center = -(r_t * t);
        Ok(CameraParams {
            k,
            r,
            t,
            image_size,
            k_inv,
            r_t,
            center,
        })
    }

    /// Camera positioned at `position`, looking at `target`, world Z-up.
    pub fn look_at(
        position: [f64; 3],
        target: [f64; 3],
        k: Matrix3<f64>,
        image_size: (usize, usize),
    ) -> Result<Self, GeometryError> {
        let p = Vector3::from(position);
        let forward = (Vector3::from(target) - p)
            .try_normalize(1e-9)
            .ok_or_else(|| GeometryError::InvalidCamera("look_at: zero baseline".into()))?;
        let up = Vector3::new(0.0, 0.0, 1.0);
        let right = forward
            .cross(&up)
            .try_normalize(1e-9)
            .ok_or_else(|| GeometryError::InvalidCamera("look_at: forward parallel to up".into()))?;
        let down = forward.cross(&right); // y-down completes the frame
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * p);
        CameraParams::new(k, r, t, image_size)
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.t
    }

    /// Optical center in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        [self.center.x, self.center.y, self.center.z]
    }

    /// A camera observing the same scene through resampled pixels
    /// `u' = scale * u + offset` (both axes), e.g. feature-map coordinates
    /// after pooling.
    pub fn resampled(
        &self,
        scale: f64,
        offset: f64,
        image_size: (usize, usize),
    ) -> Result<Self, GeometryError> {
        let a = Matrix3::new(scale, 0.0, offset, 0.0, scale, offset, 0.0, 0.0, 1.0);
        CameraParams::new(a * self.k, self.r, self.t, image_size)
    }

    /// Perspective projection; `in_front` is false when the camera-frame
    /// depth is non-positive.
    pub fn world_to_image(&self, p: WorldPoint) -> (f64, f64, bool) {
        let pc = self.r * p.to_vector() + self.t;
        let uvw = self.k * pc;
        let in_front = pc.z > 0.0;
        if uvw.z.abs() < f64::MIN_POSITIVE {
            return (f64::NAN, f64::NAN, false);
        }
        (uvw.x / uvw.z, uvw.y / uvw.z, in_front)
    }

    /// Intersection of the viewing ray through pixel `(u, v)` with the
    /// horizontal plane `Z = h`. The returned Z equals `h` exactly.
    pub fn image_to_world_at_height(
        &self,
        u: f64,
        v: f64,
        h: f64,
    ) -> Result<WorldPoint, GeometryError> {
        let dir = self.r_t * (self.k_inv * Vector3::new(u, v, 1.0));
        if dir.z.abs() < 1e-12 {
            return Err(GeometryError::DegenerateRay);
        }
        let s = (h - self.center.z) / dir.z;
        Ok(WorldPoint::new(
            self.center.x + s * dir.x,
            self.center.y + s * dir.y,
            h,
        ))
    }

    /// Like `image_to_world_at_height`, but also reports whether the
    /// intersection lies in front of the camera (positive ray parameter).
    pub fn image_to_world_at_height_directed(
        &self,
        u: f64,
        v: f64,
        h: f64,
    ) -> Result<(WorldPoint, bool), GeometryError> {
        let dir = self.r_t * (self.k_inv * Vector3::new(u, v, 1.0));
        if dir.z.abs() < 1e-12 {
            return Err(GeometryError::DegenerateRay);
        }
        let s = (h - self.center.z) / dir.z;
        Ok((
            WorldPoint::new(self.center.x + s * dir.x, self.center.y + s * dir.y, h),
            s > 0.0,
        ))
    }
}

/// Image coordinates of every ground cell center lifted to height `h`,
/// as a `[2, a*b]` tensor (row 0 = u, row 1 = v; cell m = iy*b + ix).
/// Cells behind the camera carry the sentinel so bilinear sampling reads
/// zero there. Cameras are fixed, so these grids are computed once and
/// reused for every frame.
pub fn precompute_sampling_grid(cam: &CameraParams, vox: &VoxelGridSpec, h: f64) -> Tensor {
    let m = vox.ground_cells();
    let mut data = vec![0.0; 2 * m];
    for iy in 0..vox.a {
        for ix in 0..vox.b {
            let (x, y) = vox.cell_center(iy, ix);
            let (u, v, in_front) = cam.world_to_image(WorldPoint::new(x, y, h));
            let j = iy * vox.b + ix;
            if in_front {
                data[j] = u;
                data[m + j] = v;
            } else {
                data[j] = BEHIND_CAMERA_SENTINEL;
                data[m + j] = BEHIND_CAMERA_SENTINEL;
            }
        }
    }
    Tensor::new(vec![2, m], data).expect("grid shape")
}
