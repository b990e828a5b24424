//! Fixed (non-learned) projections between camera views and the voxel grid.
//!
//! 2D->3D: a feature map is bilinearly sampled once per height plane using
//! cached pixel grids and the slices are stacked along z (the multi-height
//! projection). 3D->2D: each image pixel's viewing ray is intersected with
//! every height plane and the hit voxels are looked up by nearest-cell
//! indexing; the hard mask takes the sign of the per-ray sum, the soft
//! variant substitutes sigmoids for thresholds so gradients can flow.

use crate::camera::{precompute_sampling_grid, CameraParams};
use crate::tape::{NodeId, Tape, VoxelLookup};
use crate::tensor::{Tensor, TensorError};
use crate::voxel::VoxelGridSpec;
use std::sync::Arc;

/// Cached per-height sampling grids for one (camera, voxel grid) pair.
#[derive(Debug, Clone)]
pub struct ProjectionGrids {
    pub vox: VoxelGridSpec,
    pub image_size: (usize, usize),
    grids: Vec<Tensor>, // one [2, a*b] tensor per height plane
}

impl ProjectionGrids {
    pub fn new(cam: &CameraParams, vox: &VoxelGridSpec) -> Self {
        let grids = vox
            .height_planes()
            .iter()
            .map(|&h| precompute_sampling_grid(cam, vox, h))
            .collect();
        ProjectionGrids {
            vox: vox.clone(),
            image_size: cam.image_size(),
            grids,
        }
    }

    pub fn grid(&self, l: usize) -> &Tensor {
        &self.grids[l]
    }
}

/// Lift feature map `f` (`[C, H, W]` on the tape) onto every height plane
/// of the grid, producing a `[C, n, a, b]` volume. Linear and differentiable
/// in `f`.
pub fn project_2d_to_3d(
    tape: &mut Tape,
    f: NodeId,
    grids: &ProjectionGrids,
) -> Result<NodeId, TensorError> {
    let dims = tape.value(f).dims().to_vec();
    if dims.len() != 3 {
        return Err(TensorError::Invalid(format!(
            "project_2d_to_3d expects [C,H,W], got {dims:?}"
        )));
    }
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    if (w, h) != grids.image_size {
        return Err(TensorError::ShapeMismatch {
            expected: vec![c, grids.image_size.1, grids.image_size.0],
            got: dims,
            context: "project_2d_to_3d feature map vs camera image size".into(),
        });
    }
    let (a, b) = (grids.vox.a, grids.vox.b);
    let mut slices = Vec::with_capacity(grids.vox.n);
    for l in 0..grids.vox.n {
        let g = tape.constant(grids.grid(l).clone());
        let s = tape.bilinear_sample(f, g)?;
        slices.push(tape.reshape(s, vec![c, 1, a, b])?);
    }
    tape.concat(&slices, 1)
}

/// Per-pixel, per-plane voxel indices for a camera looking into the grid.
/// Rays that are degenerate, point away from a plane, or land outside the
/// grid contribute `-1`.
pub fn backprojection_lookup(cam: &CameraParams, vox: &VoxelGridSpec) -> Arc<VoxelLookup> {
    let (w, h) = cam.image_size();
    let planes = vox.height_planes();
    let mut idx = vec![-1i32; w * h * planes.len()];
    for py in 0..h {
        for px in 0..w {
            let p = py * w + px;
            for (l, &hp) in planes.iter().enumerate() {
                if let Ok((point, in_front)) =
                    cam.image_to_world_at_height_directed(px as f64, py as f64, hp)
                {
                    if in_front {
                        if let Some(v) = vox.voxel_index(point) {
                            idx[p * planes.len() + l] = v as i32;
                        }
                    }
                }
            }
        }
    }
    Arc::new(VoxelLookup {
        out_h: h,
        out_w: w,
        planes: planes.len(),
        volume_len: vox.voxel_count(),
        idx,
    })
}

/// Hard binary back-projection mask: pixel p is 1 iff some height plane's
/// voxel along its ray exceeds `threshold` (sign of the thresholded sum).
pub fn backproject_hard(volume: &Tensor, lut: &VoxelLookup, threshold: f64) -> Tensor {
    debug_assert_eq!(volume.len(), lut.volume_len);
    let data = volume.data();
    let mut out = vec![0.0; lut.pixel_count()];
    for (p, o) in out.iter_mut().enumerate() {
        for l in 0..lut.planes {
            let i = lut.idx[p * lut.planes + l];
            if i >= 0 && data[i as usize] > threshold {
                *o = 1.0;
                break;
            }
        }
    }
    Tensor::new(vec![1, lut.out_h, lut.out_w], out).expect("mask shape")
}

/// Differentiable surrogate of `backproject_hard`; see `Tape::soft_backproject`.
pub fn backproject_soft(
    tape: &mut Tape,
    volume: NodeId,
    lut: Arc<VoxelLookup>,
    threshold: f64,
    tau: f64,
) -> Result<NodeId, TensorError> {
    tape.soft_backproject(volume, lut, threshold, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};

    fn down_camera(elevation: f64, size: usize) -> CameraParams {
        let c = size as f64 / 2.0;
        let k = Matrix3::new(100.0, 0.0, c, 0.0, 100.0, c, 0.0, 0.0, 1.0);
        let r = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let t = -(r * Vector3::new(0.0, 0.0, elevation));
        CameraParams::new(k, r, t, (size, size)).unwrap()
    }

    fn ring_camera(angle: f64, radius: f64, elevation: f64, size: usize) -> CameraParams {
        let c = size as f64 / 2.0;
        let k = Matrix3::new(80.0, 0.0, c, 0.0, 80.0, c, 0.0, 0.0, 1.0);
        CameraParams::look_at(
            [radius * angle.cos(), radius * angle.sin(), elevation],
            [0.0, 0.0, 800.0],
            k,
            (size, size),
        )
        .unwrap()
    }

    #[test]
    fn constant_field_projects_to_visibility_indicator() {
        let cam = down_camera(5000.0, 32);
        let vox = VoxelGridSpec::centered(12, 300.0, 3, 600.0).unwrap();
        let grids = ProjectionGrids::new(&cam, &vox);
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::full(&[1, 32, 32], 1.0));
        let out = project_2d_to_3d(&mut tape, f, &grids).unwrap();
        let vol = tape.value(out);
        assert_eq!(vol.dims(), &[1, 3, 12, 12]);
        for l in 0..3 {
            let h = vox.height_plane(l);
            for iy in 0..12 {
                for ix in 0..12 {
                    let (x, y) = vox.cell_center(iy, ix);
                    let (u, v, in_front) =
                        cam.world_to_image(crate::camera::WorldPoint::new(x, y, h));
                    let visible =
                        in_front && u >= 0.0 && u <= 31.0 && v >= 0.0 && v <= 31.0;
                    let got = vol.at4(0, l, iy, ix);
                    if visible {
                        assert!((got - 1.0).abs() < 1e-12, "slice {l} cell ({iy},{ix})");
                    } else {
                        assert_eq!(got, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn projection_is_linear_in_features() {
        let cam = down_camera(4000.0, 16);
        let vox = VoxelGridSpec::centered(8, 350.0, 2, 900.0).unwrap();
        let grids = ProjectionGrids::new(&cam, &vox);
        let mut state = 7u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state as f64 / u64::MAX as f64) - 0.5
        };
        let fa: Vec<f64> = (0..2 * 16 * 16).map(|_| next()).collect();
        let fb: Vec<f64> = (0..2 * 16 * 16).map(|_| next()).collect();
        let run = |vals: Vec<f64>| {
            let mut tape = Tape::new();
            let f = tape.constant(Tensor::new(vec![2, 16, 16], vals).unwrap());
            let out = project_2d_to_3d(&mut tape, f, &grids).unwrap();
            tape.value(out).data().to_vec()
        };
        let (alpha, beta) = (2.5, -1.25);
        let ya = run(fa.clone());
        let yb = run(fb.clone());
        let ym = run(fa
            .iter()
            .zip(fb.iter())
            .map(|(a, b)| alpha * a + beta * b)
            .collect());
        for i in 0..ya.len() {
            assert!((ym[i] - (alpha * ya[i] + beta * yb[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn bright_pixel_pair_peaks_at_true_head_voxel() {
        let vox = VoxelGridSpec::centered(16, 250.0, 7, 400.0).unwrap();
        let cams = [
            ring_camera(0.0, 9000.0, 3200.0, 48),
            ring_camera(std::f64::consts::FRAC_PI_2, 9000.0, 3200.0, 48),
        ];
        // head near a voxel center
        let head = crate::camera::WorldPoint::new(640.0, -380.0, 1750.0);
        let mut acc = Tensor::zeros(&[1, 7, 16, 16]);
        for cam in &cams {
            let (u, v, in_front) = cam.world_to_image(head);
            assert!(in_front);
            // paint the exact sub-pixel location with bilinear weights
            let mut img = Tensor::zeros(&[1, 48, 48]);
            let (x0, y0) = (u.floor() as usize, v.floor() as usize);
            let (dx, dy) = (u - u.floor(), v - v.floor());
            for (oy, ox, wgt) in [
                (0, 0, (1.0 - dx) * (1.0 - dy)),
                (0, 1, dx * (1.0 - dy)),
                (1, 0, (1.0 - dx) * dy),
                (1, 1, dx * dy),
            ] {
                img.set3(0, y0 + oy, x0 + ox, wgt);
            }
            let grids = ProjectionGrids::new(cam, &vox);
            let mut tape = Tape::new();
            let f = tape.constant(img);
            let out = project_2d_to_3d(&mut tape, f, &grids).unwrap();
            for (dst, src) in acc
                .data_mut()
                .iter_mut()
                .zip(tape.value(out).data().iter())
            {
                *dst += src;
            }
        }
        let argmax = acc
            .data()
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(Some(argmax), vox.voxel_index(head));
    }

    #[test]
    fn empty_volume_gives_empty_mask() {
        let cam = down_camera(5000.0, 24);
        let vox = VoxelGridSpec::centered(10, 300.0, 4, 500.0).unwrap();
        let lut = backprojection_lookup(&cam, &vox);
        let mask = backproject_hard(&Tensor::zeros(&[1, 4, 10, 10]), &lut, 1e-4);
        assert_eq!(mask.sum(), 0.0);
    }

    #[test]
    fn mask_is_scale_invariant_and_idempotent() {
        let cam = down_camera(5000.0, 24);
        let vox = VoxelGridSpec::centered(10, 300.0, 4, 500.0).unwrap();
        let lut = backprojection_lookup(&cam, &vox);
        let mut vol = Tensor::zeros(&[1, 4, 10, 10]);
        vol.set4(0, 2, 4, 6, 0.3);
        vol.set4(0, 1, 7, 2, 5.0e-5); // below threshold
        let m1 = backproject_hard(&vol, &lut, 1e-4);
        let doubled = vol.map(|v| v * 2.0);
        let m2 = backproject_hard(&doubled, &lut, 1e-4);
        assert_eq!(m1.data(), m2.data());
        assert!(m1.sum() > 0.0);
        // thresholding an already-binary volume changes nothing
        let binary = vol.map(|v| if v > 1e-4 { 1.0 } else { 0.0 });
        let m3 = backproject_hard(&binary, &lut, 1e-4);
        assert_eq!(m1.data(), m3.data());
    }

    #[test]
    fn supra_threshold_voxel_covers_its_projected_center() {
        let vox = VoxelGridSpec::centered(12, 300.0, 7, 400.0).unwrap();
        let cam = ring_camera(1.1, 8000.0, 3000.0, 40);
        let lut = backprojection_lookup(&cam, &vox);
        // voxel (l=4, iy=3, ix=8), center height (4+0.5)*400
        let (cx, cy) = vox.cell_center(3, 8);
        let center = crate::camera::WorldPoint::new(cx, cy, vox.height_plane(4));
        let mut vol = Tensor::zeros(&[1, 7, 12, 12]);
        vol.set4(0, 4, 3, 8, 1.0);
        let mask = backproject_hard(&vol, &lut, 1e-4);
        let (u, v, in_front) = cam.world_to_image(center);
        assert!(in_front);
        // nearest-pixel rounding of the projected center must be covered
        let (pu, pv) = (u.round() as usize, v.round() as usize);
        assert_eq!(mask.at3(0, pv, pu), 1.0, "pixel ({pu},{pv}) uncovered");
    }

    #[test]
    fn soft_mask_of_zero_volume_is_small() {
        let cam = down_camera(5000.0, 16);
        let vox = VoxelGridSpec::centered(8, 400.0, 2, 1000.0).unwrap();
        let lut = backprojection_lookup(&cam, &vox);
        let t = 1e-4;
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::zeros(&[1, 2, 8, 8]));
        let m = backproject_soft(&mut tape, g, lut, t, t / 10.0).unwrap();
        for &v in tape.value(m).data() {
            assert!(v < 0.01, "soft mask of empty volume should be < 0.01, got {v}");
        }
    }

    #[test]
    fn soft_and_hard_masks_agree_away_from_threshold() {
        let cam = down_camera(4500.0, 24);
        let vox = VoxelGridSpec::centered(10, 320.0, 5, 560.0).unwrap();
        let lut = backprojection_lookup(&cam, &vox);
        let t = 1e-4;
        let tau = t / 10.0;
        let mut state = 99u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state as f64 / u64::MAX as f64
        };
        // values far from the threshold on both sides: 0 or ~1
        let vals: Vec<f64> = (0..vox.voxel_count())
            .map(|_| if next() < 0.05 { 1.0 } else { 0.0 })
            .collect();
        let vol = Tensor::new(vox.volume_dims(), vals).unwrap();
        let hard = backproject_hard(&vol, &lut, t);
        let mut tape = Tape::new();
        let g = tape.constant(vol);
        let soft_id = backproject_soft(&mut tape, g, lut, t, tau).unwrap();
        let soft = tape.value(soft_id);
        let mut agree = 0usize;
        for (h, s) in hard.data().iter().zip(soft.data().iter()) {
            if (*h > 0.5) == (*s > 0.5) {
                agree += 1;
            }
        }
        let frac = agree as f64 / hard.len() as f64;
        assert!(frac > 0.99, "soft/hard agreement {frac}");
    }
}
