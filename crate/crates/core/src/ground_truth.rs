//! Ground-truth construction: triangulate head positions from multi-view
//! annotations by height search, then splat truncated Gaussians into 3D
//! density volumes (scaled by 1e4) and per-view 2D density maps (scaled by
//! 1e3). Truncated kernels are renormalized to unit mass so the sum of a
//! density grid divided by its scale is exactly the number of splatted
//! people.

use crate::camera::{CameraParams, GeometryError, WorldPoint};
use crate::scene::{Frame, Scene};
use crate::tensor::Tensor;
use crate::voxel::VoxelGridSpec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 3D density volumes carry `sum / SCALE_3D = person count`.
pub const SCALE_3D: f64 = 1e4;
/// 2D density maps carry `sum / SCALE_2D = head count`.
pub const SCALE_2D: f64 = 1e3;
/// Height assigned to single-view people, the crowd's average height.
pub const FALLBACK_HEIGHT_MM: f64 = 1750.0;

/// Gaussians are cut at three standard deviations and renormalized.
const TRUNCATION_SIGMAS: f64 = 3.0;

#[derive(Debug, Error)]
pub enum GroundTruthError {
    #[error("person has no annotations to triangulate")]
    MissingAnnotations,
    #[error("empty height search range")]
    EmptyHeightRange,
    #[error("annotation references view {0} but only {1} cameras exist")]
    BadViewIndex(usize, usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One person's head annotations across views (at most one per view).
#[derive(Debug, Clone)]
pub struct PersonAnnotationSet {
    pub person_id: u32,
    /// (view index, u, v) triples.
    pub views: Vec<(usize, f64, f64)>,
}

/// Default height search range: 1000 mm to 2000 mm in 10 mm steps.
pub fn default_height_search() -> Vec<f64> {
    (0..=100).map(|i| 1000.0 + 10.0 * i as f64).collect()
}

/// Recover a head's world position by searching the height that minimizes
/// the spread of per-view ray/plane intersections; ties break toward the
/// smallest height. Single-view people fall back to the average height.
pub fn triangulate_head(
    ann: &PersonAnnotationSet,
    cams: &[CameraParams],
    heights: &[f64],
) -> Result<WorldPoint, GroundTruthError> {
    if ann.views.is_empty() {
        return Err(GroundTruthError::MissingAnnotations);
    }
    if heights.is_empty() {
        return Err(GroundTruthError::EmptyHeightRange);
    }
    for &(view, _, _) in &ann.views {
        if view >= cams.len() {
            return Err(GroundTruthError::BadViewIndex(view, cams.len()));
        }
    }
    if ann.views.len() == 1 {
        let (view, u, v) = ann.views[0];
        return Ok(cams[view].image_to_world_at_height(u, v, FALLBACK_HEIGHT_MM)?);
    }

    let m = ann.views.len() as f64;
    let mut best: Option<(f64, f64, f64, f64)> = None; // (spread, h, mean_x, mean_y)
    for &h in heights {
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut pts = Vec::with_capacity(ann.views.len());
        for &(view, u, v) in &ann.views {
            let p = cams[view].image_to_world_at_height(u, v, h)?;
            sx += p.x;
            sy += p.y;
            pts.push(p);
        }
        let (mx, my) = (sx / m, sy / m);
        let spread: f64 = pts
            .iter()
            .map(|p| (p.x - mx).powi(2) + (p.y - my).powi(2))
            .sum();
        let better = match best {
            None => true,
            Some((s, _, _, _)) => spread < s,
        };
        if better {
            best = Some((spread, h, mx, my));
        }
    }
    let (_, h, x, y) = best.expect("non-empty height range");
    Ok(WorldPoint::new(x, y, h))
}

/// Per-point outcome of a splatting pass.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SplatReport {
    pub splatted: usize,
    /// Indices (into the input list) of points outside the grid, skipped.
    pub skipped: Vec<usize>,
}

/// Splat an isotropic 3D Gaussian of width `sigma_mm` (physical units) for
/// each head point into a `[1, n, a, b]` volume. Each retained person
/// contributes exactly `SCALE_3D` mass; out-of-grid people are skipped and
/// reported, never clamped.
pub fn splat_3d(points: &[WorldPoint], vox: &VoxelGridSpec, sigma_mm: f64) -> (Tensor, SplatReport) {
    assert!(sigma_mm > 0.0, "sigma must be positive");
    let mut volume = Tensor::zeros(&vox.volume_dims());
    let mut report = SplatReport::default();
    let reach = TRUNCATION_SIGMAS * sigma_mm;
    let inv_two_sigma2 = 1.0 / (2.0 * sigma_mm * sigma_mm);

    for (i, p) in points.iter().enumerate() {
        if !vox.contains(*p) {
            report.skipped.push(i);
            continue;
        }
        let ix_lo = (((p.x - reach - vox.origin.0) / vox.cell_xy).floor()).max(0.0) as usize;
        let ix_hi = ((((p.x + reach - vox.origin.0) / vox.cell_xy).ceil()) as usize).min(vox.b);
        let iy_lo = (((p.y - reach - vox.origin.1) / vox.cell_xy).floor()).max(0.0) as usize;
        let iy_hi = ((((p.y + reach - vox.origin.1) / vox.cell_xy).ceil()) as usize).min(vox.a);
        let iz_lo = (((p.z - reach) / vox.h_vox).floor()).max(0.0) as usize;
        let iz_hi = ((((p.z + reach) / vox.h_vox).ceil()) as usize).min(vox.n);

        let mut cells: Vec<(usize, f64)> = Vec::new();
        for iz in iz_lo..iz_hi {
            let cz = (iz as f64 + 0.5) * vox.h_vox;
            for iy in iy_lo..iy_hi {
                for ix in ix_lo..ix_hi {
                    let (cx, cy) = vox.cell_center(iy, ix);
                    let d2 = (p.x - cx).powi(2) + (p.y - cy).powi(2) + (p.z - cz).powi(2);
                    if d2 <= reach * reach {
                        let w = (-d2 * inv_two_sigma2).exp();
                        cells.push(((iz * vox.a + iy) * vox.b + ix, w));
                    }
                }
            }
        }
        let total: f64 = cells.iter().map(|(_, w)| w).sum();
        let data = volume.data_mut();
        if total > 0.0 {
            for (idx, w) in cells {
                data[idx] += SCALE_3D * w / total;
            }
        } else {
            // kernel narrower than the voxel lattice: all mass to the
            // containing voxel
            let idx = vox.voxel_index(*p).expect("contained point has a voxel");
            data[idx] += SCALE_3D;
        }
        report.splatted += 1;
    }
    (volume, report)
}

/// Rasterize head pixels into a `[1, H, W]` 2D density map with truncated,
/// per-head renormalized Gaussians of width `sigma_px`. Heads outside the
/// image are skipped and reported.
pub fn rasterize_2d(
    heads: &[(f64, f64)],
    size: (usize, usize),
    sigma_px: f64,
) -> (Tensor, SplatReport) {
    assert!(sigma_px > 0.0, "sigma must be positive");
    let (h, w) = size;
    let mut map = Tensor::zeros(&[1, h, w]);
    let mut report = SplatReport::default();
    let reach = TRUNCATION_SIGMAS * sigma_px;
    let inv_two_sigma2 = 1.0 / (2.0 * sigma_px * sigma_px);

    for (i, &(u, v)) in heads.iter().enumerate() {
        if u < 0.0 || u > (w - 1) as f64 || v < 0.0 || v > (h - 1) as f64 {
            report.skipped.push(i);
            continue;
        }
        let x_lo = ((u - reach).floor()).max(0.0) as usize;
        let x_hi = (((u + reach).ceil()) as usize).min(w - 1);
        let y_lo = ((v - reach).floor()).max(0.0) as usize;
        let y_hi = (((v + reach).ceil()) as usize).min(h - 1);
        let mut cells: Vec<(usize, f64)> = Vec::new();
        for py in y_lo..=y_hi {
            for px in x_lo..=x_hi {
                let d2 = (u - px as f64).powi(2) + (v - py as f64).powi(2);
                if d2 <= reach * reach {
                    cells.push((py * w + px, (-d2 * inv_two_sigma2).exp()));
                }
            }
        }
        let total: f64 = cells.iter().map(|(_, wgt)| wgt).sum();
        let data = map.data_mut();
        if total > 0.0 {
            for (idx, wgt) in cells {
                data[idx] += SCALE_2D * wgt / total;
            }
        } else {
            let idx = v.round() as usize * w + u.round() as usize;
            data[idx] += SCALE_2D;
        }
        report.splatted += 1;
    }
    (map, report)
}

// ---- scene-level builder -----------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthConfig {
    /// 3D kernel width, mm. Defaults to twice the ground cell size.
    pub sigma3_mm: Option<f64>,
    /// 2D kernel width in map pixels.
    pub sigma2_px: f64,
    /// Height search range for triangulation, mm.
    pub height_search_mm: Vec<f64>,
    /// 2D maps are rasterized at image_size / map_downsample (the decoder
    /// output resolution).
    pub map_downsample: usize,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        GroundTruthConfig {
            sigma3_mm: None,
            sigma2_px: 3.0,
            height_search_mm: default_height_search(),
            map_downsample: 4,
        }
    }
}

/// Ground truth for one frame: the 3D density volume and one 2D map per view.
#[derive(Debug, Clone)]
pub struct FrameGroundTruth {
    pub frame_id: u32,
    pub volume: Tensor,
    pub view_maps: Vec<Tensor>,
    /// People splatted into the volume (triangulated and in-grid).
    pub people_in_grid: usize,
    /// Visible heads rasterized per view.
    pub heads_per_view: Vec<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PersonRecord {
    pub frame_id: u32,
    pub person_id: u32,
    pub views_used: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SkipRecord {
    pub frame_id: u32,
    pub person_id: u32,
    pub reason: String,
}

/// Build report written alongside the ground truth.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GroundTruthReport {
    pub frames: usize,
    pub people_seen: usize,
    pub people_splatted: usize,
    pub recovered: Vec<PersonRecord>,
    pub skipped: Vec<SkipRecord>,
}

/// Collect the visible annotations of one frame, grouped per person in
/// person-id order.
pub fn annotation_sets(frame: &Frame) -> Vec<PersonAnnotationSet> {
    let mut sets: Vec<PersonAnnotationSet> = frame
        .people
        .iter()
        .map(|p| PersonAnnotationSet {
            person_id: p.person_id,
            views: Vec::new(),
        })
        .collect();
    sets.sort_by_key(|s| s.person_id);
    for (view, anns) in frame.annotations.iter().enumerate() {
        for ann in anns {
            if !ann.visible {
                continue;
            }
            if let Ok(pos) = sets.binary_search_by_key(&ann.person_id, |s| s.person_id) {
                sets[pos].views.push((view, ann.u, ann.v));
            }
        }
    }
    sets
}

/// Triangulate and splat every frame of a scene.
pub fn build_scene_ground_truth(
    scene: &Scene,
    vox: &VoxelGridSpec,
    cfg: &GroundTruthConfig,
) -> Result<(Vec<FrameGroundTruth>, GroundTruthReport), GroundTruthError> {
    let sigma3 = cfg.sigma3_mm.unwrap_or(2.0 * vox.cell_xy);
    let mut report = GroundTruthReport {
        frames: scene.frames.len(),
        ..GroundTruthReport::default()
    };
    let mut out = Vec::with_capacity(scene.frames.len());

    for frame in &scene.frames {
        report.people_seen += frame.people.len();
        let sets = annotation_sets(frame);
        let mut points = Vec::new();
        let mut ids = Vec::new();
        for set in &sets {
            if set.views.is_empty() {
                report.skipped.push(SkipRecord {
                    frame_id: frame.frame_id,
                    person_id: set.person_id,
                    reason: "no visible annotation in any view".into(),
                });
                continue;
            }
            let p = triangulate_head(set, &scene.cameras, &cfg.height_search_mm)?;
            report.recovered.push(PersonRecord {
                frame_id: frame.frame_id,
                person_id: set.person_id,
                views_used: set.views.len(),
                x: p.x,
                y: p.y,
                z: p.z,
            });
            points.push(p);
            ids.push(set.person_id);
        }

        let (volume, splat) = splat_3d(&points, vox, sigma3);
        for &i in &splat.skipped {
            report.skipped.push(SkipRecord {
                frame_id: frame.frame_id,
                person_id: ids[i],
                reason: "triangulated point outside the voxel grid".into(),
            });
        }
        report.people_splatted += splat.splatted;

        let mut view_maps = Vec::with_capacity(scene.cameras.len());
        let mut heads_per_view = Vec::with_capacity(scene.cameras.len());
        for (view, cam) in scene.cameras.iter().enumerate() {
            let (w, h) = cam.image_size();
            let ds = cfg.map_downsample.max(1) as f64;
            // pixel (u,v) lands at ((u - (ds-1)/2) / ds) in the pooled map
            let offset = (ds - 1.0) / 2.0;
            let heads: Vec<(f64, f64)> = frame.annotations[view]
                .iter()
                .filter(|a| a.visible)
                .map(|a| ((a.u - offset) / ds, (a.v - offset) / ds))
                .collect();
            let size = (h / cfg.map_downsample.max(1), w / cfg.map_downsample.max(1));
            let (map, rep) = rasterize_2d(&heads, size, cfg.sigma2_px);
            heads_per_view.push(rep.splatted);
            view_maps.push(map);
        }

        out.push(FrameGroundTruth {
            frame_id: frame.frame_id,
            volume,
            view_maps,
            people_in_grid: splat.splatted,
            heads_per_view,
        });
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{gen_scene, GenSceneConfig};
    use nalgebra::{Matrix3, Vector3};

    fn three_ring_cameras() -> Vec<CameraParams> {
        (0..3)
            .map(|i| {
                let angle = 2.0 * std::f64::consts::PI * i as f64 / 3.0 + 0.2;
                let k = Matrix3::new(70.0, 0.0, 32.0, 0.0, 70.0, 32.0, 0.0, 0.0, 1.0);
                CameraParams::look_at(
                    [9000.0 * angle.cos(), 9000.0 * angle.sin(), 3300.0],
                    [0.0, 0.0, 900.0],
                    k,
                    (64, 64),
                )
                .unwrap()
            })
            .collect()
    }

    fn annotate(cams: &[CameraParams], p: WorldPoint) -> PersonAnnotationSet {
        PersonAnnotationSet {
            person_id: 1,
            views: cams
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let (u, v, in_front) = c.world_to_image(p);
                    assert!(in_front);
                    (i, u, v)
                })
                .collect(),
        }
    }

    #[test]
    fn recovers_exact_on_grid_height() {
        let cams = three_ring_cameras();
        let truth = WorldPoint::new(2000.0, 3000.0, 1750.0);
        let ann = annotate(&cams, truth);
        let got = triangulate_head(&ann, &cams, &default_height_search()).unwrap();
        assert_eq!(got.z, 1750.0);
        assert!((got.x - truth.x).abs() < 1e-3, "x error {}", got.x - truth.x);
        assert!((got.y - truth.y).abs() < 1e-3, "y error {}", got.y - truth.y);
    }

    #[test]
    fn off_grid_height_snaps_to_neighbor() {
        let cams = three_ring_cameras();
        let truth = WorldPoint::new(-1200.0, 800.0, 1755.0);
        let ann = annotate(&cams, truth);
        let got = triangulate_head(&ann, &cams, &default_height_search()).unwrap();
        assert!(
            got.z == 1750.0 || got.z == 1760.0,
            "snapped to {} instead of a 10mm neighbor",
            got.z
        );
        assert!((got.x - truth.x).abs() < 50.0);
        assert!((got.y - truth.y).abs() < 50.0);
    }

    #[test]
    fn single_view_uses_fallback_height() {
        let cams = three_ring_cameras();
        let truth = WorldPoint::new(500.0, -700.0, FALLBACK_HEIGHT_MM);
        let (u, v, _) = cams[1].world_to_image(truth);
        let ann = PersonAnnotationSet {
            person_id: 9,
            views: vec![(1, u, v)],
        };
        let got = triangulate_head(&ann, &cams, &default_height_search()).unwrap();
        assert_eq!(got.z, FALLBACK_HEIGHT_MM);
        // at the fallback height the single-ray intersection is exact
        assert!((got.x - truth.x).abs() < 1e-6);
        assert!((got.y - truth.y).abs() < 1e-6);
    }

    #[test]
    fn no_annotations_is_an_error() {
        let cams = three_ring_cameras();
        let ann = PersonAnnotationSet {
            person_id: 1,
            views: vec![],
        };
        assert!(matches!(
            triangulate_head(&ann, &cams, &default_height_search()),
            Err(GroundTruthError::MissingAnnotations)
        ));
    }

    #[test]
    fn one_person_splat_sums_to_scale() {
        let vox = VoxelGridSpec::centered(32, 400.0, 7, 400.0).unwrap();
        let (vol, rep) = splat_3d(&[WorldPoint::new(130.0, -220.0, 1690.0)], &vox, 800.0);
        assert_eq!(rep.splatted, 1);
        assert!(rep.skipped.is_empty());
        assert!((vol.sum() - SCALE_3D).abs() < 10.0, "sum {}", vol.sum());
    }

    #[test]
    fn empty_splat_is_zero() {
        let vox = VoxelGridSpec::centered(8, 400.0, 7, 400.0).unwrap();
        let (vol, rep) = splat_3d(&[], &vox, 800.0);
        assert_eq!(vol.sum(), 0.0);
        assert_eq!(rep.splatted, 0);
    }

    #[test]
    fn two_distant_people_carry_unit_mass_each() {
        let vox = VoxelGridSpec::centered(32, 400.0, 7, 400.0).unwrap();
        let pa = WorldPoint::new(-2000.0, -2000.0, 1700.0);
        let pb = WorldPoint::new(2000.0, 2000.0, 1800.0); // 10+ cells away
        let (vol, rep) = splat_3d(&[pa, pb], &vox, 800.0);
        assert_eq!(rep.splatted, 2);
        assert!((vol.sum() - 2.0 * SCALE_3D).abs() < 20.0);
        // integrate each person's 3-sigma neighborhood separately
        let mass_near = |p: WorldPoint| -> f64 {
            let mut acc = 0.0;
            for iz in 0..vox.n {
                for iy in 0..vox.a {
                    for ix in 0..vox.b {
                        let (cx, cy) = vox.cell_center(iy, ix);
                        let cz = vox.height_plane(iz);
                        let d2 = (p.x - cx).powi(2) + (p.y - cy).powi(2) + (p.z - cz).powi(2);
                        if d2 <= (3.0 * 800.0f64).powi(2) {
                            acc += vol.at4(0, iz, iy, ix);
                        }
                    }
                }
            }
            acc
        };
        assert!((mass_near(pa) - SCALE_3D).abs() < 10.0);
        assert!((mass_near(pb) - SCALE_3D).abs() < 10.0);
    }

    #[test]
    fn out_of_grid_person_is_skipped_not_clamped() {
        let vox = VoxelGridSpec::centered(8, 400.0, 7, 400.0).unwrap();
        let inside = WorldPoint::new(0.0, 0.0, 1700.0);
        let outside = WorldPoint::new(9000.0, 0.0, 1700.0);
        let (vol, rep) = splat_3d(&[inside, outside], &vox, 800.0);
        assert_eq!(rep.splatted, 1);
        assert_eq!(rep.skipped, vec![1]);
        assert!((vol.sum() - SCALE_3D).abs() < 10.0);
    }

    #[test]
    fn rasterize_one_head_sums_to_scale() {
        let (map, rep) = rasterize_2d(&[(7.3, 4.8)], (16, 16), 3.0);
        assert_eq!(rep.splatted, 1);
        assert!((map.sum() - SCALE_2D).abs() < 1.0);
    }

    #[test]
    fn rasterize_zero_heads_is_zero() {
        let (map, _) = rasterize_2d(&[], (16, 16), 3.0);
        assert_eq!(map.sum(), 0.0);
    }

    #[test]
    fn corner_head_renormalizes_over_visible_support() {
        let (map, rep) = rasterize_2d(&[(0.0, 0.0)], (16, 16), 3.0);
        assert_eq!(rep.splatted, 1);
        assert!((map.sum() - SCALE_2D).abs() < 1.0, "sum {}", map.sum());
    }

    #[test]
    fn head_outside_image_is_skipped() {
        let (map, rep) = rasterize_2d(&[(-2.0, 5.0), (3.0, 3.0)], (16, 16), 2.0);
        assert_eq!(rep.splatted, 1);
        assert_eq!(rep.skipped, vec![0]);
        assert!((map.sum() - SCALE_2D).abs() < 1.0);
    }

    #[test]
    fn scene_ground_truth_conserves_counts() {
        let cfg = GenSceneConfig {
            seed: 21,
            n_views: 3,
            n_frames: 10,
            people_range: (1, 6),
            ..GenSceneConfig::default()
        };
        let scene = gen_scene(&cfg).unwrap();
        let vox = VoxelGridSpec::centered(32, 400.0, 7, 400.0).unwrap();
        let (gts, report) = build_scene_ground_truth(
            &scene,
            &vox,
            &GroundTruthConfig::default(),
        )
        .unwrap();
        assert_eq!(gts.len(), 10);
        for gt in &gts {
            let count = gt.volume.sum() / SCALE_3D;
            assert!(
                (count - gt.people_in_grid as f64).abs() < 1e-3 * gt.people_in_grid.max(1) as f64,
                "frame {}: volume count {count} vs {}",
                gt.frame_id,
                gt.people_in_grid
            );
            for (view, map) in gt.view_maps.iter().enumerate() {
                let heads = gt.heads_per_view[view] as f64;
                assert!(
                    (map.sum() / SCALE_2D - heads).abs() < 1e-3 * heads.max(1.0),
                    "frame {} view {view}: map count {} vs {heads}",
                    gt.frame_id,
                    map.sum() / SCALE_2D
                );
            }
        }
        assert_eq!(
            report.people_splatted + report.skipped.len(),
            report.people_seen
        );
    }
}
