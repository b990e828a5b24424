//! Synthetic multi-camera crowd scenes with exact annotations.
//!
//! A scene is a ring of calibrated cameras around a square walking area.
//! People enter and leave over time and perform bounded random walks; every
//! frame records their world positions plus per-view head annotations with
//! cross-view identity. Views render each person as a filled vertical
//! capsule so the pipeline has learnable per-view evidence without any
//! pretence of photorealism.
//!
//! Serialized as versioned JSON (`mvc3d_scene_v1`) with row-major 3x3
//! camera matrices and millimetre translations.

use crate::camera::{CameraParams, WorldPoint};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCENE_SCHEMA: &str = "mvc3d_scene_v1";

/// Body cylinder radius used by the disc-occlusion model, mm.
pub const BODY_RADIUS_MM: f64 = 250.0;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("scene schema violation: {0}")]
    Schema(String),
    #[error("camera: {0}")]
    Camera(#[from] crate::camera::GeometryError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Person {
    pub person_id: u32,
    /// Ground position, mm.
    pub x: f64,
    pub y: f64,
    /// Head height above ground, mm.
    pub body_height: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Annotation {
    pub person_id: u32,
    pub u: f64,
    pub v: f64,
    /// In-image and not occluded under the disc-occlusion model.
    pub visible: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Frame {
    pub frame_id: u32,
    pub people: Vec<Person>,
    /// One annotation list per camera view; entries exist only for people
    /// projecting in front of that camera.
    pub annotations: Vec<Vec<Annotation>>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub cameras: Vec<CameraParams>,
    pub frames: Vec<Frame>,
}

// ---- JSON schema -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CameraDto {
    /// Row-major 3x3 intrinsic matrix.
    k: Vec<f64>,
    /// Row-major 3x3 world-to-camera rotation.
    r: Vec<f64>,
    /// Translation, mm.
    t: [f64; 3],
    /// (width, height) in pixels.
    image_size: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct SceneDto {
    schema: String,
    cameras: Vec<CameraDto>,
    frames: Vec<Frame>,
}

fn mat_to_vec(m: &Matrix3<f64>) -> Vec<f64> {
    (0..3)
        .flat_map(|r| (0..3).map(move |c| (r, c)))
        .map(|(r, c)| m[(r, c)])
        .collect()
}

fn vec_to_mat(v: &[f64]) -> Result<Matrix3<f64>, SceneError> {
    if v.len() != 9 {
        return Err(SceneError::Schema(format!(
            "camera matrix needs 9 entries, got {}",
            v.len()
        )));
    }
    Ok(Matrix3::new(
        v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8],
    ))
}

impl Scene {
    pub fn to_json(&self) -> Result<String, SceneError> {
        let dto = SceneDto {
            schema: SCENE_SCHEMA.to_string(),
            cameras: self
                .cameras
                .iter()
                .map(|c| CameraDto {
                    k: mat_to_vec(c.intrinsics()),
                    r: mat_to_vec(c.rotation()),
                    t: [c.translation().x, c.translation().y, c.translation().z],
                    image_size: [c.image_size().0, c.image_size().1],
                })
                .collect(),
            frames: self.frames.clone(),
        };
        Ok(serde_json::to_string_pretty(&dto)?)
    }

    pub fn from_json(s: &str) -> Result<Scene, SceneError> {
        let dto: SceneDto = serde_json::from_str(s)?;
        if dto.schema != SCENE_SCHEMA {
            return Err(SceneError::Schema(format!(
                "expected schema {SCENE_SCHEMA}, got {}",
                dto.schema
            )));
        }
        let mut cameras = Vec::with_capacity(dto.cameras.len());
        for c in &dto.cameras {
            cameras.push(CameraParams::new(
                vec_to_mat(&c.k)?,
                vec_to_mat(&c.r)?,
                Vector3::new(c.t[0], c.t[1], c.t[2]),
                (c.image_size[0], c.image_size[1]),
            )?);
        }
        let scene = Scene {
            cameras,
            frames: dto.frames,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SceneError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Scene, SceneError> {
        Scene::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn frame(&self, frame_id: u32) -> Option<&Frame> {
        self.frames.iter().find(|f| f.frame_id == frame_id)
    }

    /// Check the scene invariants: per-frame unique person ids, one
    /// annotation list per view, and annotation/geometry consistency for
    /// visible entries within 0.5 px.
    pub fn validate(&self) -> Result<(), SceneError> {
        for frame in &self.frames {
            let mut ids: Vec<u32> = frame.people.iter().map(|p| p.person_id).collect();
            ids.sort_unstable();
            ids.dedup();
            if ids.len() != frame.people.len() {
                return Err(SceneError::Schema(format!(
                    "frame {}: duplicate person ids",
                    frame.frame_id
                )));
            }
            if frame.annotations.len() != self.cameras.len() {
                return Err(SceneError::Schema(format!(
                    "frame {}: {} annotation lists for {} cameras",
                    frame.frame_id,
                    frame.annotations.len(),
                    self.cameras.len()
                )));
            }
            for (view, anns) in frame.annotations.iter().enumerate() {
                for ann in anns {
                    let person = frame
                        .people
                        .iter()
                        .find(|p| p.person_id == ann.person_id)
                        .ok_or_else(|| {
                            SceneError::Schema(format!(
                                "frame {} view {view}: annotation for unknown person {}",
                                frame.frame_id, ann.person_id
                            ))
                        })?;
                    if ann.visible {
                        let (u, v, in_front) = self.cameras[view].world_to_image(
                            WorldPoint::new(person.x, person.y, person.body_height),
                        );
                        if !in_front
                            || (u - ann.u).abs() > 0.5
                            || (v - ann.v).abs() > 0.5
                        {
                            return Err(SceneError::Schema(format!(
                                "frame {} view {view} person {}: annotation ({}, {}) vs projection ({u}, {v})",
                                frame.frame_id, ann.person_id, ann.u, ann.v
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

// ---- generation ------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSceneConfig {
    pub seed: u64,
    pub n_views: usize,
    pub n_frames: usize,
    /// Inclusive per-frame person count bounds.
    pub people_range: (usize, usize),
    /// Side of the square walking area, mm.
    pub extent_mm: f64,
    /// Body height distribution: clipped normal within [1000, 2000] mm.
    pub height_mean_mm: f64,
    pub height_std_mm: f64,
    pub camera_radius_mm: f64,
    pub camera_elevation_mm: f64,
    pub image_size: (usize, usize),
}

impl Default for GenSceneConfig {
    fn default() -> Self {
        GenSceneConfig {
            seed: 0,
            n_views: 3,
            n_frames: 50,
            people_range: (1, 8),
            extent_mm: 8000.0,
            height_mean_mm: 1750.0,
            height_std_mm: 100.0,
            camera_radius_mm: 10_000.0,
            camera_elevation_mm: 3500.0,
            image_size: (64, 64),
        }
    }
}

const HEIGHT_CLIP_MM: (f64, f64) = (1000.0, 2000.0);
const WALK_STEP_STD_MM: f64 = 150.0;
const COUNT_RESAMPLE_PERIOD: u32 = 10;

struct ActivePerson {
    id: u32,
    x: f64,
    y: f64,
    height: f64,
}

fn substream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Ring cameras with a focal length that keeps the walking area in frame.
pub fn ring_cameras(cfg: &GenSceneConfig) -> Result<Vec<CameraParams>, SceneError> {
    let (w, h) = cfg.image_size;
    let target = [0.0, 0.0, cfg.height_mean_mm / 2.0];
    let mut cams = Vec::with_capacity(cfg.n_views);
    for i in 0..cfg.n_views {
        let angle = 2.0 * std::f64::consts::PI * i as f64 / cfg.n_views as f64
            + 0.25 / cfg.n_views as f64;
        let pos = [
            cfg.camera_radius_mm * angle.cos(),
            cfg.camera_radius_mm * angle.sin(),
            cfg.camera_elevation_mm,
        ];
        let dist = {
            let dx = pos[0] - target[0];
            let dy = pos[1] - target[1];
            let dz = pos[2] - target[2];
            (dx * dx + dy * dy + dz * dz).sqrt()
        };
        // the far corner of the walking area must stay inside the frame
        let halfwidth = cfg.extent_mm * std::f64::consts::SQRT_2 / 2.0 + 500.0;
        let f = 0.42 * w as f64 * dist / halfwidth;
        let k = Matrix3::new(
            f,
            0.0,
            w as f64 / 2.0,
            0.0,
            f,
            h as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        cams.push(CameraParams::look_at(pos, target, k, (w, h))?);
    }
    Ok(cams)
}

/// Whether `target`'s head is blocked in `cam`'s view by another person's
/// body cylinder strictly between the camera and the head.
pub fn occluded_by(
    cam: &CameraParams,
    target: &Person,
    others: &[Person],
) -> Option<u32> {
    let c = cam.center();
    let head = [target.x, target.y, target.body_height];
    let d = [head[0] - c[0], head[1] - c[1], head[2] - c[2]];
    let d_xy2 = d[0] * d[0] + d[1] * d[1];
    if d_xy2 < 1e-12 {
        return None; // looking straight down the axis
    }
    for other in others {
        if other.person_id == target.person_id {
            continue;
        }
        // closest approach of the 2D ray to the other's axis
        let ax = other.x - c[0];
        let ay = other.y - c[1];
        let s = (ax * d[0] + ay * d[1]) / d_xy2;
        if s <= 0.0 || s >= 1.0 {
            continue; // behind the camera or beyond the head
        }
        let px = c[0] + s * d[0] - other.x;
        let py = c[1] + s * d[1] - other.y;
        if (px * px + py * py).sqrt() > BODY_RADIUS_MM {
            continue;
        }
        let z = c[2] + s * d[2];
        if z <= other.body_height {
            return Some(other.person_id);
        }
    }
    None
}

pub fn gen_scene(cfg: &GenSceneConfig) -> Result<Scene, SceneError> {
    let (lo, hi) = cfg.people_range;
    if lo > hi || hi == 0 {
        return Err(SceneError::Config(format!(
            "people_range ({lo}, {hi}) is empty"
        )));
    }
    if cfg.n_views == 0 || cfg.n_frames == 0 {
        return Err(SceneError::Config("need at least one view and frame".into()));
    }
    let area_m2 = (cfg.extent_mm / 1000.0) * (cfg.extent_mm / 1000.0);
    if area_m2 < 2.0 * hi as f64 {
        return Err(SceneError::Config(format!(
            "extent {} mm gives {area_m2:.1} m^2 for up to {hi} people; need 2 m^2 each",
            cfg.extent_mm
        )));
    }
    let cameras = ring_cameras(cfg)?;

    let mut rng = substream(cfg.seed, 1);
    let height_dist = Normal::new(cfg.height_mean_mm, cfg.height_std_mm)
        .map_err(|e| SceneError::Config(format!("height distribution: {e}")))?;
    let step_dist = Normal::new(0.0, WALK_STEP_STD_MM).unwrap();
    let half = cfg.extent_mm / 2.0;

    let mut active: Vec<ActivePerson> = Vec::new();
    let mut next_id: u32 = 1;
    let mut frames = Vec::with_capacity(cfg.n_frames);

    for frame_id in 0..cfg.n_frames as u32 {
        if frame_id % COUNT_RESAMPLE_PERIOD == 0 {
            let k = rng.gen_range(lo..=hi);
            while active.len() > k {
                active.pop();
            }
            while active.len() < k {
                let height = height_dist
                    .sample(&mut rng)
                    .clamp(HEIGHT_CLIP_MM.0, HEIGHT_CLIP_MM.1);
                active.push(ActivePerson {
                    id: next_id,
                    x: rng.gen_range(-half..half),
                    y: rng.gen_range(-half..half),
                    height,
                });
                next_id += 1;
            }
        }
        for p in active.iter_mut() {
            p.x = reflect(p.x + step_dist.sample(&mut rng), -half, half);
            p.y = reflect(p.y + step_dist.sample(&mut rng), -half, half);
        }

        let people: Vec<Person> = active
            .iter()
            .map(|p| Person {
                person_id: p.id,
                x: p.x,
                y: p.y,
                body_height: p.height,
            })
            .collect();

        let mut annotations = Vec::with_capacity(cameras.len());
        for cam in &cameras {
            let (w, h) = cam.image_size();
            let mut anns = Vec::new();
            for person in &people {
                let (u, v, in_front) = cam.world_to_image(WorldPoint::new(
                    person.x,
                    person.y,
                    person.body_height,
                ));
                if !in_front {
                    continue;
                }
                let in_image =
                    u >= 0.0 && u <= (w - 1) as f64 && v >= 0.0 && v <= (h - 1) as f64;
                let visible =
                    in_image && occluded_by(cam, person, &people).is_none();
                anns.push(Annotation {
                    person_id: person.person_id,
                    u,
                    v,
                    visible,
                });
            }
            annotations.push(anns);
        }
        frames.push(Frame {
            frame_id,
            people,
            annotations,
        });
    }
    Ok(Scene { cameras, frames })
}

fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    if x < lo {
        (2.0 * lo - x).min(hi)
    } else if x > hi {
        (2.0 * hi - x).max(lo)
    } else {
        x
    }
}

// ---- rendering ---------------------------------------------------------------

pub const CAPSULE_INTENSITY: f64 = 0.8;
pub const PIXEL_NOISE_STD: f64 = 0.02;

/// Deterministic grayscale render of one frame into every view: each person
/// is a filled vertical capsule from the ground to their head, nearest
/// person wins overlaps, plus seeded per-frame Gaussian pixel noise,
/// clamped to [0, 1].
pub fn render_views(
    scene: &Scene,
    frame: &Frame,
    seed: u64,
) -> Vec<crate::tensor::Tensor> {
    scene
        .cameras
        .iter()
        .enumerate()
        .map(|(view, cam)| render_view(cam, frame, seed, view))
        .collect()
}

fn render_view(
    cam: &CameraParams,
    frame: &Frame,
    seed: u64,
    view: usize,
) -> crate::tensor::Tensor {
    let (w, h) = cam.image_size();
    let mut img = vec![0.0f64; w * h];
    let mut depth = vec![f64::INFINITY; w * h];

    for person in &frame.people {
        // project head and feet; the capsule is the thick segment between them
        let head = WorldPoint::new(person.x, person.y, person.body_height);
        let feet = WorldPoint::new(person.x, person.y, 0.0);
        let (hu, hv, h_front) = cam.world_to_image(head);
        let (fu, fv, f_front) = cam.world_to_image(feet);
        if !h_front || !f_front {
            continue;
        }
        let c = cam.center();
        let dist = ((person.x - c[0]).powi(2)
            + (person.y - c[1]).powi(2)
            + (person.body_height - c[2]).powi(2))
        .sqrt();
        let focal = cam.intrinsics()[(0, 0)];
        let radius_px = (focal * BODY_RADIUS_MM / dist).max(0.5);

        let (lo_u, hi_u) = (hu.min(fu) - radius_px, hu.max(fu) + radius_px);
        let (lo_v, hi_v) = (hv.min(fv) - radius_px, hv.max(fv) + radius_px);
        let x0 = lo_u.floor().max(0.0) as usize;
        let x1 = (hi_u.ceil() as isize).min(w as isize - 1);
        let y0 = lo_v.floor().max(0.0) as usize;
        let y1 = (hi_v.ceil() as isize).min(h as isize - 1);
        if x1 < x0 as isize || y1 < y0 as isize {
            continue;
        }
        for py in y0..=(y1 as usize) {
            for px in x0..=(x1 as usize) {
                let d = point_segment_distance(px as f64, py as f64, fu, fv, hu, hv);
                if d <= radius_px {
                    let idx = py * w + px;
                    if dist < depth[idx] {
                        depth[idx] = dist;
                        img[idx] = CAPSULE_INTENSITY;
                    }
                }
            }
        }
    }

    let mut rng = substream(seed, ((frame.frame_id as u64) << 20) | (view as u64 + 3));
    let noise = Normal::new(0.0, PIXEL_NOISE_STD).unwrap();
    for v in img.iter_mut() {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    crate::tensor::Tensor::new(vec![1, h, w], img).expect("image shape")
}

fn point_segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Dump a [0,1] grayscale image tensor as binary 8-bit PGM.
pub fn write_pgm(path: &std::path::Path, img: &crate::tensor::Tensor) -> std::io::Result<()> {
    let dims = img.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        img.data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> GenSceneConfig {
        GenSceneConfig {
            seed,
            n_views: 3,
            n_frames: 12,
            people_range: (1, 4),
            ..GenSceneConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_scene(&small_cfg(7)).unwrap().to_json().unwrap();
        let b = gen_scene(&small_cfg(7)).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let c = gen_scene(&small_cfg(8)).unwrap().to_json().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn scene_roundtrips_through_json() {
        let scene = gen_scene(&small_cfg(3)).unwrap();
        let json = scene.to_json().unwrap();
        let back = Scene::from_json(&json).unwrap();
        assert_eq!(back.frames, scene.frames);
        assert_eq!(back.cameras.len(), scene.cameras.len());
        assert_eq!(back.to_json().unwrap(), json);
    }

    #[test]
    fn rejects_wrong_schema_version() {
        let scene = gen_scene(&small_cfg(3)).unwrap();
        let json = scene.to_json().unwrap().replace(SCENE_SCHEMA, "mvc3d_scene_v0");
        assert!(matches!(
            Scene::from_json(&json),
            Err(SceneError::Schema(_))
        ));
    }

    #[test]
    fn generated_scenes_validate() {
        for seed in 0..4 {
            let scene = gen_scene(&small_cfg(seed)).unwrap();
            scene.validate().unwrap();
        }
    }

    #[test]
    fn single_person_scenes_have_one_person_per_frame() {
        let cfg = GenSceneConfig {
            people_range: (1, 1),
            ..small_cfg(11)
        };
        let scene = gen_scene(&cfg).unwrap();
        for frame in &scene.frames {
            assert_eq!(frame.people.len(), 1);
            let visible: usize = frame
                .annotations
                .iter()
                .flat_map(|a| a.iter())
                .filter(|a| a.visible)
                .count();
            assert!(visible >= 1, "frame {} has no visible annotation", frame.frame_id);
        }
    }

    #[test]
    fn counts_vary_within_range() {
        let cfg = GenSceneConfig {
            n_frames: 60,
            people_range: (1, 8),
            ..small_cfg(5)
        };
        let scene = gen_scene(&cfg).unwrap();
        let counts: Vec<usize> = scene.frames.iter().map(|f| f.people.len()).collect();
        assert!(counts.iter().all(|&c| (1..=8).contains(&c)));
        let distinct: std::collections::BTreeSet<usize> = counts.iter().cloned().collect();
        assert!(distinct.len() >= 3, "counts never vary: {distinct:?}");
    }

    #[test]
    fn infeasible_extent_is_rejected() {
        let cfg = GenSceneConfig {
            extent_mm: 1000.0,
            people_range: (8, 8),
            ..small_cfg(0)
        };
        assert!(matches!(gen_scene(&cfg), Err(SceneError::Config(_))));
    }

    #[test]
    fn empty_frame_renders_to_noise() {
        let scene = gen_scene(&small_cfg(2)).unwrap();
        let empty = Frame {
            frame_id: 999,
            people: vec![],
            annotations: vec![vec![]; 3],
        };
        let views = render_views(&scene, &empty, 2);
        for img in views {
            let mean = img.sum() / img.len() as f64;
            // clamping the Gaussian at zero leaves a small positive bias
            assert!(mean < 0.012, "noise-only mean {mean}");
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn person_renders_as_blob_containing_head_pixel() {
        let cfg = GenSceneConfig {
            people_range: (1, 1),
            n_frames: 1,
            ..small_cfg(4)
        };
        let scene = gen_scene(&cfg).unwrap();
        let frame = &scene.frames[0];
        let views = render_views(&scene, frame, 4);
        for (view, img) in views.iter().enumerate() {
            let ann = scene.frames[0].annotations[view]
                .iter()
                .find(|a| a.visible);
            if let Some(ann) = ann {
                let (u, v) = (ann.u.round() as usize, ann.v.round() as usize);
                let val = img.at3(0, v, u);
                assert!(
                    val > 0.5,
                    "view {view}: head pixel ({u},{v}) = {val}, expected bright"
                );
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = gen_scene(&small_cfg(6)).unwrap();
        let a = render_views(&scene, &scene.frames[3], 6);
        let b = render_views(&scene, &scene.frames[3], 6);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn occluder_is_closer_than_target() {
        // person B directly behind A from the camera's viewpoint
        let cfg = small_cfg(0);
        let cams = ring_cameras(&cfg).unwrap();
        let cam = &cams[0];
        let c = cam.center();
        // target at origin; occluder halfway along the sight line
        let target = Person {
            person_id: 1,
            x: 0.0,
            y: 0.0,
            body_height: 1700.0,
        };
        // the sight line descends from the camera; it drops below the
        // occluder's head only close to the target, so stand the occluder
        // just in front of it
        let occluder = Person {
            person_id: 2,
            x: 0.05 * c[0],
            y: 0.05 * c[1],
            body_height: 1900.0,
        };
        let people = vec![target.clone(), occluder.clone()];
        assert_eq!(occluded_by(cam, &target, &people), Some(2));
        // and the occluder itself sees the camera unobstructed
        assert_eq!(occluded_by(cam, &occluder, &people), None);
        // depth ordering: occluder closer to the camera
        let d_t = ((target.x - c[0]).powi(2) + (target.y - c[1]).powi(2)).sqrt();
        let d_o = ((occluder.x - c[0]).powi(2) + (occluder.y - c[1]).powi(2)).sqrt();
        assert!(d_o < d_t);
    }
}
