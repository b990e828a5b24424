//! The full counting network.
//!
//! Per view: a shared feature extractor (conv1-4 with two 2x2 poolings)
//! produces quarter-resolution features; a decoder head (conv5-7, linear
//! final layer) predicts the per-view 2D density map. Each view's features
//! are lifted into the voxel grid by the fixed multi-height projection,
//! concatenated along channels, and fused by seven 3D convolutions (ReLU
//! between layers, linear final) into the scene-level 3D density map whose
//! sum over voxels, divided by the density scale, is the crowd count.
//!
//! Reference channel widths (channel_scale = 1):
//!   extractor 16/16/-/32/32/-, decoder 64/32/1 (5x5 filters),
//!   fusion 32/64/128/64/32/32/1 (5x5x7 filters, stored depth-first).
//! `channel_scale` shrinks every hidden width for desk-scale runs.

use crate::ground_truth::SCALE_3D;
use crate::projection::{project_2d_to_3d, ProjectionGrids};
use crate::t3dc;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Tensor, TensorError};
use crate::voxel::VoxelGridSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const EXTRACTOR_CHANNELS: [(usize, usize); 4] = [(16, 1), (16, 16), (32, 16), (32, 32)];
const DECODER_CHANNELS: [(usize, usize); 3] = [(64, 32), (32, 64), (1, 32)];
const FUSION_OUT_CHANNELS: [usize; 7] = [32, 64, 128, 64, 32, 32, 1];
const KSIZE_2D: usize = 5;
/// 3D filters are 5 wide, 5 tall, 7 deep; kernels are stored
/// `[C_out, C_in, depth, height, width]`.
const KSIZE_3D: (usize, usize, usize) = (7, 5, 5);

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint tensor: {0}")]
    T3dc(#[from] t3dc::T3dcError),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub n_views: usize,
    /// Multiplier on the reference channel widths (0.25 for desk scale).
    pub channel_scale: f64,
    /// Input image size (width, height); both must be divisible by 4.
    pub image_size: (usize, usize),
    pub vox: VoxelGridSpec,
    /// Share extractor weights across views (default). When off, each view
    /// gets its own conv1-4.
    pub share_extractor: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_views == 0 {
            return Err(ModelError::Config("need at least one view".into()));
        }
        if self.channel_scale <= 0.0 {
            return Err(ModelError::Config(format!(
                "channel_scale must be positive, got {}",
                self.channel_scale
            )));
        }
        if self.image_size.0 % 4 != 0 || self.image_size.1 % 4 != 0 {
            return Err(ModelError::Config(format!(
                "image size {:?} must be divisible by 4 (two poolings)",
                self.image_size
            )));
        }
        Ok(())
    }

    fn scaled(&self, c: usize) -> usize {
        ((c as f64 * self.channel_scale).round() as usize).max(1)
    }

    /// Feature/decoder resolution after the two poolings: (width, height).
    pub fn feature_size(&self) -> (usize, usize) {
        (self.image_size.0 / 4, self.image_size.1 / 4)
    }

    /// Dims of the 3D prediction and of one per-view 2D prediction.
    pub fn output_shapes(&self) -> (Vec<usize>, Vec<usize>) {
        let (fw, fh) = self.feature_size();
        (self.vox.volume_dims(), vec![1, fh, fw])
    }
}

#[derive(Debug, Clone)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// All learnable tensors, in a fixed iteration order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    /// One extractor when shared, one per view otherwise.
    pub extractors: Vec<Vec<ConvParams>>,
    pub decoder: Vec<ConvParams>,
    pub fusion: Vec<ConvParams>,
}

fn init_conv(
    rng: &mut ChaCha8Rng,
    c_out: usize,
    c_in: usize,
    kdims: &[usize],
) -> ConvParams {
    let taps: usize = kdims.iter().product();
    let fan_in = (c_in * taps) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let mut dims = vec![c_out, c_in];
    dims.extend_from_slice(kdims);
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    ConvParams {
        kernel: Tensor::new(dims, data).expect("kernel dims"),
        bias: Tensor::zeros(&[c_out]),
    }
}

impl ModelParams {
    /// Fan-in-scaled uniform init of every kernel, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k2 = [KSIZE_2D, KSIZE_2D];
        let n_extractors = if cfg.share_extractor { 1 } else { cfg.n_views };
        let extractors = (0..n_extractors)
            .map(|_| {
                EXTRACTOR_CHANNELS
                    .iter()
                    .map(|&(o, i)| {
                        let c_in = if i == 1 { 1 } else { cfg.scaled(i) };
                        init_conv(&mut rng, cfg.scaled(o), c_in, &k2)
                    })
                    .collect()
            })
            .collect();
        let decoder = DECODER_CHANNELS
            .iter()
            .map(|&(o, i)| {
                let c_out = if o == 1 { 1 } else { cfg.scaled(o) };
                init_conv(&mut rng, c_out, cfg.scaled(i), &k2)
            })
            .collect();
        let k3 = [KSIZE_3D.0, KSIZE_3D.1, KSIZE_3D.2];
        let mut fusion = Vec::with_capacity(FUSION_OUT_CHANNELS.len());
        let mut c_in = cfg.n_views * cfg.scaled(32);
        for (ix, &o) in FUSION_OUT_CHANNELS.iter().enumerate() {
            let c_out = if ix == FUSION_OUT_CHANNELS.len() - 1 {
                1
            } else {
                cfg.scaled(o)
            };
            fusion.push(init_conv(&mut rng, c_out, c_in, &k3));
            c_in = c_out;
        }
        Ok(ModelParams {
            extractors,
            decoder,
            fusion,
        })
    }

    pub fn extractor_for(&self, view: usize) -> &Vec<ConvParams> {
        if self.extractors.len() == 1 {
            &self.extractors[0]
        } else {
            &self.extractors[view]
        }
    }

    /// Named tensors in a stable order (kernel then bias per layer).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (e, layers) in self.extractors.iter().enumerate() {
            for (i, c) in layers.iter().enumerate() {
                out.push((format!("extractor{e}.conv{}.kernel", i + 1), &c.kernel));
                out.push((format!("extractor{e}.conv{}.bias", i + 1), &c.bias));
            }
        }
        for (i, c) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.conv{}.kernel", i + 5), &c.kernel));
            out.push((format!("decoder.conv{}.bias", i + 5), &c.bias));
        }
        for (i, c) in self.fusion.iter().enumerate() {
            out.push((format!("fusion.conv{}.kernel", i + 1), &c.kernel));
            out.push((format!("fusion.conv{}.bias", i + 1), &c.bias));
        }
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (e, layers) in self.extractors.iter_mut().enumerate() {
            for (i, c) in layers.iter_mut().enumerate() {
                out.push((format!("extractor{e}.conv{}.kernel", i + 1), &mut c.kernel));
                out.push((format!("extractor{e}.conv{}.bias", i + 1), &mut c.bias));
            }
        }
        for (i, c) in self.decoder.iter_mut().enumerate() {
            out.push((format!("decoder.conv{}.kernel", i + 5), &mut c.kernel));
            out.push((format!("decoder.conv{}.bias", i + 5), &mut c.bias));
        }
        for (i, c) in self.fusion.iter_mut().enumerate() {
            out.push((format!("fusion.conv{}.kernel", i + 1), &mut c.kernel));
            out.push((format!("fusion.conv{}.bias", i + 1), &mut c.bias));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Tape nodes mirroring `ModelParams`, in the same order.
pub struct TapedParams {
    pub extractors: Vec<Vec<(NodeId, NodeId)>>,
    pub decoder: Vec<(NodeId, NodeId)>,
    pub fusion: Vec<(NodeId, NodeId)>,
}

impl TapedParams {
    pub fn insert(tape: &mut Tape, params: &ModelParams, requires_grad: bool) -> Self {
        let mut put = |t: &Tensor, tape: &mut Tape| {
            let mut v = t.clone();
            v.requires_grad = requires_grad;
            tape.leaf(v)
        };
        TapedParams {
            extractors: params
                .extractors
                .iter()
                .map(|layers| {
                    layers
                        .iter()
                        .map(|c| (put(&c.kernel, tape), put(&c.bias, tape)))
                        .collect()
                })
                .collect(),
            decoder: params
                .decoder
                .iter()
                .map(|c| (put(&c.kernel, tape), put(&c.bias, tape)))
                .collect(),
            fusion: params
                .fusion
                .iter()
                .map(|c| (put(&c.kernel, tape), put(&c.bias, tape)))
                .collect(),
        }
    }

    fn extractor_for(&self, view: usize) -> &Vec<(NodeId, NodeId)> {
        if self.extractors.len() == 1 {
            &self.extractors[0]
        } else {
            &self.extractors[view]
        }
    }

    /// Node ids in the `named_tensors` order, for optimizer updates.
    pub fn node_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for layers in &self.extractors {
            for &(k, b) in layers {
                out.push(k);
                out.push(b);
            }
        }
        for &(k, b) in &self.decoder {
            out.push(k);
            out.push(b);
        }
        for &(k, b) in &self.fusion {
            out.push(k);
            out.push(b);
        }
        out
    }
}

pub struct ForwardOutput {
    /// 3D density prediction `[1, n, a, b]`.
    pub volume: NodeId,
    /// Per-view 2D density predictions `[1, H/4, W/4]`.
    pub view_maps: Vec<NodeId>,
}

/// Run the network over one frame's views. `grids` must be built at the
/// feature resolution (see `feature_projection_grids`).
pub fn forward(
    tape: &mut Tape,
    params: &TapedParams,
    images: &[Tensor],
    grids: &[ProjectionGrids],
    cfg: &ModelConfig,
) -> Result<ForwardOutput, ModelError> {
    cfg.validate()?;
    if images.len() != cfg.n_views || grids.len() != cfg.n_views {
        return Err(ModelError::Config(format!(
            "expected {} views, got {} images and {} grids",
            cfg.n_views,
            images.len(),
            grids.len()
        )));
    }
    let (w, h) = cfg.image_size;
    let mut view_maps = Vec::with_capacity(cfg.n_views);
    let mut projected = Vec::with_capacity(cfg.n_views);
    for (view, img) in images.iter().enumerate() {
        if img.dims() != [1, h, w] {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                expected: vec![1, h, w],
                got: img.dims().to_vec(),
                context: format!("view {view} input image"),
            }));
        }
        let x = tape.constant(img.clone());
        let ext = params.extractor_for(view).clone();
        let c1 = tape.conv2d(x, ext[0].0, ext[0].1)?;
        let r1 = tape.relu(c1);
        let c2 = tape.conv2d(r1, ext[1].0, ext[1].1)?;
        let r2 = tape.relu(c2);
        let p1 = tape.maxpool2(r2)?;
        let c3 = tape.conv2d(p1, ext[2].0, ext[2].1)?;
        let r3 = tape.relu(c3);
        let c4 = tape.conv2d(r3, ext[3].0, ext[3].1)?;
        let r4 = tape.relu(c4);
        let features = tape.maxpool2(r4)?;

        let d5 = tape.conv2d(features, params.decoder[0].0, params.decoder[0].1)?;
        let rd5 = tape.relu(d5);
        let d6 = tape.conv2d(rd5, params.decoder[1].0, params.decoder[1].1)?;
        let rd6 = tape.relu(d6);
        let v_map = tape.conv2d(rd6, params.decoder[2].0, params.decoder[2].1)?;
        view_maps.push(v_map);

        projected.push(project_2d_to_3d(tape, features, &grids[view])?);
    }
    let mut g = tape.concat(&projected, 0)?;
    let last = params.fusion.len() - 1;
    for (i, &(k, b)) in params.fusion.iter().enumerate() {
        g = tape.conv3d(g, k, b)?;
        if i < last {
            g = tape.relu(g);
        }
    }
    Ok(ForwardOutput {
        volume: g,
        view_maps,
    })
}

/// Projection grids for every view at the feature resolution: original
/// pixel `u` maps to feature coordinate `(u - 1.5) / 4` after two poolings.
pub fn feature_projection_grids(
    cams: &[crate::camera::CameraParams],
    cfg: &ModelConfig,
) -> Result<Vec<ProjectionGrids>, ModelError> {
    let (fw, fh) = cfg.feature_size();
    cams.iter()
        .map(|cam| {
            let feat_cam = cam
                .resampled(0.25, -0.375, (fw, fh))
                .map_err(|e| ModelError::Config(format!("feature camera: {e}")))?;
            Ok(ProjectionGrids::new(&feat_cam, &cfg.vox))
        })
        .collect()
}

/// The count is the volume sum divided by the density scale.
pub fn count_from_volume(volume: &Tensor) -> f64 {
    volume.sum() / SCALE_3D
}

// ---- checkpoints -------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"C3DK";
const CHECKPOINT_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    dims: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    stage: u8,
    config: ModelConfig,
    entries: Vec<EntryMeta>,
}

/// Serialize params into the container: magic, version, manifest-length,
/// JSON manifest (name -> shape/offset, config echo, seed, stage), then
/// the T3DC tensor blobs back to back.
pub fn checkpoint_to_bytes(
    params: &ModelParams,
    cfg: &ModelConfig,
    seed: u64,
    stage: u8,
) -> Result<Vec<u8>, ModelError> {
    let mut blobs: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    for (name, tensor) in params.named_tensors() {
        let bytes = t3dc::to_bytes(tensor);
        entries.push(EntryMeta {
            name,
            dims: tensor.dims().to_vec(),
            offset: blobs.len(),
            len: bytes.len(),
        });
        blobs.extend_from_slice(&bytes);
    }
    let manifest = serde_json::to_vec(&Manifest {
        seed,
        stage,
        config: cfg.clone(),
        entries,
    })?;
    let mut out = Vec::with_capacity(9 + manifest.len() + blobs.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&blobs);
    Ok(out)
}

pub struct Checkpoint {
    pub params: ModelParams,
    pub config: ModelConfig,
    pub seed: u64,
    pub stage: u8,
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    if bytes.len() < 9 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(ModelError::BadCheckpoint("missing C3DK magic".into()));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(ModelError::BadCheckpoint(format!(
            "unsupported version {}",
            bytes[4]
        )));
    }
    let mlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    if bytes.len() < 9 + mlen {
        return Err(ModelError::BadCheckpoint("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[9..9 + mlen])?;
    let blob = &bytes[9 + mlen..];
    let mut params = ModelParams::init(&manifest.config, manifest.seed)?;
    let mut named = params.named_tensors_mut();
    if named.len() != manifest.entries.len() {
        return Err(ModelError::BadCheckpoint(format!(
            "{} entries for {} model tensors",
            manifest.entries.len(),
            named.len()
        )));
    }
    for (entry, (name, tensor)) in manifest.entries.iter().zip(named.iter_mut()) {
        if entry.name != *name {
            return Err(ModelError::BadCheckpoint(format!(
                "entry {} does not match model tensor {name}",
                entry.name
            )));
        }
        if entry.offset + entry.len > blob.len() {
            return Err(ModelError::BadCheckpoint(format!(
                "entry {} overruns the blob section",
                entry.name
            )));
        }
        let loaded = t3dc::read_tensor(&mut &blob[entry.offset..entry.offset + entry.len])?;
        if loaded.dims() != entry.dims.as_slice() || loaded.dims() != tensor.dims() {
            return Err(ModelError::BadCheckpoint(format!(
                "entry {} has dims {:?}, expected {:?}",
                entry.name,
                loaded.dims(),
                tensor.dims()
            )));
        }
        **tensor = loaded;
    }
    Ok(Checkpoint {
        params,
        config: manifest.config,
        seed: manifest.seed,
        stage: manifest.stage,
    })
}

pub fn save_checkpoint(
    path: &std::path::Path,
    params: &ModelParams,
    cfg: &ModelConfig,
    seed: u64,
    stage: u8,
) -> Result<(), ModelError> {
    Ok(std::fs::write(
        path,
        checkpoint_to_bytes(params, cfg, seed, stage)?,
    )?)
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Checkpoint, ModelError> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_views: 2,
            channel_scale: 0.25,
            image_size: (16, 16),
            vox: VoxelGridSpec::centered(6, 600.0, 3, 900.0).unwrap(),
            share_extractor: true,
        }
    }

    fn tiny_cams(cfg: &ModelConfig) -> Vec<crate::camera::CameraParams> {
        use nalgebra::Matrix3;
        (0..cfg.n_views)
            .map(|i| {
                let angle = 2.0 * std::f64::consts::PI * i as f64 / cfg.n_views as f64 + 0.3;
                let k = Matrix3::new(20.0, 0.0, 8.0, 0.0, 20.0, 8.0, 0.0, 0.0, 1.0);
                crate::camera::CameraParams::look_at(
                    [6000.0 * angle.cos(), 6000.0 * angle.sin(), 3000.0],
                    [0.0, 0.0, 900.0],
                    k,
                    cfg.image_size,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn reference_scale_shapes_match_layer_table() {
        let cfg = ModelConfig {
            n_views: 3,
            channel_scale: 1.0,
            image_size: (64, 64),
            vox: VoxelGridSpec::centered(8, 400.0, 7, 400.0).unwrap(),
            share_extractor: true,
        };
        let p = ModelParams::init(&cfg, 0).unwrap();
        let ext = &p.extractors[0];
        assert_eq!(ext[0].kernel.dims(), &[16, 1, 5, 5]);
        assert_eq!(ext[1].kernel.dims(), &[16, 16, 5, 5]);
        assert_eq!(ext[2].kernel.dims(), &[32, 16, 5, 5]);
        assert_eq!(ext[3].kernel.dims(), &[32, 32, 5, 5]);
        assert_eq!(p.decoder[0].kernel.dims(), &[64, 32, 5, 5]);
        assert_eq!(p.decoder[1].kernel.dims(), &[32, 64, 5, 5]);
        assert_eq!(p.decoder[2].kernel.dims(), &[1, 32, 5, 5]);
        // fusion input = n_views * 32 concatenated channels; filters 5x5x7
        assert_eq!(p.fusion[0].kernel.dims(), &[32, 96, 7, 5, 5]);
        assert_eq!(p.fusion[1].kernel.dims(), &[64, 32, 7, 5, 5]);
        assert_eq!(p.fusion[2].kernel.dims(), &[128, 64, 7, 5, 5]);
        assert_eq!(p.fusion[6].kernel.dims(), &[1, 32, 7, 5, 5]);
    }

    #[test]
    fn doubling_channel_scale_quadruples_inner_conv_params() {
        let mut cfg = tiny_cfg();
        cfg.channel_scale = 0.25;
        let p1 = ModelParams::init(&cfg, 0).unwrap();
        cfg.channel_scale = 0.5;
        let p2 = ModelParams::init(&cfg, 0).unwrap();
        // conv2 is scaled on both sides: exactly 4x the kernel entries
        let k1 = p1.extractors[0][1].kernel.len();
        let k2 = p2.extractors[0][1].kernel.len();
        assert_eq!(k2, 4 * k1);
        let ratio = p2.parameter_count() as f64 / p1.parameter_count() as f64;
        assert!((3.0..=4.5).contains(&ratio), "total ratio {ratio}");
    }

    #[test]
    fn output_shapes_follow_config() {
        let cfg = ModelConfig {
            n_views: 3,
            channel_scale: 0.25,
            image_size: (676, 380),
            vox: VoxelGridSpec::new((0.0, 0.0), 100.0, 192, 160, 28, 100.0).unwrap(),
            share_extractor: true,
        };
        let (vol, map) = cfg.output_shapes();
        assert_eq!(vol, vec![1, 28, 192, 160]);
        assert_eq!(map, vec![1, 95, 169]);
    }

    #[test]
    fn zero_images_propagate_to_zero_outputs() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let cams = tiny_cams(&cfg);
        let grids = feature_projection_grids(&cams, &cfg).unwrap();
        let images = vec![Tensor::zeros(&[1, 16, 16]); 2];
        let mut tape = Tape::new();
        let taped = TapedParams::insert(&mut tape, &params, false);
        let out = forward(&mut tape, &taped, &images, &grids, &cfg).unwrap();
        assert_eq!(tape.value(out.volume).sum(), 0.0);
        for v in &out.view_maps {
            assert_eq!(tape.value(*v).sum(), 0.0);
        }
        assert_eq!(tape.value(out.volume).dims(), &[1, 3, 6, 6]);
        assert_eq!(tape.value(out.view_maps[0]).dims(), &[1, 4, 4]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 5).unwrap();
        let cams = tiny_cams(&cfg);
        let grids = feature_projection_grids(&cams, &cfg).unwrap();
        let images: Vec<Tensor> = (0..2)
            .map(|i| {
                Tensor::new(
                    vec![1, 16, 16],
                    (0..256).map(|j| ((i * 131 + j * 17) % 97) as f64 / 97.0).collect(),
                )
                .unwrap()
            })
            .collect();
        let run = || {
            let mut tape = Tape::new();
            let taped = TapedParams::insert(&mut tape, &params, false);
            let out = forward(&mut tape, &taped, &images, &grids, &cfg).unwrap();
            tape.value(out.volume).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 11).unwrap();
        let cams = tiny_cams(&cfg);
        let grids = feature_projection_grids(&cams, &cfg).unwrap();
        let images: Vec<Tensor> = (0..2)
            .map(|i| {
                Tensor::new(
                    vec![1, 16, 16],
                    (0..256)
                        .map(|j| 0.2 + 0.6 * (((i * 37 + j * 13) % 89) as f64 / 89.0))
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let gt_vol = Tensor::full(&[1, 3, 6, 6], 2.0);
        let gt_maps = vec![Tensor::full(&[1, 4, 4], 1.0); 2];

        let mut tape = Tape::new();
        let taped = TapedParams::insert(&mut tape, &params, true);
        let out = forward(&mut tape, &taped, &images, &grids, &cfg).unwrap();
        let gtv = tape.constant(gt_vol);
        let l3d = crate::losses::loss_3d(&mut tape, out.volume, gtv).unwrap();
        let gts: Vec<_> = gt_maps.iter().map(|m| tape.constant(m.clone())).collect();
        let l2d = crate::losses::loss_2d(&mut tape, &out.view_maps, &gts).unwrap();
        let zero = tape.constant(Tensor::scalar(0.0));
        let w = crate::losses::LossWeights::for_stage(2, 0.0).unwrap();
        let total = crate::losses::loss_total(&mut tape, l3d, l2d, zero, &w).unwrap();
        tape.backward(total);

        for (id, (name, _)) in taped.node_ids().iter().zip(params.named_tensors()) {
            let g = tape
                .grad(*id)
                .unwrap_or_else(|| panic!("{name} has no grad"));
            assert!(
                g.iter().any(|v| *v != 0.0),
                "{name} gradient is identically zero"
            );
        }
    }

    #[test]
    fn permuting_views_permutes_projections_exactly() {
        let cfg = tiny_cfg();
        let cams = tiny_cams(&cfg);
        let grids = feature_projection_grids(&cams, &cfg).unwrap();
        let f: Vec<Tensor> = (0..2)
            .map(|i| {
                Tensor::new(
                    vec![1, 4, 4],
                    (0..16).map(|j| ((i * 7 + j * 3) % 11) as f64).collect(),
                )
                .unwrap()
            })
            .collect();
        let project = |img: &Tensor, g: &ProjectionGrids| {
            let mut tape = Tape::new();
            let x = tape.constant(img.clone());
            let p = project_2d_to_3d(&mut tape, x, g).unwrap();
            tape.value(p).data().to_vec()
        };
        let p00 = project(&f[0], &grids[0]);
        let p11 = project(&f[1], &grids[1]);
        // permute the (view, camera) pairs together: outputs swap wholesale
        let q0 = project(&f[1], &grids[1]);
        let q1 = project(&f[0], &grids[0]);
        assert_eq!(p00, q1);
        assert_eq!(p11, q0);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_params_and_meta() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 9).unwrap();
        let bytes = checkpoint_to_bytes(&params, &cfg, 9, 2).unwrap();
        let ck = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(ck.seed, 9);
        assert_eq!(ck.stage, 2);
        assert_eq!(ck.config, cfg);
        for ((na, ta), (nb, tb)) in params
            .named_tensors()
            .iter()
            .zip(ck.params.named_tensors().iter())
        {
            assert_eq!(na, nb);
            assert_eq!(ta.dims(), tb.dims());
            // storage is f32; loaded values are the f32 rounding
            for (a, b) in ta.data().iter().zip(tb.data().iter()) {
                assert_eq!(*a as f32 as f64, *b);
            }
        }
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(checkpoint_from_bytes(b"nope").is_err());
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let mut bytes = checkpoint_to_bytes(&params, &cfg, 1, 1).unwrap();
        bytes[0] = b'X';
        assert!(checkpoint_from_bytes(&bytes).is_err());
    }
}
