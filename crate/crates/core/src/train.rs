//! Training and evaluation harness: staged schedule, Adam updates,
//! newline-JSON step logs and scene-level metrics.
//!
//! The schedule follows the three-phase plan: per-view 2D supervision
//! dominates first (beta = 1), then 3D supervision (beta = 0.01), then the
//! projection-consistency term joins (gamma > 0). Learning rate 1e-4 and
//! batch size 1 are the defaults throughout.

use crate::ground_truth::{
    build_scene_ground_truth, FrameGroundTruth, GroundTruthConfig, GroundTruthError, SCALE_2D,
};
use crate::losses::{
    self, loss_2d, loss_3d, loss_pcm, loss_total, mask_from_density, LossWeights,
    MASK_THRESHOLD_2D, MASK_THRESHOLD_3D, PCM_ALPHA,
};
use crate::model::{
    count_from_volume, feature_projection_grids, forward, ModelConfig, ModelError, ModelParams,
    TapedParams,
};
use crate::projection::{backproject_hard, backprojection_lookup, ProjectionGrids};
use crate::scene::{render_views, Scene};
use crate::tape::{Tape, VoxelLookup};
use crate::tensor::Tensor;
use crate::voxel::VoxelGridSpec;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    GroundTruth(#[from] GroundTruthError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} (stage {stage}); diagnostic checkpoint attached")]
    NonFinite {
        step: u64,
        stage: u8,
        checkpoint: Vec<u8>,
    },
}

/// How the PCM loss reaches the 3D prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcmGradMode {
    /// Differentiable sigmoid-product surrogate of the hard mask.
    Soft,
    /// PCM is measured (hard mask) and logged but contributes no gradient.
    Detached,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StageConfig {
    pub epochs: usize,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Thresholds {
    /// 3D prediction mask threshold (T).
    pub mask_3d: f64,
    /// Ground-truth 2D density mask threshold.
    pub mask_2d: f64,
    /// PCM divide-by-zero guard.
    pub alpha: f64,
    /// Soft-mask temperature.
    pub tau: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            mask_3d: MASK_THRESHOLD_3D,
            mask_2d: MASK_THRESHOLD_2D,
            alpha: PCM_ALPHA,
            tau: MASK_THRESHOLD_3D / 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub stages: Vec<StageConfig>,
    pub vox: VoxelGridSpec,
    pub thresholds: Thresholds,
    /// 2D ground-truth kernel width at decoder resolution, px.
    pub sigma2_px: f64,
    /// 3D kernel width, mm; defaults to twice the ground cell size.
    pub sigma3_mm: Option<f64>,
    pub channel_scale: f64,
    pub share_extractor: bool,
    pub pcm_grad: PcmGradMode,
    /// Frames [0, train_frames) train; the rest are the test split.
    pub train_frames: usize,
}

impl TrainConfig {
    /// Paper-schedule defaults over a given voxel grid.
    pub fn with_vox(vox: VoxelGridSpec) -> Self {
        TrainConfig {
            seed: 0,
            learning_rate: 1e-4,
            batch_size: 1,
            stages: vec![
                StageConfig {
                    epochs: 10,
                    beta: 1.0,
                    gamma: 0.0,
                },
                StageConfig {
                    epochs: 20,
                    beta: 0.01,
                    gamma: 0.0,
                },
                StageConfig {
                    epochs: 10,
                    beta: 0.01,
                    gamma: 10.0,
                },
            ],
            vox,
            thresholds: Thresholds::default(),
            sigma2_px: 3.0,
            sigma3_mm: None,
            channel_scale: 1.0,
            share_extractor: true,
            pcm_grad: PcmGradMode::Soft,
            train_frames: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.stages.is_empty() || self.stages.len() > 3 {
            return Err(TrainError::Config(format!(
                "expected 1-3 stages, got {}",
                self.stages.len()
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if self.batch_size != 1 {
            return Err(TrainError::Config(
                "only batch size 1 is supported".into(),
            ));
        }
        for (i, s) in self.stages.iter().enumerate() {
            LossWeights::custom(i as u8 + 1, s.beta, s.gamma)?;
        }
        Ok(())
    }

    pub fn model_config(&self, scene: &Scene) -> Result<ModelConfig, TrainError> {
        if scene.cameras.is_empty() {
            return Err(TrainError::Config("scene has no cameras".into()));
        }
        let image_size = scene.cameras[0].image_size();
        if scene
            .cameras
            .iter()
            .any(|c| c.image_size() != image_size)
        {
            return Err(TrainError::Config(
                "all cameras must share one image size".into(),
            ));
        }
        Ok(ModelConfig {
            n_views: scene.cameras.len(),
            channel_scale: self.channel_scale,
            image_size,
            vox: self.vox.clone(),
            share_extractor: self.share_extractor,
        })
    }

    pub fn ground_truth_config(&self) -> GroundTruthConfig {
        GroundTruthConfig {
            sigma3_mm: self.sigma3_mm,
            sigma2_px: self.sigma2_px,
            height_search_mm: crate::ground_truth::default_height_search(),
            map_downsample: 4,
        }
    }
}

/// One frame ready for the training loop: rendered views, ground truth and
/// cached masks.
pub struct FrameSample {
    pub frame_id: u32,
    pub images: Vec<Tensor>,
    pub gt_volume: Tensor,
    pub gt_maps: Vec<Tensor>,
    pub gt_masks: Vec<Tensor>,
    /// People in the frame per the scene record.
    pub true_count: f64,
    /// Visible heads per view (what the 2D maps integrate to).
    pub visible_heads: Vec<f64>,
}

/// Render every frame once and pair it with its ground truth.
pub fn prepare_samples(
    scene: &Scene,
    gts: &[FrameGroundTruth],
    mask_2d_threshold: f64,
    render_seed: u64,
) -> Vec<FrameSample> {
    scene
        .frames
        .iter()
        .zip(gts.iter())
        .map(|(frame, gt)| {
            let images = render_views(scene, frame, render_seed);
            let gt_masks = gt
                .view_maps
                .iter()
                .map(|m| mask_from_density(m, mask_2d_threshold))
                .collect();
            FrameSample {
                frame_id: frame.frame_id,
                images,
                gt_volume: gt.volume.clone(),
                gt_maps: gt.view_maps.clone(),
                gt_masks,
                true_count: frame.people.len() as f64,
                visible_heads: gt.heads_per_view.iter().map(|&h| h as f64).collect(),
            }
        })
        .collect()
}

// ---- optimizer ----------------------------------------------------------------

/// Adam with the usual moment defaults.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ---- training loop --------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: u64,
    pub stage: u8,
    pub epoch: usize,
    pub frame_id: u32,
    pub l3d: f64,
    pub l2d: f64,
    pub lpcm: f64,
    pub total: f64,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub steps: u64,
    pub final_stage: u8,
    pub final_loss: f64,
}

/// Per-view fixed geometry caches used by training and evaluation.
pub struct ViewCaches {
    pub grids: Vec<ProjectionGrids>,
    /// Back-projection lookups at decoder resolution.
    pub luts: Vec<Arc<VoxelLookup>>,
}

pub fn build_view_caches(scene: &Scene, mcfg: &ModelConfig) -> Result<ViewCaches, TrainError> {
    let grids = feature_projection_grids(&scene.cameras, mcfg)?;
    let (fw, fh) = mcfg.feature_size();
    let luts = scene
        .cameras
        .iter()
        .map(|cam| {
            let feat_cam = cam
                .resampled(0.25, -0.375, (fw, fh))
                .map_err(|e| TrainError::Config(format!("feature camera: {e}")))?;
            Ok(backprojection_lookup(&feat_cam, &mcfg.vox))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(ViewCaches { grids, luts })
}

/// Train over `samples` with the staged schedule, calling `on_step` with
/// every log entry. Single-threaded and bit-deterministic for a fixed
/// seed.
pub fn train(
    samples: &[FrameSample],
    cfg: &TrainConfig,
    mcfg: &ModelConfig,
    caches: &ViewCaches,
    mut on_step: impl FnMut(&TrainLogEntry),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    mcfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::Config("no training frames".into()));
    }
    let mut params = ModelParams::init(mcfg, cfg.seed)?;
    let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(cfg.learning_rate, &sizes);
    let mut step: u64 = 0;
    let mut last_total = f64::NAN;

    for (stage_ix, stage) in cfg.stages.iter().enumerate() {
        let stage_no = stage_ix as u8 + 1;
        let weights = LossWeights::custom(stage_no, stage.beta, stage.gamma)?;
        for epoch in 0..stage.epochs {
            for sample in samples {
                step += 1;
                let entry = train_step(
                    &mut params,
                    &mut adam,
                    sample,
                    cfg,
                    mcfg,
                    caches,
                    &weights,
                    step,
                    epoch,
                )?;
                last_total = entry.total;
                if !entry.total.is_finite() {
                    let checkpoint = crate::model::checkpoint_to_bytes(
                        &params, mcfg, cfg.seed, stage_no,
                    )?;
                    return Err(TrainError::NonFinite {
                        step,
                        stage: stage_no,
                        checkpoint,
                    });
                }
                on_step(&entry);
            }
        }
    }
    Ok(TrainOutcome {
        params,
        steps: step,
        final_stage: cfg.stages.len() as u8,
        final_loss: last_total,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    params: &mut ModelParams,
    adam: &mut Adam,
    sample: &FrameSample,
    cfg: &TrainConfig,
    mcfg: &ModelConfig,
    caches: &ViewCaches,
    weights: &LossWeights,
    step: u64,
    epoch: usize,
) -> Result<TrainLogEntry, TrainError> {
    let mut tape = Tape::new();
    let taped = TapedParams::insert(&mut tape, params, true);
    let out = forward(&mut tape, &taped, &sample.images, &caches.grids, mcfg)?;

    let gt_vol = tape.constant(sample.gt_volume.clone());
    let l3d = loss_3d(&mut tape, out.volume, gt_vol)?;
    let gt_maps: Vec<_> = sample
        .gt_maps
        .iter()
        .map(|m| tape.constant(m.clone()))
        .collect();
    let l2d = loss_2d(&mut tape, &out.view_maps, &gt_maps)?;

    let use_soft_pcm = weights.gamma > 0.0 && cfg.pcm_grad == PcmGradMode::Soft;
    let lpcm = if use_soft_pcm {
        let projs: Vec<_> = caches
            .luts
            .iter()
            .map(|lut| {
                tape.soft_backproject(
                    out.volume,
                    lut.clone(),
                    cfg.thresholds.mask_3d,
                    cfg.thresholds.tau,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        loss_pcm(&mut tape, &sample.gt_masks, &projs, cfg.thresholds.alpha)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };

    let total = loss_total(&mut tape, l3d, l2d, lpcm, weights)?;

    let l3d_v = tape.value(l3d).item();
    let l2d_v = tape.value(l2d).item();
    // log the hard-mask PCM loss when the gradient path is detached or off
    let lpcm_v = if use_soft_pcm {
        tape.value(lpcm).item()
    } else {
        let vol = tape.value(out.volume);
        let projs: Vec<Tensor> = caches
            .luts
            .iter()
            .map(|lut| backproject_hard(vol, lut, cfg.thresholds.mask_3d))
            .collect();
        losses::loss_pcm_value(&sample.gt_masks, &projs, cfg.thresholds.alpha)?
    };
    let total_v = losses::loss_total_value(l3d_v, l2d_v, lpcm_v, weights);

    if total_v.is_finite() {
        tape.backward(total);
        let ids = taped.node_ids();
        let zeros: Vec<f64> = Vec::new();
        let grads: Vec<&[f64]> = ids
            .iter()
            .map(|id| tape.grad(*id).unwrap_or(&zeros))
            .collect();
        let mut named = params_named_data(params);
        adam.step(&mut named, &grads);
    }

    Ok(TrainLogEntry {
        step,
        stage: weights.stage,
        epoch,
        frame_id: sample.frame_id,
        l3d: l3d_v,
        l2d: l2d_v,
        lpcm: lpcm_v,
        total: total_v,
    })
}

fn params_named_data(params: &mut ModelParams) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    for layers in params.extractors.iter_mut() {
        for c in layers.iter_mut() {
            out.push(c.kernel.data_mut());
            out.push(c.bias.data_mut());
        }
    }
    for c in params.decoder.iter_mut() {
        out.push(c.kernel.data_mut());
        out.push(c.bias.data_mut());
    }
    for c in params.fusion.iter_mut() {
        out.push(c.kernel.data_mut());
        out.push(c.bias.data_mut());
    }
    out
}

// ---- evaluation --------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub frames: usize,
    /// Mean absolute scene-count error: |sum(G)/1e4 - true count|.
    pub scene_mae: f64,
    /// Per-view mean absolute 2D count error: |sum(V_i)/1e3 - visible heads|.
    pub per_view_2d_mae: Vec<f64>,
    /// Mean hard-mask PCM over frames and views.
    pub mean_pcm: f64,
}

/// Evaluate a model over prepared samples.
pub fn evaluate(
    params: &ModelParams,
    mcfg: &ModelConfig,
    caches: &ViewCaches,
    samples: &[FrameSample],
    thresholds: &Thresholds,
) -> Result<EvalMetrics, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Config("no frames to evaluate".into()));
    }
    let n_views = mcfg.n_views;
    let mut abs_count_err = 0.0;
    let mut view_err = vec![0.0; n_views];
    let mut pcm_sum = 0.0;
    let mut pcm_n = 0usize;

    for sample in samples {
        let mut tape = Tape::new();
        let taped = TapedParams::insert(&mut tape, params, false);
        let out = forward(&mut tape, &taped, &sample.images, &caches.grids, mcfg)?;
        let volume = tape.value(out.volume);
        abs_count_err += (count_from_volume(volume) - sample.true_count).abs();
        for view in 0..n_views {
            let v = tape.value(out.view_maps[view]);
            view_err[view] += (v.sum() / SCALE_2D - sample.visible_heads[view]).abs();
            let proj = backproject_hard(volume, &caches.luts[view], thresholds.mask_3d);
            pcm_sum += losses::pcm_value(&sample.gt_masks[view], &proj, thresholds.alpha)?;
            pcm_n += 1;
        }
    }
    let n = samples.len() as f64;
    Ok(EvalMetrics {
        frames: samples.len(),
        scene_mae: abs_count_err / n,
        per_view_2d_mae: view_err.iter().map(|e| e / n).collect(),
        mean_pcm: pcm_sum / pcm_n as f64,
    })
}

/// Convenience: build ground truth, render frames, and split train/test.
pub fn prepare_scene(
    scene: &Scene,
    cfg: &TrainConfig,
) -> Result<(Vec<FrameSample>, Vec<FrameSample>), TrainError> {
    let (gts, _report) = build_scene_ground_truth(scene, &cfg.vox, &cfg.ground_truth_config())?;
    let mut samples = prepare_samples(scene, &gts, cfg.thresholds.mask_2d, cfg.seed);
    let split = cfg.train_frames.min(samples.len());
    let test = samples.split_off(split);
    Ok((samples, test))
}
