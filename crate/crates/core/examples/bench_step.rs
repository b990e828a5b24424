//! Rough timing of one desk-scale training step.
use crowd3d::model::{forward, ModelConfig, ModelParams, TapedParams};
use crowd3d::scene::{gen_scene, GenSceneConfig};
use crowd3d::tape::Tape;
use crowd3d::train::{build_view_caches, prepare_scene, TrainConfig};
use crowd3d::voxel::VoxelGridSpec;
use std::time::Instant;

fn main() {
    let scene = gen_scene(&GenSceneConfig {
        seed: 1,
        n_views: 3,
        n_frames: 4,
        people_range: (1, 8),
        image_size: (64, 64),
        ..GenSceneConfig::default()
    })
    .unwrap();
    let vox = VoxelGridSpec::centered(32, 400.0, 7, 400.0).unwrap();
    let mut cfg = TrainConfig::with_vox(vox);
    cfg.channel_scale = 0.25;
    cfg.train_frames = 4;
    let mcfg = cfg.model_config(&scene).unwrap();
    let caches = build_view_caches(&scene, &mcfg).unwrap();
    let (samples, _) = prepare_scene(&scene, &cfg).unwrap();
    let params = ModelParams::init(&mcfg, 0).unwrap();
    println!("params: {}", params.parameter_count());

    // forward only
    let t0 = Instant::now();
    let mut tape = Tape::new();
    let taped = TapedParams::insert(&mut tape, &params, false);
    let out = forward(&mut tape, &taped, &samples[0].images, &caches.grids, &mcfg).unwrap();
    let fwd = t0.elapsed();
    println!("forward only: {:?}  (vol sum {})", fwd, tape.value(out.volume).sum());

    // forward + backward
    let t1 = Instant::now();
    let mut tape = Tape::new();
    let taped = TapedParams::insert(&mut tape, &params, true);
    let out = forward(&mut tape, &taped, &samples[0].images, &caches.grids, &mcfg).unwrap();
    let gt = tape.constant(samples[0].gt_volume.clone());
    let l = tape.mse(out.volume, gt).unwrap();
    tape.backward(l);
    println!("forward+backward: {:?}", t1.elapsed());

    // 5 steps average
    let t2 = Instant::now();
    for s in &samples {
        let mut tape = Tape::new();
        let taped = TapedParams::insert(&mut tape, &params, true);
        let out = forward(&mut tape, &taped, &s.images, &caches.grids, &mcfg).unwrap();
        let gt = tape.constant(s.gt_volume.clone());
        let l = tape.mse(out.volume, gt).unwrap();
        tape.backward(l);
    }
    println!("4 full steps: {:?} ({:?}/step)", t2.elapsed(), t2.elapsed() / 4);
}
