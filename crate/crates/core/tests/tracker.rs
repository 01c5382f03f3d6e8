use lmtrack::boxes::BoundingBox3D;
use lmtrack::decoder::DecoderConfig;
use lmtrack::geometry::Se3;
use lmtrack::lmm::LmmConfig;
use lmtrack::simulator::{gen_scene, Frame, GtObject, NoiseConfig, Scene, SceneMeta, SensorToken, SimConfig};
use lmtrack::tracker::{init_model, run_sequence, ModelConfig, TrackerConfig};
use lmtrack::train::{train_model, TrainConfig};

const D: usize = 16;

fn model() -> ModelConfig {
    ModelConfig {
        decoder: DecoderConfig {
            num_layers: 2,
            d_l: D,
            h: 2,
            num_det_queries: 6,
            ffn_width: 32,
            ..Default::default()
        },
        lmm: LmmConfig::new(D, 2),
        use_lmm: true,
        use_track_embedding: true,
    }
}

/// Still objects seen by a still sensor with exact tokens.
fn static_sim() -> SimConfig {
    SimConfig {
        num_frames: 8,
        d_a: D,
        min_objects: 1,
        max_objects: 2,
        max_object_speed: 0.0,
        turning_fraction: 0.0,
        companion_prob: 0.0,
        occlusion_rate: 0.0,
        ego_speed: 0.0,
        ego_speed_sigma: 0.0,
        ego_yaw_rate_sigma: 0.0,
        noise: NoiseConfig::noiseless(),
        ..Default::default()
    }
}

fn hand_built_scene(num_frames: usize) -> Scene {
    let feature: Vec<f64> = (0..D).map(|i| if i % 3 == 0 { 0.8 } else { -0.4 }).collect();
    let bbox = BoundingBox3D {
        center: [9.0, -4.0, 0.8],
        size: [1.9, 4.6, 1.6],
        heading: 0.3,
        velocity: [0.0, 0.0],
        score: 1.0,
        class_id: 0,
    };
    let frames = (0..num_frames)
        .map(|index| Frame {
            index,
            ego_pose: Se3::identity(),
            gt_objects: vec![GtObject {
                id: 0,
                bbox,
                world_center: bbox.center,
                world_heading: bbox.heading,
                appearance: feature.clone(),
                visible: true,
            }],
            sensor_tokens: vec![SensorToken {
                position: bbox.center,
                feature: feature.clone(),
                is_clutter: false,
                source_id: Some(0),
            }],
        })
        .collect();
    Scene {
        meta: SceneMeta {
            seed: 0,
            config_hash: String::new(),
            dt: 0.5,
            num_frames,
            feature_dim: D,
        },
        frames,
    }
}

#[test]
fn static_object_keeps_one_track_id() {
    let sim = static_sim();
    let scenes: Vec<Scene> = (0..24).map(|s| gen_scene(&sim, s).unwrap()).collect();
    let cfg = model();
    let tcfg = TrackerConfig::default();
    let mut params = init_model(&cfg, D, 1).unwrap();
    let train = TrainConfig {
        epochs: 40,
        lr: 3e-3,
        ..Default::default()
    };
    train_model(&mut params, &cfg, &tcfg, &train, &scenes, 1, |_| {}).unwrap();

    let scene = hand_built_scene(10);
    let result = run_sequence(&params, &cfg, &tcfg, &scene).unwrap();
    let ids: Vec<Vec<u64>> = result.frames.iter().map(|f| f.tracks.iter().map(|t| t.id).collect()).collect();
    assert!(ids.iter().all(|f| f == &ids[0]) && ids[0].len() == 1, "{ids:?}");
}

#[test]
fn same_inputs_give_identical_results() {
    let cfg = model();
    let params = init_model(&cfg, D, 4).unwrap();
    let scene = gen_scene(&SimConfig { d_a: D, num_frames: 6, ..Default::default() }, 9).unwrap();
    let a = run_sequence(&params, &cfg, &TrackerConfig::default(), &scene).unwrap();
    let b = run_sequence(&params, &cfg, &TrackerConfig::default(), &scene).unwrap();
    assert_eq!(a, b);
}
