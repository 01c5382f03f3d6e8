//! Synthetic driving scenes.
//!
//! An ego vehicle wanders with a smooth random walk in yaw and speed while
//! objects follow constant-velocity or constant-turn-rate trajectories. Each
//! object carries a base appearance vector; what the sensor sees is that
//! vector rotated by a fixed block-rotation law of the object's pose relative
//! to the ego, so appearance drifts whenever the viewing geometry changes.
//! Ground truth is noise free; tokens carry position noise, feature noise,
//! dropouts and clutter.

use std::io::{BufRead, Write};

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::boxes::BoundingBox3D;
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Se3};
use crate::hashing::{config_hash, rng_for};
use crate::lmm::LatentSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawConfig {
    pub seed: u64,
    /// Yaw gains are integers in `[-max_yaw_gain, max_yaw_gain] \ {0}` so the
    /// law stays continuous across the ±π wrap.
    pub max_yaw_gain: i32,
    /// Distance gains are uniform in `[-max, max]`.
    pub max_dist_gain: f64,
    /// Feature noise σ added after the rotation.
    pub sigma: f64,
}

impl Default for LawConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            max_yaw_gain: 3,
            max_dist_gain: 0.3,
            sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Token position noise σ in meters.
    pub pos_sigma: f64,
    /// Probability that a visible object emits no token.
    pub p_miss: f64,
    /// Mean clutter tokens per frame.
    pub clutter_rate: f64,
    /// Norm of clutter features relative to object features.
    pub clutter_norm: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            pos_sigma: 0.3,
            p_miss: 0.1,
            clutter_rate: 1.0,
            clutter_norm: 0.5,
        }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            pos_sigma: 0.0,
            p_miss: 0.0,
            clutter_rate: 0.0,
            clutter_norm: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub num_frames: usize,
    pub dt: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Appearance dimension; matches the model latent size.
    pub d_a: usize,
    /// Fraction of objects with a nonzero turn rate.
    pub turning_fraction: f64,
    pub max_turn_rate: f64,
    pub max_object_speed: f64,
    /// Probability that an object spawns next to an earlier one, moving alike.
    pub companion_prob: f64,
    pub spawn_radius: f64,
    pub sensor_range: f64,
    /// Per-object probability of each scripted occlusion window.
    pub occlusion_rate: f64,
    pub min_occlusion: usize,
    pub max_occlusion: usize,
    pub ego_speed: f64,
    pub ego_speed_sigma: f64,
    /// Random-walk σ on the ego yaw rate, rad per frame.
    pub ego_yaw_rate_sigma: f64,
    pub ego_max_yaw_rate: f64,
    pub law: LawConfig,
    pub noise: NoiseConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_frames: 40,
            dt: 0.5,
            min_objects: 4,
            max_objects: 8,
            d_a: 64,
            turning_fraction: 0.3,
            max_turn_rate: 0.1,
            max_object_speed: 2.0,
            companion_prob: 0.3,
            spawn_radius: 20.0,
            sensor_range: 35.0,
            occlusion_rate: 0.4,
            min_occlusion: 1,
            max_occlusion: 4,
            ego_speed: 3.0,
            ego_speed_sigma: 0.3,
            ego_yaw_rate_sigma: 0.08,
            ego_max_yaw_rate: 0.3,
            law: LawConfig::default(),
            noise: NoiseConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: &str| Err(Error::invalid_config(format!("sim.{f}"), r));
        if self.num_frames == 0 {
            return bad("num_frames", "must be positive");
        }
        if !(self.dt > 0.0) {
            return bad("dt", "must be positive");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects", "exceeds max_objects");
        }
        if self.d_a == 0 || self.d_a % 2 != 0 {
            return bad("d_a", "must be a positive even number");
        }
        if self.min_occlusion == 0 || self.min_occlusion > self.max_occlusion {
            return bad("min_occlusion", "need 1 <= min_occlusion <= max_occlusion");
        }
        for (f, p) in [
            ("turning_fraction", self.turning_fraction),
            ("companion_prob", self.companion_prob),
            ("occlusion_rate", self.occlusion_rate),
            ("noise.p_miss", self.noise.p_miss),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(f, "must be a probability");
            }
        }
        if self.noise.pos_sigma < 0.0 || self.noise.clutter_rate < 0.0 || self.law.sigma < 0.0 {
            return bad("noise", "σ and rates must be non-negative");
        }
        if self.law.max_yaw_gain < 1 {
            return bad("law.max_yaw_gain", "must be at least 1");
        }
        Ok(())
    }
}

/// Pose-dependent appearance: 2×2 rotations on consecutive feature pairs,
/// pair `i` turned by `yaw_gain[i]·yaw + dist_gain[i]·ln(1 + ‖t‖)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceLaw {
    pub yaw_gain: Vec<f64>,
    pub dist_gain: Vec<f64>,
    pub sigma: f64,
}

impl AppearanceLaw {
    pub fn new(cfg: &LawConfig, d_a: usize) -> Self {
        let mut rng = rng_for(cfg.seed, 0x1a3);
        let pairs = d_a / 2;
        let yaw_gain = (0..pairs)
            .map(|_| {
                let mag = rng.random_range(1..=cfg.max_yaw_gain) as f64;
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let dist_gain = (0..pairs)
            .map(|_| {
                if cfg.max_dist_gain > 0.0 {
                    rng.random_range(-cfg.max_dist_gain..=cfg.max_dist_gain)
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            yaw_gain,
            dist_gain,
            sigma: cfg.sigma,
        }
    }

    pub fn dim(&self) -> usize {
        2 * self.yaw_gain.len()
    }

    pub fn angles(&self, rel_pose: &Se3) -> Vec<f64> {
        let yaw = rel_pose.yaw();
        let ld = rel_pose.translation().norm().ln_1p();
        self.yaw_gain
            .iter()
            .zip(&self.dist_gain)
            .map(|(a, b)| a * yaw + b * ld)
            .collect()
    }

    /// Rotates consecutive pairs of `v` by `angles`.
    pub fn rotate(v: &[f64], angles: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for (i, th) in angles.iter().enumerate() {
            let (s, c) = th.sin_cos();
            let (x, y) = (v[2 * i], v[2 * i + 1]);
            out[2 * i] = c * x - s * y;
            out[2 * i + 1] = s * x + c * y;
        }
        out
    }

    /// Noise-free appearance of `base` seen at `rel_pose`.
    pub fn apply(&self, base: &[f64], rel_pose: &Se3) -> Vec<f64> {
        Self::rotate(base, &self.angles(rel_pose))
    }

    /// Inverse of [`AppearanceLaw::apply`].
    pub fn invert(&self, feature: &[f64], rel_pose: &Se3) -> Vec<f64> {
        let neg: Vec<f64> = self.angles(rel_pose).iter().map(|a| -a).collect();
        Self::rotate(feature, &neg)
    }

    pub fn appearance<R: Rng + ?Sized>(&self, base: &[f64], rel_pose: &Se3, rng: &mut R) -> Vec<f64> {
        let mut f = self.apply(base, rel_pose);
        if self.sigma > 0.0 {
            let n = Normal::new(0.0, self.sigma).expect("finite σ");
            f.iter_mut().for_each(|v| *v += n.sample(rng));
        }
        f
    }
}

/// Ground-truth object in one frame; the box is in that frame's ego frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub id: u64,
    pub bbox: BoundingBox3D,
    pub world_center: [f64; 3],
    pub world_heading: f64,
    /// Noise-free appearance at this frame's viewing geometry.
    pub appearance: Vec<f64>,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorToken {
    /// Noisy position in the ego frame.
    pub position: [f64; 3],
    pub feature: Vec<f64>,
    pub is_clutter: bool,
    /// Emitting object, absent for clutter. Never shown to the model.
    pub source_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: usize,
    /// World → ego transform.
    pub ego_pose: Se3,
    /// Objects within sensor range, visible or occluded.
    pub gt_objects: Vec<GtObject>,
    pub sensor_tokens: Vec<SensorToken>,
}

impl Frame {
    pub fn visible_objects(&self) -> impl Iterator<Item = &GtObject> {
        self.gt_objects.iter().filter(|o| o.visible)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub config_hash: String,
    pub dt: f64,
    pub num_frames: usize,
    /// Width of sensor features.
    pub feature_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub meta: SceneMeta,
    pub frames: Vec<Frame>,
}

impl Scene {
    pub fn dt(&self) -> f64 {
        self.meta.dt
    }

    /// `ego_{k+1} ← ego_k` transform between consecutive frames.
    pub fn ego_motion(&self, k: usize) -> Se3 {
        let a = &self.frames[k].ego_pose;
        let b = &self.frames[k + 1].ego_pose;
        b.compose(&a.inverse())
    }

    /// JSON lines: a header `{"meta": …}` followed by one frame per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &Header { meta: self.meta.clone() })?;
        w.write_all(b"\n")?;
        for f in &self.frames {
            serde_json::to_writer(&mut w, f)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(String::from_utf8(buf).expect("json is utf-8"))
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("scene file is empty".into()))??;
        let Header { meta } = serde_json::from_str(&header)?;
        let mut frames = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            frames.push(serde_json::from_str(&line)?);
        }
        if frames.len() != meta.num_frames {
            return Err(Error::Format(format!(
                "header declares {} frames, found {}",
                meta.num_frames,
                frames.len()
            )));
        }
        Ok(Self { meta, frames })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: SceneMeta,
}

#[derive(Debug, Clone)]
struct ObjectTrack {
    id: u64,
    origin: [f64; 2],
    z: f64,
    heading0: f64,
    speed: f64,
    /// Heading change per frame.
    turn_rate: f64,
    size: [f64; 3],
    base: Vec<f64>,
    occluded: Vec<(usize, usize)>,
}

impl ObjectTrack {
    /// Closed-form world state at frame `k`: (position, heading, velocity).
    fn state(&self, k: usize, dt: f64) -> ([f64; 3], f64, [f64; 2]) {
        let t = k as f64 * dt;
        let heading = self.heading0 + k as f64 * self.turn_rate;
        let (sh, ch) = heading.sin_cos();
        let vel = [self.speed * ch, self.speed * sh];
        let pos = if self.turn_rate == 0.0 {
            [self.origin[0] + vel[0] * t, self.origin[1] + vel[1] * t, self.z]
        } else {
            let omega = self.turn_rate / dt;
            let r = self.speed / omega;
            let (s0, c0) = self.heading0.sin_cos();
            [
                self.origin[0] + r * (sh - s0),
                self.origin[1] + r * (c0 - ch),
                self.z,
            ]
        };
        (pos, heading, vel)
    }

    fn occluded_at(&self, k: usize) -> bool {
        self.occluded.iter().any(|(s, e)| k >= *s && k < *e)
    }
}

fn random_unit<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..d).map(|_| n.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn ego_trajectory(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<(f64, f64, f64)> {
    let yaw_noise = Normal::new(0.0, cfg.ego_yaw_rate_sigma.max(0.0)).expect("finite σ");
    let speed_noise = Normal::new(0.0, cfg.ego_speed_sigma.max(0.0)).expect("finite σ");
    let (mut x, mut y, mut yaw) = (0.0, 0.0, 0.0_f64);
    let mut yaw_rate: f64 = 0.0;
    let mut speed = cfg.ego_speed;
    let mut out = Vec::with_capacity(cfg.num_frames);
    for _ in 0..cfg.num_frames {
        out.push((x, y, yaw));
        yaw_rate = (0.8 * yaw_rate + yaw_noise.sample(rng))
            .clamp(-cfg.ego_max_yaw_rate, cfg.ego_max_yaw_rate);
        speed = (speed + speed_noise.sample(rng)).clamp(0.0, 2.0 * cfg.ego_speed.max(0.1));
        x += speed * cfg.dt * yaw.cos();
        y += speed * cfg.dt * yaw.sin();
        yaw = wrap_angle(yaw + yaw_rate);
    }
    out
}

fn spawn_objects(
    cfg: &SimConfig,
    ego: &[(f64, f64, f64)],
    rng: &mut ChaCha8Rng,
) -> Vec<ObjectTrack> {
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let feature_scale = (cfg.d_a as f64).sqrt();
    let mut objs: Vec<ObjectTrack> = Vec::with_capacity(n);
    for id in 0..n as u64 {
        let companion = !objs.is_empty() && rng.random_bool(cfg.companion_prob);
        let (origin, heading0, speed, turn_rate) = if companion {
            let lead = &objs[rng.random_range(0..objs.len())];
            let gap = rng.random_range(1.5..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let (s, c) = lead.heading0.sin_cos();
            let along = rng.random_range(-1.0..1.0);
            (
                [
                    lead.origin[0] - s * gap + c * along,
                    lead.origin[1] + c * gap + s * along,
                ],
                lead.heading0 + rng.random_range(-0.2..0.2),
                (lead.speed + rng.random_range(-0.3..0.3)).max(0.0),
                lead.turn_rate,
            )
        } else {
            // Anchor near a random point of the ego path so objects meet the ego.
            let (ex, ey, _) = ego[rng.random_range(0..ego.len())];
            let r = cfg.spawn_radius * rng.random::<f64>().sqrt();
            let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let turning = rng.random_bool(cfg.turning_fraction);
            (
                [ex + r * phi.cos(), ey + r * phi.sin()],
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                rng.random_range(0.0..=cfg.max_object_speed),
                if turning && cfg.max_turn_rate > 0.0 {
                    rng.random_range(-cfg.max_turn_rate..=cfg.max_turn_rate)
                } else {
                    0.0
                },
            )
        };
        let size = [
            rng.random_range(1.6..2.1),
            rng.random_range(3.8..5.0),
            rng.random_range(1.4..1.9),
        ];
        let base: Vec<f64> = random_unit(cfg.d_a, rng)
            .into_iter()
            .map(|v| v * feature_scale)
            .collect();
        let mut occluded = Vec::new();
        while occluded.len() < 3 && rng.random_bool(cfg.occlusion_rate) {
            let len = rng.random_range(cfg.min_occlusion..=cfg.max_occlusion);
            let start = rng.random_range(1..cfg.num_frames.max(2));
            occluded.push((start, start + len));
        }
        objs.push(ObjectTrack {
            id,
            origin,
            z: size[2] / 2.0,
            heading0,
            speed,
            turn_rate,
            size,
            base,
            occluded,
        });
    }
    objs
}

/// Generates one scene; identical `(cfg, seed)` give identical scenes.
pub fn gen_scene(cfg: &SimConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let law = AppearanceLaw::new(&cfg.law, cfg.d_a);
    let mut rng = rng_for(seed, 0);
    let ego = ego_trajectory(cfg, &mut rng);
    let objects = spawn_objects(cfg, &ego, &mut rng);
    let mut law_rng = rng_for(seed, 1);

    let mut frames = Vec::with_capacity(cfg.num_frames);
    for (k, &(ex, ey, eyaw)) in ego.iter().enumerate() {
        let world_from_ego = Se3::from_yaw(eyaw, Vector3::new(ex, ey, 0.0));
        let ego_pose = world_from_ego.inverse();
        let rot = ego_pose.rotation();
        let mut gt_objects = Vec::new();
        for obj in &objects {
            let (pos, heading, vel) = obj.state(k, cfg.dt);
            let p_ego = ego_pose.apply(&Vector3::from(pos));
            if p_ego.xy().norm() > cfg.sensor_range {
                continue;
            }
            let v_ego = rot * Vector3::new(vel[0], vel[1], 0.0);
            let rel_heading = wrap_angle(heading - eyaw);
            let rel_pose = Se3::from_yaw(rel_heading, p_ego);
            gt_objects.push(GtObject {
                id: obj.id,
                bbox: BoundingBox3D {
                    center: [p_ego.x, p_ego.y, p_ego.z],
                    size: obj.size,
                    heading: rel_heading,
                    velocity: [v_ego.x, v_ego.y],
                    score: 1.0,
                    class_id: 0,
                },
                world_center: pos,
                world_heading: heading,
                appearance: law.appearance(&obj.base, &rel_pose, &mut law_rng),
                visible: !obj.occluded_at(k),
            });
        }
        frames.push(Frame {
            index: k,
            ego_pose,
            gt_objects,
            sensor_tokens: Vec::new(),
        });
    }

    let mut scene = Scene {
        meta: SceneMeta {
            seed,
            config_hash: config_hash(cfg),
            dt: cfg.dt,
            num_frames: cfg.num_frames,
            feature_dim: cfg.d_a,
        },
        frames,
    };
    let mut noise_rng = rng_for(seed, 2);
    for k in 0..scene.frames.len() {
        let tokens = render_frame(&scene, k, &cfg.noise, cfg.sensor_range, &mut noise_rng)?;
        scene.frames[k].sensor_tokens = tokens;
    }
    Ok(scene)
}

/// Sensor tokens for frame `t`: one per visible, undropped object plus clutter.
pub fn render_frame<R: Rng + ?Sized>(
    scene: &Scene,
    t: usize,
    noise: &NoiseConfig,
    clutter_range: f64,
    rng: &mut R,
) -> Result<Vec<SensorToken>> {
    let frame = scene
        .frames
        .get(t)
        .ok_or_else(|| Error::invalid_config("frame", format!("index {t} out of range")))?;
    let pos_noise = Normal::new(0.0, noise.pos_sigma).map_err(|e| Error::invalid_config("noise.pos_sigma", e.to_string()))?;
    let mut tokens = Vec::new();
    for obj in frame.visible_objects() {
        if rng.random_bool(noise.p_miss) {
            continue;
        }
        let c = obj.bbox.center;
        let position = if noise.pos_sigma > 0.0 {
            [
                c[0] + pos_noise.sample(rng),
                c[1] + pos_noise.sample(rng),
                c[2] + 0.1 * pos_noise.sample(rng),
            ]
        } else {
            c
        };
        tokens.push(SensorToken {
            position,
            feature: obj.appearance.clone(),
            is_clutter: false,
            source_id: Some(obj.id),
        });
    }
    let d = scene.meta.feature_dim;
    if noise.clutter_rate > 0.0 {
        let count = Poisson::new(noise.clutter_rate)
            .map_err(|e| Error::invalid_config("noise.clutter_rate", e.to_string()))?
            .sample(rng) as usize;
        for _ in 0..count {
            let r = clutter_range * rng.random::<f64>().sqrt();
            let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let scale = noise.clutter_norm * (d as f64).sqrt();
            let feature = random_unit(d, rng).into_iter().map(|v| v * scale).collect();
            tokens.push(SensorToken {
                position: [r * phi.cos(), r * phi.sin(), rng.random_range(0.5..1.2)],
                feature,
                is_clutter: true,
                source_id: None,
            });
        }
    }
    Ok(tokens)
}

/// Latent-prediction triples generated directly by the appearance law: the
/// next latent is the law applied for the object motion, then for the ego
/// motion, with no noise.
pub fn law_dataset<R: Rng + ?Sized>(
    law: &AppearanceLaw,
    n: usize,
    max_speed: f64,
    max_yaw: f64,
    max_ego_translation: f64,
    rng: &mut R,
) -> Vec<LatentSample> {
    let scale = (law.dim() as f64).sqrt();
    (0..n)
        .map(|_| {
            let q: Vec<f64> = random_unit(law.dim(), rng).into_iter().map(|v| v * scale).collect();
            let v = rng.random_range(0.0..=max_speed);
            let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let t_obj = Se3::from_translation(Vector3::new(v * phi.cos(), v * phi.sin(), 0.0));
            let t_ego = Se3::from_yaw(
                rng.random_range(-max_yaw..=max_yaw),
                Vector3::new(
                    rng.random_range(-max_ego_translation..=max_ego_translation),
                    rng.random_range(-max_ego_translation..=max_ego_translation) * 0.3,
                    0.0,
                ),
            );
            let q1 = law.apply(&q, &t_obj);
            let q2 = law.apply(&q1, &t_ego);
            LatentSample {
                q_t: q,
                t_obj,
                t_ego,
                q_next: q2,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn zero_objects_gives_only_clutter() {
        let cfg = SimConfig {
            min_objects: 0,
            max_objects: 0,
            num_frames: 5,
            ..Default::default()
        };
        let s = gen_scene(&cfg, 1).unwrap();
        for f in &s.frames {
            assert!(f.gt_objects.is_empty());
            assert!(f.sensor_tokens.iter().all(|t| t.feature.len() == cfg.d_a));
            assert!(f.sensor_tokens.iter().all(|t| t.is_clutter && t.source_id.is_none()));
        }
    }

    #[test]
    fn constant_velocity_ground_truth_is_exact() {
        let cfg = SimConfig {
            turning_fraction: 0.0,
            companion_prob: 0.0,
            sensor_range: 1e6,
            ..Default::default()
        };
        let s = gen_scene(&cfg, 3).unwrap();
        let id = s.frames[0].gt_objects[0].id;
        let c0 = s.frames[0].gt_objects[0].world_center;
        let c1 = s.frames[1].gt_objects[0].world_center;
        let v = [(c1[0] - c0[0]) / cfg.dt, (c1[1] - c0[1]) / cfg.dt];
        for (k, f) in s.frames.iter().enumerate() {
            let o = f.gt_objects.iter().find(|o| o.id == id).unwrap();
            let t = k as f64 * cfg.dt;
            assert!((o.world_center[0] - (c0[0] + v[0] * t)).abs() < 1e-9);
            assert!((o.world_center[1] - (c0[1] + v[1] * t)).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SimConfig::default();
        assert_eq!(gen_scene(&cfg, 9).unwrap(), gen_scene(&cfg, 9).unwrap());
        assert_ne!(gen_scene(&cfg, 9).unwrap(), gen_scene(&cfg, 10).unwrap());
    }

    #[test]
    fn ids_persist_and_tokens_bounded() {
        let s = gen_scene(&SimConfig::default(), 4).unwrap();
        let first: Vec<u64> = s.frames[0].gt_objects.iter().map(|o| o.id).collect();
        assert!(!first.is_empty());
        for f in &s.frames {
            for o in f.visible_objects() {
                let n = f.sensor_tokens.iter().filter(|t| t.source_id == Some(o.id)).count();
                assert!(n <= 1);
            }
            for o in f.gt_objects.iter().filter(|o| !o.visible) {
                assert!(!f.sensor_tokens.iter().any(|t| t.source_id == Some(o.id)));
            }
        }
    }

    #[test]
    fn law_identity_and_norm() {
        let law = AppearanceLaw::new(&LawConfig::default(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = random_unit(8, &mut rng);
        assert_eq!(law.apply(&base, &Se3::identity()), base);
        let pose = Se3::from_yaw(0.7, Vector3::new(3.0, -1.0, 0.0));
        let f = law.apply(&base, &pose);
        assert!((norm(&f) - norm(&base)).abs() < 1e-12);
        let back = law.invert(&f, &pose);
        assert!(back.iter().zip(&base).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn law_composes_by_summing_angles() {
        let law = AppearanceLaw::new(&LawConfig::default(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = random_unit(10, &mut rng);
        let p1 = Se3::from_yaw(0.4, Vector3::new(1.0, 2.0, 0.0));
        let p2 = Se3::from_yaw(-1.1, Vector3::new(-3.0, 0.5, 0.0));
        let twice = law.apply(&law.apply(&base, &p1), &p2);
        // Independent 2×2 matrix composition with the summed angle.
        let a1 = law.angles(&p1);
        let a2 = law.angles(&p2);
        for i in 0..5 {
            let th = a1[i] + a2[i];
            let m = [[th.cos(), -th.sin()], [th.sin(), th.cos()]];
            let x = m[0][0] * base[2 * i] + m[0][1] * base[2 * i + 1];
            let y = m[1][0] * base[2 * i] + m[1][1] * base[2 * i + 1];
            assert!((twice[2 * i] - x).abs() < 1e-9);
            assert!((twice[2 * i + 1] - y).abs() < 1e-9);
        }
    }

    #[test]
    fn noiseless_tokens_sit_on_centers() {
        let cfg = SimConfig {
            noise: NoiseConfig::noiseless(),
            ..Default::default()
        };
        let s = gen_scene(&cfg, 5).unwrap();
        for f in &s.frames {
            assert_eq!(f.sensor_tokens.len(), f.visible_objects().count());
            for t in &f.sensor_tokens {
                let o = f.gt_objects.iter().find(|o| Some(o.id) == t.source_id).unwrap();
                assert_eq!(t.position, o.bbox.center);
            }
        }
    }

    #[test]
    fn full_miss_rate_drops_all_objects() {
        let cfg = SimConfig {
            noise: NoiseConfig {
                p_miss: 1.0,
                clutter_rate: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let s = gen_scene(&cfg, 5).unwrap();
        assert!(s.frames.iter().all(|f| f.sensor_tokens.is_empty()));
    }

    #[test]
    fn empirical_miss_rate() {
        let cfg = SimConfig {
            min_objects: 1,
            max_objects: 1,
            occlusion_rate: 0.0,
            sensor_range: 1e6,
            num_frames: 1,
            ..Default::default()
        };
        let s = gen_scene(&cfg, 2).unwrap();
        let noise = NoiseConfig {
            clutter_rate: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let trials = 10_000;
        let missed = (0..trials)
            .filter(|_| render_frame(&s, 0, &noise, 30.0, &mut rng).unwrap().is_empty())
            .count();
        let rate = missed as f64 / trials as f64;
        assert!((rate - 0.1).abs() <= 0.01, "{rate}");
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let s = gen_scene(&SimConfig::default(), 12).unwrap();
        let text = s.to_jsonl().unwrap();
        let back = Scene::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_jsonl().unwrap(), text);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SimConfig {
            d_a: 7,
            ..Default::default()
        };
        assert!(matches!(gen_scene(&cfg, 0), Err(Error::InvalidConfig { .. })));
    }
}
