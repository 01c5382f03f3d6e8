//! Training loop: random short windows, AdamW with cosine annealing, and an
//! optional latent-motion pretraining stage on recorded track latents.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::rng_for;
use crate::lmm::{pretrain_lmm, LatentSample, PretrainConfig, PretrainReport};
use crate::simulator::Scene;
use crate::tensor::{AdamW, AdamWConfig, CosineSchedule, ParamStore, Tensor};
use crate::tracker::{
    motion_transform, predict_step, track_frame, train_window, window_rng, ModelConfig,
    ObjectQuery, QueryState, TrackerConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Windows drawn per epoch; 0 means one per training scene.
    pub windows_per_epoch: usize,
    pub window_len: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub pretrain_lmm: bool,
    pub pretrain: PretrainConfig,
    /// Cap on recorded latent pairs used for pretraining.
    pub pretrain_max_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            windows_per_epoch: 0,
            window_len: 3,
            batch_size: 4,
            lr: 1e-3,
            min_lr: 1e-5,
            warmup_steps: 20,
            weight_decay: 0.01,
            grad_clip: 1.0,
            pretrain_lmm: false,
            pretrain: PretrainConfig {
                steps: 600,
                ..PretrainConfig::default()
            },
            pretrain_max_samples: 20_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 {
            return Err(Error::invalid_config("train.window_len", "must be at least 2"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid_config("train.batch_size", "must be positive"));
        }
        if !(self.lr > 0.0) || self.min_lr < 0.0 {
            return Err(Error::invalid_config("train.lr", "must be positive"));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::invalid_config("train.grad_clip", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs: Vec<EpochLog>,
    pub pretrain: Option<PretrainReport>,
}

fn grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn window_starts(scenes: &[Scene], len: usize) -> Vec<(usize, usize)> {
    scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            let n = s.frames.len();
            let last = n.saturating_sub(len);
            (0..=last).map(move |k| (i, k))
        })
        .collect()
}

/// Trains `params` in place. `progress` receives each finished epoch.
pub fn train_model(
    params: &mut ParamStore,
    model: &ModelConfig,
    tcfg: &TrackerConfig,
    train: &TrainConfig,
    scenes: &[Scene],
    seed: u64,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    train.validate()?;
    if scenes.is_empty() {
        return Err(Error::EmptySceneSet);
    }
    let pretrain = if train.pretrain_lmm && model.use_lmm {
        let data = collect_latent_pairs(params, model, tcfg, scenes, train.pretrain_max_samples)?;
        if data.is_empty() {
            None
        } else {
            let mut rng = rng_for(seed, 20);
            Some(pretrain_lmm(&model.lmm, params, &data, &train.pretrain, &mut rng)?)
        }
    } else {
        None
    };

    let per_epoch = if train.windows_per_epoch == 0 {
        scenes.len()
    } else {
        train.windows_per_epoch
    };
    let steps_per_epoch = per_epoch.div_ceil(train.batch_size);
    let total_steps = steps_per_epoch * train.epochs;
    let sched = CosineSchedule {
        base_lr: train.lr,
        min_lr: train.min_lr,
        total_steps,
        warmup_steps: train.warmup_steps.min(total_steps / 4),
    };
    let mut opt = AdamW::new(AdamWConfig {
        lr: train.lr,
        weight_decay: train.weight_decay,
        ..Default::default()
    });
    let all_windows = window_starts(scenes, train.window_len);
    let mut rng = rng_for(seed, 21);
    let mut epochs = Vec::with_capacity(train.epochs);
    let mut step = 0usize;
    for epoch in 0..train.epochs {
        let mut order: Vec<(usize, usize)> = (0..per_epoch)
            .map(|_| all_windows[rng.random_range(0..all_windows.len())])
            .collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = sched.lr(step);
        for batch in order.chunks(train.batch_size) {
            lr = sched.lr(step);
            let outs: Vec<Result<_>> = batch
                .par_iter()
                .enumerate()
                .map(|(b, &(si, start))| {
                    let s = &scenes[si];
                    let end = (start + train.window_len).min(s.frames.len());
                    let mut wr = window_rng(seed, step as u64, b as u64);
                    train_window(params, model, tcfg, s, start..end, true, &mut wr)
                })
                .collect();
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            for out in outs {
                let out = out.map_err(|e| match e {
                    Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss { step, detail },
                    e => e,
                })?;
                loss_sum += out.loss;
                for (k, g) in out.grads {
                    match grads.get_mut(&k) {
                        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(k, g);
                        }
                    }
                }
            }
            let mut scale = 1.0 / batch.len() as f64;
            if train.grad_clip > 0.0 {
                let norm = grad_norm(&grads) * scale;
                if norm > train.grad_clip {
                    scale *= train.grad_clip / norm;
                }
            }
            grads.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= scale));
            opt.step(params, &grads, lr);
            step += 1;
        }
        let log = EpochLog {
            epoch,
            mean_loss: loss_sum / per_epoch as f64,
            lr,
        };
        progress(&log);
        epochs.push(log);
    }
    Ok(TrainReport {
        steps: step,
        epochs,
        pretrain,
    })
}

/// Records latent pairs from tracking rollouts: a confirmed track's latent
/// at the end of one frame, the motion it undergoes, and its refined latent
/// after the next frame. Rollouts carry latents unchanged, so the pairs
/// describe what the latent motion model should learn to predict.
pub fn collect_latent_pairs(
    params: &ParamStore,
    model: &ModelConfig,
    tcfg: &TrackerConfig,
    scenes: &[Scene],
    max_samples: usize,
) -> Result<Vec<LatentSample>> {
    let plain = ModelConfig {
        use_lmm: false,
        ..*model
    };
    let per_scene: Vec<Result<Vec<LatentSample>>> = scenes
        .par_iter()
        .map(|scene| {
            let mut out = Vec::new();
            let mut next_id = 0;
            let mut tracks: Vec<ObjectQuery> = Vec::new();
            for (k, frame) in scene.frames.iter().enumerate() {
                let mut before = BTreeMap::new();
                if k > 0 {
                    let ego = scene.ego_motion(k - 1);
                    for t in tracks.iter().filter(|t| t.state == QueryState::Active) {
                        if let Some(id) = t.track_id {
                            before.insert(id, (t.q.clone(), motion_transform(t.velocity, scene.dt())?, ego));
                        }
                    }
                    tracks = predict_step(&tracks, &ego, scene.dt(), &plain, params)?;
                }
                tracks = track_frame(params, &plain, tcfg, tracks, frame, &mut next_id)?;
                for t in tracks.iter().filter(|t| t.state == QueryState::Active) {
                    if let Some((q, t_obj, t_ego)) = t.track_id.and_then(|id| before.remove(&id)) {
                        out.push(LatentSample {
                            q_t: q,
                            t_obj,
                            t_ego,
                            q_next: t.q.clone(),
                        });
                    }
                }
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for s in per_scene {
        all.extend(s?);
        if all.len() >= max_samples {
            all.truncate(max_samples);
            break;
        }
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::lmm::LmmConfig;
    use crate::simulator::{gen_scene, SimConfig};
    use crate::tracker::init_model;

    fn tiny() -> (ModelConfig, SimConfig) {
        let decoder = DecoderConfig {
            num_layers: 1,
            d_l: 8,
            h: 2,
            num_det_queries: 6,
            ffn_width: 16,
            ..Default::default()
        };
        (
            ModelConfig {
                decoder,
                lmm: LmmConfig::new(8, 2),
                use_lmm: true,
                use_track_embedding: true,
            },
            SimConfig {
                d_a: 8,
                num_frames: 6,
                min_objects: 2,
                max_objects: 3,
                ..Default::default()
            },
        )
    }

    #[test]
    fn zero_epochs_leaves_params() {
        let (m, s) = tiny();
        let scenes = vec![gen_scene(&s, 1).unwrap()];
        let mut p = init_model(&m, 8, 0).unwrap();
        let before = p.clone();
        let r = train_model(&mut p, &m, &TrackerConfig::default(), &TrainConfig { epochs: 0, ..Default::default() }, &scenes, 0, |_| {}).unwrap();
        assert!(r.epochs.is_empty());
        assert_eq!(p, before);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (m, s) = tiny();
        let scenes = vec![gen_scene(&s, 1).unwrap()];
        let cfg = TrainConfig {
            epochs: 40,
            windows_per_epoch: 4,
            batch_size: 2,
            lr: 3e-3,
            ..Default::default()
        };
        let run = || {
            let mut p = init_model(&m, 8, 0).unwrap();
            let r = train_model(&mut p, &m, &TrackerConfig::default(), &cfg, &scenes, 5, |_| {}).unwrap();
            (p, r)
        };
        let (p1, r1) = run();
        let (p2, _) = run();
        assert_eq!(p1, p2);
        let first = r1.epochs[0].mean_loss;
        let last = r1.epochs.last().unwrap().mean_loss;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }
}
