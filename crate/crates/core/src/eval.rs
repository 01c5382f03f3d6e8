//! Scene-parallel evaluation with an order-preserving reduction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{amota_amotp, Labeled, MetricsReport, SceneEval};
use crate::simulator::Scene;
use crate::tensor::ParamStore;
use crate::tracker::{run_sequence, ModelConfig, TrackerConfig, TrackingResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Center-distance match threshold, meters.
    pub dist_thresh: f64,
    pub n_thresholds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dist_thresh: 2.0,
            n_thresholds: 40,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dist_thresh > 0.0) {
            return Err(Error::invalid_config("eval.dist_thresh", "must be positive"));
        }
        if self.n_thresholds < 2 {
            return Err(Error::invalid_config("eval.n_thresholds", "must be at least 2"));
        }
        Ok(())
    }
}

/// Pairs a scene's visible ground truth with tracker output frame by frame.
pub fn scene_eval(scene: &Scene, result: &TrackingResult) -> SceneEval {
    SceneEval {
        gts: scene
            .frames
            .iter()
            .map(|f| {
                f.visible_objects()
                    .map(|o| Labeled { id: o.id, bbox: o.bbox })
                    .collect()
            })
            .collect(),
        preds: result
            .frames
            .iter()
            .map(|f| {
                f.tracks
                    .iter()
                    .map(|t| Labeled { id: t.id, bbox: t.to_box() })
                    .collect()
            })
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub per_scene: Vec<MetricsReport>,
    pub results: Vec<TrackingResult>,
}

/// Scores given tracking results against their scenes.
pub fn score_results(scenes: &[Scene], results: Vec<TrackingResult>, cfg: &EvalConfig) -> Result<EvalOutput> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::EmptySceneSet);
    }
    let evals: Vec<SceneEval> = scenes.iter().zip(&results).map(|(s, r)| scene_eval(s, r)).collect();
    let per_scene = evals
        .par_iter()
        .map(|e| amota_amotp(std::slice::from_ref(e), cfg.dist_thresh, cfg.n_thresholds))
        .collect::<Result<Vec<_>>>()?;
    let report = amota_amotp(&evals, cfg.dist_thresh, cfg.n_thresholds)?;
    Ok(EvalOutput {
        report,
        per_scene,
        results,
    })
}

/// Tracks every scene (in parallel) and scores the results.
pub fn evaluate(
    params: &ParamStore,
    model: &ModelConfig,
    tcfg: &TrackerConfig,
    scenes: &[Scene],
    cfg: &EvalConfig,
) -> Result<EvalOutput> {
    if scenes.is_empty() {
        return Err(Error::EmptySceneSet);
    }
    let results = scenes
        .par_iter()
        .map(|s| run_sequence(params, model, tcfg, s))
        .collect::<Result<Vec<_>>>()?;
    score_results(scenes, results, cfg)
}

/// Ground truth replayed as tracker output.
pub fn evaluate_oracle(scenes: &[Scene], cfg: &EvalConfig) -> Result<EvalOutput> {
    let results = scenes.iter().map(TrackingResult::from_ground_truth).collect();
    score_results(scenes, results, cfg)
}
