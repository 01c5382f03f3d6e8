//! Tracking evaluation: greedy center-distance matching, CLEAR-MOT counts and
//! the recall-averaged AMOTA / AMOTP sweep.
//!
//! Per frame, predictions and ground truth are matched greedily by ascending
//! 2D center distance under a threshold. An identity switch is a ground-truth
//! object matched to a different prediction id than at its previous match.
//! A fragmentation is a resumption of tracking after an interruption. MOTAR
//! at a score cutoff is `max(0, 1 − (IDS + FP + FN − (1 − r)·P) / (r·P))`
//! with `r` the recall achieved at that cutoff, which reduces to
//! `1 − (IDS + FP) / TP`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::BoundingBox3D;
use crate::error::{Error, Result};

/// A box with an identity: a track id for predictions, an object id for
/// ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Labeled {
    pub id: u64,
    pub bbox: BoundingBox3D,
}

/// Predictions and ground truth of one scene, frame by frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneEval {
    pub preds: Vec<Vec<Labeled>>,
    pub gts: Vec<Vec<Labeled>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchPair {
    pub pred_id: u64,
    pub gt_id: u64,
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FrameMatching {
    pub pairs: Vec<MatchPair>,
    /// Ids of unmatched predictions (false positives).
    pub unmatched_preds: Vec<u64>,
    /// Ids of unmatched ground truth (misses).
    pub unmatched_gts: Vec<u64>,
}

/// Greedy one-to-one matching by ascending 2D center distance. Pairs farther
/// than `dist_thresh` are never matched. Ties keep input order.
pub fn match_frame(preds: &[Labeled], gts: &[Labeled], dist_thresh: f64) -> FrameMatching {
    let mut cand = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let d = p.bbox.center_distance_2d(&g.bbox);
            if d <= dist_thresh {
                cand.push((d, i, j));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for (d, i, j) in cand {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            pairs.push(MatchPair {
                pred_id: preds[i].id,
                gt_id: gts[j].id,
                distance: d,
            });
        }
    }
    FrameMatching {
        pairs,
        unmatched_preds: preds
            .iter()
            .zip(&pred_used)
            .filter(|(_, u)| !**u)
            .map(|(p, _)| p.id)
            .collect(),
        unmatched_gts: gts
            .iter()
            .zip(&gt_used)
            .filter(|(_, u)| !**u)
            .map(|(g, _)| g.id)
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClearMot {
    /// Ground-truth instances over all frames.
    pub num_gt: usize,
    /// Ground-truth trajectories.
    pub num_trajectories: usize,
    /// Matched instances, identity switches included.
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ids: usize,
    pub frag: usize,
    pub mt: usize,
    pub ml: usize,
    pub mota: f64,
    /// Mean matched center distance; 0 without matches.
    pub motp: f64,
    pub recall: f64,
}

fn check_frames(scenes: &[SceneEval]) -> Result<()> {
    for (i, s) in scenes.iter().enumerate() {
        if s.preds.len() != s.gts.len() {
            return Err(Error::FrameSetMismatch(format!(
                "scene {i}: {} result frames vs {} ground-truth frames",
                s.preds.len(),
                s.gts.len()
            )));
        }
    }
    Ok(())
}

/// CLEAR-MOT counts over all scenes, using predictions scoring at least
/// `min_score`.
fn accumulate_at(scenes: &[SceneEval], dist_thresh: f64, min_score: f64) -> ClearMot {
    let mut out = ClearMot::default();
    let mut dist_sum = 0.0;
    for s in scenes {
        // Per gt id: (frames present, match flags in order, last matched pred id).
        let mut hist: BTreeMap<u64, (usize, Vec<bool>, Option<u64>)> = BTreeMap::new();
        for (preds, gts) in s.preds.iter().zip(&s.gts) {
            let kept: Vec<Labeled> = preds
                .iter()
                .filter(|p| p.bbox.score >= min_score)
                .copied()
                .collect();
            let m = match_frame(&kept, gts, dist_thresh);
            out.num_gt += gts.len();
            out.fp += m.unmatched_preds.len();
            out.fn_ += m.unmatched_gts.len();
            out.tp += m.pairs.len();
            let matched: BTreeMap<u64, u64> = m.pairs.iter().map(|p| (p.gt_id, p.pred_id)).collect();
            for p in &m.pairs {
                dist_sum += p.distance;
            }
            for g in gts {
                let e = hist.entry(g.id).or_insert((0, Vec::new(), None));
                e.0 += 1;
                match matched.get(&g.id) {
                    Some(&pid) => {
                        if e.2.is_some_and(|last| last != pid) {
                            out.ids += 1;
                        }
                        e.2 = Some(pid);
                        e.1.push(true);
                    }
                    None => e.1.push(false),
                }
            }
        }
        for (present, flags, _) in hist.values() {
            out.num_trajectories += 1;
            let tracked = flags.iter().filter(|f| **f).count();
            let runs = flags
                .iter()
                .enumerate()
                .filter(|(i, f)| **f && (*i == 0 || !flags[i - 1]))
                .count();
            out.frag += runs.saturating_sub(1);
            let ratio = tracked as f64 / *present as f64;
            if ratio >= 0.8 {
                out.mt += 1;
            }
            if ratio < 0.2 {
                out.ml += 1;
            }
        }
    }
    if out.num_gt > 0 {
        let p = out.num_gt as f64;
        out.mota = 1.0 - (out.fn_ + out.fp + out.ids) as f64 / p;
        out.recall = out.tp as f64 / p;
    }
    if out.tp > 0 {
        out.motp = dist_sum / out.tp as f64;
    }
    out
}

/// CLEAR-MOT counts over every prediction regardless of score.
pub fn accumulate_clearmot(scenes: &[SceneEval], dist_thresh: f64) -> Result<ClearMot> {
    check_frames(scenes)?;
    Ok(accumulate_at(scenes, dist_thresh, f64::NEG_INFINITY))
}

/// One recall target of the AMOTA sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub recall_target: f64,
    /// Score cutoff reaching the target; absent when unreachable.
    pub score_threshold: Option<f64>,
    pub recall: f64,
    pub motar: f64,
    pub motp: f64,
    pub mota: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ids: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub amota: f64,
    pub amotp: f64,
    /// The remaining headline metrics are taken at the cutoff with the best
    /// MOTA, or over all predictions if no recall target is reachable.
    pub recall: f64,
    pub mota: f64,
    pub mt: usize,
    pub ml: usize,
    pub frag: usize,
    pub ids: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub num_gt: usize,
    pub num_trajectories: usize,
    pub thresholds: Vec<ThresholdRow>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "amota,amotp,recall,mota,mt,ml,frag,ids,fp,fn,num_gt";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.amota,
            self.amotp,
            self.recall,
            self.mota,
            self.mt,
            self.ml,
            self.frag,
            self.ids,
            self.fp,
            self.fn_,
            self.num_gt
        )
    }
}

/// Sweeps score cutoffs to hit recall targets `1/(n−1), 2/(n−1), …, 1`.
/// The cutoff for target `r` is the score of the `⌈r·P⌉`-th best matched
/// prediction when all predictions are kept; targets beyond the reachable
/// recall contribute MOTAR 0 and MOTP `dist_thresh`.
pub fn amota_amotp(scenes: &[SceneEval], dist_thresh: f64, n_thresholds: usize) -> Result<MetricsReport> {
    check_frames(scenes)?;
    if n_thresholds < 2 {
        return Err(Error::invalid_config("eval.n_thresholds", "must be at least 2"));
    }
    // Scores of matched predictions with every prediction kept.
    let mut tp_scores = Vec::new();
    for s in scenes {
        for (preds, gts) in s.preds.iter().zip(&s.gts) {
            let m = match_frame(preds, gts, dist_thresh);
            let by_id: BTreeMap<u64, f64> = preds.iter().map(|p| (p.id, p.bbox.score)).collect();
            tp_scores.extend(m.pairs.iter().map(|p| by_id[&p.pred_id]));
        }
    }
    tp_scores.sort_by(|a, b| b.total_cmp(a));
    let all = accumulate_at(scenes, dist_thresh, f64::NEG_INFINITY);
    let p = all.num_gt;

    let mut rows = Vec::with_capacity(n_thresholds - 1);
    let mut best: Option<ClearMot> = None;
    for i in 1..n_thresholds {
        let target = i as f64 / (n_thresholds - 1) as f64;
        let need = ((target * p as f64) - 1e-9).ceil().max(1.0) as usize;
        if p == 0 || need > tp_scores.len() {
            rows.push(ThresholdRow {
                recall_target: target,
                score_threshold: None,
                recall: 0.0,
                motar: 0.0,
                motp: dist_thresh,
                mota: 0.0,
                tp: 0,
                fp: 0,
                fn_: p,
                ids: 0,
            });
            continue;
        }
        let thr = tp_scores[need - 1];
        let c = accumulate_at(scenes, dist_thresh, thr);
        let motar = if c.tp > 0 {
            (1.0 - (c.ids + c.fp) as f64 / c.tp as f64).max(0.0)
        } else {
            0.0
        };
        rows.push(ThresholdRow {
            recall_target: target,
            score_threshold: Some(thr),
            recall: c.recall,
            motar,
            motp: if c.tp > 0 { c.motp } else { dist_thresh },
            mota: c.mota,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            ids: c.ids,
        });
        if best.is_none_or(|b| c.mota > b.mota) {
            best = Some(c);
        }
    }
    let n = rows.len() as f64;
    let head = best.unwrap_or(all);
    Ok(MetricsReport {
        amota: rows.iter().map(|r| r.motar).sum::<f64>() / n,
        amotp: rows.iter().map(|r| r.motp).sum::<f64>() / n,
        recall: head.recall,
        mota: head.mota,
        mt: head.mt,
        ml: head.ml,
        frag: head.frag,
        ids: head.ids,
        fp: head.fp,
        fn_: head.fn_,
        num_gt: all.num_gt,
        num_trajectories: all.num_trajectories,
        thresholds: rows,
    })
}
