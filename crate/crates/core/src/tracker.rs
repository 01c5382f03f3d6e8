//! Auto-regressive tracking loop.
//!
//! Per frame: propagate carried queries (reference point by the motion
//! model, latent by the latent motion model), inject the track embedding,
//! append fresh detection queries, decode, then run the lifecycle. Training
//! unrolls short windows with sticky ground-truth assignment for track
//! queries and Hungarian matching for detection queries.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoundingBox3D;
use crate::decoder::{
    self, apply_track_embedding_graph, cross_geometry, decode_box, decode_heads_graph, decoder_layer,
    detection_refs, embed_tokens, encode_box, query_pos, sigmoid, DecoderConfig,
    BOX_DIM,
};
use crate::error::{Error, Result};
use crate::geometry::{object_motion_transform, update_reference, ObjectDynamics, Se3};
use crate::hashing::rng_for;
use crate::lmm::{self, propagate_latent_graph, LmmConfig};
use crate::simulator::{Frame, GtObject, Scene, SensorToken};
use crate::tensor::{Bound, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    /// Its `d_l` always follows the decoder's.
    pub lmm: LmmConfig,
    /// Without it the latent is carried over unchanged.
    pub use_lmm: bool,
    pub use_track_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let decoder = DecoderConfig::default();
        Self {
            decoder,
            lmm: LmmConfig::new(decoder.d_l, decoder.h),
            use_lmm: true,
            use_track_embedding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        if self.lmm.d_l != self.decoder.d_l {
            return Err(Error::invalid_config(
                "model.lmm.d_l",
                format!("must equal model.decoder.d_l = {}", self.decoder.d_l),
            ));
        }
        if self.use_lmm {
            self.lmm.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerConfig {
    pub spawn_thresh: f64,
    pub keep_thresh: f64,
    pub max_inactive: u32,
    pub lambda_cls: f64,
    pub lambda_box: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub p_drop: f64,
    pub p_fp: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            spawn_thresh: 0.4,
            keep_thresh: 0.35,
            max_inactive: 5,
            lambda_cls: 2.0,
            lambda_box: 0.25,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            p_drop: 0.1,
            p_fp: 0.3,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        for (f, p) in [
            ("spawn_thresh", self.spawn_thresh),
            ("keep_thresh", self.keep_thresh),
            ("p_drop", self.p_drop),
            ("p_fp", self.p_fp),
            ("focal_alpha", self.focal_alpha),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid_config(format!("tracker.{f}"), "must lie in [0, 1]"));
            }
        }
        if self.focal_gamma < 0.0 || self.lambda_cls < 0.0 || self.lambda_box < 0.0 {
            return Err(Error::invalid_config("tracker", "loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Fresh parameters. The decoder and the latent motion model draw from
/// separate streams so variants with and without the motion model share
/// their decoder initialization.
pub fn init_model(cfg: &ModelConfig, d_a: usize, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    decoder::init_params(&cfg.decoder, d_a, &mut store, &mut rng_for(seed, 10))?;
    if cfg.use_lmm {
        lmm::init_params(&cfg.lmm, &mut store, &mut rng_for(seed, 11))?;
    }
    Ok(store)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryState {
    Newborn,
    Active,
    /// Frames since the track was last confirmed.
    Inactive(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectQuery {
    pub q: Vec<f64>,
    pub reference: [f64; 3],
    /// Last confirmed velocity in the current ego frame.
    pub velocity: [f64; 2],
    pub track_id: Option<u64>,
    pub state: QueryState,
    pub score: f64,
    pub bbox: Option<BoundingBox3D>,
}

/// Constant-velocity object motion over one interval.
pub fn motion_transform(velocity: [f64; 2], dt: f64) -> Result<Se3> {
    Ok(object_motion_transform(&ObjectDynamics::constant_velocity(velocity, dt)?))
}

fn rotate_velocity(ego: &Se3, v: [f64; 2]) -> [f64; 2] {
    let r = ego.rotation() * Vector3::new(v[0], v[1], 0.0);
    [r.x, r.y]
}

/// Moves references by the constant-velocity model plus ego motion and
/// latents by the latent motion model with the same transforms. Returns
/// the new latents, references and velocities.
pub fn propagate_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    q: Var,
    refs: &[[f64; 3]],
    vels: &[[f64; 2]],
    ego: &Se3,
    dt: f64,
) -> Result<(Var, Vec<[f64; 3]>, Vec<[f64; 2]>)> {
    let mut t_obj = Vec::with_capacity(refs.len());
    let mut new_refs = Vec::with_capacity(refs.len());
    let mut new_vels = Vec::with_capacity(refs.len());
    for (r, v) in refs.iter().zip(vels) {
        let to = motion_transform(*v, dt)?;
        let moved = update_reference(&Vector3::from(*r), &to, ego);
        new_refs.push([moved.x, moved.y, moved.z]);
        new_vels.push(rotate_velocity(ego, *v));
        t_obj.push(to);
    }
    let q = if cfg.use_lmm {
        let t_ego = vec![*ego; refs.len()];
        propagate_latent_graph(g, p, &cfg.lmm, q, &t_obj, &t_ego)?
    } else {
        q
    };
    Ok((q, new_refs, new_vels))
}

/// Carries tracks into the next ego frame. Inactive tracks move with their
/// frozen velocity like any other.
pub fn predict_step(
    tracks: &[ObjectQuery],
    ego_motion: &Se3,
    dt: f64,
    cfg: &ModelConfig,
    params: &ParamStore,
) -> Result<Vec<ObjectQuery>> {
    if tracks.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let rows: Vec<Vec<f64>> = tracks.iter().map(|t| t.q.clone()).collect();
    let q = g.constant(Tensor::from_rows(&rows)?);
    let refs: Vec<[f64; 3]> = tracks.iter().map(|t| t.reference).collect();
    let vels: Vec<[f64; 2]> = tracks.iter().map(|t| t.velocity).collect();
    let (q, refs, vels) = propagate_graph(&mut g, &p, cfg, q, &refs, &vels, ego_motion, dt)?;
    let qv = g.value(q);
    Ok(tracks
        .iter()
        .enumerate()
        .map(|(i, t)| ObjectQuery {
            q: qv.row_slice(i).to_vec(),
            reference: refs[i],
            velocity: vels[i],
            ..t.clone()
        })
        .collect())
}

/// Decoder outputs for one frame; rows are track queries then detection
/// queries.
#[derive(Debug, Clone)]
pub struct FrameOutput {
    /// Class logits and raw box outputs after each decoder layer.
    pub layers: Vec<(Var, Var)>,
    /// Refined latents after the last layer.
    pub latents: Var,
    pub refs: Vec<[f64; 3]>,
    pub num_tracks: usize,
}

/// Appends fresh detection queries to `tracks`, runs every decoder layer
/// and the heads after each.
pub fn update_step_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &DecoderConfig,
    tracks: Option<Var>,
    track_refs: &[[f64; 3]],
    tokens: &[SensorToken],
) -> Result<FrameOutput> {
    let positions: Vec<[f64; 3]> = tokens.iter().map(|t| t.position).collect();
    let features: Vec<Vec<f64>> = tokens.iter().map(|t| t.feature.clone()).collect();
    let det = p.get("dec.det.q")?;
    let det_refs = detection_refs(cfg, &positions);
    let num_tracks = track_refs.len();
    let queries = match tracks {
        Some(t) => {
            if g.value(t).rows() != num_tracks {
                return Err(Error::shape("update_step", g.shape(t), &[num_tracks]));
            }
            g.concat(&[t, det], 0)?
        }
        None => det,
    };
    let mut refs = track_refs.to_vec();
    refs.extend(det_refs);
    let pos = query_pos(g, p, &refs)?;
    let tok = embed_tokens(g, p, &features, &positions)?;
    let geo = match tok {
        Some(_) => Some(cross_geometry(g, &refs, &positions, cfg.locality_sigma)?),
        None => None,
    };
    let mut x = queries;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        x = decoder_layer(g, p, cfg, l, x, pos, tok.as_ref(), geo.as_ref())?;
        layers.push(decode_heads_graph(g, p, x)?);
    }
    Ok(FrameOutput {
        layers,
        latents: x,
        refs,
        num_tracks,
    })
}

/// Final-layer boxes, one per query.
pub fn decode_final(g: &Graph, out: &FrameOutput) -> Vec<BoundingBox3D> {
    let (cls, bx) = *out.layers.last().expect("at least one layer");
    let (cls, bx) = (g.value(cls), g.value(bx));
    out.refs
        .iter()
        .enumerate()
        .map(|(i, r)| decode_box(bx.row_slice(i), *r, cls.row_slice(i)))
        .collect()
}

/// Lifecycle transition for every query given its score. Newborns at or
/// above `spawn_thresh` get the next id; active tracks below `keep_thresh`
/// turn inactive; inactive tracks at or above `keep_thresh` come back, and
/// are dropped once inactive longer than `max_inactive` frames.
pub fn lifecycle(
    queries: Vec<ObjectQuery>,
    cfg: &TrackerConfig,
    next_id: &mut u64,
) -> Vec<ObjectQuery> {
    queries
        .into_iter()
        .filter_map(|mut q| {
            let s = q.score;
            q.state = match q.state {
                QueryState::Newborn => {
                    if s < cfg.spawn_thresh {
                        return None;
                    }
                    q.track_id = Some(*next_id);
                    *next_id += 1;
                    QueryState::Active
                }
                QueryState::Active if s >= cfg.keep_thresh => QueryState::Active,
                QueryState::Active => QueryState::Inactive(1),
                QueryState::Inactive(_) if s >= cfg.keep_thresh => QueryState::Active,
                QueryState::Inactive(age) => {
                    if age + 1 > cfg.max_inactive {
                        return None;
                    }
                    QueryState::Inactive(age + 1)
                }
            };
            Some(q)
        })
        .collect()
}

/// Minimum-cost assignment of rows to distinct columns. With more rows than
/// columns the surplus rows stay unassigned.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let cols = hungarian(&t);
        let mut out = vec![None; n];
        for (j, i) in cols.into_iter().enumerate() {
            if let Some(i) = i {
                out[i] = Some(j);
            }
        }
        return out;
    }
    // Shortest augmenting paths with potentials, 1-based with a dummy column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Focal matching cost of predicting probability `p` for a positive.
fn focal_cost(p: f64, alpha: f64, gamma: f64) -> f64 {
    let pos = alpha * (1.0 - p).powf(gamma) * -(p + 1e-8).ln();
    let neg = (1.0 - alpha) * p.powf(gamma) * -(1.0 - p + 1e-8).ln();
    pos - neg
}

/// Training-time assignment of queries to ground-truth objects (indices
/// into `gts`). Track query `i < sticky.len()` keeps its sticky object when
/// that object is in `gts`; the remaining objects go to detection queries by
/// Hungarian matching on `λ_cls·focal + λ_box·L1`.
pub fn train_match(
    cls: &Tensor,
    boxes: &Tensor,
    refs: &[[f64; 3]],
    sticky: &[Option<u64>],
    gts: &[&GtObject],
    cfg: &TrackerConfig,
) -> Vec<Option<usize>> {
    let n = cls.rows();
    let mut assign = vec![None; n];
    let mut taken = BTreeSet::new();
    for (i, s) in sticky.iter().enumerate() {
        if let Some(id) = s {
            if let Some(j) = gts.iter().position(|g| g.id == *id) {
                assign[i] = Some(j);
                taken.insert(j);
            }
        }
    }
    let free: Vec<usize> = (0..gts.len()).filter(|j| !taken.contains(j)).collect();
    let det: Vec<usize> = (sticky.len()..n).collect();
    if free.is_empty() || det.is_empty() {
        return assign;
    }
    let cost: Vec<Vec<f64>> = free
        .iter()
        .map(|&j| {
            let gt = &gts[j].bbox;
            det.iter()
                .map(|&i| {
                    let p = sigmoid(cls.get(i, gt.class_id));
                    let target = encode_box(gt, refs[i]);
                    let l1: f64 = target
                        .iter()
                        .zip(boxes.row_slice(i))
                        .map(|(t, b)| (t - b).abs())
                        .sum();
                    cfg.lambda_cls * focal_cost(p, cfg.focal_alpha, cfg.focal_gamma)
                        + cfg.lambda_box * l1
                })
                .collect()
        })
        .collect();
    for (r, c) in hungarian(&cost).into_iter().enumerate() {
        if let Some(c) = c {
            assign[det[c]] = Some(free[r]);
        }
    }
    assign
}

/// Focal classification loss plus `λ_box`-weighted L1 box loss, summed over
/// decoder layers and divided by the number of matched objects.
pub fn frame_loss(
    g: &mut Graph,
    out: &FrameOutput,
    assign: &[Option<usize>],
    gts: &[&GtObject],
    num_classes: usize,
    cfg: &TrackerConfig,
) -> Result<Var> {
    let n = assign.len();
    let mut targets = Tensor::zeros(n, num_classes);
    let mut idx = Vec::new();
    let mut box_t = Vec::new();
    for (i, a) in assign.iter().enumerate() {
        if let Some(j) = a {
            let b = &gts[*j].bbox;
            targets.data_mut()[i * num_classes + b.class_id] = 1.0;
            idx.push(i);
            box_t.extend_from_slice(&encode_box(b, out.refs[i]));
        }
    }
    let norm = 1.0 / idx.len().max(1) as f64;
    let box_t = (!idx.is_empty()).then(|| Tensor::new(vec![idx.len(), BOX_DIM], box_t)).transpose()?;
    let mut total: Option<Var> = None;
    for &(cls, bx) in &out.layers {
        let f = g.sigmoid_focal(cls, &targets, cfg.focal_alpha, cfg.focal_gamma)?;
        let mut l = g.sum(f);
        if let Some(bt) = &box_t {
            let pred = g.gather_rows(bx, &idx)?;
            let t = g.constant(bt.clone());
            let d = g.sub(pred, t)?;
            let a = g.abs(d);
            let s = g.sum(a);
            let s = g.scale(s, cfg.lambda_box);
            l = g.add(l, s)?;
        }
        let l = g.scale(l, norm);
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// Drops each track with `p_drop` and, with `p_fp`, appends the false
/// positive candidate.
pub fn augment<T, R: Rng + ?Sized>(
    tracks: Vec<T>,
    fp_candidate: Option<T>,
    p_drop: f64,
    p_fp: f64,
    rng: &mut R,
) -> Vec<T> {
    let mut out: Vec<T> = tracks.into_iter().filter(|_| !rng.random_bool(p_drop)).collect();
    if let Some(c) = fp_candidate {
        if rng.random_bool(p_fp) {
            out.push(c);
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct TrainTrack {
    /// Row in the previous frame's latents.
    row: usize,
    sticky: Option<u64>,
    reference: [f64; 3],
    velocity: [f64; 2],
}

/// Loss and gradients of one unrolled training window.
#[derive(Debug, Clone)]
pub struct WindowOutput {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
    /// Matched ground-truth objects per frame.
    pub matched: Vec<usize>,
}

/// Unrolls `frames` of `scene` in training mode. Gradients flow through the
/// carried latents across frames; references and velocities are detached.
pub fn train_window<R: Rng + ?Sized>(
    params: &ParamStore,
    cfg: &ModelConfig,
    tcfg: &TrackerConfig,
    scene: &Scene,
    frames: std::ops::Range<usize>,
    augment_tracks: bool,
    rng: &mut R,
) -> Result<WindowOutput> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let (loss, matched) = window_loss(&mut g, &p, cfg, tcfg, scene, frames.clone(), augment_tracks, rng)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: 0,
            detail: format!("window {:?}", frames),
        });
    }
    let grads = p.grads(&g.backward(loss)?);
    Ok(WindowOutput {
        loss: value,
        grads,
        matched,
    })
}

/// The window loss as a graph node, with matched counts per frame.
#[allow(clippy::too_many_arguments)]
pub fn window_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    tcfg: &TrackerConfig,
    scene: &Scene,
    frames: std::ops::Range<usize>,
    augment_tracks: bool,
    rng: &mut R,
) -> Result<(Var, Vec<usize>)> {
    if frames.is_empty() || frames.end > scene.frames.len() {
        return Err(Error::EmptyScene);
    }
    let mut tracks: Vec<TrainTrack> = Vec::new();
    let mut prev_latents: Option<Var> = None;
    let mut total: Option<Var> = None;
    let mut matched = Vec::new();
    for k in frames.clone() {
        let frame = &scene.frames[k];
        let (tq, trefs) = match (tracks.is_empty(), prev_latents) {
            (false, Some(lat)) => {
                let rows: Vec<usize> = tracks.iter().map(|t| t.row).collect();
                let q = g.gather_rows(lat, &rows)?;
                let refs: Vec<[f64; 3]> = tracks.iter().map(|t| t.reference).collect();
                let vels: Vec<[f64; 2]> = tracks.iter().map(|t| t.velocity).collect();
                let ego = scene.ego_motion(k - 1);
                let (q, refs, vels) = propagate_graph(g, p, cfg, q, &refs, &vels, &ego, scene.dt())?;
                for (t, (r, v)) in tracks.iter_mut().zip(refs.iter().zip(vels)) {
                    t.reference = *r;
                    t.velocity = v;
                }
                let q = if cfg.use_track_embedding {
                    apply_track_embedding_graph(g, p, q)?
                } else {
                    q
                };
                (Some(q), refs)
            }
            _ => (None, Vec::new()),
        };
        let out = update_step_graph(g, p, &cfg.decoder, tq, &trefs, &frame.sensor_tokens)?;
        let gts: Vec<&GtObject> = frame.visible_objects().collect();
        let sticky: Vec<Option<u64>> = tracks.iter().map(|t| t.sticky).collect();
        let (cls, bx) = *out.layers.last().expect("at least one layer");
        let assign = train_match(g.value(cls), g.value(bx), &out.refs, &sticky, &gts, tcfg);
        matched.push(assign.iter().filter(|a| a.is_some()).count());
        let l = frame_loss(g, &out, &assign, &gts, cfg.decoder.num_classes, tcfg)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });

        // Carry matched queries, and tracks whose object is only occluded.
        let boxes = decode_final(g, &out);
        let present: BTreeSet<u64> = frame.gt_objects.iter().map(|o| o.id).collect();
        let mut next = Vec::new();
        for (i, a) in assign.iter().enumerate() {
            let sticky = match a {
                Some(j) => Some(gts[*j].id),
                None if i < tracks.len() => tracks[i].sticky.filter(|id| present.contains(id)),
                None => None,
            };
            let Some(id) = sticky else { continue };
            let (reference, velocity) = if a.is_some() {
                (boxes[i].center, boxes[i].velocity)
            } else {
                (tracks[i].reference, tracks[i].velocity)
            };
            next.push(TrainTrack {
                row: i,
                sticky: Some(id),
                reference,
                velocity,
            });
        }
        let fp = (out.num_tracks..assign.len())
            .filter(|&i| assign[i].is_none())
            .max_by(|&a, &b| boxes[a].score.total_cmp(&boxes[b].score))
            .map(|i| TrainTrack {
                row: i,
                sticky: None,
                reference: boxes[i].center,
                velocity: boxes[i].velocity,
            });
        tracks = if augment_tracks {
            augment(next, fp, tcfg.p_drop, tcfg.p_fp, rng)
        } else {
            next
        };
        prev_latents = Some(out.latents);
    }
    Ok((total.expect("non-empty window"), matched))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackOut {
    pub id: u64,
    #[serde(rename = "box")]
    pub bbox: [f64; 9],
    pub score: f64,
    pub class: usize,
}

impl TrackOut {
    pub fn to_box(&self) -> BoundingBox3D {
        BoundingBox3D::from_array(self.bbox, self.score, self.class)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame_idx: usize,
    pub tracks: Vec<TrackOut>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackingResult {
    pub frames: Vec<FrameResult>,
}

impl TrackingResult {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for f in &self.frames {
            serde_json::to_writer(&mut w, f)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut frames = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                frames.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { frames })
    }

    /// Ground truth of `scene` replayed as tracker output.
    pub fn from_ground_truth(scene: &Scene) -> Self {
        Self {
            frames: scene
                .frames
                .iter()
                .map(|f| FrameResult {
                    frame_idx: f.index,
                    tracks: f
                        .visible_objects()
                        .map(|o| TrackOut {
                            id: o.id,
                            bbox: o.bbox.to_array(),
                            score: 1.0,
                            class: o.bbox.class_id,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

fn frame_queries_to_out(frame: &Frame, tracks: &[ObjectQuery]) -> FrameResult {
    FrameResult {
        frame_idx: frame.index,
        tracks: tracks
            .iter()
            .filter(|t| t.state == QueryState::Active)
            .filter_map(|t| {
                let b = t.bbox?;
                Some(TrackOut {
                    id: t.track_id?,
                    bbox: b.to_array(),
                    score: t.score,
                    class: b.class_id,
                })
            })
            .collect(),
    }
}

/// One tracking step on `frame` given tracks already carried into it.
pub fn track_frame(
    params: &ParamStore,
    cfg: &ModelConfig,
    tcfg: &TrackerConfig,
    tracks: Vec<ObjectQuery>,
    frame: &Frame,
    next_id: &mut u64,
) -> Result<Vec<ObjectQuery>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let tq = if tracks.is_empty() {
        None
    } else {
        let rows: Vec<Vec<f64>> = tracks.iter().map(|t| t.q.clone()).collect();
        let q = g.constant(Tensor::from_rows(&rows)?);
        Some(if cfg.use_track_embedding {
            apply_track_embedding_graph(&mut g, &p, q)?
        } else {
            q
        })
    };
    let trefs: Vec<[f64; 3]> = tracks.iter().map(|t| t.reference).collect();
    let out = update_step_graph(&mut g, &p, &cfg.decoder, tq, &trefs, &frame.sensor_tokens)?;
    let boxes = decode_final(&g, &out);
    let lat = g.value(out.latents);
    let mut queries = tracks;
    let det_refs = &out.refs[out.num_tracks..];
    queries.extend(det_refs.iter().map(|r| ObjectQuery {
        q: Vec::new(),
        reference: *r,
        velocity: [0.0, 0.0],
        track_id: None,
        state: QueryState::Newborn,
        score: 0.0,
        bbox: None,
    }));
    for (i, q) in queries.iter_mut().enumerate() {
        let b = boxes[i];
        q.q = lat.row_slice(i).to_vec();
        q.score = b.score;
        let confirmed = match q.state {
            QueryState::Newborn => b.score >= tcfg.spawn_thresh,
            _ => b.score >= tcfg.keep_thresh,
        };
        if confirmed {
            q.reference = b.center;
            q.velocity = b.velocity;
            q.bbox = Some(b);
        }
    }
    Ok(lifecycle(queries, tcfg, next_id))
}

/// Tracks a whole scene in evaluation mode.
pub fn run_sequence(
    params: &ParamStore,
    cfg: &ModelConfig,
    tcfg: &TrackerConfig,
    scene: &Scene,
) -> Result<TrackingResult> {
    if scene.frames.is_empty() {
        return Err(Error::EmptyScene);
    }
    let mut next_id = 0;
    let mut tracks: Vec<ObjectQuery> = Vec::new();
    let mut result = TrackingResult::default();
    for (k, frame) in scene.frames.iter().enumerate() {
        if k > 0 {
            tracks = predict_step(&tracks, &scene.ego_motion(k - 1), scene.dt(), cfg, params)?;
        }
        tracks = track_frame(params, cfg, tcfg, tracks, frame, &mut next_id)?;
        result.frames.push(frame_queries_to_out(frame, &tracks));
    }
    Ok(result)
}

/// Seeded generator for training window `index` of step `step`.
pub fn window_rng(seed: u64, step: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index + 100);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{gen_scene, SimConfig};

    fn tiny() -> ModelConfig {
        let decoder = DecoderConfig {
            num_layers: 2,
            d_l: 8,
            h: 2,
            num_det_queries: 4,
            ffn_width: 8,
            ..Default::default()
        };
        ModelConfig {
            decoder,
            lmm: LmmConfig::new(8, 2),
            use_lmm: true,
            use_track_embedding: true,
        }
    }

    fn query(state: QueryState, score: f64, id: Option<u64>) -> ObjectQuery {
        ObjectQuery {
            q: vec![0.0; 8],
            reference: [0.0; 3],
            velocity: [0.0; 2],
            track_id: id,
            state,
            score,
            bbox: None,
        }
    }

    #[test]
    fn newborn_above_spawn_gets_id() {
        let mut next = 7;
        let out = lifecycle(vec![query(QueryState::Newborn, 0.9, None)], &TrackerConfig::default(), &mut next);
        assert_eq!(out[0].track_id, Some(7));
        assert_eq!(out[0].state, QueryState::Active);
        assert_eq!(next, 8);
    }

    #[test]
    fn zero_scores_consume_no_ids() {
        let mut next = 0;
        let out = lifecycle(vec![query(QueryState::Newborn, 0.0, None); 5], &TrackerConfig::default(), &mut next);
        assert!(out.is_empty());
        assert_eq!(next, 0);
    }

    #[test]
    fn inactive_removed_after_six_unseen_frames() {
        let cfg = TrackerConfig::default();
        let mut next = 1;
        let mut qs = vec![query(QueryState::Active, 0.9, Some(0))];
        for k in 1..=6 {
            qs.iter_mut().for_each(|q| q.score = 0.0);
            qs = lifecycle(qs, &cfg, &mut next);
            if k <= 5 {
                assert_eq!(qs[0].state, QueryState::Inactive(k));
            }
        }
        assert!(qs.is_empty());
    }

    #[test]
    fn hungarian_diagonal() {
        let a = hungarian(&[vec![1.0, 10.0], vec![10.0, 1.0]]);
        assert_eq!(a, vec![Some(0), Some(1)]);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        fn perms(k: usize, m: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for j in 0..m {
                if !used[j] {
                    used[j] = true;
                    cur.push(j);
                    perms(k, m, used, cur, out);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        for (n, m) in [(3, 3), (2, 5), (4, 4), (5, 2)] {
            for _ in 0..30 {
                let c: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random::<f64>()).collect()).collect();
                let a = hungarian(&c);
                let got: f64 = a.iter().enumerate().filter_map(|(i, j)| j.map(|j| c[i][j])).sum();
                let k = n.min(m);
                let mut all = Vec::new();
                if n <= m {
                    perms(k, m, &mut vec![false; m], &mut Vec::new(), &mut all);
                    let best = all.iter().map(|p| p.iter().enumerate().map(|(i, j)| c[i][*j]).sum::<f64>()).fold(f64::INFINITY, f64::min);
                    assert!((got - best).abs() < 1e-12);
                } else {
                    perms(k, n, &mut vec![false; n], &mut Vec::new(), &mut all);
                    let best = all.iter().map(|p| p.iter().enumerate().map(|(j, i)| c[*i][j]).sum::<f64>()).fold(f64::INFINITY, f64::min);
                    assert!((got - best).abs() < 1e-12);
                }
                assert_eq!(a.iter().filter(|x| x.is_some()).count(), k);
            }
        }
    }

    fn gt(id: u64, x: f64) -> GtObject {
        GtObject {
            id,
            bbox: BoundingBox3D {
                center: [x, 0.0, 0.8],
                size: [1.8, 4.4, 1.6],
                heading: 0.0,
                velocity: [0.0, 0.0],
                score: 1.0,
                class_id: 0,
            },
            world_center: [x, 0.0, 0.8],
            world_heading: 0.0,
            appearance: vec![],
            visible: true,
        }
    }

    #[test]
    fn sticky_track_keeps_object_regardless_of_cost() {
        let g1 = gt(5, 0.0);
        let g2 = gt(6, 20.0);
        let gts = vec![&g1, &g2];
        // Query 0 is a track stuck to object 5 but sits right on object 6.
        let refs = vec![[20.0, 0.0, 0.8], [0.0, 0.0, 0.8], [20.0, 0.0, 0.8]];
        let cls = Tensor::zeros(3, 1);
        let boxes = Tensor::zeros(3, BOX_DIM);
        let a = train_match(&cls, &boxes, &refs, &[Some(5)], &gts, &TrackerConfig::default());
        assert_eq!(a[0], Some(0));
        assert_eq!(a[2], Some(1));
        assert_eq!(a[1], None);
    }

    #[test]
    fn departed_sticky_object_goes_to_background() {
        let g1 = gt(6, 0.0);
        let gts = vec![&g1];
        let refs = vec![[0.0; 3], [0.0, 0.0, 0.8]];
        let a = train_match(&Tensor::zeros(2, 1), &Tensor::zeros(2, BOX_DIM), &refs, &[Some(5)], &gts, &TrackerConfig::default());
        assert_eq!(a, vec![None, Some(0)]);
    }

    #[test]
    fn augment_extremes_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v: Vec<u32> = (0..5).collect();
        assert_eq!(augment(v.clone(), Some(9), 0.0, 0.0, &mut rng), v);
        assert!(augment(v.clone(), None, 1.0, 0.0, &mut rng).is_empty());
        let trials = 10_000;
        let kept: usize = (0..trials).map(|_| augment(vec![()], None, 0.1, 0.3, &mut rng).len()).sum();
        let rate = 1.0 - kept as f64 / trials as f64;
        assert!((rate - 0.1).abs() <= 0.01, "{rate}");
    }

    #[test]
    fn predict_static_is_identity() {
        let cfg = tiny();
        let params = init_model(&cfg, 8, 1).unwrap();
        let mut t = query(QueryState::Active, 0.9, Some(0));
        t.q = (0..8).map(|i| i as f64).collect();
        t.reference = [3.0, 4.0, 0.5];
        let out = predict_step(std::slice::from_ref(&t), &Se3::identity(), 0.5, &cfg, &params).unwrap();
        assert_eq!(out[0].reference, t.reference);
        for (a, b) in out[0].q.iter().zip(&t.q) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn predict_ego_translation_shifts_refs() {
        let cfg = tiny();
        let params = init_model(&cfg, 8, 1).unwrap();
        let mut t = query(QueryState::Active, 0.9, Some(0));
        t.reference = [3.0, 4.0, 0.5];
        t.velocity = [2.0, 0.0];
        // Ego moved forward 1 m: the world→ego change is a shift by −1 in x.
        let ego = Se3::from_translation(Vector3::new(-1.0, 0.0, 0.0));
        let with = predict_step(std::slice::from_ref(&t), &ego, 0.5, &cfg, &params).unwrap();
        // Homogeneous oracle: [I | −e₁]·([I | v·dt]·r).
        let h = ego.to_homogeneous() * Se3::from_translation(Vector3::new(1.0, 0.0, 0.0)).to_homogeneous();
        let r = h * nalgebra::Vector4::new(3.0, 4.0, 0.5, 1.0);
        for k in 0..3 {
            assert!((with[0].reference[k] - r[k]).abs() < 1e-12);
        }
        let plain = ModelConfig { use_lmm: false, ..cfg };
        let without = predict_step(std::slice::from_ref(&t), &ego, 0.5, &plain, &params).unwrap();
        assert_eq!(with[0].reference, without[0].reference);
        assert_eq!(with[0].velocity, without[0].velocity);
    }

    #[test]
    fn update_step_query_count() {
        let cfg = tiny();
        let params = init_model(&cfg, 8, 2).unwrap();
        let scene = gen_scene(&SimConfig { d_a: 8, num_frames: 2, ..Default::default() }, 1).unwrap();
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let out = update_step_graph(&mut g, &p, &cfg.decoder, None, &[], &scene.frames[0].sensor_tokens).unwrap();
        assert_eq!(g.value(out.latents).rows(), 4);
        let t = g.constant(Tensor::zeros(3, 8));
        let out = update_step_graph(&mut g, &p, &cfg.decoder, Some(t), &[[0.0; 3]; 3], &scene.frames[0].sensor_tokens).unwrap();
        assert_eq!(g.value(out.latents).rows(), 7);
        assert_eq!(out.layers.len(), 2);
    }

    #[test]
    fn track_embedding_leaves_detection_queries_untouched() {
        let cfg = tiny();
        let mut params = init_model(&cfg, 8, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        params.insert("dec.te.w2", Tensor::randn(8, 8, 1.0, &mut rng));
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let tracks = g.constant(Tensor::randn(2, 8, 1.0, &mut rng));
        let te = apply_track_embedding_graph(&mut g, &p, tracks).unwrap();
        let det = p.get("dec.det.q").unwrap();
        let joint = g.concat(&[te, det], 0).unwrap();
        let v = g.value(joint);
        let d = params.get("dec.det.q").unwrap();
        for i in 0..4 {
            assert_eq!(v.row_slice(2 + i), d.row_slice(i));
        }
        assert_ne!(v.row_slice(0), g.value(tracks).row_slice(0));
    }

    #[test]
    fn cross_attention_prefers_matching_token() {
        // A token whose embedding equals a track latent gets that track's
        // largest attention weight when the key projection aligns with it.
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let q = Tensor::randn(2, d, 1.0, &mut rng);
        let other = Tensor::randn(2, d, 1.0, &mut rng);
        let toks = Tensor::from_rows(&[other.row_slice(0).to_vec(), q.row_slice(0).to_vec(), other.row_slice(1).to_vec()]).unwrap();
        let eye = g.constant(Tensor::eye(d).clone());
        let scaled = g.constant({
            let mut t = Tensor::eye(d);
            t.data_mut().iter_mut().for_each(|v| *v *= 3.0);
            t
        });
        let a = decoder::AttnParams { wq: scaled, wk: scaled, wv: eye, wo: eye };
        let qv = g.constant(q);
        let tv = g.constant(toks);
        let (_, w) = decoder::mha(&mut g, &a, qv, tv, tv, 1, None).unwrap();
        let row = g.value(w[0]).row_slice(0).to_vec();
        let best = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(best, 1);
    }

    #[test]
    fn window_loss_is_finite_and_deterministic() {
        let cfg = tiny();
        let params = init_model(&cfg, 8, 3).unwrap();
        let scene = gen_scene(&SimConfig { d_a: 8, num_frames: 4, min_objects: 2, max_objects: 3, ..Default::default() }, 2).unwrap();
        let run = || train_window(&params, &cfg, &TrackerConfig::default(), &scene, 0..3, true, &mut window_rng(1, 0, 0)).unwrap();
        let (a, b) = (run(), run());
        assert!(a.loss.is_finite() && a.loss > 0.0);
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grads, b.grads);
        // Every visible object is matched in every frame.
        for (k, m) in a.matched.iter().enumerate() {
            assert_eq!(*m, scene.frames[k].visible_objects().count());
        }
    }

    #[test]
    fn run_sequence_deterministic_and_single_frame() {
        let cfg = tiny();
        let mut params = init_model(&cfg, 8, 3).unwrap();
        params.insert("dec.head.cls.b2", Tensor::full(1, 1, 3.0));
        let scene = gen_scene(&SimConfig { d_a: 8, num_frames: 5, ..Default::default() }, 2).unwrap();
        let a = run_sequence(&params, &cfg, &TrackerConfig::default(), &scene).unwrap();
        let b = run_sequence(&params, &cfg, &TrackerConfig::default(), &scene).unwrap();
        assert_eq!(a, b);
        let one = Scene { frames: scene.frames[..1].to_vec(), meta: crate::simulator::SceneMeta { num_frames: 1, ..scene.meta.clone() } };
        let r = run_sequence(&params, &cfg, &TrackerConfig::default(), &one).unwrap();
        // With every score high, the first frame spawns one track per query.
        assert_eq!(r.frames[0].tracks.len(), 4);
        let ids: BTreeSet<u64> = r.frames[0].tracks.iter().map(|t| t.id).collect();
        assert_eq!(ids.len(), 4);
    }

    #[test]
    fn empty_scene_rejected() {
        let cfg = tiny();
        let params = init_model(&cfg, 8, 3).unwrap();
        let scene = gen_scene(&SimConfig { d_a: 8, num_frames: 1, ..Default::default() }, 2).unwrap();
        let empty = Scene { frames: vec![], meta: scene.meta };
        assert!(matches!(run_sequence(&params, &cfg, &TrackerConfig::default(), &empty), Err(Error::EmptyScene)));
    }
}
