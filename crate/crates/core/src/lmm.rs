//! Latent motion model.
//!
//! A small hyper-network maps a rigid transform (6D rotation + scaled
//! translation) to a block-diagonal latent transform `K` and an offset. A
//! latent query moves as `q' = W_out · (K · (W_in · q) + offset)`, mirroring
//! how the homogeneous matrix moves the query's reference point.
//!
//! Tensors use the row-vector convention, so `W · q` is computed as `q · W`.
//! The hyper-network predicts `ΔK` and the applied matrix is `I + ΔK`; with
//! the output layer zeroed the model starts as the identity map.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{to_rot6d, Se3};
use crate::tensor::{AdamW, AdamWConfig, Bound, CosineSchedule, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmmVariant {
    /// `h` blocks of `d_l/h × d_l/h` along the diagonal.
    MultiHead,
    /// One dense `d_l × d_l` block.
    FullRank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplyMode {
    /// Object motion and ego motion applied as two latent transforms.
    Separate,
    /// One latent transform of the composed motion.
    Merged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmmConfig {
    pub d_l: usize,
    pub h: usize,
    pub variant: LmmVariant,
    pub apply_mode: ApplyMode,
    pub share_params: bool,
    pub use_query_feature: bool,
    /// Translations are divided by this before entering the hyper-network.
    pub trans_scale: f64,
}

impl LmmConfig {
    pub fn new(d_l: usize, h: usize) -> Self {
        Self {
            d_l,
            h,
            variant: LmmVariant::MultiHead,
            apply_mode: ApplyMode::Separate,
            share_params: true,
            use_query_feature: false,
            trans_scale: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_l == 0 {
            return Err(Error::invalid_config("lmm.d_l", "must be positive"));
        }
        if self.variant == LmmVariant::MultiHead && (self.h == 0 || self.d_l % self.h != 0) {
            return Err(Error::invalid_config(
                "lmm.h",
                format!("head count {} must divide d_l {}", self.h, self.d_l),
            ));
        }
        if !(self.trans_scale > 0.0) {
            return Err(Error::invalid_config("lmm.trans_scale", "must be positive"));
        }
        Ok(())
    }

    /// Number of diagonal blocks actually used.
    pub fn heads(&self) -> usize {
        match self.variant {
            LmmVariant::MultiHead => self.h,
            LmmVariant::FullRank => 1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_l / self.heads()
    }

    /// Predicted entries of `K`: `h · h_dim²`, or `d_l²` for full rank.
    pub fn k_size(&self) -> usize {
        self.heads() * self.head_dim() * self.head_dim()
    }

    /// Width of the hyper-network's output layer: `|K|` plus the offset.
    pub fn output_size(&self) -> usize {
        self.k_size() + self.d_l
    }

    pub fn input_size(&self) -> usize {
        9 + if self.use_query_feature { self.d_l } else { 0 }
    }

    pub fn hidden_size(&self) -> usize {
        2 * self.d_l
    }

    /// `|K|` in the `h·d²` / `d²` notation used in ablation tables.
    pub fn k_label(&self) -> String {
        match self.variant {
            LmmVariant::MultiHead => format!("{}*{}^2", self.heads(), self.head_dim()),
            LmmVariant::FullRank => format!("{}^2", self.d_l),
        }
    }

    /// Parameter-set prefixes for (object, ego) applications.
    pub fn prefixes(&self) -> (&'static str, &'static str) {
        match (self.apply_mode, self.share_params) {
            (ApplyMode::Separate, false) => ("lmm.object", "lmm.ego"),
            _ => ("lmm.shared", "lmm.shared"),
        }
    }

    fn param_sets(&self) -> Vec<&'static str> {
        let (a, b) = self.prefixes();
        if a == b {
            vec![a]
        } else {
            vec![a, b]
        }
    }
}

/// Output of the hyper-network for one transform.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTransform {
    /// `heads` row-major blocks, identity already added.
    pub blocks: Vec<Tensor>,
    pub offset: Vec<f64>,
}

impl LatentTransform {
    pub fn num_block_weights(&self) -> usize {
        self.blocks.iter().map(Tensor::len).sum()
    }

    /// Dense `d_l × d_l` matrix with the blocks on its diagonal.
    pub fn dense(&self) -> Tensor {
        let d: usize = self.blocks.iter().map(Tensor::rows).sum();
        let mut m = Tensor::zeros(d, d);
        let mut off = 0;
        for b in &self.blocks {
            let n = b.rows();
            for r in 0..n {
                for c in 0..n {
                    m.data_mut()[(off + r) * d + off + c] = b.get(r, c);
                }
            }
            off += n;
        }
        m
    }
}

/// Adds freshly initialized hyper-network parameters for every set `cfg` uses.
pub fn init_params<R: Rng + ?Sized>(cfg: &LmmConfig, store: &mut ParamStore, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    for prefix in cfg.param_sets() {
        init_tfnet(cfg, prefix, store, rng)?;
    }
    Ok(())
}

fn he(rows: usize, cols: usize, rng: &mut (impl Rng + ?Sized)) -> Tensor {
    Tensor::randn(rows, cols, (2.0 / rows as f64).sqrt(), rng)
}

fn init_tfnet<R: Rng + ?Sized>(
    cfg: &LmmConfig,
    prefix: &str,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<()> {
    let (i, h, o, d) = (cfg.input_size(), cfg.hidden_size(), cfg.output_size(), cfg.d_l);
    store.insert(format!("{prefix}.fc1.w"), he(i, h, rng));
    store.insert(format!("{prefix}.fc1.b"), Tensor::zeros(1, h));
    store.insert(format!("{prefix}.fc2.w"), he(h, h, rng));
    store.insert(format!("{prefix}.fc2.b"), Tensor::zeros(1, h));
    store.insert(format!("{prefix}.out.w"), Tensor::zeros(h, o));
    store.insert(format!("{prefix}.out.b"), Tensor::zeros(1, o));

    // W_in = I + noise, W_out its exact inverse, so W_in·W_out = I at init.
    let mut w_in = Tensor::randn(d, d, 1e-3, rng);
    for k in 0..d {
        w_in.data_mut()[k * d + k] += 1.0;
    }
    let inv = DMatrix::from_row_slice(d, d, w_in.data())
        .try_inverse()
        .ok_or_else(|| Error::invalid_config("lmm", "input projection not invertible"))?;
    let mut w_out = Tensor::zeros(d, d);
    for r in 0..d {
        for c in 0..d {
            w_out.data_mut()[r * d + c] = inv[(r, c)];
        }
    }
    store.insert(format!("{prefix}.w_in"), w_in);
    store.insert(format!("{prefix}.w_out"), w_out);
    Ok(())
}

/// Hyper-network inputs, one row per transform: `[rot6d, t / scale]`.
pub fn pose_features(cfg: &LmmConfig, poses: &[Se3]) -> Tensor {
    let mut data = Vec::with_capacity(poses.len() * 9);
    for p in poses {
        data.extend_from_slice(&to_rot6d(p).to_array());
        data.extend(p.translation().iter().map(|v| v / cfg.trans_scale));
    }
    Tensor::new(vec![poses.len(), 9], data).expect("9 features per pose")
}

/// Graph handles for a batch of predicted latent transforms.
#[derive(Debug, Clone, Copy)]
pub struct LatentTransformVars {
    /// `ΔK`, one row of `|K|` entries per transform.
    pub delta_k: Var,
    pub offset: Var,
}

/// Runs the hyper-network for a batch of transforms. `q` must be given iff
/// the config uses the query feature.
pub fn tfnet_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &LmmConfig,
    prefix: &str,
    poses: &[Se3],
    q: Option<Var>,
) -> Result<LatentTransformVars> {
    if q.is_some() != cfg.use_query_feature {
        return Err(Error::ConfigMismatch(format!(
            "query feature {} but use_query_feature = {}",
            if q.is_some() { "supplied" } else { "missing" },
            cfg.use_query_feature
        )));
    }
    let feats = g.constant(pose_features(cfg, poses));
    let input = match q {
        Some(q) => g.concat(&[feats, q], 1)?,
        None => feats,
    };
    let h1 = dense(g, p, &format!("{prefix}.fc1"), input)?;
    let h1 = g.relu(h1);
    let h2 = dense(g, p, &format!("{prefix}.fc2"), h1)?;
    let h2 = g.relu(h2);
    let out = dense(g, p, &format!("{prefix}.out"), h2)?;
    let k = cfg.k_size();
    let delta_k = g.slice(out, 1, 0, k)?;
    let offset = g.slice(out, 1, k, cfg.d_l)?;
    Ok(LatentTransformVars { delta_k, offset })
}

fn dense(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// `q' = W_out · ((I + ΔK) · (W_in · q) + offset)` for a batch of rows.
pub fn apply_lmm_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &LmmConfig,
    prefix: &str,
    q: Var,
    lt: LatentTransformVars,
) -> Result<Var> {
    let (n, d) = g.value(q).dims2()?;
    if d != cfg.d_l || g.value(lt.delta_k).rows() != n {
        return Err(Error::shape("apply_lmm", g.shape(q), g.shape(lt.delta_k)));
    }
    let w_in = p.get(&format!("{prefix}.w_in"))?;
    let w_out = p.get(&format!("{prefix}.w_out"))?;
    let x = g.matmul(q, w_in)?;
    let kx = g.block_apply(lt.delta_k, x, cfg.heads())?;
    let y = g.add(x, kx)?;
    let y = g.add(y, lt.offset)?;
    g.matmul(y, w_out)
}

/// Moves a batch of latent queries (`n × d_l`) through per-row object
/// motion and ego motion.
pub fn propagate_latent_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &LmmConfig,
    q: Var,
    t_obj: &[Se3],
    t_ego: &[Se3],
) -> Result<Var> {
    let n = g.value(q).rows();
    if t_obj.len() != n || t_ego.len() != n {
        return Err(Error::shape("propagate_latent", g.shape(q), &[t_obj.len(), t_ego.len()]));
    }
    if n == 0 {
        return Ok(q);
    }
    let feat = |q: Var| cfg.use_query_feature.then_some(q);
    match cfg.apply_mode {
        ApplyMode::Separate => {
            let (po, pe) = cfg.prefixes();
            let lt = tfnet_graph(g, p, cfg, po, t_obj, feat(q))?;
            let q1 = apply_lmm_graph(g, p, cfg, po, q, lt)?;
            let lt = tfnet_graph(g, p, cfg, pe, t_ego, feat(q1))?;
            apply_lmm_graph(g, p, cfg, pe, q1, lt)
        }
        ApplyMode::Merged => {
            let merged: Vec<Se3> = t_ego.iter().zip(t_obj).map(|(e, o)| e.compose(o)).collect();
            let (prefix, _) = cfg.prefixes();
            let lt = tfnet_graph(g, p, cfg, prefix, &merged, feat(q))?;
            apply_lmm_graph(g, p, cfg, prefix, q, lt)
        }
    }
}

/// Hyper-network output for a single transform, identity added to the blocks.
pub fn tfnet(
    cfg: &LmmConfig,
    params: &ParamStore,
    prefix: &str,
    pose: &Se3,
    q: Option<&[f64]>,
) -> Result<LatentTransform> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let qv = q.map(|q| g.constant(Tensor::row(q.to_vec())));
    let lt = tfnet_graph(&mut g, &p, cfg, prefix, std::slice::from_ref(pose), qv)?;
    let hd = cfg.head_dim();
    let dk = g.value(lt.delta_k).data();
    let blocks = (0..cfg.heads())
        .map(|j| {
            let mut b = Tensor::new(vec![hd, hd], dk[j * hd * hd..(j + 1) * hd * hd].to_vec())
                .expect("block size");
            for k in 0..hd {
                b.data_mut()[k * hd + k] += 1.0;
            }
            b
        })
        .collect();
    Ok(LatentTransform {
        blocks,
        offset: g.value(lt.offset).data().to_vec(),
    })
}

/// Applies an already computed latent transform to one query.
pub fn apply_lmm(
    cfg: &LmmConfig,
    params: &ParamStore,
    prefix: &str,
    q: &[f64],
    lt: &LatentTransform,
) -> Result<Vec<f64>> {
    let d = cfg.d_l;
    if q.len() != d || lt.offset.len() != d || lt.blocks.len() != cfg.heads() {
        return Err(Error::shape("apply_lmm", &[q.len()], &[lt.offset.len()]));
    }
    let hd = cfg.head_dim();
    let mut dk = Vec::with_capacity(cfg.k_size());
    for b in &lt.blocks {
        for r in 0..hd {
            for c in 0..hd {
                dk.push(b.get(r, c) - if r == c { 1.0 } else { 0.0 });
            }
        }
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let qv = g.constant(Tensor::row(q.to_vec()));
    let lt = LatentTransformVars {
        delta_k: g.constant(Tensor::row(dk)),
        offset: g.constant(Tensor::row(lt.offset.clone())),
    };
    let out = apply_lmm_graph(&mut g, &p, cfg, prefix, qv, lt)?;
    Ok(g.value(out).data().to_vec())
}

/// Single-query propagation without a tape.
pub fn propagate_latent(
    cfg: &LmmConfig,
    params: &ParamStore,
    q: &[f64],
    t_obj: &Se3,
    t_ego: &Se3,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let qv = g.constant(Tensor::row(q.to_vec()));
    let out = propagate_latent_graph(
        &mut g,
        &p,
        cfg,
        qv,
        std::slice::from_ref(t_obj),
        std::slice::from_ref(t_ego),
    )?;
    Ok(g.value(out).data().to_vec())
}

/// One supervised example for latent prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSample {
    pub q_t: Vec<f64>,
    pub t_obj: Se3,
    pub t_ego: Se3,
    pub q_next: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Training stops once a minibatch loss falls below this.
    pub tolerance: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.0,
            tolerance: 1e-14,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    /// Mean squared error over the whole dataset before training.
    pub initial_mse: f64,
    pub final_mse: f64,
    /// Minibatch loss per step.
    pub history: Vec<f64>,
}

fn batch_mse(
    cfg: &LmmConfig,
    g: &mut Graph,
    p: &Bound,
    batch: &[&LatentSample],
) -> Result<Var> {
    let d = cfg.d_l;
    let mut qd = Vec::with_capacity(batch.len() * d);
    let mut td = Vec::with_capacity(batch.len() * d);
    for s in batch {
        if s.q_t.len() != d || s.q_next.len() != d {
            return Err(Error::shape("pretrain_lmm", &[d], &[s.q_t.len(), s.q_next.len()]));
        }
        qd.extend_from_slice(&s.q_t);
        td.extend_from_slice(&s.q_next);
    }
    let q = g.constant(Tensor::new(vec![batch.len(), d], qd)?);
    let target = g.constant(Tensor::new(vec![batch.len(), d], td)?);
    let t_obj: Vec<Se3> = batch.iter().map(|s| s.t_obj).collect();
    let t_ego: Vec<Se3> = batch.iter().map(|s| s.t_ego).collect();
    let pred = propagate_latent_graph(g, p, cfg, q, &t_obj, &t_ego)?;
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// Mean squared next-step error of the current parameters over `data`.
pub fn dataset_mse(cfg: &LmmConfig, params: &ParamStore, data: &[LatentSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for chunk in data.chunks(256) {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let refs: Vec<&LatentSample> = chunk.iter().collect();
        let l = batch_mse(cfg, &mut g, &p, &refs)?;
        total += g.value(l).item() * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Fits the latent motion model to predict `q_next` from `q_t` and the
/// motion, minimizing mean squared error with AdamW and cosine annealing.
/// Only `lmm.*` parameters are touched.
pub fn pretrain_lmm<R: Rng + ?Sized>(
    cfg: &LmmConfig,
    params: &mut ParamStore,
    data: &[LatentSample],
    train: &PretrainConfig,
    rng: &mut R,
) -> Result<PretrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let initial_mse = dataset_mse(cfg, params, data)?;
    let mut lmm_params = ParamStore::new();
    for (k, v) in params.iter() {
        if k.starts_with("lmm.") {
            lmm_params.insert(k.clone(), v.clone());
        }
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: train.lr,
        weight_decay: train.weight_decay,
        ..Default::default()
    });
    let sched = CosineSchedule {
        base_lr: train.lr,
        min_lr: train.lr * 0.01,
        total_steps: train.steps,
        warmup_steps: 0,
    };
    let bs = train.batch_size.clamp(1, data.len());
    let mut history = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let batch: Vec<&LatentSample> = if bs == data.len() {
            data.iter().collect()
        } else {
            (0..bs).map(|_| &data[rng.random_range(0..data.len())]).collect()
        };
        let mut g = Graph::new();
        let p = lmm_params.bind(&mut g, true);
        let loss = batch_mse(cfg, &mut g, &p, &batch)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: "latent pretraining".into(),
            });
        }
        history.push(lv);
        if lv < train.tolerance {
            break;
        }
        let grads = p.grads(&g.backward(loss)?);
        opt.step(&mut lmm_params, &grads, sched.lr(step));
    }
    params.load_matching(&lmm_params);
    let final_mse = dataset_mse(cfg, params, data)?;
    Ok(PretrainReport {
        initial_mse,
        final_mse,
        history,
    })
}
