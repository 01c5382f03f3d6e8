//! Toy transformer decoder over object queries and sensor tokens.
//!
//! Each layer runs self-attention over all object queries, cross-attention
//! into the embedded sensor tokens and a feed-forward block, each followed by
//! a residual connection and layer norm. Queries carry a 3D reference point
//! whose positional encoding is added to the attention queries and keys.
//! Cross-attention logits get a fixed locality bias `-‖ref − pos‖² / 2s²`
//! that stands in for projecting reference points into camera features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::wrap_angle;
use crate::tensor::{Bound, Graph, ParamStore, Tensor, Var};

pub use crate::boxes::BoundingBox3D;

/// Frequencies per coordinate in the positional encoding.
const PE_FREQS: usize = 4;
/// Width of the positional encoding: sin and cos per frequency per axis.
pub const PE_DIM: usize = 3 * 2 * PE_FREQS;
/// Box head outputs: center offset (3), log size (3), sin/cos heading (2), velocity (2).
pub const BOX_DIM: usize = 10;
const LN_EPS: f64 = 1e-5;
/// Initial class bias, a prior probability of 0.01.
const CLS_PRIOR_BIAS: f64 = -4.59511985013459;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub d_l: usize,
    pub h: usize,
    pub num_det_queries: usize,
    pub ffn_width: usize,
    pub num_classes: usize,
    /// Length scale `s` of the cross-attention locality bias, meters.
    pub locality_sigma: f64,
    /// Radius of the fallback anchor spiral for detection references.
    pub anchor_radius: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            d_l: 64,
            h: 4,
            num_det_queries: 24,
            ffn_width: 128,
            num_classes: 1,
            locality_sigma: 2.0,
            anchor_radius: 30.0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_l == 0 {
            return Err(Error::invalid_config("model.decoder.d_l", "must be positive"));
        }
        if self.h == 0 || self.d_l % self.h != 0 {
            return Err(Error::invalid_config(
                "model.decoder.h",
                format!("head count {} must divide d_l {}", self.h, self.d_l),
            ));
        }
        if self.num_layers == 0 {
            return Err(Error::invalid_config("model.decoder.num_layers", "must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid_config("model.decoder.num_classes", "must be positive"));
        }
        if self.ffn_width == 0 {
            return Err(Error::invalid_config("model.decoder.ffn_width", "must be positive"));
        }
        if !(self.locality_sigma > 0.0) {
            return Err(Error::invalid_config("model.decoder.locality_sigma", "must be positive"));
        }
        Ok(())
    }
}

fn xavier(rows: usize, cols: usize, rng: &mut (impl Rng + ?Sized)) -> Tensor {
    Tensor::randn(rows, cols, (2.0 / (rows + cols) as f64).sqrt(), rng)
}

fn init_ffn(
    store: &mut ParamStore,
    prefix: &str,
    dims: (usize, usize, usize),
    zero_out: bool,
    rng: &mut (impl Rng + ?Sized),
) {
    let (i, h, o) = dims;
    store.insert(format!("{prefix}.w1"), xavier(i, h, rng));
    store.insert(format!("{prefix}.b1"), Tensor::zeros(1, h));
    let w2 = if zero_out { Tensor::zeros(h, o) } else { xavier(h, o, rng) };
    store.insert(format!("{prefix}.w2"), w2);
    store.insert(format!("{prefix}.b2"), Tensor::zeros(1, o));
}

/// Adds all decoder, head and track-embedding parameters. `d_a` is the
/// sensor feature width.
pub fn init_params<R: Rng + ?Sized>(
    cfg: &DecoderConfig,
    d_a: usize,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_l;
    store.insert("dec.det.q", Tensor::randn(cfg.num_det_queries, d, 1.0, rng));
    // Token features enter as they are when their width matches the latent;
    // otherwise through a learned projection.
    if d_a != d {
        store.insert("dec.tok.w", xavier(d_a, d, rng));
        store.insert("dec.tok.b", Tensor::zeros(1, d));
    }
    store.insert("dec.pe.w", xavier(PE_DIM, d, rng));
    for l in 0..cfg.num_layers {
        for blk in ["sa", "ca"] {
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert(format!("dec.l{l}.{blk}.{w}"), xavier(d, d, rng));
            }
        }
        store.insert(format!("dec.l{l}.ca.wr"), xavier(3 * cfg.h, d, rng));
        init_ffn(store, &format!("dec.l{l}.ffn"), (d, cfg.ffn_width, d), false, rng);
    }
    init_ffn(store, "dec.head.cls", (d, cfg.ffn_width, cfg.num_classes), true, rng);
    store.insert("dec.head.cls.b2", Tensor::full(1, cfg.num_classes, CLS_PRIOR_BIAS));
    init_ffn(store, "dec.head.box", (d, cfg.ffn_width, BOX_DIM), true, rng);
    store.insert("dec.te.e", Tensor::randn(1, d, 1.0, rng));
    init_ffn(store, "dec.te", (2 * d, d, d), true, rng);
    Ok(())
}

/// Sinusoidal encoding of 3D positions, one row per position.
pub fn positional_encoding(positions: &[[f64; 3]]) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * PE_DIM);
    for p in positions {
        for c in p {
            for k in 0..PE_FREQS {
                let wavelength = 2.0 * 4f64.powi(k as i32);
                let a = std::f64::consts::TAU * c / wavelength;
                data.push(a.sin());
                data.push(a.cos());
            }
        }
    }
    Tensor::new(vec![positions.len(), PE_DIM], data).expect("PE_DIM per position")
}

/// Handles for one attention block's projections.
#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl AttnParams {
    pub fn from_bound(p: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            wq: p.get(&format!("{prefix}.wq"))?,
            wk: p.get(&format!("{prefix}.wk"))?,
            wv: p.get(&format!("{prefix}.wv"))?,
            wo: p.get(&format!("{prefix}.wo"))?,
        })
    }
}

/// Multi-head scaled dot-product attention. Returns the output and each
/// head's attention weights (`n × m`). `bias` is added to every head's logits.
pub fn mha(
    g: &mut Graph,
    a: &AttnParams,
    queries: Var,
    keys: Var,
    values: Var,
    heads: usize,
    bias: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let (_, d) = g.value(queries).dims2()?;
    let (m, dk) = g.value(keys).dims2()?;
    let (mv, _) = g.value(values).dims2()?;
    if dk != d || mv != m {
        return Err(Error::shape("mha", g.shape(queries), g.shape(keys)));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("mha", g.shape(queries), &[heads]));
    }
    let hd = d / heads;
    let q = g.matmul(queries, a.wq)?;
    let k = g.matmul(keys, a.wk)?;
    let v = g.matmul(values, a.wv)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for j in 0..heads {
        let qh = g.slice(q, 1, j * hd, hd)?;
        let kh = g.slice(k, 1, j * hd, hd)?;
        let vh = g.slice(v, 1, j * hd, hd)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let mut logits = g.scale(logits, scale);
        if let Some(b) = bias {
            logits = g.add(logits, b)?;
        }
        let w = g.softmax(logits)?;
        outs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    Ok((g.matmul(cat, a.wo)?, weights))
}

/// Two-layer ReLU network `relu(x·w1 + b1)·w2 + b2`.
pub fn ffn(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = g.matmul(x, p.get(&format!("{prefix}.w1"))?)?;
    let h = g.add(h, p.get(&format!("{prefix}.b1"))?)?;
    let h = g.relu(h);
    let o = g.matmul(h, p.get(&format!("{prefix}.w2"))?)?;
    g.add(o, p.get(&format!("{prefix}.b2"))?)
}

/// Sensor tokens as seen by the decoder.
#[derive(Debug, Clone)]
pub struct TokenInput {
    /// `m × d_l` embeddings.
    pub embedding: Var,
    pub positions: Vec<[f64; 3]>,
}

/// Token features (projected if their width differs from the latent) plus
/// the projected positional encoding.
pub fn embed_tokens(
    g: &mut Graph,
    p: &Bound,
    features: &[Vec<f64>],
    positions: &[[f64; 3]],
) -> Result<Option<TokenInput>> {
    if features.is_empty() {
        return Ok(None);
    }
    let f = g.constant(Tensor::from_rows(features)?);
    let x = if p.has("dec.tok.w") {
        let x = g.matmul(f, p.get("dec.tok.w")?)?;
        g.add(x, p.get("dec.tok.b")?)?
    } else {
        f
    };
    let pe = g.constant(positional_encoding(positions));
    let pe = g.matmul(pe, p.get("dec.pe.w")?)?;
    Ok(Some(TokenInput {
        embedding: g.add(x, pe)?,
        positions: positions.to_vec(),
    }))
}

/// Projected positional encoding of query reference points.
pub fn query_pos(g: &mut Graph, p: &Bound, refs: &[[f64; 3]]) -> Result<Var> {
    let pe = g.constant(positional_encoding(refs));
    g.matmul(pe, p.get("dec.pe.w")?)
}

/// `-‖ref − pos‖² / 2s²` for every (query, token) pair.
pub fn locality_bias(refs: &[[f64; 3]], positions: &[[f64; 3]], sigma: f64) -> Tensor {
    let denom = 2.0 * sigma * sigma;
    let mut data = Vec::with_capacity(refs.len() * positions.len());
    for r in refs {
        for t in positions {
            let d2: f64 = r.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
            data.push(-d2 / denom);
        }
    }
    Tensor::new(vec![refs.len(), positions.len()], data).expect("n × m bias")
}

/// Query/token geometry for cross-attention: the locality bias, plus token
/// positions and query references in units of the locality scale.
#[derive(Debug, Clone, Copy)]
pub struct CrossGeometry {
    pub bias: Var,
    pub token_pos: Var,
    pub query_ref: Var,
}

pub fn cross_geometry(
    g: &mut Graph,
    refs: &[[f64; 3]],
    positions: &[[f64; 3]],
    sigma: f64,
) -> Result<CrossGeometry> {
    let scaled = |pts: &[[f64; 3]]| {
        let data = pts.iter().flat_map(|p| p.iter().map(|c| c / sigma)).collect();
        Tensor::new(vec![pts.len(), 3], data)
    };
    Ok(CrossGeometry {
        bias: g.constant(locality_bias(refs, positions, sigma)),
        token_pos: g.constant(scaled(positions)?),
        query_ref: g.constant(scaled(refs)?),
    })
}

/// One decoder layer. `pos` is the projected positional encoding of the
/// queries' reference points. Without tokens the cross-attention block is
/// skipped. With `geo`, cross-attention is biased toward nearby tokens and
/// each head's attention-weighted token offset `Σ w·(p − ref)` is projected
/// into the residual.
pub fn decoder_layer(
    g: &mut Graph,
    p: &Bound,
    cfg: &DecoderConfig,
    layer: usize,
    queries: Var,
    pos: Var,
    tokens: Option<&TokenInput>,
    geo: Option<&CrossGeometry>,
) -> Result<Var> {
    let (n, d) = g.value(queries).dims2()?;
    if d != cfg.d_l || g.shape(pos) != g.shape(queries) {
        return Err(Error::shape("decoder_layer", g.shape(queries), g.shape(pos)));
    }
    if n == 0 {
        return Ok(queries);
    }
    let sa = AttnParams::from_bound(p, &format!("dec.l{layer}.sa"))?;
    let qk = g.add(queries, pos)?;
    let (att, _) = mha(g, &sa, qk, qk, queries, cfg.h, None)?;
    let x = g.add(queries, att)?;
    let mut x = g.layer_norm(x, LN_EPS)?;
    if let Some(t) = tokens {
        let (m, dt) = g.value(t.embedding).dims2()?;
        if dt != d {
            return Err(Error::shape("decoder_layer", g.shape(queries), g.shape(t.embedding)));
        }
        if m > 0 {
            let ca = AttnParams::from_bound(p, &format!("dec.l{layer}.ca"))?;
            let q = g.add(x, pos)?;
            let (att, weights) = mha(g, &ca, q, t.embedding, t.embedding, cfg.h, geo.map(|c| c.bias))?;
            let mut y = g.add(x, att)?;
            if let Some(c) = geo {
                let offsets = weights
                    .iter()
                    .map(|&w| {
                        let mean = g.matmul(w, c.token_pos)?;
                        g.sub(mean, c.query_ref)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let o = g.concat(&offsets, 1)?;
                let o = g.matmul(o, p.get(&format!("dec.l{layer}.ca.wr"))?)?;
                y = g.add(y, o)?;
            }
            x = g.layer_norm(y, LN_EPS)?;
        }
    }
    let f = ffn(g, p, &format!("dec.l{layer}.ffn"), x)?;
    let y = g.add(x, f)?;
    g.layer_norm(y, LN_EPS)
}

/// Class logits (`n × classes`) and raw box outputs (`n × 10`).
pub fn decode_heads_graph(g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Var)> {
    let cls = ffn(g, p, "dec.head.cls", x)?;
    let bx = ffn(g, p, "dec.head.box", x)?;
    Ok((cls, bx))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Turns raw head outputs into a box. Sizes go through `exp` (log sizes are
/// clamped to ±10), heading is `atan2(sin, cos)`, the score is the sigmoid
/// of the largest class logit.
pub fn decode_box(raw: &[f64], reference: [f64; 3], logits: &[f64]) -> BoundingBox3D {
    let (class_id, best) = logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let size = |v: f64| v.clamp(-10.0, 10.0).exp();
    let heading = raw[6].atan2(raw[7]);
    BoundingBox3D {
        center: [reference[0] + raw[0], reference[1] + raw[1], reference[2] + raw[2]],
        size: [size(raw[3]), size(raw[4]), size(raw[5])],
        heading: if heading.is_nan() { 0.0 } else { wrap_angle(heading) },
        velocity: [raw[8], raw[9]],
        score: sigmoid(best),
        class_id,
    }
}

/// Regression target for `b` relative to `reference`, in the head's layout.
pub fn encode_box(b: &BoundingBox3D, reference: [f64; 3]) -> [f64; BOX_DIM] {
    let (s, c) = b.heading.sin_cos();
    [
        b.center[0] - reference[0],
        b.center[1] - reference[1],
        b.center[2] - reference[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        s,
        c,
        b.velocity[0],
        b.velocity[1],
    ]
}

/// Heads for a single query without a tape.
pub fn decode_heads(
    query: &[f64],
    reference: [f64; 3],
    params: &ParamStore,
) -> Result<(BoundingBox3D, Vec<f64>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(Tensor::row(query.to_vec()));
    let (cls, bx) = decode_heads_graph(&mut g, &p, x)?;
    let logits = g.value(cls).data().to_vec();
    Ok((decode_box(g.value(bx).data(), reference, &logits), logits))
}

/// `t + FFN([t, e])` for every row of `tracks`, with the single shared `e`.
pub fn apply_track_embedding_graph(g: &mut Graph, p: &Bound, tracks: Var) -> Result<Var> {
    let n = g.value(tracks).rows();
    if n == 0 {
        return Ok(tracks);
    }
    let e = p.get("dec.te.e")?;
    let rows = g.gather_rows(e, &vec![0; n])?;
    let cat = g.concat(&[tracks, rows], 1)?;
    let f = ffn(g, p, "dec.te", cat)?;
    g.add(tracks, f)
}

pub fn apply_track_embedding(t: &[f64], params: &ParamStore) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(Tensor::row(t.to_vec()));
    let y = apply_track_embedding_graph(&mut g, &p, x)?;
    Ok(g.value(y).data().to_vec())
}

/// Reference points for detection queries: token positions nearest first,
/// then a fixed spiral of anchors for the remaining slots.
pub fn detection_refs(cfg: &DecoderConfig, token_positions: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut sorted: Vec<[f64; 3]> = token_positions.to_vec();
    sorted.sort_by(|a, b| a[0].hypot(a[1]).total_cmp(&b[0].hypot(b[1])));
    let n = cfg.num_det_queries;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|j| {
            sorted.get(j).copied().unwrap_or_else(|| {
                let r = cfg.anchor_radius * ((j as f64 + 0.5) / n as f64).sqrt();
                let a = j as f64 * golden;
                [r * a.cos(), r * a.sin(), 0.8]
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> DecoderConfig {
        DecoderConfig {
            num_layers: 1,
            d_l: 8,
            h: 2,
            num_det_queries: 3,
            ffn_width: 6,
            ..Default::default()
        }
    }

    fn store(cfg: &DecoderConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_params(cfg, cfg.d_l, &mut s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        s
    }

    fn attn(g: &mut Graph, d: usize, rng: &mut ChaCha8Rng) -> AttnParams {
        let mut m = || g.constant(Tensor::randn(d, d, 0.5, rng));
        AttnParams {
            wq: m(),
            wk: m(),
            wv: m(),
            wo: m(),
        }
    }

    #[test]
    fn singleton_attention_weight_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let a = attn(&mut g, 4, &mut rng);
        let x = g.constant(Tensor::randn(1, 4, 1.0, &mut rng));
        let (_, w) = mha(&mut g, &a, x, x, x, 2, None).unwrap();
        for w in w {
            assert!((g.value(w).item() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_keys_give_mean_of_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let mut a = attn(&mut g, 4, &mut rng);
        a.wo = g.constant(Tensor::eye(4));
        a.wv = g.constant(Tensor::eye(4));
        let q = g.constant(Tensor::randn(2, 4, 1.0, &mut rng));
        let k = g.constant(Tensor::from_rows(&vec![vec![0.3, -0.2, 0.5, 1.0]; 3]).unwrap());
        let v = g.constant(Tensor::randn(3, 4, 1.0, &mut rng));
        let (out, _) = mha(&mut g, &a, q, k, v, 2, None).unwrap();
        let vt = g.value(v).clone();
        for r in 0..2 {
            for c in 0..4 {
                let mean = (0..3).map(|i| vt.get(i, c)).sum::<f64>() / 3.0;
                assert!((g.value(out).get(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let a = attn(&mut g, 6, &mut rng);
        let q = g.constant(Tensor::randn(3, 6, 1.0, &mut rng));
        let k = g.constant(Tensor::randn(4, 6, 1.0, &mut rng));
        let (out, _) = mha(&mut g, &a, q, k, k, 1, None).unwrap();
        // Independent oracle: softmax(QKᵀ/√d)V·Wo with explicit loops.
        let mm = |x: &Tensor, w: &Tensor| {
            let (n, kk) = (x.rows(), x.cols());
            let m = w.cols();
            let mut o = vec![vec![0.0; m]; n];
            for i in 0..n {
                for j in 0..m {
                    o[i][j] = (0..kk).map(|t| x.get(i, t) * w.get(t, j)).sum();
                }
            }
            o
        };
        let (qv, kv) = (g.value(q).clone(), g.value(k).clone());
        let qq = mm(&qv, g.value(a.wq));
        let kk = mm(&kv, g.value(a.wk));
        let vv = mm(&kv, g.value(a.wv));
        let mut ctx = vec![vec![0.0; 6]; 3];
        for i in 0..3 {
            let logits: Vec<f64> = (0..4)
                .map(|j| (0..6).map(|t| qq[i][t] * kk[j][t]).sum::<f64>() / 6f64.sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..4 {
                for t in 0..6 {
                    ctx[i][t] += e[j] / z * vv[j][t];
                }
            }
        }
        let ctx = Tensor::from_rows(&ctx).unwrap();
        let expect = mm(&ctx, g.value(a.wo));
        for i in 0..3 {
            for j in 0..6 {
                assert!((g.value(out).get(i, j) - expect[i][j]).abs() < 1e-12);
            }
        }
    }

    fn layer_inputs(g: &mut Graph, p: &Bound, n: usize, m: usize, seed: u64) -> (Var, Var, Option<TokenInput>, Option<CrossGeometry>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = g.constant(Tensor::randn(n, 8, 1.0, &mut rng));
        let refs: Vec<[f64; 3]> = (0..n).map(|i| [i as f64, 1.0, 0.5]).collect();
        let pos = query_pos(g, p, &refs).unwrap();
        let feats: Vec<Vec<f64>> = (0..m).map(|_| Tensor::randn(1, 8, 1.0, &mut rng).into_data()).collect();
        let tpos: Vec<[f64; 3]> = (0..m).map(|i| [i as f64 * 0.7, 0.0, 0.5]).collect();
        let tok = embed_tokens(g, p, &feats, &tpos).unwrap();
        let geo = tok.as_ref().map(|_| cross_geometry(g, &refs, &tpos, 2.0).unwrap());
        (q, pos, tok, geo)
    }

    #[test]
    fn layer_preserves_shape_and_handles_no_tokens() {
        let cfg = small_cfg();
        let params = store(&cfg, 3);
        for (n, m) in [(1, 0), (4, 3), (7, 1)] {
            let mut g = Graph::new();
            let p = params.bind(&mut g, false);
            let (q, pos, tok, bias) = layer_inputs(&mut g, &p, n, m, n as u64);
            let out = decoder_layer(&mut g, &p, &cfg, 0, q, pos, tok.as_ref(), bias.as_ref()).unwrap();
            assert_eq!(g.shape(out), &[n, 8]);
            assert!(g.value(out).is_finite());
        }
    }

    #[test]
    fn layer_is_permutation_equivariant() {
        let cfg = small_cfg();
        let params = store(&cfg, 4);
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qt = Tensor::randn(4, 8, 1.0, &mut rng);
        let refs: Vec<[f64; 3]> = (0..4).map(|i| [i as f64, -1.0, 0.0]).collect();
        let tpos = vec![[0.5, 0.0, 0.0], [2.0, 1.0, 0.0]];
        let feats = vec![vec![0.1; 8], vec![-0.3; 8]];
        let perm = [2usize, 0, 3, 1];
        let run = |g: &mut Graph, q: Tensor, refs: &[[f64; 3]]| {
            let q = g.constant(q);
            let pos = query_pos(g, &p, refs).unwrap();
            let tok = embed_tokens(g, &p, &feats, &tpos).unwrap();
            let geo = cross_geometry(g, refs, &tpos, 2.0).unwrap();
            let o = decoder_layer(g, &p, &cfg, 0, q, pos, tok.as_ref(), Some(&geo)).unwrap();
            g.value(o).clone()
        };
        let base = run(&mut g, qt.clone(), &refs);
        let pq = Tensor::from_rows(&perm.iter().map(|&i| qt.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let prefs: Vec<[f64; 3]> = perm.iter().map(|&i| refs[i]).collect();
        let out = run(&mut g, pq, &prefs);
        for (r, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((out.get(r, c) - base.get(src, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_gradient_check() {
        let cfg = small_cfg();
        let params = store(&cfg, 6);
        // Perturb the zero-initialized output layers so every path is live.
        let mut params = params;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v += 0.1 * rng.random::<f64>();
            }
        }
        let x = Tensor::randn(3, 8, 1.0, &mut rng);
        let err = grad_check(
            |g, x| {
                let p = params.bind(g, false);
                let (_, pos, tok, bias) = layer_inputs(g, &p, 3, 2, 11);
                decoder_layer(g, &p, &cfg, 0, x, pos, tok.as_ref(), bias.as_ref())
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
        // Parameter gradients, probed through one cross-attention weight.
        let w = params.get("dec.l0.ca.wk").unwrap().clone();
        let err = grad_check(
            |g, w| {
                let p = params.bind(g, false).with("dec.l0.ca.wk", w);
                let (q, pos, tok, bias) = layer_inputs(g, &p, 3, 2, 11);
                decoder_layer(g, &p, &cfg, 0, q, pos, tok.as_ref(), bias.as_ref())
            },
            &w,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_heads_decode_to_reference() {
        let cfg = small_cfg();
        let params = store(&cfg, 7);
        let (b, logits) = decode_heads(&[0.3; 8], [1.0, 2.0, 0.5], &params).unwrap();
        assert_eq!(b.center, [1.0, 2.0, 0.5]);
        assert_eq!(b.size, [1.0, 1.0, 1.0]);
        assert_eq!(b.velocity, [0.0, 0.0]);
        assert_eq!(logits.len(), 1);
        assert!((b.score - 0.01).abs() < 1e-12);
    }

    #[test]
    fn heading_from_sin_cos() {
        let mut raw = [0.0; BOX_DIM];
        raw[6] = 0.0;
        raw[7] = -1.0;
        let b = decode_box(&raw, [0.0; 3], &[0.0]);
        assert!((b.heading - std::f64::consts::PI).abs() < 1e-15);
        raw[3] = 1e6;
        raw[4] = -1e6;
        let b = decode_box(&raw, [0.0; 3], &[0.0]);
        assert!(b.size.iter().all(|s| *s > 0.0 && s.is_finite()));
    }

    #[test]
    fn encode_decode_round_trip() {
        let b = BoundingBox3D {
            center: [3.0, -2.0, 0.9],
            size: [1.8, 4.4, 1.6],
            heading: -2.5,
            velocity: [1.0, 0.5],
            score: 1.0,
            class_id: 0,
        };
        let r = [2.5, -1.0, 0.0];
        let back = decode_box(&encode_box(&b, r), r, &[40.0]);
        for (x, y) in back.to_array().iter().zip(b.to_array()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_track_embedding_is_identity() {
        let cfg = small_cfg();
        let params = store(&cfg, 8);
        let t: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        assert_eq!(apply_track_embedding(&t, &params).unwrap(), t);
    }

    #[test]
    fn track_embedding_gradient_accumulates_over_tracks() {
        let cfg = small_cfg();
        let mut params = store(&cfg, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        params.insert("dec.te.w2", Tensor::randn(8, 8, 0.3, &mut rng));
        let tracks = Tensor::randn(3, 8, 1.0, &mut rng);
        let e = params.get("dec.te.e").unwrap().clone();
        let err = grad_check(
            |g, e| {
                let p = params.bind(g, false).with("dec.te.e", e);
                let t = g.constant(tracks.clone());
                apply_track_embedding_graph(g, &p, t)
            },
            &e,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn detection_refs_prefer_tokens() {
        let cfg = small_cfg();
        let refs = detection_refs(&cfg, &[[10.0, 0.0, 1.0], [1.0, 1.0, 1.0]]);
        assert_eq!(refs.len(), 3);
        assert_eq!(refs[0], [1.0, 1.0, 1.0]);
        assert_eq!(refs[1], [10.0, 0.0, 1.0]);
        assert!(refs[2][0].is_finite());
    }

    #[test]
    fn mismatched_dims_rejected() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = attn(&mut g, 4, &mut rng);
        let q = g.constant(Tensor::zeros(2, 4));
        let k = g.constant(Tensor::zeros(3, 5));
        assert!(matches!(mha(&mut g, &a, q, k, k, 2, None), Err(Error::ShapeMismatch { .. })));
    }
}
