//! Train-and-evaluate runs over configuration variants, and the tables
//! they produce.

use serde::Serialize;
use serde_json::Value;

use crate::config::{parse_axis, RunConfig};
use crate::error::Result;
use crate::eval::{evaluate, EvalOutput};
use crate::simulator::Scene;
use crate::tensor::ParamStore;
use crate::tracker::init_model;
use crate::train::{train_model, EpochLog, TrainReport};

/// A named set of overrides applied to a base configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<(String, Value)>,
}

impl Variant {
    pub fn new(name: impl Into<String>, overrides: &[(&str, Value)]) -> Self {
        Self {
            name: name.into(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }
}

/// Variants from an axis string (see [`parse_axis`]), named by their
/// assignments.
pub fn variants_from_axis(spec: &str) -> Result<Vec<Variant>> {
    Ok(parse_axis(spec)?
        .into_iter()
        .map(|o| {
            let name = if o.is_empty() {
                "base".to_string()
            } else {
                o.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
            };
            Variant { name, overrides: o }
        })
        .collect())
}

/// Latent motion model architectures: none, full-rank `32²` and `96²`, and
/// multi-head `16·16²`, `4·64²`, `8·32²`. Latent width follows the matrix
/// size, so full-rank rows shrink the decoder.
pub fn lmm_architecture_variants() -> Vec<Variant> {
    let full = |d: usize| {
        Variant::new(
            format!("full_rank {d}^2"),
            &[
                ("model.use_lmm", Value::Bool(true)),
                ("lmm.variant", "full_rank".into()),
                ("decoder.d_l", d.into()),
            ],
        )
    };
    let mh = |h: usize, hd: usize| {
        Variant::new(
            format!("multi_head {h}x{hd}^2"),
            &[
                ("model.use_lmm", Value::Bool(true)),
                ("lmm.variant", "multi_head".into()),
                ("lmm.h", h.into()),
                ("decoder.d_l", (h * hd).into()),
            ],
        )
    };
    vec![
        Variant::new("no lmm", &[("model.use_lmm", Value::Bool(false))]),
        full(32),
        full(96),
        mh(16, 16),
        mh(4, 64),
        mh(8, 32),
    ]
}

/// The `(separate, share, query features)` grid of transform
/// representations.
pub fn lmm_application_variants() -> Vec<Variant> {
    [
        (false, true, false),
        (false, true, true),
        (true, false, false),
        (true, false, true),
        (true, true, true),
        (true, true, false),
    ]
    .into_iter()
    .map(|(sep, share, feats)| {
        let mode = if sep { "separate" } else { "merged" };
        Variant::new(
            format!("{mode} share={share} feats={feats}"),
            &[
                ("model.use_lmm", Value::Bool(true)),
                ("lmm.apply_mode", mode.into()),
                ("lmm.share_params", share.into()),
                ("lmm.use_query_feature", feats.into()),
            ],
        )
    })
    .collect()
}

/// Trains from `init` (or fresh parameters) and evaluates.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    train: &[Scene],
    eval: &[Scene],
    init: Option<&ParamStore>,
    progress: impl FnMut(&EpochLog),
) -> Result<(ParamStore, TrainReport, EvalOutput)> {
    let d_a = train.first().map_or(cfg.sim.d_a, |s| s.meta.feature_dim);
    let mut params = init_model(&cfg.model, d_a, cfg.seed)?;
    if let Some(init) = init {
        params.load_matching(init);
    }
    let report = train_model(&mut params, &cfg.model, &cfg.tracker, &cfg.train, train, cfg.seed, progress)?;
    let out = evaluate(&params, &cfg.model, &cfg.tracker, eval, &cfg.eval)?;
    Ok((params, report, out))
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub use_lmm: bool,
    pub lmm_variant: String,
    pub heads: usize,
    pub d_l: usize,
    /// Predicted latent matrix entries; 0 without a motion model.
    pub k_size: usize,
    pub apply_mode: String,
    pub share_params: bool,
    pub use_query_feature: bool,
    pub use_track_embedding: bool,
    pub num_params: usize,
    pub final_loss: f64,
    pub amota: f64,
    pub amotp: f64,
    pub recall: f64,
    pub mota: f64,
    pub ids: usize,
    pub frag: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn snake(v: impl Serialize) -> String {
    match serde_json::to_value(v) {
        Ok(Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

impl AblationRow {
    pub fn new(variant: &str, cfg: &RunConfig, params: &ParamStore, train: &TrainReport, eval: &EvalOutput) -> Self {
        let m = &cfg.model;
        let r = &eval.report;
        Self {
            variant: variant.to_string(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            use_lmm: m.use_lmm,
            lmm_variant: if m.use_lmm { snake(m.lmm.variant) } else { "-".into() },
            heads: if m.use_lmm { m.lmm.heads() } else { 0 },
            d_l: m.decoder.d_l,
            k_size: if m.use_lmm { m.lmm.k_size() } else { 0 },
            apply_mode: if m.use_lmm { snake(m.lmm.apply_mode) } else { "-".into() },
            share_params: m.lmm.share_params,
            use_query_feature: m.lmm.use_query_feature,
            use_track_embedding: m.use_track_embedding,
            num_params: params.num_scalars(),
            final_loss: train.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
            amota: r.amota,
            amotp: r.amotp,
            recall: r.recall,
            mota: r.mota,
            ids: r.ids,
            frag: r.frag,
            fp: r.fp,
            fn_: r.fn_,
        }
    }
}

pub const TABLE_HEADER: &str = "variant,seed,config_hash,use_lmm,lmm_variant,heads,d_l,k_size,apply_mode,share_params,use_query_feature,use_track_embedding,num_params,final_loss,amota,amotp,recall,mota,ids,frag,fp,fn";

pub fn table_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "\"{}\",{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.variant.replace('"', "'"),
            r.seed,
            r.config_hash,
            r.use_lmm,
            r.lmm_variant,
            r.heads,
            r.d_l,
            r.k_size,
            r.apply_mode,
            r.share_params,
            r.use_query_feature,
            r.use_track_embedding,
            r.num_params,
            r.final_loss,
            r.amota,
            r.amotp,
            r.recall,
            r.mota,
            r.ids,
            r.frag,
            r.fp,
            r.fn_
        ));
    }
    s
}

fn mark(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

pub fn table_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "| variant | seed | lmm | heads | \\|K\\| | separate | share | feats | AMOTA | AMOTP | IDS | FRAG |\n\
         |---|---|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let k = if r.use_lmm {
            if r.heads > 1 {
                let hd = r.d_l / r.heads;
                format!("{}·{}²", r.heads, hd)
            } else {
                format!("{}²", r.d_l)
            }
        } else {
            "-".into()
        };
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {:.3} | {:.3} | {} | {} |\n",
            r.variant,
            r.seed,
            mark(r.use_lmm),
            r.heads,
            k,
            if r.use_lmm { mark(r.apply_mode == "separate") } else { "-" },
            if r.use_lmm { mark(r.share_params) } else { "-" },
            if r.use_lmm { mark(r.use_query_feature) } else { "-" },
            r.amota,
            r.amotp,
            r.ids,
            r.frag
        ));
    }
    s
}
