use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use lmtrack::config::{parse_assignment, RunConfig};
use lmtrack::eval::{evaluate, evaluate_oracle, EvalOutput};
use lmtrack::experiment::{
    lmm_application_variants, lmm_architecture_variants, table_csv, table_markdown,
    train_and_evaluate, variants_from_axis, AblationRow, Variant,
};
use lmtrack::hashing::{derive_seed, sha256_hex};
use lmtrack::metrics::MetricsReport;
use lmtrack::simulator::{gen_scene, Scene};
use lmtrack::tensor::{Checkpoint, CheckpointMeta, ParamStore};
use lmtrack::tracker::init_model;
use lmtrack::train::train_model;
use lmtrack::Error;

#[derive(Parser)]
#[command(name = "lmtrack", version, about = "Synthetic 3D multi-object tracking with latent motion models")]
struct Cli {
    /// Config file of `key.path = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one config field, e.g. `--set lmm.h=8`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for parallel work (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dump_defaults: bool,
    #[command(subcommand)]
    cmd: Option<Cmd>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Latent motion model architectures.
    Architecture,
    /// Ways of applying the latent transform.
    Application,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic scenes.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_scenes: Option<usize>,
    },
    /// Train a tracker on generated scenes.
    Train {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Fit the latent motion model to recorded latents before training.
        #[arg(long)]
        pretrain_lmm: bool,
        /// Start from the matching parameters of this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Track every scene and score the results.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score ground truth replayed as tracker output.
        #[arg(long)]
        oracle: bool,
    },
    /// Train and evaluate each variant of an axis.
    Ablate {
        /// Variants separated by `|`, each a comma-separated list of
        /// `key=value`; `none` is the base configuration.
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        axis: Option<String>,
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        scenes: PathBuf,
        /// Evaluation scenes; without it the last quarter of `--scenes` is held out.
        #[arg(long)]
        eval_scenes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Runs per variant, seeded `seed, seed+1, ...`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        init: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidConfig { .. }
                | Error::InvalidAxis(_)
                | Error::ConfigHashMismatch { .. }
                | Error::ConfigMismatch(_) => 2,
                Error::Io(_)
                | Error::Json(_)
                | Error::Format(_)
                | Error::Checkpoint(_)
                | Error::MissingParam(_)
                | Error::EmptyScene
                | Error::EmptySceneSet
                | Error::EmptyDataset
                | Error::FrameSetMismatch(_) => 3,
                _ => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    let mut overrides = cli.set.iter().map(|s| parse_assignment(s)).collect::<lmtrack::Result<Vec<_>>>()?;
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.into()));
    }
    Ok(base.with_overrides(&overrides)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(&cli)?;
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    if cli.dump_defaults {
        print!("{}", cfg.dump());
        return Ok(());
    }
    match cli.cmd {
        None => bail!("no subcommand given (try --help)"),
        Some(Cmd::Gen { out, num_scenes }) => cmd_gen(&cfg, &out, num_scenes),
        Some(Cmd::Train {
            scenes,
            out,
            epochs,
            pretrain_lmm,
            init,
        }) => {
            let mut cfg = cfg;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.train.pretrain_lmm |= pretrain_lmm;
            cmd_train(&cfg, &scenes, &out, init.as_deref())
        }
        Some(Cmd::Eval {
            checkpoint,
            scenes,
            out,
            oracle,
        }) => cmd_eval(&cfg, checkpoint.as_deref(), &scenes, &out, oracle),
        Some(Cmd::Ablate {
            axis,
            preset,
            scenes,
            eval_scenes,
            out,
            seeds,
            epochs,
            init,
        }) => {
            let mut cfg = cfg;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let variants = match (axis, preset) {
                (Some(a), _) => variants_from_axis(&a)?,
                (None, Some(Preset::Architecture)) => lmm_architecture_variants(),
                (None, Some(Preset::Application)) => lmm_application_variants(),
                (None, None) => unreachable!("clap requires one of --axis/--preset"),
            };
            cmd_ablate(&cfg, &variants, &scenes, eval_scenes.as_deref(), &out, seeds, init.as_deref())
        }
    }
}

fn write_json(path: &Path, v: &Value) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_gen(cfg: &RunConfig, out: &Path, num_scenes: Option<usize>) -> anyhow::Result<()> {
    let n = num_scenes.unwrap_or(cfg.gen.num_scenes);
    fs::create_dir_all(out).map_err(Error::from)?;
    let mut files = Vec::with_capacity(n);
    for i in 0..n {
        let seed = derive_seed(cfg.seed, i as u64);
        let scene = gen_scene(&cfg.sim, seed)?;
        let name = format!("scene_{i:04}.jsonl");
        let text = scene.to_jsonl()?;
        fs::write(out.join(&name), &text).map_err(Error::from)?;
        files.push(json!({ "file": name, "scene_seed": seed, "sha256": sha256_hex(text.as_bytes()) }));
    }
    write_json(
        &out.join("manifest.json"),
        &json!({
            "config_hash": cfg.hash(),
            "sim_config_hash": cfg.sim_hash(),
            "seed": cfg.seed,
            "num_scenes": n,
            "files": files,
        }),
    )?;
    eprintln!("wrote {n} scenes to {}", out.display());
    Ok(())
}

/// Scenes listed in a directory's manifest, in manifest order.
fn load_scenes(dir: &Path) -> anyhow::Result<Vec<Scene>> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Value = serde_json::from_str(&fs::read_to_string(&manifest_path).map_err(Error::from).with_context(|| format!("reading {}", manifest_path.display()))?)
        .map_err(Error::from)?;
    let files = manifest["files"]
        .as_array()
        .ok_or_else(|| Error::Format(format!("{}: no file list", manifest_path.display())))?;
    let mut scenes = Vec::with_capacity(files.len());
    for f in files {
        let name = f["file"]
            .as_str()
            .ok_or_else(|| Error::Format("manifest entry without file name".into()))?;
        let path = dir.join(name);
        let file = fs::File::open(&path).map_err(Error::from).with_context(|| format!("opening {}", path.display()))?;
        scenes.push(Scene::read_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?);
    }
    if scenes.is_empty() {
        return Err(Error::EmptySceneSet.into());
    }
    Ok(scenes)
}

fn load_init(path: &Path) -> anyhow::Result<ParamStore> {
    Ok(Checkpoint::load(path)
        .with_context(|| format!("loading {}", path.display()))?
        .params)
}

fn cmd_train(cfg: &RunConfig, scenes_dir: &Path, out: &Path, init: Option<&Path>) -> anyhow::Result<()> {
    let scenes = load_scenes(scenes_dir)?;
    fs::create_dir_all(out).map_err(Error::from)?;
    let d_a = scenes[0].meta.feature_dim;
    let mut params = init_model(&cfg.model, d_a, cfg.seed)?;
    if let Some(p) = init {
        let loaded = params.load_matching(&load_init(p)?);
        eprintln!("initialized {loaded} tensors from {}", p.display());
    }
    let report = train_model(&mut params, &cfg.model, &cfg.tracker, &cfg.train, &scenes, cfg.seed, |e| {
        eprintln!("epoch {:>3}  loss {:.4}  lr {:.2e}", e.epoch, e.mean_loss, e.lr)
    })?;
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            config_hash: cfg.model_hash(),
            step: report.steps as u64,
            seed: cfg.seed,
        },
        params,
    };
    ckpt.save(&out.join("checkpoint.json"))?;
    fs::write(out.join("config.toml"), cfg.dump()).map_err(Error::from)?;
    write_json(
        &out.join("loss.json"),
        &json!({
            "config_hash": cfg.hash(),
            "model_hash": cfg.model_hash(),
            "seed": cfg.seed,
            "steps": report.steps,
            "epochs": report.epochs,
            "pretrain": report.pretrain,
        }),
    )?;
    let mut csv = String::from("epoch,mean_loss,lr\n");
    for e in &report.epochs {
        csv.push_str(&format!("{},{},{}\n", e.epoch, e.mean_loss, e.lr));
    }
    fs::write(out.join("loss.csv"), csv).map_err(Error::from)?;
    if let Some(p) = &report.pretrain {
        let mut csv = String::from("step,mse\n");
        for (i, v) in p.history.iter().enumerate() {
            csv.push_str(&format!("{i},{v}\n"));
        }
        fs::write(out.join("pretrain_loss.csv"), csv).map_err(Error::from)?;
    }
    eprintln!("wrote checkpoint to {}", out.display());
    Ok(())
}

fn write_eval(cfg: &RunConfig, seed: u64, out: &Path, res: &EvalOutput) -> anyhow::Result<()> {
    fs::create_dir_all(out.join("results")).map_err(Error::from)?;
    write_json(
        &out.join("report.json"),
        &json!({
            "config_hash": cfg.hash(),
            "model_hash": cfg.model_hash(),
            "seed": seed,
            "num_scenes": res.per_scene.len(),
            "report": res.report,
        }),
    )?;
    let mut per_scene = format!("scene,{}\n", MetricsReport::CSV_HEADER);
    for (i, r) in res.per_scene.iter().enumerate() {
        per_scene.push_str(&format!("{i},{}\n", r.csv_row()));
    }
    fs::write(out.join("per_scene.csv"), per_scene).map_err(Error::from)?;
    let mut thr = String::from("recall_target,score_threshold,recall,motar,motp,mota,tp,fp,fn,ids\n");
    for t in &res.report.thresholds {
        thr.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            t.recall_target,
            t.score_threshold.map_or(String::new(), |v| v.to_string()),
            t.recall,
            t.motar,
            t.motp,
            t.mota,
            t.tp,
            t.fp,
            t.fn_,
            t.ids
        ));
    }
    fs::write(out.join("thresholds.csv"), thr).map_err(Error::from)?;
    for (i, r) in res.results.iter().enumerate() {
        let path = out.join("results").join(format!("scene_{i:04}.jsonl"));
        let mut w = BufWriter::new(fs::File::create(&path).map_err(Error::from)?);
        r.write_jsonl(&mut w)?;
        w.flush().map_err(Error::from)?;
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, scenes_dir: &Path, out: &Path, oracle: bool) -> anyhow::Result<()> {
    let scenes = load_scenes(scenes_dir)?;
    let (res, seed) = if oracle {
        (evaluate_oracle(&scenes, &cfg.eval)?, cfg.seed)
    } else {
        let path = checkpoint.expect("clap requires --checkpoint without --oracle");
        let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        if ckpt.meta.config_hash != cfg.model_hash() {
            return Err(Error::ConfigHashMismatch {
                expected: cfg.model_hash(),
                found: ckpt.meta.config_hash,
            }
            .into());
        }
        let expected = match ckpt.params.get("dec.tok.w") {
            Ok(w) => w.rows(),
            Err(_) => cfg.model.decoder.d_l,
        };
        if expected != scenes[0].meta.feature_dim {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint expects {expected}-dim token features, scenes have {}",
                scenes[0].meta.feature_dim
            ))
            .into());
        }
        (evaluate(&ckpt.params, &cfg.model, &cfg.tracker, &scenes, &cfg.eval)?, ckpt.meta.seed)
    };
    write_eval(cfg, seed, out, &res)?;
    let r = &res.report;
    println!(
        "amota {:.4}  amotp {:.4}  recall {:.4}  mota {:.4}  ids {}  frag {}  mt {}  ml {}  fp {}  fn {}",
        r.amota, r.amotp, r.recall, r.mota, r.ids, r.frag, r.mt, r.ml, r.fp, r.fn_
    );
    Ok(())
}

fn cmd_ablate(
    base: &RunConfig,
    variants: &[Variant],
    scenes_dir: &Path,
    eval_dir: Option<&Path>,
    out: &Path,
    seeds: u64,
    init: Option<&Path>,
) -> anyhow::Result<()> {
    let mut train = load_scenes(scenes_dir)?;
    let eval = match eval_dir {
        Some(d) => load_scenes(d)?,
        None => {
            if train.len() < 2 {
                return Err(Error::EmptySceneSet.into());
            }
            let held = (train.len() / 4).max(1);
            train.split_off(train.len() - held)
        }
    };
    let init = init.map(load_init).transpose()?;
    // Resolve every variant before spending time on training.
    let cfgs = variants
        .iter()
        .map(|v| base.with_overrides(&v.overrides))
        .collect::<lmtrack::Result<Vec<_>>>()?;
    fs::create_dir_all(out).map_err(Error::from)?;
    let mut rows = Vec::new();
    for (v, cfg) in variants.iter().zip(&cfgs) {
        for s in 0..seeds {
            let cfg = RunConfig {
                seed: base.seed + s,
                ..*cfg
            };
            eprintln!("variant `{}` seed {}", v.name, cfg.seed);
            let (params, report, res) = train_and_evaluate(&cfg, &train, &eval, init.as_ref(), |_| {})?;
            let row = AblationRow::new(&v.name, &cfg, &params, &report, &res);
            eprintln!("  amota {:.4}  ids {}", row.amota, row.ids);
            rows.push(row);
            fs::write(out.join("ablation.csv"), table_csv(&rows)).map_err(Error::from)?;
        }
    }
    fs::write(out.join("ablation.md"), table_markdown(&rows)).map_err(Error::from)?;
    write_json(
        &out.join("ablation.json"),
        &json!({ "config_hash": base.hash(), "seed": base.seed, "rows": rows }),
    )?;
    print!("{}", table_markdown(&rows));
    Ok(())
}
