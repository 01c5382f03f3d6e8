use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = "\
sim.num_frames = 6
sim.d_a = 16
sim.min_objects = 2
sim.max_objects = 3
model.decoder.d_l = 16
model.decoder.h = 2
model.decoder.num_layers = 1
model.decoder.num_det_queries = 6
model.decoder.ffn_width = 16
lmm.h = 2
gen.num_scenes = 3
train.epochs = 2
train.batch_size = 2
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lmtrack"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Lab {
    dir: TempDir,
}

impl Lab {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn gen(&self, out: &str) {
        ok(&["gen", "--config", &self.s("tiny.toml"), "--seed", "3", "--out", &self.s(out)]);
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn same_tree(a: &Path, b: &Path) {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names {
        let (pa, pb) = (a.join(&n), b.join(&n));
        if pa.is_dir() {
            same_tree(&pa, &pb);
        } else {
            assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap(), "{n:?} differs");
        }
    }
}

#[test]
fn dump_defaults_round_trips_through_a_config_file() {
    let lab = Lab::new();
    let dump = ok(&["--dump-defaults"]).stdout;
    assert!(String::from_utf8_lossy(&dump).contains("model.decoder.d_l = 64"));
    fs::write(lab.path("dump.toml"), &dump).unwrap();
    let again = ok(&["--dump-defaults", "--config", &lab.s("dump.toml")]).stdout;
    assert_eq!(dump, again);
}

#[test]
fn invalid_config_names_the_field() {
    let out = run(&["--dump-defaults", "--set", "model.decoder.h=5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.decoder.h"));
    let out = run(&["--dump-defaults", "--set", "model.decoder.nope=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_writes_scenes_and_manifest_deterministically() {
    let lab = Lab::new();
    lab.gen("a");
    lab.gen("b");
    same_tree(&lab.path("a"), &lab.path("b"));
    let m = read_json(&lab.path("a/manifest.json"));
    assert_eq!(m["num_scenes"], 3);
    assert_eq!(m["seed"], 3);
    assert_eq!(m["files"].as_array().unwrap().len(), 3);
    assert_eq!(fs::read_dir(lab.path("a")).unwrap().count(), 4);
    let scene = fs::read_to_string(lab.path("a/scene_0000.jsonl")).unwrap();
    // Header plus one line per frame.
    assert_eq!(scene.lines().count(), 7);
}

#[test]
fn default_gen_count() {
    let lab = Lab::new();
    let out = ok(&["--dump-defaults"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("gen.num_scenes = 200"));
    // The full default set is slow to write in a test; check a scaled count instead.
    ok(&["gen", "--out", &lab.s("d"), "--num-scenes", "5", "--set", "sim.num_frames=40"]);
    let m = read_json(&lab.path("d/manifest.json"));
    assert_eq!(m["files"].as_array().unwrap().len(), 5);
    let scene = fs::read_to_string(lab.path("d/scene_0004.jsonl")).unwrap();
    assert_eq!(scene.lines().count(), 41);
}

#[test]
fn train_and_eval_are_deterministic() {
    let lab = Lab::new();
    lab.gen("scenes");
    let cfg = lab.s("tiny.toml");
    for run_dir in ["t1", "t2"] {
        ok(&["train", "--config", &cfg, "--scenes", &lab.s("scenes"), "--out", &lab.s(run_dir)]);
    }
    same_tree(&lab.path("t1"), &lab.path("t2"));
    let loss = read_json(&lab.path("t1/loss.json"));
    assert_eq!(loss["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(loss["seed"], 0);
    assert!(loss["config_hash"].is_string());

    for (run_dir, workers) in [("e1", "1"), ("e2", "2")] {
        ok(&[
            "eval",
            "--config",
            &cfg,
            "--workers",
            workers,
            "--checkpoint",
            &lab.s("t1/checkpoint.json"),
            "--scenes",
            &lab.s("scenes"),
            "--out",
            &lab.s(run_dir),
        ]);
    }
    same_tree(&lab.path("e1"), &lab.path("e2"));
    let report = read_json(&lab.path("e1/report.json"));
    for key in ["amota", "amotp", "recall", "mota", "mt", "ml", "frag", "ids", "fp", "fn", "num_gt", "thresholds"] {
        assert!(!report["report"][key].is_null(), "missing {key}");
    }
    // 40 thresholds: recall targets 1/39, …, 1.
    assert_eq!(report["report"]["thresholds"].as_array().unwrap().len(), 39);
    let per_scene = fs::read_to_string(lab.path("e1/per_scene.csv")).unwrap();
    assert_eq!(per_scene.lines().count(), 4);
    assert_eq!(fs::read_dir(lab.path("e1/results")).unwrap().count(), 3);
}

#[test]
fn zero_epochs_writes_initial_checkpoint() {
    let lab = Lab::new();
    lab.gen("scenes");
    ok(&[
        "train",
        "--config",
        &lab.s("tiny.toml"),
        "--epochs",
        "0",
        "--scenes",
        &lab.s("scenes"),
        "--out",
        &lab.s("t"),
    ]);
    assert!(lab.path("t/checkpoint.json").exists());
    let loss = read_json(&lab.path("t/loss.json"));
    assert!(loss["epochs"].as_array().unwrap().is_empty());
}

#[test]
fn overfits_a_single_scene() {
    let lab = Lab::new();
    ok(&["gen", "--config", &lab.s("tiny.toml"), "--num-scenes", "1", "--out", &lab.s("one")]);
    let (cfg, one, out) = (lab.s("tiny.toml"), lab.s("one"), lab.s("t"));
    let mut args = vec!["train", "--config", &cfg, "--epochs", "200", "--scenes", &one, "--out", &out];
    // Every window of the scene each epoch, no augmentation, no decay.
    for kv in [
        "train.batch_size=1",
        "train.windows_per_epoch=4",
        "train.lr=3e-3",
        "train.weight_decay=0",
        "tracker.p_drop=0",
        "tracker.p_fp=0",
    ] {
        args.extend(["--set", kv]);
    }
    ok(&args);
    let loss = read_json(&lab.path("t/loss.json"));
    let epochs = loss["epochs"].as_array().unwrap();
    let first = epochs[0]["mean_loss"].as_f64().unwrap();
    let last = epochs.last().unwrap()["mean_loss"].as_f64().unwrap();
    assert!(last < 0.05 * first, "{first} -> {last}");
}

#[test]
fn oracle_eval_is_perfect() {
    let lab = Lab::new();
    lab.gen("scenes");
    ok(&["eval", "--config", &lab.s("tiny.toml"), "--oracle", "--scenes", &lab.s("scenes"), "--out", &lab.s("o")]);
    let r = read_json(&lab.path("o/report.json"));
    assert_eq!(r["report"]["amota"], 1.0);
    assert_eq!(r["report"]["ids"], 0);
}

#[test]
fn eval_rejects_mismatched_checkpoint() {
    let lab = Lab::new();
    lab.gen("scenes");
    ok(&["train", "--config", &lab.s("tiny.toml"), "--epochs", "0", "--scenes", &lab.s("scenes"), "--out", &lab.s("t")]);
    let out = run(&[
        "eval",
        "--config",
        &lab.s("tiny.toml"),
        "--set",
        "model.use_lmm=false",
        "--checkpoint",
        &lab.s("t/checkpoint.json"),
        "--scenes",
        &lab.s("scenes"),
        "--out",
        &lab.s("e"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
}

#[test]
fn eval_rejects_empty_scene_set() {
    let lab = Lab::new();
    fs::create_dir_all(lab.path("empty")).unwrap();
    fs::write(lab.path("empty/manifest.json"), r#"{"files": []}"#).unwrap();
    let out = run(&["eval", "--oracle", "--scenes", &lab.s("empty"), "--out", &lab.s("o")]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scene set is empty"));
}

#[test]
fn missing_scenes_is_an_io_error() {
    let lab = Lab::new();
    let out = run(&["eval", "--oracle", "--scenes", &lab.s("nope"), "--out", &lab.s("o")]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn ablate_emits_one_row_per_variant() {
    let lab = Lab::new();
    lab.gen("scenes");
    ok(&[
        "ablate",
        "--config",
        &lab.s("tiny.toml"),
        "--epochs",
        "1",
        "--axis",
        "model.use_lmm=false|model.use_lmm=true",
        "--scenes",
        &lab.s("scenes"),
        "--out",
        &lab.s("ab"),
    ]);
    let csv = fs::read_to_string(lab.path("ab/ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].contains(",false,-,0,16,0,"), "{}", rows[1]);
    assert!(rows[2].contains(",true,multi_head,2,16,128,"), "{}", rows[2]);
    let md = fs::read_to_string(lab.path("ab/ablation.md")).unwrap();
    assert!(md.contains("2·8²"));
}

#[test]
fn ablate_rejects_bad_axis() {
    let lab = Lab::new();
    lab.gen("scenes");
    for axis in ["lmm.h", "lmm.nope=3"] {
        let out = run(&["ablate", "--config", &lab.s("tiny.toml"), "--axis", axis, "--scenes", &lab.s("scenes"), "--out", &lab.s("ab")]);
        assert_eq!(out.status.code(), Some(2), "{axis}");
    }
}
