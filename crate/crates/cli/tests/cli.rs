use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use shed::model::{Model, ModelConfig};
use shed::raster;
use tempfile::TempDir;

const SMALL: &str = "model.n0=20\nmodel.stages=8,4\nmodel.d=32\nmodel.heads=2\nmodel.head_channels=8\n";

fn shed(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shed"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = shed(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the stderr text of a failing call.
fn fails(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = shed(dir, args);
    assert!(!out.status.success(), "{args:?} succeeded");
    (out.status.code().unwrap(), String::from_utf8(out.stderr).unwrap())
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    fs::read(a).unwrap() == fs::read(b).unwrap()
}

/// 2 scenes x 2 frames at 32x32 and a three-step run on them.
fn trained() -> TempDir {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "--out", "data", "--scenes", "2", "--frames-per-scene", "2", "--size", "32x32"]);
    fs::write(d.join("small.kv"), format!("{SMALL}train.steps=3\n")).unwrap();
    ok(d, &["train", "--data", "data", "--config", "small.kv", "--out", "run", "--checkpoint-every", "2"]);
    tmp
}

#[test]
fn gen_data_counts_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    for out in ["a", "b"] {
        ok(d, &["gen-data", "--out", out, "--scenes", "8", "--size", "32x32", "--seed", "3"]);
    }
    let manifest = fs::read_to_string(d.join("a/manifest.txt")).unwrap();
    let rows = manifest.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')).count();
    assert_eq!(rows, 32);
    for entry in fs::read_dir(d.join("a")).unwrap() {
        let name = entry.unwrap().file_name();
        assert!(same_bytes(&d.join("a").join(&name), &d.join("b").join(&name)), "{name:?}");
    }
}

#[test]
fn usage_errors_exit_2_with_one_line() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    for args in [
        &["gen-data", "--out", "x", "--size", "97x96"][..],
        &["gen-data", "--out", "x", "--bogus"],
        &["train", "--out", "x"],
        &["frobnicate"],
    ] {
        let (code, err) = fails(d, args);
        assert_eq!(code, 2, "{args:?}");
        assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
    }
    assert!(!d.join("x").exists());
}

#[test]
fn bad_config_key_exits_2() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "--out", "data", "--scenes", "1", "--frames-per-scene", "1", "--size", "32x32"]);
    fs::write(d.join("bad.kv"), "foo=1\n").unwrap();
    let (code, err) = fails(d, &["train", "--data", "data", "--config", "bad.kv", "--out", "r"]);
    assert_eq!(code, 2);
    assert!(err.contains("foo"));
    fs::write(d.join("bad.kv"), "model.stages=8,8\n").unwrap();
    assert_eq!(fails(d, &["train", "--data", "data", "--config", "bad.kv", "--out", "r"]).0, 2);
}

#[test]
fn missing_files_exit_3() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let (code, err) = fails(d, &["eval", "--ckpt", "nope.ckpt", "--data", "nodata", "--report", "r.csv"]);
    assert_eq!(code, 3);
    assert_eq!(err.trim_end().lines().count(), 1);
    fs::write(d.join("junk.ckpt"), "not a checkpoint").unwrap();
    let (code, _) = fails(d, &["infer", "--ckpt", "junk.ckpt", "--image", "i.ppm", "--out-depth", "o"]);
    assert_eq!(code, 3);
}

#[test]
fn non_finite_checkpoint_exits_4() {
    let tmp = trained();
    let d = tmp.path();
    let cfg = ModelConfig::from_kv(&shed::kv::parse(SMALL).unwrap()).unwrap();
    let mut m = Model::<f32>::init(ModelConfig { height: 32, width: 32, ..cfg }, 0).unwrap();
    m.params.get_mut("head.conv0.b").unwrap().data_mut()[0] = f32::NAN;
    m.checkpoint().save(&d.join("nan.ckpt")).unwrap();
    let (code, _) = fails(d, &["infer", "--ckpt", "nan.ckpt", "--image", "data/s0000_f00.ppm", "--out-depth", "o"]);
    assert_eq!(code, 4);
}

#[test]
fn train_writes_curve_and_checkpoints_deterministically() {
    let tmp = trained();
    let d = tmp.path();
    let curve = fs::read_to_string(d.join("run/loss.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("step,loss"));
    assert_eq!(curve.lines().count(), 4);
    for f in ["final.ckpt", "step_000002.ckpt", "step_000003.ckpt", "config.kv"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    ok(d, &["train", "--data", "data", "--config", "small.kv", "--out", "again", "--checkpoint-every", "2"]);
    assert!(same_bytes(&d.join("run/final.ckpt"), &d.join("again/final.ckpt")));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = trained();
    let d = tmp.path();
    ok(d, &["train", "--data", "data", "--config", "small.kv", "--out", "run", "--resume", "run/step_000002.ckpt"]);
    let resumed = fs::read_to_string(d.join("run/loss.csv")).unwrap();
    assert_eq!(resumed.lines().count(), 4, "{resumed}");
    ok(d, &["train", "--data", "data", "--config", "small.kv", "--out", "fresh", "--checkpoint-every", "2"]);
    assert_eq!(resumed, fs::read_to_string(d.join("fresh/loss.csv")).unwrap());
    assert!(same_bytes(&d.join("run/final.ckpt"), &d.join("fresh/final.ckpt")));
    let (code, _) = fails(
        d,
        &["train", "--data", "data", "--out", "run", "--resume", "run/final.ckpt", "--set", "model.d=16"],
    );
    assert_eq!(code, 2);
}

#[test]
fn eval_reports_models_and_ground_truth() {
    let tmp = trained();
    let d = tmp.path();
    let summary = ok(
        d,
        &["eval", "--gt-as-pred", "--ckpt", "run/final.ckpt", "--ckpt", "run/step_000002.ckpt", "--data", "data", "--report", "r.csv"],
    );
    let kv = shed::kv::parse(&summary).unwrap();
    assert_eq!(kv["gt.mean.abs_rel"], "0.000000");
    assert_eq!(kv["gt.mean.delta1"], "1.000000");
    assert_eq!(kv["gt.mean.miou"], "1.000000");
    assert!(kv.contains_key("run/final.ckpt.mean.abs_rel"));
    let csv = fs::read_to_string(d.join("r.csv")).unwrap();
    assert!(csv.starts_with("model,sample,scene,frame,abs_rel,"));
    // header, then 4 samples and a mean row per model
    assert_eq!(csv.lines().count(), 1 + 3 * 5);
    assert_eq!(csv.lines().filter(|l| l.starts_with("gt,mean,")).count(), 1);
}

#[test]
fn infer_writes_requested_size() {
    let tmp = trained();
    let d = tmp.path();
    ok(d, &["infer", "--ckpt", "run/final.ckpt", "--image", "data/s0000_f00.ppm", "--out-depth", "o.depth", "--out-size", "64x64"]);
    let depth = raster::read_depth(&mut fs::File::open(d.join("o.depth")).unwrap()).unwrap();
    assert_eq!((depth.height, depth.width), (64, 64));
    assert!(depth.values.iter().all(|v| v.is_finite() && *v > 0.0));
    ok(d, &["infer", "--ckpt", "run/final.ckpt", "--image", "data/s0000_f00.ppm", "--out-depth", "n.depth"]);
    let native = raster::read_depth(&mut fs::File::open(d.join("n.depth")).unwrap()).unwrap();
    assert_eq!((native.height, native.width), (32, 32));
}

#[test]
fn viz_writes_one_file_per_level_plus_two() {
    let tmp = trained();
    let d = tmp.path();
    for out in ["v1", "v2"] {
        ok(d, &["viz", "--ckpt", "run/final.ckpt", "--image", "data/s0000_f00.ppm", "--out-dir", out]);
    }
    let mut names: Vec<String> =
        fs::read_dir(d.join("v1")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    // two pooling stages: levels 0..=2
    assert_eq!(names, ["depth.ppm", "edges.ppm", "level_0.ppm", "level_1.ppm", "level_2.ppm"]);
    for n in &names {
        assert!(same_bytes(&d.join("v1").join(n), &d.join("v2").join(n)), "{n}");
        let im = raster::read_ppm(&mut fs::File::open(d.join("v1").join(n)).unwrap()).unwrap();
        assert_eq!((im.height, im.width), (32, 32));
    }
}

fn ratio(text: &str) -> f64 {
    text.lines().find_map(|l| l.strip_prefix("ratio=")).unwrap().parse().unwrap()
}

#[test]
fn flops_table_and_ratio() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(d.join("p.kv"), "model.n0=576\nmodel.stages=256,128,64\nmodel.d=384\nmodel.heads=6\n").unwrap();
    let out = ok(d, &["flops", "--config", "p.kv", "--baseline", "flat"]);
    assert!(ratio(&out) < 1.0);
    let totals: Vec<u64> = out
        .lines()
        .skip(1)
        .take_while(|l| !l.contains('='))
        .map(|l| l.split_whitespace().last().unwrap().parse().unwrap())
        .collect();
    assert_eq!(totals.len(), 3);
    assert!(totals.windows(2).all(|w| w[1] < w[0]));
    let same = ok(d, &["flops", "--config", "p.kv", "--baseline", "hierarchical"]);
    assert_eq!(ratio(&same), 1.0);
    fs::write(d.join("bad.kv"), "model.stages=4,8\n").unwrap();
    assert_eq!(fails(d, &["flops", "--config", "bad.kv"]).0, 2);
}
