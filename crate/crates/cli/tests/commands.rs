use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use avatarfield::body::TriMesh;
use avatarfield::renderer::io::read_png;
use avatarfield::scene::Manifest;

const SCENE: &str = r#"
[rig]
count = 4

[render]
resolution = 12
n_steps = 8
"#;

const TRAIN: &str = r#"
[field]
resolution = 8
channels = 4
pe_levels = 2
style_dim = 2
deform_hidden = [8]
color_hidden = [8]
sdf_hidden = [8]

[fit]
rays_per_step = 32
n_steps = 8
chunk_rays = 16
eikonal_uniform = 4
eikonal_near_surface = 4
surface_points = 8
surface_pool = 64
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avatarfield")).current_dir(dir).env("AVATARFIELD_THREADS", "1").args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("scene.toml"), SCENE).unwrap();
    fs::write(dir.path().join("train.toml"), TRAIN).unwrap();
    dir
}

#[test]
fn make_body_writes_mesh_description_and_preview() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["make-body", "--config", "scene.toml", "--out", "body"]);
    let mesh = TriMesh::read_obj(&d.join("body/body.obj")).unwrap();
    let desc: toml::Value = toml::from_str(&fs::read_to_string(d.join("body/body.toml")).unwrap()).unwrap();
    assert_eq!(desc["vertex_count"].as_integer().unwrap() as usize, mesh.vertices.len());
    let strip = read_png(&d.join("body/turntable.png")).unwrap();
    assert_eq!((strip.width, strip.height), (8 * 12, 12));
    let hits = strip.hit_mask().iter().filter(|h| **h).count();
    assert!(hits as f64 >= 0.01 * strip.len() as f64);
}

#[test]
fn invalid_joint_count_is_a_config_error() {
    let dir = setup();
    fs::write(dir.path().join("bad.toml"), "[body]\njoint_count = 1\n").unwrap();
    let out = run(dir.path(), &["make-body", "--config", "bad.toml", "--out", "body"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("joint_count"));
}

#[test]
fn dataset_is_complete_and_deterministic_and_scores_perfectly_against_itself() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["make-dataset", "--config", "scene.toml", "--out", "a"]);
    ok(d, &["make-dataset", "--config", "scene.toml", "--out", "b"]);
    let manifest = Manifest::from_json(&fs::read_to_string(d.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.views.len(), 4 * manifest.poses.len());
    for v in &manifest.views {
        assert_eq!(fs::read(d.join("a").join(&v.image)).unwrap(), fs::read(d.join("b").join(&v.image)).unwrap());
        assert_eq!(fs::read(d.join("a").join(&v.depth)).unwrap(), fs::read(d.join("b").join(&v.depth)).unwrap());
    }

    ok(d, &["eval", "--data", "a", "--out", "self.json"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("self.json")).unwrap()).unwrap();
    assert_eq!(report["depth_mse"].as_f64(), Some(0.0));
    assert_eq!(report["psnr"].as_f64(), Some(999.0));
}

#[test]
fn fit_render_eval_and_export_from_a_checkpoint() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["make-dataset", "--config", "scene.toml", "--out", "data"]);
    ok(d, &["fit", "--data", "data", "--config", "train.toml", "--out", "run", "--steps", "3", "--seed", "5"]);
    let log = fs::read_to_string(d.join("run/loss_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["total"].as_f64().unwrap().is_finite());

    // Resuming continues from the checkpoint.
    ok(d, &["fit", "--data", "data", "--config", "train.toml", "--out", "run2", "--steps", "1", "--checkpoint", "run/checkpoint.bin"]);

    // A pose the dataset never saw.
    ok(d, &["render", "--data", "data", "--checkpoint", "run/checkpoint.bin", "--out", "novel.png", "--pose", "unseen", "--camera", "2"]);
    let frame = read_png(&d.join("novel.png")).unwrap();
    assert_eq!((frame.width, frame.height), (12, 12));
    assert!(d.join("novel.pfm").exists());
    ok(d, &["render", "--data", "data", "--checkpoint", "run/checkpoint.bin", "--out", "big.png", "--resolution", "16"]);
    assert_eq!(read_png(&d.join("big.png")).unwrap().width, 16);

    ok(d, &["eval", "--data", "data", "--checkpoint", "run/checkpoint.bin", "--out", "eval.json"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert!(report["psnr"].as_f64().unwrap().is_finite());
    assert!(!report["views"].as_array().unwrap().is_empty());
    ok(d, &["eval", "--data", "data", "--checkpoint", "run/checkpoint.bin", "--out", "unseen.json", "--pose", "unseen"]);

    ok(d, &["export-mesh", "--data", "data", "--checkpoint", "run/checkpoint.bin", "--out", "mesh.obj", "--resolution", "16"]);
    let mesh = TriMesh::read_obj(&d.join("mesh.obj")).unwrap();
    assert!(!mesh.faces.is_empty());
    let low = run(d, &["export-mesh", "--data", "data", "--checkpoint", "run/checkpoint.bin", "--out", "m.obj", "--resolution", "8"]);
    assert_eq!(low.status.code(), Some(2));
}

#[test]
fn missing_and_corrupt_files_have_distinct_exit_codes() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["make-dataset", "--config", "scene.toml", "--out", "data"]);
    let missing = run(d, &["render", "--data", "data", "--checkpoint", "nope.bin", "--out", "x.png"]);
    assert_eq!(missing.status.code(), Some(3));
    fs::write(d.join("junk.bin"), b"not a checkpoint").unwrap();
    let corrupt = run(d, &["render", "--data", "data", "--checkpoint", "junk.bin", "--out", "x.png"]);
    assert_eq!(corrupt.status.code(), Some(5));
    assert_eq!(run(d, &["eval", "--data", "nowhere", "--out", "r.json"]).status.code(), Some(3));
    assert_eq!(run(d, &["fit", "--data", "data", "--out", "r", "--config", "scene.toml"]).status.code(), Some(2));
}

#[test]
fn divergent_fit_reports_a_numerical_failure() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["make-dataset", "--config", "scene.toml", "--out", "data"]);
    fs::write(d.join("wild.toml"), format!("{TRAIN}\n[fit.adam]\nlearning_rate = 1e300\n")).unwrap();
    let out = run(d, &["fit", "--data", "data", "--config", "wild.toml", "--out", "run", "--steps", "5"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_passes() {
    let dir = setup();
    let out = ok(dir.path(), &["gradcheck", "--out", "grad.json"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("alpha"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("grad.json")).unwrap()).unwrap();
    assert_eq!(report["pass"].as_bool(), Some(true));
}
