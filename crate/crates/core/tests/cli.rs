mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sketchscene::scene::BoxRegion;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sketchscene"))
        .args(args)
        .env_remove(sketchscene::config::CONFIG_ENV)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn scene_at(dir: &Path, id: &str) -> PathBuf {
    common::save(&common::two_object_scene(id), &dir.join(id))
}

#[test]
fn validate_reports_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let good = scene_at(tmp.path(), "good");
    let o = run(&["scene", "validate", good.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(serde_json::from_str::<Value>(&stdout(&o)).unwrap(), Value::Array(vec![]));

    let mut spec = common::two_object_scene("bad");
    spec.objects[1].object_id = spec.objects[0].object_id.clone();
    spec.objects[0].region = BoxRegion::new(0, 0, 0, 5);
    let bad = common::save(&spec, &tmp.path().join("bad"));
    let o = run(&["scene", "validate", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let kinds: Vec<&str> = report.as_array().unwrap().iter().map(|v| v["invariant"].as_str().unwrap()).collect();
    assert!(kinds.contains(&"duplicate_identifier"));
    assert!(kinds.contains(&"non_positive_box"));

    let o = run(&["scene", "validate", tmp.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let doc = scene_at(tmp.path(), "s");
    let doc = doc.to_str().unwrap();
    assert_eq!(run(&["scene", "sweep", doc, "--alphas", ""]).status.code(), Some(2));
    assert_eq!(run(&["scene", "render", doc, "--alpha", "1.5"]).status.code(), Some(2));
    assert_eq!(run(&["scene", "render", doc, "--steps", "0"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn generate_train_render_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let doc = scene_at(tmp.path(), "flow");
    let doc = doc.to_str().unwrap();
    let out = tmp.path().join("out");
    let out_s = out.to_str().unwrap();

    let o = run(&["--out", out_s, "objects", "generate", doc, "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("assets/chair/image.png").exists());
    assert!(out.join("assets/table/mask.png").exists());

    let o = run(&["--out", out_s, "identity", "train", doc, "--steps", "10"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("embeddings/_obj-chair_.bin").exists());
    let meta: Value =
        serde_json::from_slice(&std::fs::read(out.join("embeddings/_obj-table_.json")).unwrap()).unwrap();
    assert_eq!(meta["steps"], 5);
    assert_eq!(meta["loss_trace"].as_array().unwrap().len(), 5);

    let o = run(&["--out", out_s, "scene", "render", doc, "--alpha", "0.5", "--seed", "2", "--steps", "8"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    let manifest: Value = serde_json::from_slice(&std::fs::read(&lines[1]).unwrap()).unwrap();
    assert_eq!(manifest["config"]["steps"], 8);
    assert_eq!(manifest["embeddings"].as_object().unwrap().len(), 2);
    let image = image::open(&lines[0]).unwrap();
    assert_eq!((image.width(), image.height()), (32, 32));

    let o = run(&["--out", out_s, "scene", "sweep", doc, "--steps", "6"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let grid = text.lines().last().unwrap();
    assert!(grid.ends_with("grid.png") && Path::new(grid).exists());
    let records: Value = serde_json::from_str(text.trim_end().rsplit_once('\n').unwrap().0).unwrap();
    let alphas: Vec<f64> = records.as_array().unwrap().iter().map(|r| r["alpha"].as_f64().unwrap()).collect();
    assert_eq!(alphas, vec![0.4, 0.5, 0.6]);
}

#[test]
fn bench_writes_one_row_per_scene_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let scenes = tmp.path().join("scenes");
    for id in ["a", "b", "c"] {
        scene_at(&scenes, id);
    }
    let out = tmp.path().join("out");
    let o = run(&[
        "--out", out.to_str().unwrap(), "bench", "run", scenes.to_str().unwrap(), "--seeds", "0..2", "--steps", "5", "--jobs", "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut reader = csv::Reader::from_path(out.join("bench.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 9);
    for r in &rows {
        assert_eq!(&r[4], "toy");
        assert_eq!(&r[3], "5");
        assert!(Path::new(&r[8]).exists() || out.join(&r[8]).exists());
    }
}
