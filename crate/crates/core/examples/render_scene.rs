//! Full pipeline on the toy backend: generate, train, compose, render once
//! at the default alpha and then sweep the preset alphas.

mod common;

use std::sync::Arc;

use sketchscene::backend::{StubAdapters, ToyBackend};
use sketchscene::pipeline::{write_artifacts, Pipeline, SceneState};
use sketchscene::scene::{RenderConfig, SWEEP_PRESET};

fn main() {
    let out = common::out_dir("render_scene");
    let spec = common::demo_scene();
    let pipeline = Pipeline::new(Arc::new(ToyBackend::new()), Arc::new(StubAdapters));
    let mut state = SceneState::new(spec.clone());
    let cfg = RenderConfig {
        seed: 3,
        resolution: spec.canvas.into(),
        ..RenderConfig::default()
    };

    let outcome = pipeline
        .render(&mut state, &cfg, &mut |e| {
            if e.step % 10 == 0 {
                println!("  {}/{} {}", e.step, e.total, e.note);
            }
        })
        .unwrap();
    write_artifacts(&out, &outcome.artifacts).unwrap();
    println!("prompts: {:?}", outcome.manifest.prompts);
    println!("diagnostics: {:?}", outcome.manifest.diagnostics);
    println!("image: {}", out.join(&outcome.dir).join("image.png").display());

    let sweep = pipeline.sweep(&mut state, &cfg, &SWEEP_PRESET, &mut |_| {}).unwrap();
    write_artifacts(&out, &sweep.artifacts).unwrap();
    for r in &sweep.records {
        println!("alpha {}: {:?}", r.alpha, r.diagnostics);
    }
    println!("grid: {}", out.join(&sweep.dir).join("grid.png").display());
}
