//! Records generator and segmenter responses once, then regenerates the
//! objects from the recordings alone and checks the assets are identical.

mod common;

use std::sync::Arc;

use sketchscene::backend::{RecordMode, RecordReplayAdapters, StubAdapters};
use sketchscene::objects::generate_objects;

fn main() {
    let dir = common::out_dir("record_replay").join("recordings");
    let spec = common::demo_scene();

    let recorder = RecordReplayAdapters::new(Some(Arc::new(StubAdapters)), &dir, RecordMode::Record);
    let recorded = generate_objects(&spec, 5, &recorder, 2, None).unwrap();
    let files = std::fs::read_dir(&dir).unwrap().count();
    println!("recorded {files} responses in {}", dir.display());

    let replayed = generate_objects(&spec, 5, &RecordReplayAdapters::replay(&dir), 2, None).unwrap();
    println!("replayed assets identical: {}", recorded == replayed);

    match generate_objects(&spec, 6, &RecordReplayAdapters::replay(&dir), 0, None) {
        Ok(_) => println!("unexpected: a different seed replayed"),
        Err(e) => println!("different seed without a recording: {e}"),
    }
}
