#![allow(dead_code)]

use std::path::PathBuf;

use chrono::DateTime;
use image::{GrayImage, Luma};
use sketchscene::scene::{BoxRegion, Canvas, ObjectAnnotation, SceneSpec};

/// A 64x64 scene with a cat on the left and a lamp on the right, drawn as ink outlines.
pub fn demo_scene() -> SceneSpec {
    let boxes = [BoxRegion::new(4, 20, 28, 36), BoxRegion::new(38, 6, 20, 50)];
    let sketch = GrayImage::from_fn(64, 64, |x, y| {
        let on_outline = boxes.iter().any(|b| {
            let (cx, cy) = (b.left as f64 + b.width as f64 / 2.0, b.top as f64 + b.height as f64 / 2.0);
            let (rx, ry) = (b.width as f64 / 2.0 - 2.0, b.height as f64 / 2.0 - 2.0);
            let d = ((x as f64 + 0.5 - cx) / rx).powi(2) + ((y as f64 + 0.5 - cy) / ry).powi(2);
            (0.75..=1.0).contains(&d)
        });
        Luma([if on_outline { 0 } else { 255 }])
    });
    SceneSpec {
        scene_id: "demo".into(),
        sketch,
        sketch_path: "sketch.png".into(),
        canvas: Canvas { width: 64, height: 64 },
        objects: vec![
            ObjectAnnotation::new("cat", "cat", boxes[0]),
            ObjectAnnotation::new("lamp", "lamp", boxes[1]),
        ],
        background_text: "in a living room".into(),
        created_at: DateTime::from_timestamp(1_700_000_000, 0).unwrap(),
    }
}

/// First command-line argument, or a directory under the system temp dir.
pub fn out_dir(name: &str) -> PathBuf {
    let dir = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("sketchscene-examples").join(name));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
