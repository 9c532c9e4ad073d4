#![allow(dead_code)]

use std::path::{Path, PathBuf};

use chrono::DateTime;
use image::{GrayImage, Luma};
use sketchscene::scene::{save_scene, BoxRegion, Canvas, ObjectAnnotation, SceneSpec};

/// Sketch with a filled ellipse of ink inside every box.
pub fn ellipse_sketch(width: u32, height: u32, boxes: &[BoxRegion]) -> GrayImage {
    GrayImage::from_fn(width, height, |x, y| {
        let inked = boxes.iter().any(|b| {
            let (cx, cy) = (b.left as f64 + b.width as f64 / 2.0, b.top as f64 + b.height as f64 / 2.0);
            let (rx, ry) = (b.width as f64 / 2.0 - 1.0, b.height as f64 / 2.0 - 1.0);
            let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
            dx * dx + dy * dy <= 1.0
        });
        Luma([if inked { 0 } else { 255 }])
    })
}

pub fn scene(id: &str, size: u32, objects: &[(&str, &str, BoxRegion)], background: &str) -> SceneSpec {
    let boxes: Vec<BoxRegion> = objects.iter().map(|o| o.2).collect();
    SceneSpec {
        scene_id: id.into(),
        sketch: ellipse_sketch(size, size, &boxes),
        sketch_path: "sketch.png".into(),
        canvas: Canvas {
            width: size,
            height: size,
        },
        objects: objects
            .iter()
            .map(|(oid, label, b)| ObjectAnnotation::new(*oid, label, *b))
            .collect(),
        background_text: background.into(),
        created_at: DateTime::from_timestamp(1_700_000_000, 0).unwrap(),
    }
}

/// A 2-object 32x32 scene.
pub fn two_object_scene(id: &str) -> SceneSpec {
    scene(
        id,
        32,
        &[
            ("chair", "chair", BoxRegion::new(2, 4, 12, 14)),
            ("table", "table", BoxRegion::new(14, 12, 16, 16)),
        ],
        "in a room",
    )
}

/// Writes the scene into `dir` and returns the document path.
pub fn save(spec: &SceneSpec, dir: &Path) -> PathBuf {
    save_scene(spec, dir).unwrap()
}
