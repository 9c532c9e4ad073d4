//! Scene domain types, validation and the on-disk scene document.
//!
//! A scene is stored as one JSON document plus a sibling grayscale PNG
//! holding the sketch. Unknown document fields are accepted on read and
//! dropped on write. Annotation order is the z-order and is never changed.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, PixelRect};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_RESOLUTION: u32 = 512;
pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.5;
/// Seeds used for benchmark runs span this inclusive range.
pub const SEED_RANGE: std::ops::RangeInclusive<u64> = 0..=50;
pub const SWEEP_PRESET: [f64; 3] = [0.4, 0.5, 0.6];
pub const DEFAULT_SKETCH_PATH: &str = "sketch.png";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SceneId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub String);

impl fmt::Display for SceneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ObjectId {
    fn from(s: &str) -> Self {
        ObjectId(s.to_owned())
    }
}

impl From<&str> for SceneId {
    fn from(s: &str) -> Self {
        SceneId(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub width: u32,
    pub height: u32,
}

impl Default for Canvas {
    fn default() -> Self {
        Self {
            width: DEFAULT_RESOLUTION,
            height: DEFAULT_RESOLUTION,
        }
    }
}

/// Axis-aligned box in canvas pixels. May extend past the canvas; it is
/// clipped before use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRegion {
    #[serde(rename = "l")]
    pub left: i64,
    #[serde(rename = "t")]
    pub top: i64,
    #[serde(rename = "w")]
    pub width: i64,
    #[serde(rename = "h")]
    pub height: i64,
}

impl BoxRegion {
    pub fn new(left: i64, top: i64, width: i64, height: i64) -> Self {
        Self {
            left,
            top,
            width,
            height,
        }
    }

    /// Intersection with the canvas, or `None` when it is empty.
    pub fn clip(&self, canvas: Canvas) -> Option<PixelRect> {
        if self.width <= 0 || self.height <= 0 {
            return None;
        }
        let x0 = self.left.max(0);
        let y0 = self.top.max(0);
        let x1 = (self.left + self.width).min(canvas.width as i64);
        let y1 = (self.top + self.height).min(canvas.height as i64);
        (x1 > x0 && y1 > y0).then(|| PixelRect {
            x: x0 as u32,
            y: y0 as u32,
            width: (x1 - x0) as u32,
            height: (y1 - y0) as u32,
        })
    }
}

pub type Polyline = Vec<[f64; 2]>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub object_id: ObjectId,
    pub class_label: String,
    #[serde(default)]
    pub prompt_text: String,
    #[serde(rename = "box")]
    pub region: BoxRegion,
    #[serde(default)]
    pub strokes: Vec<Polyline>,
}

impl ObjectAnnotation {
    pub fn new(object_id: impl Into<String>, class_label: &str, region: BoxRegion) -> Self {
        Self {
            object_id: ObjectId(object_id.into()),
            class_label: class_label.to_owned(),
            prompt_text: String::new(),
            region,
            strokes: Vec::new(),
        }
    }

    /// The generation prompt, falling back to `a photo of a {class_label}`.
    pub fn effective_prompt(&self) -> String {
        if self.prompt_text.trim().is_empty() {
            format!("a photo of a {}", self.class_label)
        } else {
            self.prompt_text.clone()
        }
    }

    /// Placeholder token the object's identity embedding is bound to.
    pub fn identity_token(&self) -> String {
        identity_token_for(&self.object_id)
    }
}

pub fn identity_token_for(id: &ObjectId) -> String {
    format!("<obj-{}>", id.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub scene_id: SceneId,
    pub sketch: GrayImage,
    pub sketch_path: String,
    pub canvas: Canvas,
    pub objects: Vec<ObjectAnnotation>,
    pub background_text: String,
    pub created_at: DateTime<Utc>,
}

impl SceneSpec {
    pub fn object(&self, id: &ObjectId) -> Option<&ObjectAnnotation> {
        self.objects.iter().find(|o| &o.object_id == id)
    }

    pub fn to_document(&self) -> SceneDocument {
        SceneDocument {
            schema_version: SCHEMA_VERSION,
            scene_id: self.scene_id.clone(),
            background_text: self.background_text.clone(),
            canvas: self.canvas,
            objects: self.objects.clone(),
            sketch_path: self.sketch_path.clone(),
            created_at: self.created_at,
            extra: BTreeMap::new(),
        }
    }

    pub fn from_document(doc: SceneDocument, sketch: GrayImage) -> Self {
        Self {
            scene_id: doc.scene_id,
            sketch,
            sketch_path: doc.sketch_path,
            canvas: doc.canvas,
            objects: doc.objects,
            background_text: doc.background_text,
            created_at: doc.created_at,
        }
    }
}

/// The JSON scene document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDocument {
    pub schema_version: u32,
    pub scene_id: SceneId,
    pub background_text: String,
    pub canvas: Canvas,
    pub objects: Vec<ObjectAnnotation>,
    #[serde(default = "default_sketch_path")]
    pub sketch_path: String,
    pub created_at: DateTime<Utc>,
    /// Fields this version does not know about; never written back.
    #[serde(flatten, skip_serializing)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

fn default_sketch_path() -> String {
    DEFAULT_SKETCH_PATH.to_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Invariant {
    NoObjects,
    DuplicateIdentifier,
    NonPositiveBox,
    BoxOutsideCanvas,
    EmptyClassLabel,
    SketchSizeMismatch,
    EmptyCanvas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub invariant: Invariant,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub object_id: Option<ObjectId>,
    pub message: String,
}

pub type ValidationReport = Vec<Violation>;

/// Checks every scene invariant. Violations are returned as data.
pub fn validate_scene(spec: &SceneSpec) -> ValidationReport {
    let mut report = Vec::new();
    let canvas = spec.canvas;
    if canvas.width == 0 || canvas.height == 0 {
        report.push(Violation {
            invariant: Invariant::EmptyCanvas,
            object_id: None,
            message: "canvas dimensions must be positive".into(),
        });
    }
    if spec.sketch.dimensions() != (canvas.width, canvas.height) {
        report.push(Violation {
            invariant: Invariant::SketchSizeMismatch,
            object_id: None,
            message: format!(
                "sketch is {}x{} but the canvas is {}x{}",
                spec.sketch.width(),
                spec.sketch.height(),
                canvas.width,
                canvas.height
            ),
        });
    }
    if spec.objects.is_empty() {
        report.push(Violation {
            invariant: Invariant::NoObjects,
            object_id: None,
            message: "a scene needs at least one object".into(),
        });
    }
    let mut seen = HashSet::new();
    for obj in &spec.objects {
        let id = Some(obj.object_id.clone());
        if !seen.insert(&obj.object_id) {
            report.push(Violation {
                invariant: Invariant::DuplicateIdentifier,
                object_id: id.clone(),
                message: format!("duplicate identifier {}", obj.object_id),
            });
        }
        if obj.region.width <= 0 || obj.region.height <= 0 {
            report.push(Violation {
                invariant: Invariant::NonPositiveBox,
                object_id: id.clone(),
                message: format!(
                    "box of {} must have positive width and height",
                    obj.object_id
                ),
            });
        } else if obj.region.clip(canvas).is_none() {
            report.push(Violation {
                invariant: Invariant::BoxOutsideCanvas,
                object_id: id.clone(),
                message: format!("box of {} lies outside the canvas", obj.object_id),
            });
        }
        if obj.class_label.trim().is_empty() {
            report.push(Violation {
                invariant: Invariant::EmptyClassLabel,
                object_id: id,
                message: format!("class label of {} is empty", obj.object_id),
            });
        }
    }
    report
}

pub fn serialize_scene(spec: &SceneSpec) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec_pretty(&spec.to_document())?)
}

/// Parses a scene document, checking the schema version first.
pub fn deserialize_scene(bytes: &[u8]) -> Result<SceneDocument> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| parse_error(bytes, &e))?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Version {
                found: v.min(u32::MAX as u64) as u32,
                expected: SCHEMA_VERSION,
            })
        }
        None => {
            return Err(Error::Parse {
                offset: 0,
                message: "missing or non-integer schema_version".into(),
            })
        }
    }
    serde_json::from_slice(bytes).map_err(|e| parse_error(bytes, &e))
}

fn parse_error(bytes: &[u8], err: &serde_json::Error) -> Error {
    Error::Parse {
        offset: byte_offset(bytes, err.line(), err.column()),
        message: err.to_string(),
    }
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start = if line == 1 {
        0
    } else {
        bytes
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == b'\n')
            .nth(line - 2)
            .map(|(i, _)| i + 1)
            .unwrap_or(bytes.len())
    };
    (line_start + column.saturating_sub(1)).min(bytes.len())
}

/// Writes the document and its sketch PNG into `dir`; returns the document path.
pub fn save_scene(spec: &SceneSpec, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let doc_path = dir.join("scene.json");
    crate::store::write_atomic(&doc_path, &serialize_scene(spec)?)?;
    let sketch_path = dir.join(&spec.sketch_path);
    crate::store::write_atomic(&sketch_path, &raster::encode_png_gray(&spec.sketch)?)?;
    Ok(doc_path)
}

/// Loads a scene document and the sketch it references (relative to the document).
pub fn load_scene(doc_path: &Path) -> Result<SceneSpec> {
    let bytes = std::fs::read(doc_path).map_err(|e| Error::io(doc_path, e))?;
    let doc = deserialize_scene(&bytes)?;
    let base = doc_path.parent().unwrap_or_else(|| Path::new("."));
    let sketch_file = base.join(&doc.sketch_path);
    let sketch_bytes = std::fs::read(&sketch_file).map_err(|e| Error::io(&sketch_file, e))?;
    let sketch = raster::decode_png_gray(&sketch_bytes)?;
    Ok(SceneSpec::from_document(doc, sketch))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub width: u32,
    pub height: u32,
}

impl Default for Resolution {
    fn default() -> Self {
        Self {
            width: DEFAULT_RESOLUTION,
            height: DEFAULT_RESOLUTION,
        }
    }
}

impl From<Canvas> for Resolution {
    fn from(c: Canvas) -> Self {
        Self {
            width: c.width,
            height: c.height,
        }
    }
}

/// Everything that determines one render.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub steps: usize,
    pub alpha: f64,
    pub seed: u64,
    pub resolution: Resolution,
    /// Overrides the global prompt built from the scene.
    pub global_prompt: Option<String>,
    /// Overrides the background prompt built from the scene.
    pub background_prompt: Option<String>,
    pub guidance_scale: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            alpha: DEFAULT_ALPHA,
            seed: 0,
            resolution: Resolution::default(),
            global_prompt: None,
            background_prompt: None,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigViolation {
    pub field: &'static str,
    pub message: String,
}

impl RenderConfig {
    /// Checks the config invariants against a latent downsample factor.
    pub fn violations(&self, factor: u32) -> Vec<ConfigViolation> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.alpha) || self.alpha.is_nan() {
            out.push(ConfigViolation {
                field: "alpha",
                message: format!("alpha must lie in [0, 1], got {}", self.alpha),
            });
        }
        if self.steps == 0 {
            out.push(ConfigViolation {
                field: "steps",
                message: "step count must be at least 1".into(),
            });
        }
        let Resolution { width, height } = self.resolution;
        if width == 0 || height == 0 || width % factor != 0 || height % factor != 0 {
            out.push(ConfigViolation {
                field: "resolution",
                message: format!(
                    "resolution {width}x{height} must be positive multiples of {factor}"
                ),
            });
        }
        if !(self.guidance_scale >= 0.0) {
            out.push(ConfigViolation {
                field: "guidance_scale",
                message: "guidance scale must be non-negative".into(),
            });
        }
        out
    }

    pub fn validate(&self, factor: u32) -> Result<()> {
        match self.violations(factor).first() {
            None => Ok(()),
            Some(v) => Err(Error::Config(format!("{}: {}", v.field, v.message))),
        }
    }
}
