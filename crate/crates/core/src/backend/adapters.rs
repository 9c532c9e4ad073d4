use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::wire::{request_hash, AdapterRequest, Transport};
use crate::error::{Error, Result};
use crate::raster::{self, BinaryMask};
use crate::store::write_atomic;

/// The two external models used during object generation: a
/// sketch-conditioned image generator and a class-prompted segmenter.
pub trait ObjectAdapters: Send + Sync {
    /// Returns an RGB image with the sketch's dimensions.
    fn generate_from_sketch(&self, sketch: &GrayImage, prompt: &str, seed: u64)
        -> Result<RgbImage>;

    /// Returns a non-empty binary mask with the image's dimensions.
    fn segment(&self, image: &RgbImage, class_label: &str) -> Result<BinaryMask>;
}

fn non_empty(mask: BinaryMask, class_label: &str) -> Result<BinaryMask> {
    if mask.is_empty() {
        Err(Error::EmptyMask(class_label.to_owned()))
    } else {
        Ok(mask)
    }
}

fn check_dims(what: &str, got: (u32, u32), want: (u32, u32)) -> Result<()> {
    if got != want {
        return Err(Error::ContractViolation(format!(
            "{what} is {}x{}, expected {}x{}",
            got.0, got.1, want.0, want.1
        )));
    }
    Ok(())
}

/// Echo adapters for desk runs: the "generated" image is the sketch itself
/// and the mask is its thresholded ink.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubAdapters;

impl ObjectAdapters for StubAdapters {
    fn generate_from_sketch(&self, sketch: &GrayImage, _prompt: &str, _seed: u64) -> Result<RgbImage> {
        Ok(raster::gray_to_rgb(sketch))
    }

    fn segment(&self, image: &RgbImage, class_label: &str) -> Result<BinaryMask> {
        let gray = image::DynamicImage::ImageRgb8(image.clone()).into_luma8();
        non_empty(BinaryMask::from_ink(&gray), class_label)
    }
}

/// Stands in for adapters that have no endpoint configured.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnconfiguredAdapters;

impl ObjectAdapters for UnconfiguredAdapters {
    fn generate_from_sketch(&self, _: &GrayImage, _: &str, _: u64) -> Result<RgbImage> {
        Err(Error::Connectivity("no sketch generator configured".into()))
    }

    fn segment(&self, _: &RgbImage, _: &str) -> Result<BinaryMask> {
        Err(Error::Connectivity("no segmenter configured".into()))
    }
}

/// Adapters served by an external process over the wire contract.
#[derive(Debug, Clone)]
pub struct RemoteAdapters {
    pub generator: Transport,
    pub segmenter: Transport,
    /// Shared directory for payload files.
    pub workdir: PathBuf,
}

impl RemoteAdapters {
    fn stage(&self, bytes: &[u8]) -> Result<PathBuf> {
        let name = format!("{}.png", request_hash("payload", &json!(null), &[bytes]));
        let path = self.workdir.join(name);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(path)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

impl ObjectAdapters for RemoteAdapters {
    fn generate_from_sketch(&self, sketch: &GrayImage, prompt: &str, seed: u64) -> Result<RgbImage> {
        let mut req = AdapterRequest::new("generate_from_sketch");
        req.payload.insert(
            "sketch".into(),
            self.stage(&raster::encode_png_gray(sketch)?)?,
        );
        req.prompt_text = prompt.to_owned();
        req.seed = seed;
        req.resolution = Some([sketch.width(), sketch.height()]);
        let resp = self.generator.call(&req)?;
        let img = raster::decode_png_rgb(&read_file(resp.artifact("image")?)?)
            .map_err(|e| Error::ContractViolation(format!("generator image: {e}")))?;
        check_dims("generated image", img.dimensions(), sketch.dimensions())?;
        Ok(img)
    }

    fn segment(&self, image: &RgbImage, class_label: &str) -> Result<BinaryMask> {
        let mut req = AdapterRequest::new("segment");
        req.payload
            .insert("image".into(), self.stage(&raster::encode_png_rgb(image)?)?);
        req.prompt_text = class_label.to_owned();
        req.resolution = Some([image.width(), image.height()]);
        req.params.insert("class_label".into(), json!(class_label));
        let resp = self.segmenter.call(&req)?;
        let gray = raster::decode_png_gray(&read_file(resp.artifact("mask")?)?)
            .map_err(|e| Error::ContractViolation(format!("segmenter mask: {e}")))?;
        check_dims("mask", gray.dimensions(), image.dimensions())?;
        let mask = BinaryMask::from_gray(&gray)
            .map_err(|e| Error::ContractViolation(e.to_string()))?;
        non_empty(mask, class_label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordMode {
    /// Always call through and (over)write the recording.
    Record,
    /// Only serve recordings; a missing one is an error.
    Replay,
    /// Serve a recording when present, otherwise call through and record.
    Auto,
}

/// Records adapter responses in a directory keyed by request hash and
/// replays them byte-for-byte.
pub struct RecordReplayAdapters {
    inner: Option<Arc<dyn ObjectAdapters>>,
    dir: PathBuf,
    mode: RecordMode,
}

impl RecordReplayAdapters {
    pub fn new(inner: Option<Arc<dyn ObjectAdapters>>, dir: impl Into<PathBuf>, mode: RecordMode) -> Self {
        Self {
            inner,
            dir: dir.into(),
            mode,
        }
    }

    pub fn replay(dir: impl Into<PathBuf>) -> Self {
        Self::new(None, dir, RecordMode::Replay)
    }

    pub fn recording_path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.png"))
    }

    fn inner(&self) -> Result<&Arc<dyn ObjectAdapters>> {
        self.inner
            .as_ref()
            .ok_or_else(|| Error::Connectivity("replay store has no live adapter behind it".into()))
    }

    /// Returns the recorded response bytes, calling through when allowed.
    fn lookup(&self, hash: &str, call: impl FnOnce() -> Result<Vec<u8>>) -> Result<Vec<u8>> {
        let path = self.recording_path(hash);
        let use_recording = match self.mode {
            RecordMode::Record => false,
            RecordMode::Replay => true,
            RecordMode::Auto => path.exists(),
        };
        if use_recording {
            return std::fs::read(&path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => {
                    Error::NotFound(format!("no recording for request {hash}"))
                }
                _ => Error::io(&path, e),
            });
        }
        let bytes = call()?;
        write_atomic(&path, &bytes)?;
        Ok(bytes)
    }

    pub fn generate_bytes(&self, sketch: &GrayImage, prompt: &str, seed: u64) -> Result<Vec<u8>> {
        let hash = request_hash(
            "generate_from_sketch",
            &json!({"prompt": prompt, "seed": seed, "w": sketch.width(), "h": sketch.height()}),
            &[sketch.as_raw()],
        );
        self.lookup(&hash, || {
            let img = self.inner()?.generate_from_sketch(sketch, prompt, seed)?;
            raster::encode_png_rgb(&img)
        })
    }

    pub fn segment_bytes(&self, image: &RgbImage, class_label: &str) -> Result<Vec<u8>> {
        let hash = request_hash(
            "segment",
            &json!({"class_label": class_label, "w": image.width(), "h": image.height()}),
            &[image.as_raw()],
        );
        self.lookup(&hash, || {
            // An empty result is recorded too so retries replay identically.
            let mask = match self.inner()?.segment(image, class_label) {
                Ok(m) => m,
                Err(Error::EmptyMask(_)) => BinaryMask::new(image.width(), image.height()),
                Err(e) => return Err(e),
            };
            raster::encode_png_gray(&mask.to_gray())
        })
    }
}

impl ObjectAdapters for RecordReplayAdapters {
    fn generate_from_sketch(&self, sketch: &GrayImage, prompt: &str, seed: u64) -> Result<RgbImage> {
        let img = raster::decode_png_rgb(&self.generate_bytes(sketch, prompt, seed)?)?;
        check_dims("generated image", img.dimensions(), sketch.dimensions())?;
        Ok(img)
    }

    fn segment(&self, image: &RgbImage, class_label: &str) -> Result<BinaryMask> {
        let gray = raster::decode_png_gray(&self.segment_bytes(image, class_label)?)?;
        check_dims("mask", gray.dimensions(), image.dimensions())?;
        non_empty(BinaryMask::from_gray(&gray)?, class_label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;

    fn blob_sketch() -> GrayImage {
        GrayImage::from_fn(16, 12, |x, y| {
            Luma([if (4..10).contains(&x) && (3..8).contains(&y) { 0 } else { 255 }])
        })
    }

    #[test]
    fn stub_echoes_and_thresholds_ink() {
        let sketch = blob_sketch();
        let img = StubAdapters.generate_from_sketch(&sketch, "a chair", 1).unwrap();
        assert_eq!(img.dimensions(), sketch.dimensions());
        let mask = StubAdapters.segment(&img, "chair").unwrap();
        assert_eq!(mask, BinaryMask::from_ink(&sketch));
        let blank = RgbImage::from_pixel(4, 4, image::Rgb([255, 255, 255]));
        assert!(matches!(
            StubAdapters.segment(&blank, "chair"),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn unconfigured_is_a_connectivity_error() {
        assert!(matches!(
            UnconfiguredAdapters.generate_from_sketch(&blob_sketch(), "x", 0),
            Err(Error::Connectivity(_))
        ));
    }

    #[test]
    fn replay_returns_recorded_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let recorder =
            RecordReplayAdapters::new(Some(Arc::new(StubAdapters)), dir.path(), RecordMode::Record);
        let sketch = blob_sketch();
        let recorded = recorder.generate_bytes(&sketch, "a chair", 3).unwrap();
        let replayer = RecordReplayAdapters::replay(dir.path());
        assert_eq!(replayer.generate_bytes(&sketch, "a chair", 3).unwrap(), recorded);
        assert!(matches!(
            replayer.generate_bytes(&sketch, "a chair", 4),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn unreachable_http_endpoint() {
        let remote = RemoteAdapters {
            generator: Transport::Http {
                endpoint: "http://127.0.0.1:9/generate".into(),
                timeout_secs: 2,
            },
            segmenter: Transport::Stdio {
                program: "/nonexistent/segmenter".into(),
                args: vec![],
            },
            workdir: tempfile::tempdir().unwrap().keep(),
        };
        assert!(matches!(
            remote.generate_from_sketch(&blob_sketch(), "x", 0),
            Err(Error::Connectivity(_))
        ));
        let img = RgbImage::new(4, 4);
        assert!(matches!(remote.segment(&img, "x"), Err(Error::Connectivity(_))));
    }
}
