//! Object-level generation: per-object sketch crop, sketch-conditioned image
//! generation, segmentation and mask cleanup.

use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::ObjectAdapters;
use crate::error::{Error, Result};
use crate::raster::{self, BinaryMask, CropGeometry, PixelRect};
use crate::scene::{ObjectAnnotation, ObjectId, SceneSpec};
use crate::store::{sha256_hex, write_atomic};

pub const DEFAULT_RETRIES: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectAsset {
    pub object_id: ObjectId,
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub identity_token: String,
    pub embedding_id: Option<String>,
    /// How the object's box maps into `image`.
    pub geometry: CropGeometry,
    pub seed: u64,
    pub attempts: u32,
}

impl ObjectAsset {
    /// Builds an asset, enforcing matching dimensions and a non-empty mask.
    pub fn new(
        object_id: ObjectId,
        image: RgbImage,
        mask: BinaryMask,
        geometry: CropGeometry,
    ) -> Result<Self> {
        if image.dimensions() != mask.dimensions() {
            return Err(Error::shape(format!(
                "asset image {:?} and mask {:?} differ",
                image.dimensions(),
                mask.dimensions()
            )));
        }
        if mask.is_empty() {
            return Err(Error::EmptyMask(object_id.0.clone()));
        }
        let identity_token = crate::scene::identity_token_for(&object_id);
        Ok(Self {
            object_id,
            image,
            mask,
            identity_token,
            embedding_id: None,
            geometry,
            seed: 0,
            attempts: 1,
        })
    }
}

/// A letterboxed object sketch ready for the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchCrop {
    pub raster: GrayImage,
    pub geometry: CropGeometry,
    /// The clipped box on the canvas.
    pub rect: PixelRect,
}

pub fn crop_object_sketch(spec: &SceneSpec, object_id: &ObjectId, frame: u32) -> Result<SketchCrop> {
    let ann = spec
        .object(object_id)
        .ok_or_else(|| Error::NotFound(format!("object {object_id}")))?;
    let rect = ann
        .region
        .clip(spec.canvas)
        .ok_or_else(|| Error::Placement(format!("box of {object_id} lies outside the canvas")))?;
    let crop =
        image::imageops::crop_imm(&spec.sketch, rect.x, rect.y, rect.width, rect.height).to_image();
    let geometry = CropGeometry::fit(rect.width, rect.height, frame);
    Ok(SketchCrop {
        raster: geometry.letterbox(&crop),
        geometry,
        rect,
    })
}

#[derive(Debug, Clone)]
pub struct ObjectGenRequest {
    pub annotation: ObjectAnnotation,
    pub sketch_crop: SketchCrop,
    pub seed: u64,
    /// Extra reseeded attempts after the first.
    pub retries: u32,
}

/// Per-object seed: the scene seed offset by a stable hash of the object id.
pub fn object_seed(scene_seed: u64, object_id: &ObjectId) -> u64 {
    scene_seed.wrapping_add(crate::backend::stable_hash(&object_id.0) % (1 << 31))
}

pub fn generate_object(req: &ObjectGenRequest, adapters: &dyn ObjectAdapters) -> Result<ObjectAsset> {
    let ann = &req.annotation;
    let prompt = ann.effective_prompt();
    let crop = &req.sketch_crop;
    for attempt in 0..=req.retries {
        let seed = req.seed.wrapping_add(attempt as u64);
        let image = adapters.generate_from_sketch(&crop.raster, &prompt, seed)?;
        if image.dimensions() != crop.raster.dimensions() {
            return Err(Error::ContractViolation(format!(
                "generator returned {:?} for a {:?} sketch",
                image.dimensions(),
                crop.raster.dimensions()
            )));
        }
        let mask = match adapters.segment(&image, &ann.class_label) {
            Ok(m) => m.cleaned(),
            Err(Error::EmptyMask(_)) => continue,
            Err(e) => return Err(e),
        };
        if mask.is_empty() {
            continue;
        }
        let mut asset = ObjectAsset::new(ann.object_id.clone(), image, mask, crop.geometry)?;
        asset.seed = seed;
        asset.attempts = attempt + 1;
        return Ok(asset);
    }
    Err(Error::ObjectGeneration {
        object_id: ann.object_id.0.clone(),
        attempts: req.retries + 1,
    })
}

/// Generator frame size for a scene: the longer canvas side.
pub fn generator_frame(spec: &SceneSpec) -> u32 {
    spec.canvas.width.max(spec.canvas.height)
}

/// Generates assets for every object (or just `only`), one thread per object.
pub fn generate_objects(
    spec: &SceneSpec,
    scene_seed: u64,
    adapters: &dyn ObjectAdapters,
    retries: u32,
    only: Option<&ObjectId>,
) -> Result<Vec<ObjectAsset>> {
    let frame = generator_frame(spec);
    let targets: Vec<&ObjectAnnotation> = spec
        .objects
        .iter()
        .filter(|o| only.is_none_or(|id| &o.object_id == id))
        .collect();
    if let Some(id) = only {
        if targets.is_empty() {
            return Err(Error::NotFound(format!("object {id}")));
        }
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = targets
            .iter()
            .map(|ann| {
                scope.spawn(move || {
                    let req = ObjectGenRequest {
                        annotation: (*ann).clone(),
                        sketch_crop: crop_object_sketch(spec, &ann.object_id, frame)?,
                        seed: object_seed(scene_seed, &ann.object_id),
                        retries,
                    };
                    generate_object(&req, adapters)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("object generation thread panicked"))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub pixels: usize,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetMetadata {
    pub object_id: ObjectId,
    pub identity_token: String,
    pub seed: u64,
    pub attempts: u32,
    pub generator_config_hash: String,
    pub mask_stats: MaskStats,
    pub geometry: CropGeometry,
    #[serde(default)]
    pub embedding_id: Option<String>,
}

impl AssetMetadata {
    pub fn of(asset: &ObjectAsset, prompt: &str) -> Self {
        let pixels = asset.mask.count();
        let total = (asset.mask.width() as usize * asset.mask.height() as usize).max(1);
        Self {
            object_id: asset.object_id.clone(),
            identity_token: asset.identity_token.clone(),
            seed: asset.seed,
            attempts: asset.attempts,
            generator_config_hash: sha256_hex(
                json!({"prompt": prompt, "frame": asset.geometry.frame}).to_string().as_bytes(),
            ),
            mask_stats: MaskStats {
                pixels,
                coverage: pixels as f64 / total as f64,
            },
            geometry: asset.geometry,
            embedding_id: asset.embedding_id.clone(),
        }
    }
}

/// Encoded files of one asset: image PNG, mask PNG, metadata JSON.
pub fn encode_asset(asset: &ObjectAsset, prompt: &str) -> Result<(Vec<u8>, Vec<u8>, Vec<u8>)> {
    Ok((
        raster::encode_png_rgb(&asset.image)?,
        raster::encode_png_gray(&asset.mask.to_gray())?,
        serde_json::to_vec_pretty(&AssetMetadata::of(asset, prompt))?,
    ))
}

/// Writes `{dir}/{object_id}/{image.png, mask.png, asset.json}`.
pub fn save_asset(asset: &ObjectAsset, prompt: &str, dir: &Path) -> Result<()> {
    let (image, mask, meta) = encode_asset(asset, prompt)?;
    let base = dir.join(&asset.object_id.0);
    write_atomic(&base.join("image.png"), &image)?;
    write_atomic(&base.join("mask.png"), &mask)?;
    write_atomic(&base.join("asset.json"), &meta)
}

pub fn decode_asset(image_png: &[u8], mask_png: &[u8], meta_json: &[u8]) -> Result<ObjectAsset> {
    let meta: AssetMetadata = serde_json::from_slice(meta_json)?;
    let image = raster::decode_png_rgb(image_png)?;
    let mask = BinaryMask::from_gray(&raster::decode_png_gray(mask_png)?)?;
    let mut asset = ObjectAsset::new(meta.object_id, image, mask, meta.geometry)?;
    asset.seed = meta.seed;
    asset.attempts = meta.attempts;
    asset.identity_token = meta.identity_token;
    asset.embedding_id = meta.embedding_id;
    Ok(asset)
}

pub fn load_asset(dir: &Path, object_id: &ObjectId) -> Result<ObjectAsset> {
    let base = dir.join(&object_id.0);
    let read = |name: &str| {
        let p = base.join(name);
        std::fs::read(&p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(p.display().to_string()),
            _ => Error::io(&p, e),
        })
    };
    decode_asset(&read("image.png")?, &read("mask.png")?, &read("asset.json")?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::StubAdapters;
    use crate::scene::{BoxRegion, Canvas};
    use chrono::DateTime;
    use image::Luma;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn scene(canvas: u32, boxes: &[(i64, i64, i64, i64)]) -> SceneSpec {
        // ink everywhere inside each box, inset by 2px
        let mut sketch = GrayImage::from_pixel(canvas, canvas, Luma([255]));
        for &(l, t, w, h) in boxes {
            for y in (t + 2).max(0)..(t + h - 2).min(canvas as i64) {
                for x in (l + 2).max(0)..(l + w - 2).min(canvas as i64) {
                    sketch.put_pixel(x as u32, y as u32, Luma([0]));
                }
            }
        }
        SceneSpec {
            scene_id: "s".into(),
            sketch,
            sketch_path: "sketch.png".into(),
            canvas: Canvas {
                width: canvas,
                height: canvas,
            },
            objects: boxes
                .iter()
                .enumerate()
                .map(|(i, &(l, t, w, h))| {
                    ObjectAnnotation::new(format!("o{i}"), "chair", BoxRegion::new(l, t, w, h))
                })
                .collect(),
            background_text: "in a room".into(),
            created_at: DateTime::from_timestamp(0, 0).unwrap(),
        }
    }

    #[test]
    fn full_canvas_crop_is_the_whole_sketch() {
        let s = scene(64, &[(0, 0, 64, 64)]);
        let crop = crop_object_sketch(&s, &"o0".into(), 64).unwrap();
        assert_eq!(crop.raster, s.sketch);
        assert_eq!(crop.geometry.scale, 1.0);
    }

    #[test]
    fn wide_box_is_letterboxed_and_centred() {
        let s = scene(512, &[(10, 20, 100, 50)]);
        let crop = crop_object_sketch(&s, &"o0".into(), 512).unwrap();
        assert_eq!(crop.raster.dimensions(), (512, 512));
        let g = crop.geometry;
        assert_eq!((g.offset_x, g.offset_y, g.scale), (6, 131, 5.0));
        // padding is white, content is the ink
        assert_eq!(crop.raster.get_pixel(0, 0)[0], 255);
        assert_eq!(crop.raster.get_pixel(256, 256)[0], 0);
        // round trip through the geometry restores the box contents
        let original =
            image::imageops::crop_imm(&s.sketch, 10, 20, 100, 50).to_image();
        assert_eq!(g.extract_gray(&crop.raster).unwrap(), original);
    }

    #[test]
    fn clipped_box_crops_the_intersection() {
        let s = scene(64, &[(40, -8, 40, 30)]);
        let crop = crop_object_sketch(&s, &"o0".into(), 64).unwrap();
        assert_eq!(
            crop.rect,
            PixelRect {
                x: 40,
                y: 0,
                width: 24,
                height: 22
            }
        );
        assert!(matches!(
            crop_object_sketch(&s, &"nope".into(), 64),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn stub_asset_mask_is_thresholded_ink() {
        let s = scene(64, &[(8, 8, 24, 16)]);
        let assets = generate_objects(&s, 7, &StubAdapters, 0, None).unwrap();
        let a = &assets[0];
        assert_eq!(a.identity_token, "<obj-o0>");
        assert_eq!(a.mask, BinaryMask::from_ink(&crop_object_sketch(&s, &"o0".into(), 64).unwrap().raster));
        assert_eq!(a.seed, object_seed(7, &"o0".into()));
    }

    struct FlakySegmenter {
        empties: u32,
        calls: AtomicU32,
    }

    impl ObjectAdapters for FlakySegmenter {
        fn generate_from_sketch(&self, s: &GrayImage, p: &str, seed: u64) -> Result<RgbImage> {
            StubAdapters.generate_from_sketch(s, p, seed)
        }
        fn segment(&self, img: &RgbImage, label: &str) -> Result<BinaryMask> {
            if self.calls.fetch_add(1, Ordering::SeqCst) < self.empties {
                return Err(Error::EmptyMask(label.into()));
            }
            StubAdapters.segment(img, label)
        }
    }

    fn request(s: &SceneSpec, retries: u32) -> ObjectGenRequest {
        ObjectGenRequest {
            annotation: s.objects[0].clone(),
            sketch_crop: crop_object_sketch(s, &"o0".into(), 64).unwrap(),
            seed: 11,
            retries,
        }
    }

    #[test]
    fn retries_until_a_mask_appears() {
        let s = scene(64, &[(8, 8, 24, 16)]);
        let flaky = FlakySegmenter {
            empties: 2,
            calls: AtomicU32::new(0),
        };
        let asset = generate_object(&request(&s, 2), &flaky).unwrap();
        assert_eq!(asset.attempts, 3);
        assert_eq!(asset.seed, 13);
    }

    #[test]
    fn exhausted_retries_name_the_object() {
        let s = scene(64, &[(8, 8, 24, 16)]);
        let flaky = FlakySegmenter {
            empties: 10,
            calls: AtomicU32::new(0),
        };
        match generate_object(&request(&s, 1), &flaky) {
            Err(Error::ObjectGeneration {
                object_id,
                attempts,
            }) => {
                assert_eq!(object_id, "o0");
                assert_eq!(attempts, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn asset_files_round_trip() {
        let s = scene(32, &[(4, 4, 20, 12)]);
        let a = generate_objects(&s, 1, &StubAdapters, 0, None).unwrap().remove(0);
        let dir = tempfile::tempdir().unwrap();
        save_asset(&a, "a photo of a chair", dir.path()).unwrap();
        assert_eq!(load_asset(dir.path(), &a.object_id).unwrap(), a);
    }
}
