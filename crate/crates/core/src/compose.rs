//! Builds the initial foreground guide: the composited object image, its
//! full-resolution mask and the latent-resolution mask.
//!
//! Objects are painted in annotation order, so later objects win at
//! overlaps. Canvas pixels no object covers are neutral gray.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::diffusion::{downsample_mask, LatentMask};
use crate::error::{Error, Result};
use crate::objects::ObjectAsset;
use crate::raster::{self, BinaryMask, PixelRect};
use crate::scene::{Canvas, ObjectAnnotation, ObjectId, SceneSpec};

pub const FILLER: Rgb<u8> = Rgb([128, 128, 128]);

/// An asset resampled into its box on the canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedAsset {
    pub rect: PixelRect,
    /// Box-sized object pixels.
    pub image: RgbImage,
    /// Box-sized mask.
    pub mask: BinaryMask,
    pub scale: f64,
}

impl PlacedAsset {
    /// The placed image on a canvas-sized raster (black outside the box).
    pub fn canvas_image(&self, canvas: Canvas) -> RgbImage {
        let mut out = RgbImage::new(canvas.width, canvas.height);
        image::imageops::replace(&mut out, &self.image, self.rect.x as i64, self.rect.y as i64);
        out
    }

    /// The placed mask on a canvas-sized raster.
    pub fn canvas_mask(&self, canvas: Canvas) -> BinaryMask {
        let r = self.rect;
        BinaryMask::from_fn(canvas.width, canvas.height, |x, y| {
            x >= r.x
                && y >= r.y
                && x < r.x + r.width
                && y < r.y + r.height
                && self.mask.get(x - r.x, y - r.y)
        })
    }
}

/// Scales an asset into the (clipped) annotation box. Images are resampled
/// with block means or bilinear filtering, masks with nearest neighbour.
pub fn place_asset(asset: &ObjectAsset, annotation: &ObjectAnnotation, canvas: Canvas) -> Result<PlacedAsset> {
    let rect = annotation.region.clip(canvas).ok_or_else(|| {
        Error::Placement(format!(
            "box of {} lies outside the canvas",
            annotation.object_id
        ))
    })?;
    let (w, h) = (rect.width, rect.height);
    if asset.image.dimensions() == (w, h) {
        return Ok(PlacedAsset {
            rect,
            image: asset.image.clone(),
            mask: asset.mask.clone(),
            scale: 1.0,
        });
    }
    let g = &asset.geometry;
    let (image, mask) = if asset.image.dimensions() == (g.frame, g.frame) {
        (g.extract_rgb(&asset.image)?, g.extract_mask(&asset.mask)?)
    } else {
        (asset.image.clone(), asset.mask.clone())
    };
    Ok(PlacedAsset {
        rect,
        image: raster::resize_rgb(&image, w, h),
        mask: raster::resize_mask(&mask, w, h),
        scale: g.scale,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementRecord {
    pub object_id: ObjectId,
    pub rect: PixelRect,
    pub scale: f64,
    pub z_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeGuide {
    pub x_init: RgbImage,
    pub mask_full: BinaryMask,
    pub mask_latent: LatentMask,
    pub factor: u32,
    pub placement_log: Vec<PlacementRecord>,
}

pub fn compose_guide(spec: &SceneSpec, assets: &[ObjectAsset], factor: u32) -> Result<CompositeGuide> {
    let canvas = spec.canvas;
    let mut x_init = RgbImage::from_pixel(canvas.width, canvas.height, FILLER);
    let mut mask_full = BinaryMask::new(canvas.width, canvas.height);
    let mut placement_log = Vec::with_capacity(spec.objects.len());
    for (z_index, ann) in spec.objects.iter().enumerate() {
        let asset = assets
            .iter()
            .find(|a| a.object_id == ann.object_id)
            .ok_or_else(|| Error::Composition(ann.object_id.0.clone()))?;
        let placed = place_asset(asset, ann, canvas)?;
        let r = placed.rect;
        for y in 0..r.height {
            for x in 0..r.width {
                if placed.mask.get(x, y) {
                    x_init.put_pixel(r.x + x, r.y + y, *placed.image.get_pixel(x, y));
                    mask_full.set(r.x + x, r.y + y, true);
                }
            }
        }
        placement_log.push(PlacementRecord {
            object_id: ann.object_id.clone(),
            rect: r,
            scale: placed.scale,
            z_index,
        });
    }
    let mask_latent = downsample_mask(&mask_full, factor)?;
    Ok(CompositeGuide {
        x_init,
        mask_full,
        mask_latent,
        factor,
        placement_log,
    })
}

/// Encoded guide files: x_init PNG, full mask PNG, latent mask PNG, placement log JSON.
pub fn encode_guide(guide: &CompositeGuide) -> Result<[Vec<u8>; 4]> {
    let latent = BinaryMask::from_values(
        guide.mask_latent.width() as u32,
        guide.mask_latent.height() as u32,
        guide.mask_latent.as_raw().to_vec(),
    )?;
    Ok([
        raster::encode_png_rgb(&guide.x_init)?,
        raster::encode_png_gray(&guide.mask_full.to_gray())?,
        raster::encode_png_gray(&latent.to_gray())?,
        serde_json::to_vec_pretty(&guide.placement_log)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::CropGeometry;
    use crate::scene::BoxRegion;
    use chrono::DateTime;
    use image::GrayImage;

    fn solid_asset(id: &str, w: u32, h: u32, color: [u8; 3]) -> ObjectAsset {
        ObjectAsset::new(
            id.into(),
            RgbImage::from_pixel(w, h, Rgb(color)),
            BinaryMask::filled(w, h),
            CropGeometry::identity(w, h),
        )
        .unwrap()
    }

    fn spec(objects: Vec<ObjectAnnotation>) -> SceneSpec {
        SceneSpec {
            scene_id: "s".into(),
            sketch: GrayImage::new(64, 64),
            sketch_path: "sketch.png".into(),
            canvas: Canvas {
                width: 64,
                height: 64,
            },
            objects,
            background_text: "in a room".into(),
            created_at: DateTime::from_timestamp(0, 0).unwrap(),
        }
    }

    #[test]
    fn box_sized_asset_is_placed_unchanged() {
        let a = solid_asset("a", 16, 8, [10, 20, 30]);
        let ann = ObjectAnnotation::new("a", "cat", BoxRegion::new(4, 4, 16, 8));
        let p = place_asset(&a, &ann, Canvas { width: 64, height: 64 }).unwrap();
        assert_eq!(p.image, a.image);
        assert_eq!(p.mask, a.mask);
        assert_eq!(p.scale, 1.0);
    }

    #[test]
    fn clipped_box_places_the_intersection() {
        let geometry = CropGeometry::fit(32, 64, 64);
        let frame = RgbImage::from_pixel(64, 64, Rgb([5, 5, 5]));
        let a = ObjectAsset::new("a".into(), frame, BinaryMask::filled(64, 64), geometry).unwrap();
        let ann = ObjectAnnotation::new("a", "cat", BoxRegion::new(48, 0, 32, 64));
        let canvas = Canvas { width: 64, height: 64 };
        let p = place_asset(&a, &ann, canvas).unwrap();
        assert_eq!(p.rect, PixelRect { x: 48, y: 0, width: 16, height: 64 });
        let m = p.canvas_mask(canvas);
        assert!(m.get(63, 10) && !m.get(47, 10));
        let outside = ObjectAnnotation::new("a", "cat", BoxRegion::new(64, 64, 10, 10));
        assert!(matches!(place_asset(&a, &outside, canvas), Err(Error::Placement(_))));
    }

    #[test]
    fn full_mask_placement_fills_the_box() {
        let a = solid_asset("a", 64, 64, [1, 2, 3]);
        let ann = ObjectAnnotation::new("a", "cat", BoxRegion::new(0, 0, 64, 64));
        let canvas = Canvas { width: 128, height: 128 };
        let p = place_asset(&a, &ann, canvas).unwrap();
        let m = p.canvas_mask(canvas);
        assert_eq!(m.count(), 64 * 64);
        assert!(m.get(0, 0) && m.get(63, 63) && !m.get(64, 64));
    }

    #[test]
    fn overlap_shows_the_later_object() {
        let s = spec(vec![
            ObjectAnnotation::new("a", "cat", BoxRegion::new(0, 0, 20, 20)),
            ObjectAnnotation::new("b", "dog", BoxRegion::new(10, 10, 20, 20)),
        ]);
        let assets = vec![
            solid_asset("b", 20, 20, [0, 0, 255]),
            solid_asset("a", 20, 20, [255, 0, 0]),
        ];
        let g = compose_guide(&s, &assets, 2).unwrap();
        assert_eq!(g.x_init.get_pixel(15, 15), &Rgb([0, 0, 255]));
        assert_eq!(g.x_init.get_pixel(5, 5), &Rgb([255, 0, 0]));
        assert_eq!(g.x_init.get_pixel(40, 40), &FILLER);
        assert_eq!(g.mask_full.count(), 400 + 400 - 100);
        assert_eq!(g.mask_latent, downsample_mask(&g.mask_full, 2).unwrap());
        assert_eq!(g.placement_log[1].z_index, 1);
    }

    #[test]
    fn missing_asset_names_the_object() {
        let s = spec(vec![ObjectAnnotation::new("a", "cat", BoxRegion::new(0, 0, 8, 8))]);
        match compose_guide(&s, &[], 2) {
            Err(Error::Composition(id)) => assert_eq!(id, "a"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
