//! Raster helpers shared by object generation and composition: binary masks,
//! PNG codecs, letterbox cropping and the resampling rules used to move
//! pixels between generator frames and canvas boxes.

use std::collections::VecDeque;
use std::io::Cursor;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ink threshold for grayscale sketches: pixels darker than this are strokes.
pub const INK_THRESHOLD: u8 = 128;

/// A strictly binary raster stored row-major as 0/1 bytes.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("set", &self.count())
            .finish()
    }
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; (width as usize) * (height as usize)],
        }
    }

    pub fn filled(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![1; (width as usize) * (height as usize)],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut mask = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    mask.set(x, y, true);
                }
            }
        }
        mask
    }

    /// Builds a mask from raw values, rejecting anything outside {0, 1}.
    pub fn from_values(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != (width as usize) * (height as usize) {
            return Err(Error::shape(format!(
                "mask buffer has {} entries, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Mask("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Marks every pixel darker than [`INK_THRESHOLD`].
    pub fn from_ink(sketch: &GrayImage) -> Self {
        Self::from_fn(sketch.width(), sketch.height(), |x, y| {
            sketch.get_pixel(x, y)[0] < INK_THRESHOLD
        })
    }

    /// Reads a stored mask raster; only 0 and 255 are accepted.
    pub fn from_gray(img: &GrayImage) -> Result<Self> {
        let mut data = Vec::with_capacity(img.as_raw().len());
        for &v in img.as_raw() {
            match v {
                0 => data.push(0),
                255 => data.push(1),
                other => {
                    return Err(Error::Mask(format!(
                        "mask raster contains value {other}; only 0 and 255 are allowed"
                    )))
                }
            }
        }
        Ok(Self {
            width: img.width(),
            height: img.height(),
            data,
        })
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y as usize) * (self.width as usize) + x as usize] != 0
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let idx = (y as usize) * (self.width as usize) + x as usize;
        self.data[idx] = value as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Keeps the largest 4-connected component and fills its enclosed holes.
    pub fn cleaned(&self) -> BinaryMask {
        let largest = self.largest_component();
        largest.holes_filled()
    }

    fn largest_component(&self) -> BinaryMask {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut label = vec![0u32; w * h];
        let mut best = (0usize, 0u32);
        let mut next = 0u32;
        let mut queue = VecDeque::new();
        for start in 0..w * h {
            if self.data[start] == 0 || label[start] != 0 {
                continue;
            }
            next += 1;
            label[start] = next;
            queue.push_back(start);
            let mut size = 0usize;
            while let Some(idx) = queue.pop_front() {
                size += 1;
                for n in neighbors4(idx, w, h) {
                    if self.data[n] != 0 && label[n] == 0 {
                        label[n] = next;
                        queue.push_back(n);
                    }
                }
            }
            if size > best.0 {
                best = (size, next);
            }
        }
        let data = label
            .iter()
            .map(|&l| (l != 0 && l == best.1) as u8)
            .collect();
        BinaryMask {
            width: self.width,
            height: self.height,
            data,
        }
    }

    fn holes_filled(&self) -> BinaryMask {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut outside = vec![false; w * h];
        let mut queue = VecDeque::new();
        for idx in 0..w * h {
            let (x, y) = (idx % w, idx / w);
            let border = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
            if border && self.data[idx] == 0 {
                outside[idx] = true;
                queue.push_back(idx);
            }
        }
        while let Some(idx) = queue.pop_front() {
            for n in neighbors4(idx, w, h) {
                if self.data[n] == 0 && !outside[n] {
                    outside[n] = true;
                    queue.push_back(n);
                }
            }
        }
        let data = outside.iter().map(|&o| (!o) as u8).collect();
        BinaryMask {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

fn neighbors4(idx: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (idx % w, idx / w);
    let left = (x > 0).then(|| idx - 1);
    let right = (x + 1 < w).then(|| idx + 1);
    let up = (y > 0).then(|| idx - w);
    let down = (y + 1 < h).then(|| idx + w);
    [left, right, up, down].into_iter().flatten()
}

pub fn encode_png_gray(img: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn encode_png_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_png_gray(bytes: &[u8]) -> Result<GrayImage> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.into_luma8())
}

pub fn decode_png_rgb(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.into_rgb8())
}

pub fn gray_to_rgb(img: &GrayImage) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let v = img.get_pixel(x, y)[0];
        Rgb([v, v, v])
    })
}

/// Pixel-space rectangle, already clipped to a canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

/// How a box-sized crop was fitted into a square generator frame.
///
/// Crops are scaled by an integer factor when they fit (nearest-neighbour,
/// so the crop is recoverable exactly) and by a fractional factor below 1
/// otherwise; the scaled content is centred on a white field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropGeometry {
    pub frame: u32,
    pub offset_x: u32,
    pub offset_y: u32,
    pub scale: f64,
    pub content_width: u32,
    pub content_height: u32,
    pub source_width: u32,
    pub source_height: u32,
}

impl CropGeometry {
    /// Geometry of an asset that already has the box dimensions.
    pub fn identity(width: u32, height: u32) -> Self {
        Self {
            frame: width.max(height),
            offset_x: 0,
            offset_y: 0,
            scale: 1.0,
            content_width: width,
            content_height: height,
            source_width: width,
            source_height: height,
        }
    }

    /// Computes the letterbox fit of a `width`×`height` crop into a `frame`² square.
    pub fn fit(width: u32, height: u32, frame: u32) -> Self {
        let fit = (frame as f64 / width as f64).min(frame as f64 / height as f64);
        let scale = if fit >= 1.0 { fit.floor() } else { fit };
        let content_width = ((width as f64 * scale).round() as u32).clamp(1, frame);
        let content_height = ((height as f64 * scale).round() as u32).clamp(1, frame);
        Self {
            frame,
            offset_x: (frame - content_width) / 2,
            offset_y: (frame - content_height) / 2,
            scale,
            content_width,
            content_height,
            source_width: width,
            source_height: height,
        }
    }

    fn integer_scale(&self) -> Option<u32> {
        (self.scale >= 1.0 && self.scale.fract() == 0.0).then_some(self.scale as u32)
    }

    /// Source coordinate sampled by content pixel `(cx, cy)`.
    fn source_of(&self, cx: u32, cy: u32) -> (u32, u32) {
        let sx = ((cx as f64 + 0.5) * self.source_width as f64 / self.content_width as f64) as u32;
        let sy =
            ((cy as f64 + 0.5) * self.source_height as f64 / self.content_height as f64) as u32;
        (sx.min(self.source_width - 1), sy.min(self.source_height - 1))
    }

    /// Content coordinate sampled by source pixel `(sx, sy)`.
    fn content_of(&self, sx: u32, sy: u32) -> (u32, u32) {
        let cx = ((sx as f64 + 0.5) * self.content_width as f64 / self.source_width as f64) as u32;
        let cy =
            ((sy as f64 + 0.5) * self.content_height as f64 / self.source_height as f64) as u32;
        (
            cx.min(self.content_width - 1),
            cy.min(self.content_height - 1),
        )
    }

    /// Letterboxes a crop into the generator frame.
    pub fn letterbox(&self, crop: &GrayImage) -> GrayImage {
        let mut out = GrayImage::from_pixel(self.frame, self.frame, Luma([255]));
        for cy in 0..self.content_height {
            for cx in 0..self.content_width {
                let (sx, sy) = self.source_of(cx, cy);
                out.put_pixel(
                    self.offset_x + cx,
                    self.offset_y + cy,
                    *crop.get_pixel(sx, sy),
                );
            }
        }
        out
    }

    fn check_frame(&self, w: u32, h: u32) -> Result<()> {
        if w != self.frame || h != self.frame {
            return Err(Error::shape(format!(
                "expected a {0}x{0} generator frame, got {w}x{h}",
                self.frame
            )));
        }
        Ok(())
    }

    /// Maps a grayscale frame back to source (box) resolution.
    pub fn extract_gray(&self, frame: &GrayImage) -> Result<GrayImage> {
        self.check_frame(frame.width(), frame.height())?;
        let mut out = GrayImage::new(self.source_width, self.source_height);
        match self.integer_scale() {
            Some(s) => {
                for sy in 0..self.source_height {
                    for sx in 0..self.source_width {
                        let mut sum = 0u32;
                        for dy in 0..s {
                            for dx in 0..s {
                                sum += frame.get_pixel(
                                    self.offset_x + sx * s + dx,
                                    self.offset_y + sy * s + dy,
                                )[0] as u32;
                            }
                        }
                        let n = s * s;
                        out.put_pixel(sx, sy, Luma([((sum + n / 2) / n) as u8]));
                    }
                }
            }
            None => {
                let content = image::imageops::crop_imm(
                    frame,
                    self.offset_x,
                    self.offset_y,
                    self.content_width,
                    self.content_height,
                )
                .to_image();
                out = image::imageops::resize(
                    &content,
                    self.source_width,
                    self.source_height,
                    image::imageops::FilterType::Triangle,
                );
            }
        }
        Ok(out)
    }

    /// Maps an RGB frame back to source (box) resolution: block mean for
    /// integer scales, bilinear otherwise.
    pub fn extract_rgb(&self, frame: &RgbImage) -> Result<RgbImage> {
        self.check_frame(frame.width(), frame.height())?;
        match self.integer_scale() {
            Some(s) => {
                let n = s * s;
                Ok(RgbImage::from_fn(
                    self.source_width,
                    self.source_height,
                    |sx, sy| {
                        let mut sum = [0u32; 3];
                        for dy in 0..s {
                            for dx in 0..s {
                                let p = frame.get_pixel(
                                    self.offset_x + sx * s + dx,
                                    self.offset_y + sy * s + dy,
                                );
                                for c in 0..3 {
                                    sum[c] += p[c] as u32;
                                }
                            }
                        }
                        Rgb(sum.map(|v| ((v + n / 2) / n) as u8))
                    },
                ))
            }
            None => {
                let content = image::imageops::crop_imm(
                    frame,
                    self.offset_x,
                    self.offset_y,
                    self.content_width,
                    self.content_height,
                )
                .to_image();
                Ok(image::imageops::resize(
                    &content,
                    self.source_width,
                    self.source_height,
                    image::imageops::FilterType::Triangle,
                ))
            }
        }
    }

    /// Maps a frame mask back to source resolution with nearest-neighbour sampling.
    pub fn extract_mask(&self, frame: &BinaryMask) -> Result<BinaryMask> {
        self.check_frame(frame.width(), frame.height())?;
        Ok(BinaryMask::from_fn(
            self.source_width,
            self.source_height,
            |sx, sy| {
                let (cx, cy) = self.content_of(sx, sy);
                frame.get(self.offset_x + cx, self.offset_y + cy)
            },
        ))
    }
}

/// Bilinear resize for RGB images; identity when dimensions already match.
pub fn resize_rgb(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.dimensions() == (width, height) {
        return img.clone();
    }
    image::imageops::resize(img, width, height, image::imageops::FilterType::Triangle)
}

/// Nearest-neighbour resize for masks; identity when dimensions already match.
pub fn resize_mask(mask: &BinaryMask, width: u32, height: u32) -> BinaryMask {
    if mask.dimensions() == (width, height) {
        return mask.clone();
    }
    BinaryMask::from_fn(width, height, |x, y| {
        let sx = (((x as f64 + 0.5) * mask.width() as f64 / width as f64) as u32)
            .min(mask.width() - 1);
        let sy = (((y as f64 + 0.5) * mask.height() as f64 / height as f64) as u32)
            .min(mask.height() - 1);
        mask.get(sx, sy)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cleanup_keeps_largest_component_and_fills_holes() {
        // ring of 5x5 with a hole, plus a stray pixel
        let mut m = BinaryMask::from_fn(10, 10, |x, y| {
            (1..=5).contains(&x) && (1..=5).contains(&y) && !(x == 3 && y == 3)
        });
        m.set(8, 8, true);
        let c = m.cleaned();
        assert!(!c.get(8, 8));
        assert!(c.get(3, 3));
        assert_eq!(c.count(), 25);
    }

    #[test]
    fn letterbox_100x50_centres_content() {
        let g = CropGeometry::fit(100, 50, 512);
        assert_eq!(g.scale, 5.0);
        assert_eq!((g.content_width, g.content_height), (500, 250));
        assert_eq!((g.offset_x, g.offset_y), (6, 131));
    }

    #[test]
    fn letterbox_round_trip_is_exact_for_integer_scale() {
        let crop = GrayImage::from_fn(37, 21, |x, y| Luma([((x * 7 + y * 13) % 256) as u8]));
        let g = CropGeometry::fit(37, 21, 128);
        let framed = g.letterbox(&crop);
        assert_eq!(framed.dimensions(), (128, 128));
        assert_eq!(g.extract_gray(&framed).unwrap(), crop);
        let mask = BinaryMask::from_fn(37, 21, |x, y| (x + y) % 3 == 0);
        let framed_mask = BinaryMask::from_fn(128, 128, |x, y| {
            let inside = x >= g.offset_x
                && y >= g.offset_y
                && x < g.offset_x + g.content_width
                && y < g.offset_y + g.content_height;
            inside && {
                let s = g.scale as u32;
                mask.get((x - g.offset_x) / s, (y - g.offset_y) / s)
            }
        });
        assert_eq!(g.extract_mask(&framed_mask).unwrap(), mask);
    }

    #[test]
    fn mask_png_values_are_strict() {
        let img = GrayImage::from_pixel(2, 2, Luma([17]));
        assert!(matches!(BinaryMask::from_gray(&img), Err(Error::Mask(_))));
        let m = BinaryMask::from_fn(3, 2, |x, _| x == 1);
        assert_eq!(BinaryMask::from_gray(&m.to_gray()).unwrap(), m);
    }
}
