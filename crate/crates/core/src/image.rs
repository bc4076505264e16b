//! Grayscale raster images and the square crop-and-resize used by the
//! Siamese patch pipeline.
//!
//! Pixels are `f64` in `[0, 1]`. Color inputs are converted with ITU-R 601
//! luma weights (0.299, 0.587, 0.114). Pixel centers sit at integer
//! coordinates: pixel `(0, 0)` is centered at `(0.0, 0.0)`.

use std::path::Path;

use image as img;
use ndarray::Array2;

use crate::error::Error;
use crate::types::BoundingBox;
use crate::Result;

const LUMA_R: f64 = 0.299;
const LUMA_G: f64 = 0.587;
const LUMA_B: f64 = 0.114;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    /// Row-major intensities, shape `(height, width)`.
    pub data: Array2<f64>,
}

impl GrayImage {
    pub fn new(data: Array2<f64>) -> Self {
        Self { data }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self {
            data: Array2::from_elem((height, width), value),
        }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn mean(&self) -> f64 {
        self.data.mean().unwrap_or(0.0)
    }

    /// Decode an image file and convert to grayscale with 601 weights.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(format!("image file {}", path.display())));
        }
        let rgb = img::open(path)?.to_rgb8();
        let (w, h) = rgb.dimensions();
        let mut data = Array2::zeros((h as usize, w as usize));
        for (x, y, p) in rgb.enumerate_pixels() {
            let v = (LUMA_R * p[0] as f64 + LUMA_G * p[1] as f64 + LUMA_B * p[2] as f64) / 255.0;
            data[[y as usize, x as usize]] = v;
        }
        Ok(Self { data })
    }

    /// Write as an 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.data.dim();
        let mut buf = img::GrayImage::new(w as u32, h as u32);
        for ((y, x), v) in self.data.indexed_iter() {
            let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, img::Luma([byte]));
        }
        buf.save(path)?;
        Ok(())
    }

    /// Bilinear sample at continuous coordinates; out-of-frame positions
    /// return `pad` (used for crop padding with the image mean).
    pub fn sample_bilinear(&self, x: f64, y: f64, pad: f64) -> f64 {
        let (h, w) = self.data.dim();
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let at = |yy: f64, xx: f64| -> f64 {
            if yy < 0.0 || xx < 0.0 || yy > (h - 1) as f64 || xx > (w - 1) as f64 {
                pad
            } else {
                self.data[[yy as usize, xx as usize]]
            }
        };
        let v00 = at(y0, x0);
        let v01 = at(y0, x0 + 1.0);
        let v10 = at(y0 + 1.0, x0);
        let v11 = at(y0 + 1.0, x0 + 1.0);
        v00 * (1.0 - fx) * (1.0 - fy) + v01 * fx * (1.0 - fy) + v10 * (1.0 - fx) * fy + v11 * fx * fy
    }
}

/// Mapping between a square crop region in frame coordinates and a resized
/// output patch.
///
/// Output pixel `i` samples the frame at
/// `center + (i - (out_size-1)/2) * scale` per axis, so the patch center
/// pixel lands exactly on the region center.
#[derive(Debug, Clone, Copy)]
pub struct CropTransform {
    pub center_x: f64,
    pub center_y: f64,
    /// Frame pixels per patch pixel.
    pub scale: f64,
    pub out_size: usize,
}

impl CropTransform {
    /// Crop geometry for a target box: the box is grown by
    /// `context_factor * (w + h) / 2` per side and the region side is the
    /// geometric mean of the padded width and height (square crop), then
    /// resized to `out_size`.
    pub fn around_box(target: &BoundingBox, context_factor: f64, out_size: usize) -> Self {
        let (cx, cy) = target.center();
        let margin = context_factor * (target.w + target.h);
        let side = ((target.w + margin) * (target.h + margin)).sqrt();
        Self {
            center_x: cx,
            center_y: cy,
            scale: side / out_size as f64,
            out_size,
        }
    }

    /// Same region as [`around_box`](Self::around_box) but scaled up so a
    /// larger output keeps the target at the template's resolution
    /// (search-patch geometry).
    pub fn around_box_scaled(
        target: &BoundingBox,
        context_factor: f64,
        template_size: usize,
        out_size: usize,
    ) -> Self {
        let base = Self::around_box(target, context_factor, template_size);
        Self {
            center_x: base.center_x,
            center_y: base.center_y,
            scale: base.scale,
            out_size,
        }
    }

    pub fn region_side(&self) -> f64 {
        self.scale * self.out_size as f64
    }

    /// Patch coordinate -> frame coordinate.
    pub fn to_frame(&self, px: f64, py: f64) -> (f64, f64) {
        let half = (self.out_size as f64 - 1.0) / 2.0;
        (
            self.center_x + (px - half) * self.scale,
            self.center_y + (py - half) * self.scale,
        )
    }

    /// Frame coordinate -> patch coordinate.
    pub fn to_patch(&self, fx: f64, fy: f64) -> (f64, f64) {
        let half = (self.out_size as f64 - 1.0) / 2.0;
        (
            (fx - self.center_x) / self.scale + half,
            (fy - self.center_y) / self.scale + half,
        )
    }

    /// Map a frame-coordinate box into patch coordinates.
    pub fn box_to_patch(&self, b: &BoundingBox) -> BoundingBox {
        let (x, y) = self.to_patch(b.x, b.y);
        BoundingBox {
            x,
            y,
            w: b.w / self.scale,
            h: b.h / self.scale,
        }
    }

    /// Map a patch-coordinate box back into frame coordinates.
    pub fn box_to_frame(&self, b: &BoundingBox) -> BoundingBox {
        let (x, y) = self.to_frame(b.x, b.y);
        BoundingBox {
            x,
            y,
            w: b.w * self.scale,
            h: b.h * self.scale,
        }
    }

    /// Extract the patch, padding out-of-frame area with the frame mean.
    pub fn extract(&self, frame: &GrayImage) -> GrayImage {
        let pad = frame.mean();
        let n = self.out_size;
        let mut out = Array2::zeros((n, n));
        for py in 0..n {
            for px in 0..n {
                let (fx, fy) = self.to_frame(px as f64, py as f64);
                out[[py, px]] = frame.sample_bilinear(fx, fy, pad);
            }
        }
        GrayImage::new(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grayscale_601_weights() {
        use tempfile::tempdir;
        let dir = tempdir().unwrap();
        let path = dir.path().join("px.png");
        let mut buf = img::RgbImage::new(1, 1);
        buf.put_pixel(0, 0, img::Rgb([255, 0, 0]));
        buf.save(&path).unwrap();
        let g = GrayImage::load(&path).unwrap();
        assert!((g.data[[0, 0]] - 0.299).abs() < 1e-9);
    }

    #[test]
    fn bilinear_at_integer_coords_is_exact() {
        let mut data = Array2::zeros((3, 3));
        data[[1, 2]] = 0.7;
        let im = GrayImage::new(data);
        assert_eq!(im.sample_bilinear(2.0, 1.0, 0.0), 0.7);
    }

    #[test]
    fn bilinear_midpoint_averages() {
        let mut data = Array2::zeros((1, 2));
        data[[0, 0]] = 0.2;
        data[[0, 1]] = 0.6;
        let im = GrayImage::new(data);
        assert!((im.sample_bilinear(0.5, 0.0, 0.0) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn crop_center_pixel_hits_box_center() {
        // Odd-sized output, box centered at integer coordinates: the patch
        // center pixel must equal the frame pixel at the box center.
        let mut data = Array2::from_elem((41, 41), 0.25);
        data[[20, 20]] = 0.9;
        let frame = GrayImage::new(data);
        let target = BoundingBox::new(16.0, 16.0, 8.0, 8.0).unwrap(); // center (20,20)
        let t = CropTransform::around_box(&target, 0.5, 15);
        let patch = t.extract(&frame);
        assert_eq!(patch.data[[7, 7]], 0.9);
    }

    #[test]
    fn crop_pads_with_frame_mean() {
        let frame = GrayImage::constant(10, 10, 0.5);
        let target = BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let t = CropTransform::around_box(&target, 0.5, 9);
        let patch = t.extract(&frame);
        // Top-left of the patch reaches outside the frame; padding is the
        // frame mean, which equals the constant so every pixel is 0.5.
        assert!(patch.data.iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn roundtrip_patch_frame_coords() {
        let target = BoundingBox::new(10.0, 20.0, 8.0, 12.0).unwrap();
        let t = CropTransform::around_box(&target, 0.5, 31);
        let (fx, fy) = t.to_frame(3.0, 4.0);
        let (px, py) = t.to_patch(fx, fy);
        assert!((px - 3.0).abs() < 1e-9 && (py - 4.0).abs() < 1e-9);
    }
}
