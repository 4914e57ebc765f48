//! Planar RGB image buffers in `f64`, plus the geometric operations the
//! preprocessing pipeline needs (bilinear resize, crop, horizontal flip).
//!
//! Values live in `[0, 1]`. Resizing reuses the corner-aligned bilinear
//! kernel from the map module so images and heatmaps are always sampled the
//! same way.

use std::path::Path;

use aufer_core::aumap::resize_map;
use aufer_core::map::Map2;

use crate::error::ToolkitError;

/// An RGB image stored as three planar channels, row-major, values in
/// `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    h: usize,
    w: usize,
    data: Vec<f64>, // [channel][y][x]
}

impl ImageBuf {
    pub fn zeros(h: usize, w: usize) -> Self {
        assert!(h > 0 && w > 0, "ImageBuf dimensions must be nonzero");
        Self { h, w, data: vec![0.0; 3 * h * w] }
    }

    pub fn filled(h: usize, w: usize, rgb: [f64; 3]) -> Self {
        let mut im = Self::zeros(h, w);
        for c in 0..3 {
            im.channel_mut(c).fill(rgb[c]);
        }
        im
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    /// `(h, w)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.h * self.w;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.h * self.w;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.h * self.w + y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[c * self.h * self.w + y * self.w + x] = v;
    }

    /// Sets all three channels at one pixel.
    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for c in 0..3 {
            self.set(c, y, x, rgb[c]);
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn load_png(path: &Path) -> Result<ImageBuf, ToolkitError> {
        let img = image::open(path)
            .map_err(|e| ToolkitError::Image { path: path.to_path_buf(), message: e.to_string() })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = ImageBuf::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    out.set(c, y, x, p.0[c] as f64 / 255.0);
                }
            }
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ToolkitError> {
        let mut img = image::RgbImage::new(self.w as u32, self.h as u32);
        for y in 0..self.h {
            for x in 0..self.w {
                let px = [
                    quantize(self.get(0, y, x)),
                    quantize(self.get(1, y, x)),
                    quantize(self.get(2, y, x)),
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path)
            .map_err(|e| ToolkitError::Image { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Corner-aligned bilinear resize of all three channels.
    pub fn resized(&self, target: (usize, usize)) -> ImageBuf {
        if target == (self.h, self.w) {
            return self.clone();
        }
        let mut out = ImageBuf::zeros(target.0, target.1);
        for c in 0..3 {
            let plane = Map2::from_vec(self.h, self.w, self.channel(c).to_vec());
            let resized = resize_map(&plane, target).expect("nonzero target");
            out.channel_mut(c).copy_from_slice(resized.data());
        }
        out
    }

    /// Crops a `(h, w)` window whose top-left corner is `(oy, ox)`.
    /// The window must lie inside the image.
    pub fn cropped(&self, oy: usize, ox: usize, size: (usize, usize)) -> ImageBuf {
        let (ch, cw) = size;
        assert!(oy + ch <= self.h && ox + cw <= self.w, "crop window out of bounds");
        let mut out = ImageBuf::zeros(ch, cw);
        for c in 0..3 {
            for y in 0..ch {
                for x in 0..cw {
                    out.set(c, y, x, self.get(c, oy + y, ox + x));
                }
            }
        }
        out
    }

    /// Horizontal flip (pixel `x` maps to `w - 1 - x`).
    pub fn hflipped(&self) -> ImageBuf {
        let mut out = ImageBuf::zeros(self.h, self.w);
        for c in 0..3 {
            for y in 0..self.h {
                for x in 0..self.w {
                    out.set(c, y, x, self.get(c, y, self.w - 1 - x));
                }
            }
        }
        out
    }

    /// Mean over channels as a map, for grayscale-style inspection.
    pub fn luminance(&self) -> Map2 {
        let plane = self.h * self.w;
        let mut data = vec![0.0; plane];
        for c in 0..3 {
            for (acc, v) in data.iter_mut().zip(self.channel(c)) {
                *acc += v / 3.0;
            }
        }
        Map2::from_vec(self.h, self.w, data)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize) -> ImageBuf {
        let mut im = ImageBuf::zeros(h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    im.set(c, y, x, ((c + 1) * (y * w + x)) as f64 / (3 * h * w) as f64);
                }
            }
        }
        im
    }

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let im = gradient_image(9, 13);
        im.save_png(&path).unwrap();
        let back = ImageBuf::load_png(&path).unwrap();
        assert_eq!(back.shape(), (9, 13));
        for (a, b) in im.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn crop_extracts_the_window() {
        let im = gradient_image(10, 10);
        let c = im.cropped(2, 3, (4, 5));
        assert_eq!(c.shape(), (4, 5));
        assert_eq!(c.get(1, 0, 0), im.get(1, 2, 3));
        assert_eq!(c.get(2, 3, 4), im.get(2, 5, 7));
    }

    #[test]
    fn hflip_twice_is_identity() {
        let im = gradient_image(6, 7);
        assert_eq!(im.hflipped().hflipped(), im);
    }

    #[test]
    fn resize_constant_image_is_exact() {
        let im = ImageBuf::filled(5, 5, [0.2, 0.5, 0.8]);
        let r = im.resized((11, 3));
        for c in 0..3 {
            let want = [0.2, 0.5, 0.8][c];
            assert!(r.channel(c).iter().all(|&v| v == want));
        }
    }
}
