use std::path::Path;

use crate::error::{Error, Result};

/// RGB raster, channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0.0; 3 * width * height] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Image::new(width, height);
        for (c, &v) in rgb.iter().enumerate() {
            img.plane_mut(c).fill(v);
        }
        img
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        [
            self.data[self.idx(0, y, x)],
            self.data[self.idx(1, y, x)],
            self.data[self.idx(2, y, x)],
        ]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        for (c, &v) in rgb.iter().enumerate() {
            let i = self.idx(c, y, x);
            self.data[i] = v;
        }
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn is_valid(&self) -> bool {
        self.data.len() == 3 * self.width * self.height
            && self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamp(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at `i + 0.5`),
    /// border-clamped.
    pub fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = (fx - x0 as f64) as f32;
        let ay = (fy - y0 as f64) as f32;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let p = |xx, yy| self.data[self.idx(c, yy, xx)];
            let top = p(x0, y0) * (1.0 - ax) + p(x1, y0) * ax;
            let bot = p(x0, y1) * (1.0 - ax) + p(x1, y1) * ax;
            *o = top * (1.0 - ay) + bot * ay;
        }
        out
    }

    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Image::new(width, height);
        for y in 0..height {
            for x in 0..width {
                let v = self.sample((x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy);
                out.set(x, y, v);
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = self.get(x as usize, y as usize);
            image::Rgb(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        let mut out = Image::new(img.width() as usize, img.height() as usize);
        for (x, y, p) in img.enumerate_pixels() {
            out.set(x as usize, y as usize, p.0.map(|v| v as f32 / 255.0));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Image> {
        let dynimg = image::open(path)?;
        Ok(Image::from_rgb8(&dynimg.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(Error::from)
    }
}

/// RGB to HSV, hue in degrees.
pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / d).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m].map(|u| u.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_roundtrip() {
        for rgb in [[0.2, 0.5, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.9, 0.8, 0.1]] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-5, "{rgb:?} -> {back:?}");
            }
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Image::filled(8, 6, [0.25, 0.5, 0.75]);
        assert_eq!(img.resize(8, 6), img);
        let r = img.resize(5, 9);
        assert_eq!((r.width, r.height), (5, 9));
        assert!(r.data.iter().all(|&v| [0.25, 0.5, 0.75].iter().any(|&c| (v - c).abs() < 1e-6)));
    }

    #[test]
    fn png_roundtrip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let mut img = Image::new(4, 3);
        img.set(1, 2, [1.0, 0.0, 100.0 / 255.0]);
        img.save_png(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert_eq!(back, img);
    }
}
