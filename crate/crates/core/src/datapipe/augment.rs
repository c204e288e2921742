//! Augmentations with consistent box transport.
//!
//! Geometric operations map each box's corners, take the axis-aligned hull,
//! clip it to the output and drop it when less than [`MIN_VISIBLE`] of its
//! transformed area survives. Photometric operations never touch boxes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{hsv_to_rgb, rgb_to_hsv, Image};
use super::{AnnotatedImage, Labels};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng;

/// Minimum visible fraction for a transported box to be kept.
pub const MIN_VISIBLE: f64 = 0.25;
const CROP_RETRIES: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub enabled: bool,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Hue rotation drawn uniformly from `[-d, d]` degrees.
    pub color_shift_degrees: f64,
    /// Horizontal shear angle drawn uniformly from `[-d, d]` degrees.
    pub shear_degrees: f64,
    pub mosaic_prob: f64,
    pub gaussian_noise_sigma: f64,
    /// Crop area fraction range.
    pub crop_scale: (f64, f64),
    /// Epochs without augmentation at the start and at the end of training.
    pub no_aug_epochs: usize,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            enabled: true,
            hflip_prob: 0.5,
            vflip_prob: 0.1,
            color_shift_degrees: 20.0,
            shear_degrees: 10.0,
            mosaic_prob: 0.5,
            gaussian_noise_sigma: 0.03,
            crop_scale: (0.6, 1.0),
            no_aug_epochs: 15,
        }
    }
}

impl AugmentationPolicy {
    pub fn disabled() -> Self {
        AugmentationPolicy { enabled: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("hflip_prob", self.hflip_prob), ("vflip_prob", self.vflip_prob), ("mosaic_prob", self.mosaic_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        let (lo, hi) = self.crop_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale {:?} must satisfy 0 < lo <= hi <= 1", self.crop_scale)));
        }
        if self.color_shift_degrees < 0.0 || self.shear_degrees < 0.0 || self.shear_degrees >= 45.0 {
            return Err(Error::Config("augmentation magnitudes must be non-negative (shear < 45)".into()));
        }
        if !(self.gaussian_noise_sigma >= 0.0) {
            return Err(Error::Config("gaussian_noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Augmentation is off for the first and last `no_aug_epochs` epochs.
pub fn schedule_augmentation(epoch: usize, total_epochs: usize, policy: &AugmentationPolicy) -> AugmentationPolicy {
    let quiet = epoch < policy.no_aug_epochs || epoch + policy.no_aug_epochs >= total_epochs;
    if quiet {
        AugmentationPolicy { enabled: false, ..policy.clone() }
    } else {
        policy.clone()
    }
}

/// Maps a box through a point transform and clips it to `width x height`.
pub fn transport_box(b: &BBox, f: impl Fn(f64, f64) -> (f64, f64), width: f64, height: f64) -> Option<BBox> {
    let (x1, y1, x2, y2) = b.to_corner();
    let pts = [f(x1, y1), f(x2, y1), f(x1, y2), f(x2, y2)];
    let nx1 = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let nx2 = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let ny1 = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let ny2 = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let full = BBox::from_corner(nx1, ny1, nx2, ny2).ok()?;
    let clipped = full.clip(width, height)?;
    (clipped.area() >= MIN_VISIBLE * full.area()).then_some(clipped)
}

fn transport(labels: &Labels, f: impl Fn(f64, f64) -> (f64, f64), width: f64, height: f64) -> Labels {
    labels.filter_map(|b| transport_box(b, &f, width, height))
}

pub fn hflip(img: &Image, labels: &Labels) -> (Image, Labels) {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            out.set(img.width - 1 - x, y, img.get(x, y));
        }
    }
    let w = img.width as f64;
    let labels = labels.filter_map(|b| Some(BBox { cx: w - b.cx, ..*b }));
    (out, labels)
}

pub fn vflip(img: &Image, labels: &Labels) -> (Image, Labels) {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            out.set(x, img.height - 1 - y, img.get(x, y));
        }
    }
    let h = img.height as f64;
    let labels = labels.filter_map(|b| Some(BBox { cy: h - b.cy, ..*b }));
    (out, labels)
}

pub fn color_shift(img: &Image, degrees: f64) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let [h, s, v] = rgb_to_hsv(img.get(x, y));
            out.set(x, y, hsv_to_rgb([h + degrees as f32, s, v]));
        }
    }
    out
}

pub fn gaussian_noise(img: &Image, sigma: f64, seed: u64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let mut r = rng::rng_for(seed, &[rng::str_id("noise")]);
    let normal = Normal::new(0.0, sigma).expect("sigma is positive");
    let data = img.data.iter().map(|&v| (v as f64 + normal.sample(&mut r)).clamp(0.0, 1.0) as f32).collect();
    Image { data, ..img.clone() }
}

/// Horizontal shear about the image's vertical center: `x' = x + tan(a) * (y - h/2)`.
pub fn shear(img: &Image, labels: &Labels, degrees: f64) -> (Image, Labels) {
    let t = degrees.to_radians().tan();
    let hc = img.height as f64 / 2.0;
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let sx = px - t * (py - hc);
            let v = if sx < 0.0 || sx >= img.width as f64 { [0.5; 3] } else { img.sample(sx, py) };
            out.set(x, y, v);
        }
    }
    let labels = transport(labels, |x, y| (x + t * (y - hc), y), img.width as f64, img.height as f64);
    (out, labels)
}

/// Crops the window `[x0, x0 + cw) x [y0, y0 + ch)`; boxes are translated by
/// `(-x0, -y0)` and clipped.
pub fn crop(img: &Image, labels: &Labels, x0: usize, y0: usize, cw: usize, ch: usize) -> (Image, Labels) {
    let mut out = Image::new(cw, ch);
    for y in 0..ch {
        for x in 0..cw {
            out.set(x, y, img.get(x0 + x, y0 + y));
        }
    }
    let (dx, dy) = (x0 as f64, y0 as f64);
    let labels = transport(labels, |x, y| (x - dx, y - dy), cw as f64, ch as f64);
    (out, labels)
}

/// Random square crop covering a `crop_scale` fraction of the area, resized
/// back to the input dimensions. When every box would be lost the crop is
/// redrawn a few times and finally skipped.
pub fn random_crop(img: &Image, labels: &Labels, crop_scale: (f64, f64), seed: u64) -> (Image, Labels) {
    let (w, h) = (img.width, img.height);
    for attempt in 0..CROP_RETRIES {
        let mut r = rng::rng_for(seed, &[rng::str_id("crop"), attempt]);
        let scale = if crop_scale.0 < crop_scale.1 { r.gen_range(crop_scale.0..=crop_scale.1) } else { crop_scale.0 };
        let cw = ((w as f64 * scale.sqrt()).round() as usize).clamp(1, w);
        let ch = ((h as f64 * scale.sqrt()).round() as usize).clamp(1, h);
        let x0 = r.gen_range(0..=w - cw);
        let y0 = r.gen_range(0..=h - ch);
        let (c, l) = crop(img, labels, x0, y0, cw, ch);
        if labels.is_empty() || !l.is_empty() {
            return resize_with_labels(&c, &l, w, h);
        }
    }
    (img.clone(), labels.clone())
}

fn resize_with_labels(img: &Image, labels: &Labels, w: usize, h: usize) -> (Image, Labels) {
    let sx = w as f64 / img.width as f64;
    let sy = h as f64 / img.height as f64;
    let labels = labels.filter_map(|b| BBox::new(b.cx * sx, b.cy * sy, b.w * sx, b.h * sy).ok());
    (img.resize(w, h), labels)
}

/// Teacher-side view: horizontal flip with probability one half.
pub fn augment_weak(img: &Image, labels: &Labels, seed: u64) -> (Image, Labels) {
    let mut r = rng::rng_for(seed, &[rng::str_id("weak")]);
    if r.gen_bool(0.5) {
        hflip(img, labels)
    } else {
        (img.clone(), labels.clone())
    }
}

/// The extra student-side operations on top of the weak view: Gaussian
/// noise, hue shift, then a random crop.
pub fn augment_student_extras(img: &Image, labels: &Labels, policy: &AugmentationPolicy, seed: u64) -> (Image, Labels) {
    let noisy = gaussian_noise(img, policy.gaussian_noise_sigma, rng::derive(seed, &[1]));
    let mut r = rng::rng_for(seed, &[rng::str_id("strong-color")]);
    let deg = policy.color_shift_degrees;
    let hue = if deg > 0.0 { r.gen_range(-deg..=deg) } else { 0.0 };
    let colored = color_shift(&noisy, hue);
    random_crop(&colored, labels, policy.crop_scale, rng::derive(seed, &[2]))
}

/// Student-side view: the weak view followed by noise, color shift and crop.
pub fn augment_strong(img: &Image, labels: &Labels, policy: &AugmentationPolicy, seed: u64) -> (Image, Labels) {
    let (wimg, wlab) = augment_weak(img, labels, seed);
    augment_student_extras(&wimg, &wlab, policy, rng::derive(seed, &[rng::str_id("extras")]))
}

/// Supervised-stage augmentation (everything but mosaic): flips, hue shift, shear.
pub fn augment_supervised(img: &Image, labels: &Labels, policy: &AugmentationPolicy, seed: u64) -> (Image, Labels) {
    if !policy.enabled {
        return (img.clone(), labels.clone());
    }
    let mut r = rng::rng_for(seed, &[rng::str_id("supervised-aug")]);
    let (mut img, mut labels) = (img.clone(), labels.clone());
    if r.gen_bool(policy.hflip_prob) {
        (img, labels) = hflip(&img, &labels);
    }
    if r.gen_bool(policy.vflip_prob) {
        (img, labels) = vflip(&img, &labels);
    }
    if policy.color_shift_degrees > 0.0 {
        let d = policy.color_shift_degrees;
        img = color_shift(&img, r.gen_range(-d..=d));
    }
    if policy.shear_degrees > 0.0 {
        let d = policy.shear_degrees;
        (img, labels) = shear(&img, &labels, r.gen_range(-d..=d));
    }
    (img, labels)
}

/// Four images in a 2x2 layout split at `(cx, cy)`. Each source is scaled to
/// half the output size and anchored at the split point, so a quadrant larger
/// than half the output leaves a gray margin and a smaller one crops the
/// source.
pub fn mosaic_at(imgs: &[AnnotatedImage], out_size: usize, cx: usize, cy: usize) -> Result<AnnotatedImage> {
    if imgs.len() != 4 {
        return Err(Error::Contract(format!("mosaic needs exactly 4 images, got {}", imgs.len())));
    }
    let half = out_size / 2;
    let mut out = Image::filled(out_size, out_size, [0.5; 3]);
    let mut labels = Labels::default();
    // (quadrant x range, y range, placement offset of the scaled source)
    let cxi = cx as isize;
    let cyi = cy as isize;
    let h = half as isize;
    let quads = [
        ((0, cx), (0, cy), (cxi - h, cyi - h)),
        ((cx, out_size), (0, cy), (cxi, cyi - h)),
        ((0, cx), (cy, out_size), (cxi - h, cyi)),
        ((cx, out_size), (cy, out_size), (cxi, cyi)),
    ];
    for (src, ((qx0, qx1), (qy0, qy1), (ox, oy))) in imgs.iter().zip(quads) {
        let scaled = src.image.resize(half, half);
        for y in qy0..qy1 {
            for x in qx0..qx1 {
                let sx = x as isize - ox;
                let sy = y as isize - oy;
                if sx >= 0 && sy >= 0 && (sx as usize) < half && (sy as usize) < half {
                    out.set(x, y, scaled.get(sx as usize, sy as usize));
                }
            }
        }
        let kx = half as f64 / src.image.width as f64;
        let ky = half as f64 / src.image.height as f64;
        let (fx, fy) = (ox as f64, oy as f64);
        let map = |x: f64, y: f64| (x * kx + fx - qx0 as f64, y * ky + fy - qy0 as f64);
        let (qw, qh) = ((qx1 - qx0) as f64, (qy1 - qy0) as f64);
        let moved = src.labels.filter_map(|b| {
            transport_box(b, map, qw, qh).map(|c| BBox { cx: c.cx + qx0 as f64, cy: c.cy + qy0 as f64, ..c })
        });
        labels.face.extend(moved.face);
        labels.body.extend(moved.body);
    }
    let id = format!("mosaic({})", imgs.iter().map(|i| i.id.as_str()).collect::<Vec<_>>().join(","));
    Ok(AnnotatedImage { id, source: imgs[0].source, image: out, labels })
}

/// [`mosaic_at`] with the split point drawn from the middle half of each axis.
pub fn mosaic(imgs: &[AnnotatedImage], out_size: usize, seed: u64) -> Result<AnnotatedImage> {
    let mut r = rng::rng_for(seed, &[rng::str_id("mosaic")]);
    let lo = out_size / 4;
    let hi = out_size - out_size / 4;
    let cx = r.gen_range(lo..=hi);
    let cy = r.gen_range(lo..=hi);
    mosaic_at(imgs, out_size, cx, cy)
}
