//! Pluggable cartoonization styles and per-image random style mixing.
//!
//! The eleven named slots are procedural stand-ins built from a few raster
//! operations (flattening, ink outlines, palette remapping, halftone dots).
//! A [`StyleTransform::Precomputed`] entry instead reads an already stylized
//! copy of each image from a directory, so outputs of external style
//! transfer models can be mixed in the same way.

use std::path::PathBuf;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{hsv_to_rgb, rgb_to_hsv, Image};
use crate::error::{Error, Result};
use crate::rng;

/// Named style slots.
pub const SLOT_NAMES: [&str; 11] = [
    "hayao", "shinkai", "hosoda", "paprika", "vangogh", "monet", "cezanne", "miyazaki", "as", "kh",
    "whitebox",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum StyleOp {
    BoxBlur { radius: usize },
    Posterize { levels: u32 },
    Ink { threshold: f32 },
    PaletteShift { max_degrees: f32, saturation: f32 },
    Saturate { factor: f32 },
    Grayscale,
    Halftone { period: usize },
    Pixelate { block: usize },
    Streaks { amplitude: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StyleTransform {
    Procedural { name: String, ops: Vec<StyleOp> },
    /// Reads `<dir>/<image id>.png`, resized to the input dimensions.
    Precomputed { name: String, dir: PathBuf },
}

impl StyleTransform {
    pub fn name(&self) -> &str {
        match self {
            StyleTransform::Procedural { name, .. } | StyleTransform::Precomputed { name, .. } => name,
        }
    }

    /// One of [`SLOT_NAMES`], or `procedural:<op>` for a single raw operation.
    pub fn by_name(name: &str) -> Result<StyleTransform> {
        use StyleOp::*;
        let ops = match name {
            "hayao" => vec![BoxBlur { radius: 1 }, PaletteShift { max_degrees: 40.0, saturation: 1.1 }, Posterize { levels: 6 }],
            "shinkai" => vec![Saturate { factor: 1.5 }, PaletteShift { max_degrees: 25.0, saturation: 1.0 }, Posterize { levels: 8 }],
            "hosoda" => vec![BoxBlur { radius: 1 }, Posterize { levels: 4 }, Ink { threshold: 0.25 }],
            "paprika" => vec![PaletteShift { max_degrees: 180.0, saturation: 1.3 }, Posterize { levels: 5 }],
            "vangogh" => vec![Streaks { amplitude: 0.12 }, PaletteShift { max_degrees: 60.0, saturation: 1.2 }, Posterize { levels: 6 }],
            "monet" => vec![BoxBlur { radius: 2 }, PaletteShift { max_degrees: 90.0, saturation: 0.6 }],
            "cezanne" => vec![Pixelate { block: 2 }, Posterize { levels: 3 }],
            "miyazaki" => vec![BoxBlur { radius: 1 }, Ink { threshold: 0.2 }, PaletteShift { max_degrees: 120.0, saturation: 1.0 }],
            "as" => vec![Grayscale, Halftone { period: 3 }, Ink { threshold: 0.25 }],
            "kh" => vec![Posterize { levels: 4 }, PaletteShift { max_degrees: 180.0, saturation: 0.8 }, Ink { threshold: 0.3 }],
            "whitebox" => vec![BoxBlur { radius: 1 }, Posterize { levels: 4 }, Ink { threshold: 0.2 }, PaletteShift { max_degrees: 180.0, saturation: 1.0 }],
            "procedural:posterize" => vec![Posterize { levels: 4 }],
            "procedural:ink" => vec![Ink { threshold: 0.2 }],
            "procedural:palette" => vec![PaletteShift { max_degrees: 180.0, saturation: 1.0 }],
            "procedural:halftone" => vec![Halftone { period: 3 }],
            "procedural:grayscale" => vec![Grayscale],
            _ => return Err(Error::Config(format!("unknown style `{name}`"))),
        };
        Ok(StyleTransform::Procedural { name: name.to_string(), ops })
    }

    /// Deterministic given `(img, id, seed)`; output has the input's dimensions.
    pub fn apply(&self, img: &Image, id: &str, seed: u64) -> Image {
        match self {
            StyleTransform::Procedural { ops, .. } => {
                let mut out = img.clone();
                for (i, op) in ops.iter().enumerate() {
                    out = apply_op(&out, op, rng::derive(seed, &[i as u64]));
                }
                out.clamp();
                out
            }
            StyleTransform::Precomputed { name, dir } => {
                let path = dir.join(format!("{id}.png"));
                match Image::load(&path) {
                    Ok(styled) => styled.resize(img.width, img.height),
                    Err(e) => {
                        warn!("style `{name}`: no stylized copy for `{id}` ({e}), using original");
                        img.clone()
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleMode {
    Single,
    All,
    TopK,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleBank {
    pub transforms: Vec<StyleTransform>,
    pub mode: StyleMode,
}

impl StyleBank {
    pub fn new(transforms: Vec<StyleTransform>, mode: StyleMode) -> Result<Self> {
        match mode {
            StyleMode::None => {}
            StyleMode::Single if transforms.len() != 1 => {
                return Err(Error::Config(format!(
                    "single-style bank needs exactly one transform, got {}",
                    transforms.len()
                )))
            }
            _ if transforms.is_empty() => {
                return Err(Error::Config("style bank is empty".into()));
            }
            _ => {}
        }
        Ok(StyleBank { transforms, mode })
    }

    pub fn none() -> Self {
        StyleBank { transforms: vec![], mode: StyleMode::None }
    }

    /// All eleven procedural slots, mixed per image.
    pub fn all_procedural() -> Self {
        let transforms = SLOT_NAMES.iter().map(|n| StyleTransform::by_name(n).expect("known slot")).collect();
        StyleBank { transforms, mode: StyleMode::All }
    }

    pub fn single(name: &str) -> Result<Self> {
        StyleBank::new(vec![StyleTransform::by_name(name)?], StyleMode::Single)
    }

    /// The first `k` styles of `ranked` (best first), mixed per image.
    pub fn top_k(ranked: &[&str], k: usize) -> Result<Self> {
        let transforms = ranked.iter().take(k).map(|n| StyleTransform::by_name(n)).collect::<Result<_>>()?;
        StyleBank::new(transforms, StyleMode::TopK)
    }

    /// Index of the transform chosen for `seed`, or `None` for identity.
    pub fn choose(&self, seed: u64) -> Option<usize> {
        match self.mode {
            StyleMode::None => None,
            StyleMode::Single => Some(0),
            StyleMode::All | StyleMode::TopK => {
                let mut r = rng::rng_for(seed, &[rng::str_id("style-choice")]);
                Some(r.gen_range(0..self.transforms.len()))
            }
        }
    }
}

/// Stylizes one image with a transform drawn uniformly from the bank.
pub fn apply_style(img: &Image, id: &str, bank: &StyleBank, seed: u64) -> Image {
    match bank.choose(seed) {
        None => img.clone(),
        Some(i) => bank.transforms[i].apply(img, id, rng::derive(seed, &[rng::str_id("style-apply")])),
    }
}

fn luminance(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn apply_op(img: &Image, op: &StyleOp, seed: u64) -> Image {
    let (w, h) = (img.width, img.height);
    match *op {
        StyleOp::BoxBlur { radius } => {
            let r = radius as isize;
            let mut out = img.clone();
            for y in 0..h {
                for x in 0..w {
                    let mut acc = [0.0f32; 3];
                    let mut n = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (xx, yy) = (x as isize + dx, y as isize + dy);
                            if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                                let p = img.get(xx as usize, yy as usize);
                                for c in 0..3 {
                                    acc[c] += p[c];
                                }
                                n += 1.0;
                            }
                        }
                    }
                    out.set(x, y, acc.map(|v| v / n));
                }
            }
            out
        }
        StyleOp::Posterize { levels } => {
            let l = (levels.max(2) - 1) as f32;
            Image { data: img.data.iter().map(|v| (v * l).round() / l).collect(), ..img.clone() }
        }
        StyleOp::Ink { threshold } => {
            let lum: Vec<f32> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| luminance(img.get(x, y))).collect();
            let at = |x: isize, y: isize| lum[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize];
            let mut out = img.clone();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let gx = at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                        - at(x - 1, y - 1) - 2.0 * at(x - 1, y) - at(x - 1, y + 1);
                    let gy = at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                        - at(x - 1, y - 1) - 2.0 * at(x, y - 1) - at(x + 1, y - 1);
                    if (gx * gx + gy * gy).sqrt() / 4.0 > threshold {
                        out.set(x as usize, y as usize, [0.05; 3]);
                    }
                }
            }
            out
        }
        StyleOp::PaletteShift { max_degrees, saturation } => {
            let mut r = rng::rng_for(seed, &[rng::str_id("palette")]);
            let shift: f32 = if max_degrees > 0.0 { r.gen_range(-max_degrees..=max_degrees) } else { 0.0 };
            map_pixels(img, |p| {
                let [hh, s, v] = rgb_to_hsv(p);
                hsv_to_rgb([hh + shift, (s * saturation).min(1.0), v])
            })
        }
        StyleOp::Saturate { factor } => map_pixels(img, |p| {
            let [hh, s, v] = rgb_to_hsv(p);
            hsv_to_rgb([hh, (s * factor).min(1.0), v])
        }),
        StyleOp::Grayscale => map_pixels(img, |p| [luminance(p); 3]),
        StyleOp::Halftone { period } => {
            let p = period.max(2) as f32;
            let mut out = img.clone();
            for y in 0..h {
                for x in 0..w {
                    let px = img.get(x, y);
                    let lum = luminance(px);
                    let cx = (x as f32 / p).floor() * p + p / 2.0;
                    let cy = (y as f32 / p).floor() * p + p / 2.0;
                    let d = ((x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2)).sqrt();
                    let radius = p * 0.75 * (1.0 - lum).sqrt();
                    let v = if d < radius { px.map(|c| c * 0.35) } else { px.map(|c| 0.5 * c + 0.5) };
                    out.set(x, y, v);
                }
            }
            out
        }
        StyleOp::Pixelate { block } => {
            let b = block.max(1);
            let mut out = img.clone();
            for y in 0..h {
                for x in 0..w {
                    out.set(x, y, img.get((x / b) * b, (y / b) * b));
                }
            }
            out
        }
        StyleOp::Streaks { amplitude } => {
            let mut r = rng::rng_for(seed, &[rng::str_id("streaks")]);
            let angle: f32 = r.gen_range(0.0..std::f32::consts::PI);
            let freq: f32 = r.gen_range(0.6..1.2);
            let (ca, sa) = (angle.cos(), angle.sin());
            let mut out = img.clone();
            for y in 0..h {
                for x in 0..w {
                    let t = (x as f32 * ca + y as f32 * sa) * freq;
                    let d = amplitude * (t.sin() + 0.5 * (2.3 * t + 1.0).sin());
                    out.set(x, y, img.get(x, y).map(|c| c + d));
                }
            }
            out
        }
    }
}

fn map_pixels(img: &Image, f: impl Fn([f32; 3]) -> [f32; 3]) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            out.set(x, y, f(img.get(x, y)));
        }
    }
    out
}
