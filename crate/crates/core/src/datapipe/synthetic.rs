//! Procedural desk-scale corpus: parametric characters (ellipse head on a
//! capsule torso) rendered either photo-like or in one of four drawn looks.
//!
//! A face box is the head ellipse's bounding box; a body box is the union of
//! head and torso. Shapes are rasterized by pixel-center containment, so every
//! box is the scene-graph extent up to less than one pixel per edge.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{hsv_to_rgb, Image};
use super::{AnnotatedImage, Labels, Source};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub image_size: usize,
    pub natural_train: usize,
    pub drawing_unlabeled: usize,
    pub drawing_labeled_train: usize,
    pub drawing_dev: usize,
    pub drawing_test: usize,
    pub max_characters: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            image_size: 64,
            natural_train: 512,
            drawing_unlabeled: 512,
            drawing_labeled_train: 256,
            drawing_dev: 64,
            drawing_test: 128,
            max_characters: 3,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Config(format!("synthetic image_size {} is below 32", self.image_size)));
        }
        if self.max_characters == 0 {
            return Err(Error::Config("max_characters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub natural_train: Vec<AnnotatedImage>,
    /// Drawings with their labels removed.
    pub drawing_unlabeled: Vec<AnnotatedImage>,
    pub drawing_labeled_train: Vec<AnnotatedImage>,
    pub drawing_dev: Vec<AnnotatedImage>,
    pub drawing_test: Vec<AnnotatedImage>,
}

impl Corpus {
    pub fn splits(&self) -> [(&'static str, &[AnnotatedImage]); 5] {
        [
            ("natural_train", &self.natural_train),
            ("drawing_unlabeled", &self.drawing_unlabeled),
            ("drawing_labeled_train", &self.drawing_labeled_train),
            ("drawing_dev", &self.drawing_dev),
            ("drawing_test", &self.drawing_test),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Look {
    Natural,
    Manga,
    Comic,
    Watercolor,
    Clipart,
}

impl Look {
    pub const DRAWN: [Look; 4] = [Look::Manga, Look::Comic, Look::Watercolor, Look::Clipart];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    /// Axis-aligned box with rounded corners of radius `r`.
    RoundRect { x1: f64, y1: f64, x2: f64, y2: f64, r: f64 },
}

impl Shape {
    /// Approximate signed distance, negative inside.
    pub fn sdf(&self, x: f64, y: f64) -> f64 {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let k = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
                (k - 1.0) * rx.min(ry)
            }
            Shape::RoundRect { x1, y1, x2, y2, r } => {
                let hx = (x2 - x1) / 2.0 - r;
                let hy = (y2 - y1) / 2.0 - r;
                let qx = (x - (x1 + x2) / 2.0).abs() - hx;
                let qy = (y - (y1 + y2) / 2.0).abs() - hy;
                let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
                outside + qx.max(qy).min(0.0) - r
            }
        }
    }

    pub fn bbox(&self) -> BBox {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => BBox { cx, cy, w: 2.0 * rx, h: 2.0 * ry },
            Shape::RoundRect { x1, y1, x2, y2, .. } => BBox { cx: (x1 + x2) / 2.0, cy: (y1 + y2) / 2.0, w: x2 - x1, h: y2 - y1 },
        }
    }

    /// Pixel `(x, y)` is covered when its center lies inside.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        self.sdf(x as f64 + 0.5, y as f64 + 0.5) <= 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Character {
    pub head: Shape,
    pub torso: Shape,
    pub skin: [f32; 3],
    pub cloth: [f32; 3],
    pub hair: [f32; 3],
}

impl Character {
    pub fn face_box(&self) -> BBox {
        self.head.bbox()
    }

    pub fn body_box(&self) -> BBox {
        let (a1, b1, a2, b2) = self.head.bbox().to_corner();
        let (c1, d1, c2, d2) = self.torso.bbox().to_corner();
        let (x1, y1, x2, y2) = (a1.min(c1), b1.min(d1), a2.max(c2), b2.max(d2));
        BBox { cx: (x1 + x2) / 2.0, cy: (y1 + y2) / 2.0, w: x2 - x1, h: y2 - y1 }
    }

    pub fn covers(&self, x: usize, y: usize) -> bool {
        self.head.covers(x, y) || self.torso.covers(x, y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub shape: Shape,
    pub color: [f32; 3],
}

/// Everything needed to render one image; labels derive from it alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub size: usize,
    pub look: Look,
    pub background: [f32; 3],
    pub texture_seed: u64,
    pub distractors: Vec<Distractor>,
    pub characters: Vec<Character>,
}

impl Scene {
    pub fn labels(&self) -> Labels {
        Labels {
            face: self.characters.iter().map(Character::face_box).collect(),
            body: self.characters.iter().map(Character::body_box).collect(),
        }
    }
}

fn uniform(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    r.gen_range(lo..hi)
}

fn hue_color(r: &mut ChaCha8Rng, s: (f64, f64), v: (f64, f64)) -> [f32; 3] {
    let h = uniform(r, 0.0, 360.0) as f32;
    hsv_to_rgb([h, uniform(r, s.0, s.1) as f32, uniform(r, v.0, v.1) as f32])
}

const SKIN_TONES: [[f32; 3]; 5] = [
    [0.96, 0.80, 0.69],
    [0.92, 0.72, 0.58],
    [0.84, 0.63, 0.47],
    [0.66, 0.46, 0.33],
    [0.45, 0.31, 0.22],
];

fn random_character(r: &mut ChaCha8Rng, look: Look, size: f64) -> Character {
    let height = uniform(r, 0.28, 0.72) * size;
    // drawn characters get larger heads
    let head_frac = if look == Look::Natural { uniform(r, 0.14, 0.2) } else { uniform(r, 0.2, 0.3) };
    let ry = (head_frac * height).max(3.0);
    let rx = ry * uniform(r, 0.8, 1.0);
    let torso_half = rx * uniform(r, 1.0, 1.5);
    let half_w = rx.max(torso_half);
    let cx = uniform(r, half_w + 0.5, size - half_w - 0.5);
    let top = uniform(r, 0.5, size - height - 0.5);
    let head = Shape::Ellipse { cx, cy: top + ry, rx, ry };
    let torso = Shape::RoundRect {
        x1: cx - torso_half,
        y1: top + 1.6 * ry,
        x2: cx + torso_half,
        y2: top + height,
        r: (torso_half * 0.8).min((height - 1.6 * ry) / 2.0),
    };
    let (skin, cloth, hair) = match look {
        Look::Natural => {
            let base = SKIN_TONES[r.gen_range(0..SKIN_TONES.len())];
            let j = uniform(r, -0.04, 0.04) as f32;
            let skin = base.map(|c| (c + j).clamp(0.0, 1.0));
            let cloth = hue_color(r, (0.2, 0.7), (0.2, 0.8));
            let hair = hue_color(r, (0.3, 0.7), (0.05, 0.35));
            (skin, cloth, hair)
        }
        Look::Manga => {
            let g = |r: &mut ChaCha8Rng, lo, hi| {
                let v = uniform(r, lo, hi) as f32;
                [v; 3]
            };
            (g(r, 0.95, 1.0), g(r, 0.3, 1.0), g(r, 0.0, 0.9))
        }
        Look::Comic | Look::Clipart => {
            (hue_color(r, (0.3, 0.9), (0.7, 1.0)), hue_color(r, (0.5, 1.0), (0.4, 1.0)), hue_color(r, (0.4, 1.0), (0.2, 0.9)))
        }
        Look::Watercolor => {
            (hue_color(r, (0.1, 0.35), (0.85, 1.0)), hue_color(r, (0.15, 0.4), (0.7, 0.95)), hue_color(r, (0.2, 0.5), (0.4, 0.8)))
        }
    };
    Character { head, torso, skin, cloth, hair }
}

fn overlaps_too_much(c: &Character, others: &[Character]) -> bool {
    others.iter().any(|o| {
        crate::geometry::iou(&c.body_box(), &o.body_box()) > 0.2
            || c.face_box().intersection(&o.body_box()) > 0.0
            || o.face_box().intersection(&c.body_box()) > 0.0
    })
}

pub fn random_scene(look: Look, size: usize, max_characters: usize, seed: u64) -> Scene {
    let mut r = rng::rng_for(seed, &[rng::str_id("scene")]);
    let s = size as f64;
    let background = match look {
        Look::Natural => hue_color(&mut r, (0.1, 0.5), (0.3, 0.9)),
        Look::Manga | Look::Watercolor => {
            let v = uniform(&mut r, 0.9, 1.0) as f32;
            [v, v, (v - 0.03).max(0.0)]
        }
        Look::Comic => hue_color(&mut r, (0.4, 0.9), (0.6, 1.0)),
        Look::Clipart => hue_color(&mut r, (0.0, 0.25), (0.85, 1.0)),
    };
    let n_distractors = r.gen_range(0..=3);
    let distractors = (0..n_distractors)
        .map(|_| {
            let w = uniform(&mut r, 0.08, 0.3) * s;
            let h = uniform(&mut r, 0.08, 0.3) * s;
            let x = uniform(&mut r, 0.0, s - w);
            let y = uniform(&mut r, 0.0, s - h);
            let shape = if r.gen_bool(0.5) {
                Shape::Ellipse { cx: x + w / 2.0, cy: y + h / 2.0, rx: w / 2.0, ry: h / 2.0 }
            } else {
                Shape::RoundRect { x1: x, y1: y, x2: x + w, y2: y + h, r: 0.0 }
            };
            let color = match look {
                Look::Manga => [uniform(&mut r, 0.5, 1.0) as f32; 3],
                Look::Natural => hue_color(&mut r, (0.1, 0.6), (0.2, 0.9)),
                _ => hue_color(&mut r, (0.0, 0.8), (0.6, 1.0)),
            };
            Distractor { shape, color }
        })
        .collect();
    let wanted = r.gen_range(1..=max_characters);
    let mut characters: Vec<Character> = Vec::new();
    for _ in 0..wanted * 10 {
        if characters.len() == wanted {
            break;
        }
        let c = random_character(&mut r, look, s);
        if !overlaps_too_much(&c, &characters) {
            characters.push(c);
        }
    }
    Scene { size, look, background, texture_seed: r.gen(), distractors, characters }
}

/// Smooth value noise in roughly `[-1, 1]`, `cells` lattice cells per side.
fn value_noise(size: usize, cells: usize, r: &mut ChaCha8Rng) -> Vec<f32> {
    let lattice: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let fx = x as f32 / size as f32 * cells as f32;
            let fy = y as f32 / size as f32 * cells as f32;
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (fx - ix as f32, fy - iy as f32);
            let at = |i: usize, j: usize| lattice[j * (cells + 1) + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bot = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn mul(c: [f32; 3], k: f32) -> [f32; 3] {
    c.map(|v| (v * k).clamp(0.0, 1.0))
}

fn add(c: [f32; 3], k: f32) -> [f32; 3] {
    c.map(|v| (v + k).clamp(0.0, 1.0))
}

fn to_gray(c: [f32; 3]) -> [f32; 3] {
    [0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; 3]
}

struct Ink {
    color: [f32; 3],
    width: f64,
}

fn ink_for(look: Look) -> Option<Ink> {
    match look {
        Look::Natural => None,
        Look::Manga => Some(Ink { color: [0.0; 3], width: 1.0 }),
        Look::Comic => Some(Ink { color: [0.05; 3], width: 1.4 }),
        Look::Watercolor => Some(Ink { color: [0.35, 0.3, 0.3], width: 0.8 }),
        Look::Clipart => Some(Ink { color: [0.2; 3], width: 0.9 }),
    }
}

/// Fills a shape. Outlines sit inside the shape so they never move its extent.
fn paint(img: &mut Image, shape: &Shape, ink: Option<&Ink>, mut fill: impl FnMut(usize, usize, f64) -> [f32; 3]) {
    let b = shape.bbox();
    let (x1, y1, x2, y2) = b.to_corner();
    let n = img.width;
    let xs = (x1.floor().max(0.0) as usize)..(x2.ceil().min(n as f64) as usize);
    for y in (y1.floor().max(0.0) as usize)..(y2.ceil().min(img.height as f64) as usize) {
        for x in xs.clone() {
            let d = shape.sdf(x as f64 + 0.5, y as f64 + 0.5);
            if d > 0.0 {
                continue;
            }
            let v = match ink {
                Some(ink) if d > -ink.width => ink.color,
                _ => fill(x, y, d),
            };
            img.set(x, y, v);
        }
    }
}

fn render_background(scene: &Scene, r: &mut ChaCha8Rng) -> Image {
    let n = scene.size;
    let mut img = Image::filled(n, n, scene.background);
    match scene.look {
        Look::Natural => {
            let coarse = value_noise(n, 4, r);
            let fine = value_noise(n, 16, r);
            for y in 0..n {
                for x in 0..n {
                    let t = 0.12 * coarse[y * n + x] + 0.06 * fine[y * n + x] + r.gen_range(-0.03..0.03);
                    img.set(x, y, add(scene.background, t));
                }
            }
        }
        Look::Manga => {
            // screentone band
            let y0 = r.gen_range(0..n);
            let tone = r.gen_range(0.3..0.7);
            for y in y0..n {
                for x in 0..n {
                    if x % 4 == 1 && y % 4 == 1 {
                        img.set(x, y, [tone; 3]);
                    }
                }
            }
        }
        Look::Watercolor => {
            let wash = value_noise(n, 6, r);
            for y in 0..n {
                for x in 0..n {
                    img.set(x, y, add(scene.background, 0.04 * wash[y * n + x] + r.gen_range(-0.015..0.015)));
                }
            }
        }
        Look::Comic | Look::Clipart => {}
    }
    img
}

fn render_character(img: &mut Image, c: &Character, look: Look, r: &mut ChaCha8Rng) {
    let ink = ink_for(look);
    let natural = look == Look::Natural;
    let wash = if look == Look::Watercolor { Some(value_noise(img.width, 8, r)) } else { None };
    let n = img.width;
    let tint = |x: usize, y: usize, col: [f32; 3]| match &wash {
        Some(w) => add(col, 0.06 * w[y * n + x]),
        None => col,
    };
    let Shape::RoundRect { x1: tx1, x2: tx2, .. } = c.torso else { unreachable!("torso is a rounded rect") };
    let tcx = (tx1 + tx2) / 2.0;
    let thw = (tx2 - tx1) / 2.0;
    paint(img, &c.torso, ink.as_ref(), |x, y, _| {
        if natural {
            let u = ((x as f64 + 0.5 - tcx) / thw) as f32;
            mul(c.cloth, 1.0 - 0.35 * u * u)
        } else if look == Look::Manga && c.cloth[0] < 0.6 && (x + y) % 2 == 0 {
            [1.0; 3]
        } else {
            tint(x, y, c.cloth)
        }
    });
    let Shape::Ellipse { cx, cy, rx, ry } = c.head else { unreachable!("head is an ellipse") };
    paint(img, &c.head, ink.as_ref(), |x, y, _| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        if py < cy - 0.45 * ry {
            return tint(x, y, c.hair);
        }
        if natural {
            let q = (((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2)) as f32;
            mul(c.skin, 1.05 - 0.3 * q)
        } else {
            tint(x, y, c.skin)
        }
    });
    // eyes and mouth
    let eye_r = if natural { (0.13 * rx).max(0.6) } else { (0.2 * rx).max(0.8) };
    let eye_y = cy + if natural { -0.05 * ry } else { 0.05 * ry };
    let dark = if natural { [0.08, 0.06, 0.05] } else { [0.0; 3] };
    for side in [-1.0, 1.0] {
        let eye = Shape::Ellipse { cx: cx + side * 0.38 * rx, cy: eye_y, rx: eye_r, ry: eye_r * if natural { 0.7 } else { 1.3 } };
        paint(img, &eye, None, |_, _, _| dark);
    }
    let mouth = Shape::Ellipse { cx, cy: cy + 0.5 * ry, rx: 0.25 * rx, ry: (0.07 * ry).max(0.5) };
    let mouth_color = if natural { [0.55, 0.2, 0.2] } else { dark };
    paint(img, &mouth, None, |_, _, _| mouth_color);
}

pub fn render_scene(scene: &Scene) -> Image {
    let mut r = rng::rng_for(scene.texture_seed, &[]);
    let mut img = render_background(scene, &mut r);
    let ink = ink_for(scene.look);
    for d in &scene.distractors {
        let natural = scene.look == Look::Natural;
        paint(&mut img, &d.shape, ink.as_ref(), |_, _, _| if natural { add(d.color, r.gen_range(-0.04..0.04)) } else { d.color });
    }
    for c in &scene.characters {
        render_character(&mut img, c, scene.look, &mut r);
    }
    if scene.look == Look::Manga {
        for y in 0..img.height {
            for x in 0..img.width {
                img.set(x, y, to_gray(img.get(x, y)));
            }
        }
    }
    if scene.look == Look::Natural {
        for v in img.data.iter_mut() {
            *v = (*v + r.gen_range(-0.02f32..0.02)).clamp(0.0, 1.0);
        }
    }
    img
}

fn split(prefix: &str, count: usize, spec: &CorpusSpec, seed: u64) -> Vec<AnnotatedImage> {
    (0..count)
        .map(|i| {
            let scene = scene_for(prefix, i, spec, seed);
            AnnotatedImage {
                id: format!("{prefix}-{i:05}"),
                source: if scene.look == Look::Natural { Source::Natural } else { Source::Drawing },
                image: render_scene(&scene),
                labels: scene.labels(),
            }
        })
        .collect()
}

/// Regenerates the scene behind image `index` of a split.
pub fn scene_for(prefix: &str, index: usize, spec: &CorpusSpec, seed: u64) -> Scene {
    let s = rng::derive(seed, &[rng::str_id(prefix), index as u64]);
    let look = if prefix == "nat" {
        Look::Natural
    } else {
        Look::DRAWN[rng::rng_for(s, &[rng::str_id("look")]).gen_range(0..Look::DRAWN.len())]
    };
    random_scene(look, spec.image_size, spec.max_characters, s)
}

/// Deterministic in `(spec, seed)`. Split ids use distinct prefixes
/// (`nat`, `dru`, `drl`, `drd`, `drt`), so no id appears in two splits.
pub fn generate_synthetic_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let mut drawing_unlabeled = split("dru", spec.drawing_unlabeled, spec, seed);
    for img in &mut drawing_unlabeled {
        img.labels = Labels::default();
    }
    Ok(Corpus {
        natural_train: split("nat", spec.natural_train, spec, seed),
        drawing_unlabeled,
        drawing_labeled_train: split("drl", spec.drawing_labeled_train, spec, seed),
        drawing_dev: split("drd", spec.drawing_dev, spec, seed),
        drawing_test: split("drt", spec.drawing_test, spec, seed),
    })
}
