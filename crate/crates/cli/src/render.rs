//! Draws detections onto copies of the input images.

use std::fs;
use std::path::{Path, PathBuf};

use drawdet::datapipe::Image;
use drawdet::detector::{predict, Checkpoint, Detections, Detector};
use drawdet::{BBox, Error, Klass, Result, ScoredBox};
use image::{Rgb, RgbImage};
use log::warn;

pub const RENDER_CONF: f64 = 0.65;
pub const RENDER_NMS: f64 = 0.4;
pub const FACE_COLOR: [u8; 3] = [255, 0, 0];
pub const BODY_COLOR: [u8; 3] = [0, 0, 255];
pub const DETECTIONS_HEADER: &str = "file,class,score,x1,y1,x2,y2";

/// Pixel rectangle covered by a box: corners rounded to the nearest pixel
/// and clamped to the raster.
pub fn pixel_rect(b: &BBox, width: u32, height: u32) -> (u32, u32, u32, u32) {
    let (x1, y1, x2, y2) = b.to_corner();
    let px = |v: f64, n: u32| (v.round().max(0.0) as u32).min(n - 1);
    (px(x1, width), px(y1, height), px(x2 - 1.0, width), px(y2 - 1.0, height))
}

/// One-pixel outline of `b`.
pub fn draw_box(img: &mut RgbImage, b: &BBox, color: [u8; 3]) {
    let (x1, y1, x2, y2) = pixel_rect(b, img.width(), img.height());
    for x in x1..=x2 {
        img.put_pixel(x, y1, Rgb(color));
        img.put_pixel(x, y2, Rgb(color));
    }
    for y in y1..=y2 {
        img.put_pixel(x1, y, Rgb(color));
        img.put_pixel(x2, y, Rgb(color));
    }
}

pub fn draw_detections(img: &mut RgbImage, dets: &Detections) {
    for b in &dets.body {
        draw_box(img, &b.bbox, BODY_COLOR);
    }
    for f in &dets.face {
        draw_box(img, &f.bbox, FACE_COLOR);
    }
}

/// Maps detections from the square network input back to a `width x height` image.
pub fn rescale(dets: &Detections, input: usize, width: usize, height: usize) -> Detections {
    let (sx, sy) = (width as f64 / input as f64, height as f64 / input as f64);
    let map = |v: &[ScoredBox]| {
        v.iter()
            .filter_map(|s| {
                let b = BBox::new(s.bbox.cx * sx, s.bbox.cy * sy, s.bbox.w * sx, s.bbox.h * sy).ok()?;
                ScoredBox::new(b, s.score, s.klass).ok()
            })
            .collect()
    };
    Detections { face: map(&dets.face), body: map(&dets.body) }
}

/// PNG files named directly or found (non-recursively) in directories, sorted.
pub fn collect_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let entries = fs::read_dir(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

/// Renders every readable input into `out_dir` under its own file name and
/// writes `detections.csv`. Unreadable files are skipped with a warning.
/// Returns the number of images written.
pub fn render_detections(ckpt: &Checkpoint, inputs: &[PathBuf], out_dir: &Path, conf: f64, nms: f64) -> Result<usize> {
    let detector = Detector::new(&ckpt.config)?;
    detector.check_params(&ckpt.params)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::Data(format!("{}: {e}", out_dir.display())))?;
    let input = ckpt.config.input_size;
    let mut table = String::from(DETECTIONS_HEADER);
    table.push('\n');
    let mut written = 0;
    for path in collect_images(inputs)? {
        let img = match Image::load(&path) {
            Ok(img) => img,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let dets = predict(&detector, &ckpt.params, &img.resize(input, input), conf, nms)?;
        let dets = rescale(&dets, input, img.width, img.height);
        let mut raster = img.to_rgb8();
        draw_detections(&mut raster, &dets);
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let out = out_dir.join(&name);
        raster.save(&out).map_err(|e| Error::Data(format!("{}: {e}", out.display())))?;
        for klass in Klass::ALL {
            for d in dets.get(klass) {
                let (x1, y1, x2, y2) = d.bbox.to_corner();
                table += &format!("{name},{klass},{},{x1},{y1},{x2},{y2}\n", d.score);
            }
        }
        written += 1;
    }
    let csv = out_dir.join("detections.csv");
    fs::write(&csv, table).map_err(|e| Error::Data(format!("{}: {e}", csv.display())))?;
    Ok(written)
}
