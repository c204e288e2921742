use serde::{Deserialize, Serialize};

use super::layers::sigmoid;
use super::network::{Detector, HeadOutput};
use super::params::DetectorParams;
use super::DetectorConfig;
use crate::datapipe::Image;
use crate::error::{Error, Result};
use crate::geometry::{nms, BBox, Klass, ScoredBox};

const LOG_SIZE_CLAMP: f64 = 10.0;
const MIN_SIDE: f64 = 1e-3;

/// Decodes every grid location of a head output into a scored box in image
/// pixels: `cx = (col + dx) * stride`, `w = exp(log_w) * stride`, clipped to
/// the image.
pub fn decode(out: &HeadOutput, config: &DetectorConfig) -> Vec<ScoredBox> {
    let size = config.input_size as f64;
    let mut boxes = Vec::with_capacity(out.n_locations());
    for level in &out.levels {
        let s = level.stride as f64;
        for row in 0..level.h {
            for col in 0..level.w {
                let cell = row * level.w + col;
                let score = sigmoid(level.logits[cell]);
                let [dx, dy, lw, lh] = level.reg_at(cell);
                let cx = (col as f64 + dx) * s;
                let cy = (row as f64 + dy) * s;
                let w = lw.clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP).exp() * s;
                let h = lh.clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP).exp() * s;
                boxes.push(ScoredBox { bbox: clip_nonempty(cx, cy, w, h, size), score, klass: out.klass });
            }
        }
    }
    boxes
}

fn clip_axis(c: f64, len: f64, size: f64) -> (f64, f64) {
    let c = if c.is_finite() { c } else { size / 2.0 };
    let len = if len.is_finite() { len } else { size };
    let lo = (c - len / 2.0).clamp(0.0, size - MIN_SIDE);
    let hi = (c + len / 2.0).clamp(lo + MIN_SIDE, size);
    ((lo + hi) / 2.0, hi - lo)
}

fn clip_nonempty(cx: f64, cy: f64, w: f64, h: f64, size: f64) -> BBox {
    let (cx, w) = clip_axis(cx, w, size);
    let (cy, h) = clip_axis(cy, h, size);
    BBox { cx, cy, w, h }
}

/// Regression target of `b` relative to grid cell `(row, col)` at `stride`.
/// Inverse of the decode formula.
pub fn encode(b: &BBox, stride: usize, col: usize, row: usize) -> [f64; 4] {
    let s = stride as f64;
    [b.cx / s - col as f64, b.cy / s - row as f64, (b.w / s).ln(), (b.h / s).ln()]
}

/// Pyramid level responsible for a ground-truth box, by its longest side:
/// below a quarter of the input goes to the finest level, below half to the
/// middle one, everything else to the coarsest.
pub fn assign_level(b: &BBox, config: &DetectorConfig) -> usize {
    let side = b.w.max(b.h);
    let n = config.input_size as f64;
    if side < n / 4.0 {
        0
    } else if side < n / 2.0 {
        1
    } else {
        2
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Detections {
    pub face: Vec<ScoredBox>,
    pub body: Vec<ScoredBox>,
}

impl Detections {
    pub fn get(&self, klass: Klass) -> &[ScoredBox] {
        match klass {
            Klass::Face => &self.face,
            Klass::Body => &self.body,
        }
    }

    pub fn get_mut(&mut self, klass: Klass) -> &mut Vec<ScoredBox> {
        match klass {
            Klass::Face => &mut self.face,
            Klass::Body => &mut self.body,
        }
    }
}

/// Score filter then per-class NMS on already computed head outputs.
pub fn postprocess(
    outputs: &[HeadOutput; 2],
    config: &DetectorConfig,
    conf_thresh: f64,
    nms_thresh: f64,
) -> Result<Detections> {
    if !(0.0..=1.0).contains(&conf_thresh) || !(0.0..=1.0).contains(&nms_thresh) {
        return Err(Error::Contract(format!(
            "thresholds must lie in [0, 1], got conf {conf_thresh} nms {nms_thresh}"
        )));
    }
    let mut dets = Detections::default();
    for out in outputs {
        let cands: Vec<ScoredBox> =
            decode(out, config).into_iter().filter(|b| b.score >= conf_thresh).collect();
        *dets.get_mut(out.klass) = nms(&cands, nms_thresh)?;
    }
    Ok(dets)
}

/// Forward both heads, decode, drop scores below `conf_thresh`, then NMS per class.
pub fn predict(
    detector: &Detector,
    params: &DetectorParams,
    image: &Image,
    conf_thresh: f64,
    nms_thresh: f64,
) -> Result<Detections> {
    let outputs = detector.forward_both(params, image)?;
    postprocess(&outputs, detector.config(), conf_thresh, nms_thresh)
}
