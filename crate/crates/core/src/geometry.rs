//! Box arithmetic, IoU and greedy non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in center form, pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn from_corner(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x2 > x1) || !(y2 > y1) {
            return Err(Error::InvalidBox(format!(
                "corner box ({x1}, {y1}, {x2}, {y2}) has non-positive extent"
            )));
        }
        BBox::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// Corner form `(x1, y1, x2, y2)`.
    pub fn to_corner(&self) -> (f64, f64, f64, f64) {
        let hw = self.w / 2.0;
        let hh = self.h / 2.0;
        (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersects the box with `[0, width] x [0, height]`. `None` when nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let (x1, y1, x2, y2) = self.to_corner();
        BBox::from_corner(x1.max(0.0), y1.max(0.0), x2.min(width), y2.min(height)).ok()
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.to_corner();
        let (bx1, by1, bx2, by2) = other.to_corner();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        iw * ih
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        let (x1, y1, x2, y2) = self.to_corner();
        const EPS: f64 = 1e-9;
        x1 >= -EPS && y1 >= -EPS && x2 <= width + EPS && y2 <= height + EPS
    }
}

/// The two single-class detection heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Klass {
    Face,
    Body,
}

impl Klass {
    pub const ALL: [Klass; 2] = [Klass::Face, Klass::Body];

    pub fn index(self) -> usize {
        match self {
            Klass::Face => 0,
            Klass::Body => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Klass::Face => "face",
            Klass::Body => "body",
        }
    }
}

impl std::fmt::Display for Klass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    pub klass: Klass,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64, klass: Klass) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Contract(format!("score {score} outside [0, 1]")));
        }
        Ok(ScoredBox { bbox, score, klass })
    }
}

/// Intersection over union. Touching edges give zero.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Indices of `scores` sorted by descending score, ties kept in input order.
pub(crate) fn rank_descending(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    order
}

/// Greedy NMS over single-class candidates.
///
/// The output is sorted by descending score. Candidates with equal scores
/// are visited in input order.
pub fn nms(candidates: &[ScoredBox], iou_thresh: f64) -> Result<Vec<ScoredBox>> {
    if !(0.0..=1.0).contains(&iou_thresh) {
        return Err(Error::Contract(format!("iou threshold {iou_thresh} outside [0, 1]")));
    }
    if let Some(first) = candidates.first() {
        if candidates.iter().any(|c| c.klass != first.klass) {
            return Err(Error::Contract("nms called with mixed classes".into()));
        }
    }
    let order = rank_descending(candidates.iter().map(|c| c.score));
    let mut kept: Vec<ScoredBox> = Vec::new();
    for i in order {
        let cand = &candidates[i];
        if kept.iter().all(|k| iou(&k.bbox, &cand.bbox) <= iou_thresh) {
            kept.push(*cand);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sb(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> ScoredBox {
        ScoredBox::new(BBox::from_corner(x1, y1, x2, y2).unwrap(), score, Klass::Face).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = BBox::from_corner(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BBox::from_corner(1.0, 0.0, 3.0, 2.0).unwrap();
        let far = BBox::from_corner(10.0, 10.0, 12.0, 12.0).unwrap();
        let touching = BBox::from_corner(2.0, 0.0, 4.0, 2.0).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &far), 0.0);
        assert_eq!(iou(&a, &touching), 0.0);
        // intersection 2, union 6
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn corner_conversion() {
        let b = BBox::new(1.0, 1.0, 2.0, 2.0).unwrap();
        assert_eq!(b.to_corner(), (0.0, 0.0, 2.0, 2.0));
        assert!(matches!(
            BBox::from_corner(0.0, 0.0, 0.0, 1.0),
            Err(Error::InvalidBox(_))
        ));
        assert!(BBox::new(0.0, 0.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn nms_examples() {
        let single = vec![sb(0.0, 0.0, 1.0, 1.0, 0.3)];
        assert_eq!(nms(&single, 0.5).unwrap(), single);

        let dup = vec![sb(0.0, 0.0, 4.0, 4.0, 0.8), sb(0.0, 0.0, 4.0, 4.0, 0.9)];
        let kept = nms(&dup, 0.5).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_chained_overlaps() {
        // a overlaps b, b overlaps c, a and c are disjoint. Greedy keeps a and c.
        let a = sb(0.0, 0.0, 4.0, 4.0, 0.9);
        let b = sb(1.0, 0.0, 5.0, 4.0, 0.8);
        let c = sb(4.5, 0.0, 8.5, 4.0, 0.7);
        let kept = nms(&[c, a, b], 0.5).unwrap();
        assert_eq!(kept, vec![a, c]);
    }

    #[test]
    fn nms_equal_scores_stable() {
        let a = sb(0.0, 0.0, 4.0, 4.0, 0.5);
        let b = sb(0.0, 0.0, 4.0, 4.0, 0.5);
        let b = ScoredBox { bbox: BBox { cx: 2.1, ..b.bbox }, ..b };
        assert_eq!(nms(&[a, b], 0.5).unwrap(), vec![a]);
        assert_eq!(nms(&[b, a], 0.5).unwrap(), vec![b]);
    }

    #[test]
    fn nms_rejects_mixed_classes() {
        let a = sb(0.0, 0.0, 4.0, 4.0, 0.5);
        let b = ScoredBox { klass: Klass::Body, ..a };
        assert!(matches!(nms(&[a, b], 0.5), Err(Error::Contract(_))));
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..50.0f64, 0.0..50.0f64, 0.5..20.0f64, 0.5..20.0f64)
            .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn corner_roundtrip_dyadic(cx in -512i32..512, cy in -512i32..512, w in 1i32..256, h in 1i32..256) {
            let b = BBox::new(cx as f64 / 8.0, cy as f64 / 8.0, w as f64 / 4.0, h as f64 / 4.0).unwrap();
            let (x1, y1, x2, y2) = b.to_corner();
            prop_assert_eq!(BBox::from_corner(x1, y1, x2, y2).unwrap(), b);
        }

        #[test]
        fn nms_kept_pairs_below_threshold(boxes in prop::collection::vec((arb_box(), 0.0..1.0f64), 0..20), t in 0.0..1.0f64) {
            let cands: Vec<ScoredBox> = boxes.iter().map(|&(b, s)| ScoredBox::new(b, s, Klass::Body).unwrap()).collect();
            let kept = nms(&cands, t).unwrap();
            for w in kept.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
            for (i, a) in kept.iter().enumerate() {
                prop_assert!(cands.contains(a));
                for b in &kept[i + 1..] {
                    prop_assert!(iou(&a.bbox, &b.bbox) <= t);
                }
            }
        }
    }
}
