//! Datasets, preprocessing filters, style mixing, augmentation and the
//! synthetic corpus.

pub mod augment;
pub mod coco;
mod image;
pub mod sampling;
pub mod style;
pub mod synthetic;

use serde::{Deserialize, Serialize};

pub use self::image::{hsv_to_rgb, rgb_to_hsv, Image};
pub use augment::{
    augment_strong, augment_weak, mosaic, mosaic_at, schedule_augmentation, AugmentationPolicy,
};
pub use coco::{animals_as_bodies, load_coco_annotations, write_coco_dataset};
pub use sampling::{subset_sampler, SubsetSize};
pub use style::{apply_style, StyleBank, StyleMode, StyleTransform};
pub use synthetic::{generate_synthetic_corpus, Corpus, CorpusSpec};

use crate::geometry::{BBox, Klass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Natural,
    Drawing,
    Synthetic,
}

/// Face and body boxes of one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub face: Vec<BBox>,
    pub body: Vec<BBox>,
}

impl Labels {
    pub fn get(&self, klass: Klass) -> &[BBox] {
        match klass {
            Klass::Face => &self.face,
            Klass::Body => &self.body,
        }
    }

    pub fn get_mut(&mut self, klass: Klass) -> &mut Vec<BBox> {
        match klass {
            Klass::Face => &mut self.face,
            Klass::Body => &mut self.body,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.face.is_empty() && self.body.is_empty()
    }

    pub fn len(&self) -> usize {
        self.face.len() + self.body.len()
    }

    pub fn all_within(&self, width: f64, height: f64) -> bool {
        self.face
            .iter()
            .chain(&self.body)
            .all(|b| b.within(width, height) && b.w > 0.0 && b.h > 0.0)
    }

    /// Applies `f` to every box, keeping those it returns.
    pub fn filter_map(&self, mut f: impl FnMut(&BBox) -> Option<BBox>) -> Labels {
        Labels {
            face: self.face.iter().filter_map(&mut f).collect(),
            body: self.body.iter().filter_map(&mut f).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub source: Source,
    pub image: Image,
    pub labels: Labels,
}

impl AnnotatedImage {
    pub fn is_valid(&self) -> bool {
        self.image.is_valid()
            && self.labels.all_within(self.image.width as f64, self.image.height as f64)
    }

    /// Stretches the image to `size x size`, scaling the boxes with it.
    pub fn resized(&self, size: usize) -> AnnotatedImage {
        let sx = size as f64 / self.image.width as f64;
        let sy = size as f64 / self.image.height as f64;
        AnnotatedImage {
            id: self.id.clone(),
            source: self.source,
            image: self.image.resize(size, size),
            labels: self.labels.filter_map(|b| {
                BBox::new(b.cx * sx, b.cy * sy, b.w * sx, b.h * sy)
                    .ok()
                    .and_then(|b| b.clip(size as f64, size as f64))
            }),
        }
    }
}

/// Drops every image that contains a face whose longest side is below
/// `ratio` times the image's shorter side.
pub fn filter_small_faces(dataset: Vec<AnnotatedImage>, ratio: f64) -> Vec<AnnotatedImage> {
    dataset
        .into_iter()
        .filter(|img| {
            let min_side = img.image.width.min(img.image.height) as f64;
            img.labels.face.iter().all(|f| f.w.max(f.h) >= ratio * min_side)
        })
        .collect()
}

/// Default face-size ratio for [`filter_small_faces`].
pub const SMALL_FACE_RATIO: f64 = 0.02;

#[cfg(test)]
mod tests {
    use super::*;

    fn with_face(w: usize, h: usize, face: Option<(f64, f64)>) -> AnnotatedImage {
        AnnotatedImage {
            id: "x".into(),
            source: Source::Natural,
            image: Image::new(w, h),
            labels: Labels {
                face: face.map(|(fw, fh)| BBox::new(100.0, 100.0, fw, fh).unwrap()).into_iter().collect(),
                body: vec![],
            },
        }
    }

    #[test]
    fn small_face_filter() {
        // 1000x500: threshold 10 px
        let ds = vec![
            with_face(1000, 500, Some((8.0, 6.0))),
            with_face(1000, 500, Some((10.0, 4.0))),
            with_face(1000, 500, None),
        ];
        let kept = filter_small_faces(ds, SMALL_FACE_RATIO);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].labels.face[0].w, 10.0);
        assert!(kept[1].labels.face.is_empty());
        let again = filter_small_faces(kept.clone(), SMALL_FACE_RATIO);
        assert_eq!(again, kept);
    }

    #[test]
    fn resize_scales_boxes() {
        let mut a = with_face(128, 64, Some((20.0, 10.0)));
        a.labels.face[0] = BBox::new(64.0, 32.0, 20.0, 10.0).unwrap();
        let r = a.resized(32);
        assert_eq!(r.labels.face[0], BBox::new(16.0, 16.0, 5.0, 5.0).unwrap());
        assert!(r.is_valid());
    }
}
