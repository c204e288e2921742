//! JSON detection-annotation ingestion and emission (`images`,
//! `annotations`, `categories`; boxes as corner-anchored `[x, y, w, h]`).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, Image, Labels, Source};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default)]
    pub supercategory: String,
}

pub const FACE_CATEGORY: &str = "face";
pub const PERSON_CATEGORY: &str = "person";

const ANIMALS: &[&str] = &[
    "bird", "cat", "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe",
];

/// Category names whose boxes count as bodies: people, plus animals unless
/// `exclude_animals` is set.
pub fn animals_as_bodies(categories: &[CocoCategory], exclude_animals: bool) -> BTreeSet<String> {
    categories
        .iter()
        .filter(|c| {
            c.name == PERSON_CATEGORY
                || (!exclude_animals
                    && (c.supercategory == "animal" || ANIMALS.contains(&c.name.as_str())))
        })
        .map(|c| c.name.clone())
        .collect()
}

pub fn read_coco_file(path: &Path) -> Result<CocoFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Loads every image referenced by the annotation file. Boxes in
/// `body_categories` become body boxes, the `face` category becomes face
/// boxes, everything else is ignored. Boxes are clipped to the image; images
/// that cannot be read are skipped with a warning.
pub fn load_coco_annotations(
    annotation_file: &Path,
    image_root: &Path,
    body_categories: &BTreeSet<String>,
    source: Source,
) -> Result<Vec<AnnotatedImage>> {
    let file = read_coco_file(annotation_file)?;
    let cat_names: BTreeMap<u64, &str> =
        file.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    let mut by_image: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
    for a in &file.annotations {
        by_image.entry(a.image_id).or_default().push(a);
    }
    let mut out = Vec::with_capacity(file.images.len());
    for rec in &file.images {
        let path = image_root.join(&rec.file_name);
        let image = match Image::load(&path) {
            Ok(img) => img,
            Err(e) => {
                warn!("skipping image {} ({}): {e}", rec.id, path.display());
                continue;
            }
        };
        let (w, h) = (image.width as f64, image.height as f64);
        let mut labels = Labels::default();
        for a in by_image.get(&rec.id).map(Vec::as_slice).unwrap_or(&[]) {
            let Some(name) = cat_names.get(&a.category_id) else {
                return Err(Error::Data(format!(
                    "annotation {} references unknown category {}",
                    a.id, a.category_id
                )));
            };
            let [x, y, bw, bh] = a.bbox;
            let Some(b) = BBox::from_corner(x, y, x + bw, y + bh).ok().and_then(|b| b.clip(w, h)) else {
                warn!("dropping degenerate box in annotation {}", a.id);
                continue;
            };
            if *name == FACE_CATEGORY {
                labels.face.push(b);
            } else if body_categories.contains(*name) {
                labels.body.push(b);
            }
        }
        out.push(AnnotatedImage { id: rec.file_name.clone(), source, image, labels });
    }
    Ok(out)
}

/// Writes images as PNG files next to an annotation file. `body_category`
/// names the category of body box `i` of an image.
pub fn write_coco_dataset(
    dir: &Path,
    annotation_name: &str,
    images: &[AnnotatedImage],
    body_category: impl Fn(&AnnotatedImage, usize) -> String,
) -> Result<CocoFile> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut categories = vec![CocoCategory {
        id: 1,
        name: FACE_CATEGORY.into(),
        supercategory: "face".into(),
    }];
    let mut cat_ids: BTreeMap<String, u64> = BTreeMap::new();
    cat_ids.insert(FACE_CATEGORY.into(), 1);
    let mut file = CocoFile { images: vec![], annotations: vec![], categories: vec![] };
    let mut next_ann = 1;
    for (i, img) in images.iter().enumerate() {
        let image_id = i as u64 + 1;
        let file_name = format!("{}.png", img.id);
        img.image.save_png(&dir.join(&file_name))?;
        file.images.push(CocoImage {
            id: image_id,
            file_name,
            width: img.image.width as u32,
            height: img.image.height as u32,
        });
        let mut push = |cat: u64, b: &BBox| {
            let (x1, y1, _, _) = b.to_corner();
            file.annotations.push(CocoAnnotation {
                id: next_ann,
                image_id,
                category_id: cat,
                bbox: [x1, y1, b.w, b.h],
                iscrowd: 0,
            });
            next_ann += 1;
        };
        for f in &img.labels.face {
            push(1, f);
        }
        for (bi, b) in img.labels.body.iter().enumerate() {
            let name = body_category(img, bi);
            let next_id = cat_ids.len() as u64 + 1;
            let id = *cat_ids.entry(name.clone()).or_insert_with(|| {
                let sup = if name == PERSON_CATEGORY { "person" } else { "animal" };
                categories.push(CocoCategory { id: next_id, name: name.clone(), supercategory: sup.into() });
                next_id
            });
            push(id, b);
        }
    }
    file.categories = categories;
    let path = dir.join(annotation_name);
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cats() -> Vec<CocoCategory> {
        vec![
            CocoCategory { id: 1, name: "person".into(), supercategory: "person".into() },
            CocoCategory { id: 2, name: "dog".into(), supercategory: "animal".into() },
            CocoCategory { id: 3, name: "cat".into(), supercategory: "animal".into() },
            CocoCategory { id: 4, name: "car".into(), supercategory: "vehicle".into() },
            CocoCategory { id: 5, name: "face".into(), supercategory: "face".into() },
        ]
    }

    #[test]
    fn body_category_sets() {
        let all = animals_as_bodies(&cats(), false);
        assert_eq!(all, ["cat", "dog", "person"].iter().map(|s| s.to_string()).collect());
        let people = animals_as_bodies(&cats(), true);
        assert_eq!(people, ["person".to_string()].into_iter().collect());
        let only_person = animals_as_bodies(&cats()[..1], false);
        assert_eq!(only_person.len(), 1);
    }

    #[test]
    fn empty_annotation_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        std::fs::write(&path, r#"{"images": [], "annotations": [], "categories": []}"#).unwrap();
        let ds = load_coco_annotations(&path, dir.path(), &BTreeSet::new(), Source::Natural).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn malformed_file_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        std::fs::write(&path, r#"{"images": [}"#).unwrap();
        assert!(load_coco_annotations(&path, dir.path(), &BTreeSet::new(), Source::Natural).is_err());
    }

    #[test]
    fn golden_fixture() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.png", "b.png", "c.png"] {
            Image::new(40, 30).save_png(&dir.path().join(name)).unwrap();
        }
        let json = r#"{
          "images": [
            {"id": 7, "file_name": "a.png", "width": 40, "height": 30},
            {"id": 8, "file_name": "b.png", "width": 40, "height": 30},
            {"id": 9, "file_name": "c.png", "width": 40, "height": 30},
            {"id": 10, "file_name": "missing.png", "width": 40, "height": 30}
          ],
          "annotations": [
            {"id": 1, "image_id": 7, "category_id": 1, "bbox": [0, 0, 10, 20]},
            {"id": 2, "image_id": 7, "category_id": 5, "bbox": [2, 2, 4, 4]},
            {"id": 3, "image_id": 8, "category_id": 2, "bbox": [10, 5, 6, 8]},
            {"id": 4, "image_id": 9, "category_id": 4, "bbox": [1, 1, 5, 5]},
            {"id": 5, "image_id": 9, "category_id": 3, "bbox": [30, 20, 20, 20]}
          ],
          "categories": [
            {"id": 1, "name": "person", "supercategory": "person"},
            {"id": 2, "name": "dog", "supercategory": "animal"},
            {"id": 3, "name": "cat", "supercategory": "animal"},
            {"id": 4, "name": "car", "supercategory": "vehicle"},
            {"id": 5, "name": "face", "supercategory": "face"}
          ]
        }"#;
        let path = dir.path().join("ann.json");
        std::fs::write(&path, json).unwrap();
        let bodies = animals_as_bodies(&read_coco_file(&path).unwrap().categories, false);
        let ds = load_coco_annotations(&path, dir.path(), &bodies, Source::Natural).unwrap();
        let expected = vec![
            ("a.png", vec![BBox { cx: 4.0, cy: 4.0, w: 4.0, h: 4.0 }], vec![BBox { cx: 5.0, cy: 10.0, w: 10.0, h: 20.0 }]),
            ("b.png", vec![], vec![BBox { cx: 13.0, cy: 9.0, w: 6.0, h: 8.0 }]),
            // cat box clipped to the 40x30 image
            ("c.png", vec![], vec![BBox { cx: 35.0, cy: 25.0, w: 10.0, h: 10.0 }]),
        ];
        assert_eq!(ds.len(), 3);
        for (img, (id, faces, bodies)) in ds.iter().zip(expected) {
            assert_eq!(img.id, id);
            assert_eq!(img.labels.face, faces);
            assert_eq!(img.labels.body, bodies);
            assert!(img.is_valid());
        }
        let people = animals_as_bodies(&read_coco_file(&path).unwrap().categories, true);
        let ds = load_coco_annotations(&path, dir.path(), &people, Source::Natural).unwrap();
        assert_eq!(ds.iter().map(|d| d.labels.body.len()).sum::<usize>(), 1);
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let img = AnnotatedImage {
            id: "s0".into(),
            source: Source::Synthetic,
            image: Image::new(16, 16),
            labels: Labels {
                face: vec![BBox::new(4.0, 4.0, 2.0, 2.0).unwrap()],
                body: vec![BBox::new(8.0, 8.0, 4.0, 8.0).unwrap(), BBox::new(12.0, 12.0, 4.0, 2.0).unwrap()],
            },
        };
        let file = write_coco_dataset(dir.path(), "ann.json", &[img.clone()], |_, i| {
            if i == 0 { "person".into() } else { "dog".into() }
        })
        .unwrap();
        let path = dir.path().join("ann.json");
        let back = load_coco_annotations(&path, dir.path(), &animals_as_bodies(&file.categories, false), Source::Synthetic).unwrap();
        assert_eq!(back[0].labels, img.labels);
        let back = load_coco_annotations(&path, dir.path(), &animals_as_bodies(&file.categories, true), Source::Synthetic).unwrap();
        assert_eq!(back[0].labels.body.len(), 1);
    }
}
