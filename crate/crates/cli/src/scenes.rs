//! Annotated image directories as training and evaluation scenes.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flowdet_core::data::{load_annotations, read_ppm, CocoDoc, SynthObject, SynthScene};
use flowdet_core::detector::ModelConfig;
use flowdet_core::eval::GtBox;

pub struct CocoScenes {
    pub doc: CocoDoc,
    /// Image id of each scene.
    pub ids: Vec<u64>,
    pub scenes: Vec<SynthScene>,
}

/// `path` is an annotation file or a directory holding `annotations.json`.
pub fn annotation_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("annotations.json")
    } else {
        path.to_path_buf()
    }
}

/// Load the annotations and every referenced PPM image (paths relative to
/// the annotation file). Images must match the model input size and
/// category ids must lie in `1..=class_count`.
pub fn load_coco_scenes(path: &Path, cfg: &ModelConfig) -> Result<CocoScenes> {
    let ann = annotation_path(path);
    let (doc, report) = load_annotations(&ann)?;
    for f in &report.unknown_fields {
        eprintln!("warning: {}: unknown field {f}", ann.display());
    }
    let base = ann.parent().unwrap_or(Path::new("."));
    let (h, w) = cfg.input_size;
    let mut ids = Vec::with_capacity(doc.images.len());
    let mut scenes = Vec::with_capacity(doc.images.len());
    for im in &doc.images {
        let file = base.join(&im.file_name);
        let image = read_ppm(&file).with_context(|| format!("image {}", im.id))?;
        if image.shape() != [3, h, w] {
            bail!(
                "{}: image is {:?}, model expects [3, {h}, {w}]",
                file.display(),
                image.shape()
            );
        }
        let mut objects = Vec::new();
        for a in doc.annotations.iter().filter(|a| a.image_id == im.id) {
            if a.category_id == 0 || a.category_id as usize > cfg.class_count {
                bail!(
                    "annotation {}: category {} outside 1..={}",
                    a.id,
                    a.category_id,
                    cfg.class_count
                );
            }
            let [x, y, bw, bh] = a.bbox;
            objects.push(SynthObject {
                category_id: a.category_id,
                bbox: a.bbox,
                polygon: vec![(x, y), (x + bw, y), (x + bw, y + bh), (x, y + bh)],
                depth: 0.0,
            });
        }
        ids.push(im.id);
        scenes.push(SynthScene { image, objects });
    }
    Ok(CocoScenes { doc, ids, scenes })
}

pub fn doc_gts(doc: &CocoDoc) -> Vec<GtBox> {
    doc.annotations
        .iter()
        .map(|a| GtBox {
            image_id: a.image_id,
            category_id: a.category_id,
            bbox: a.bbox,
            area: a.area,
        })
        .collect()
}
