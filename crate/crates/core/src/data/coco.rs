//! COCO annotation documents: parsing, validation and per-split counts.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    /// Optional embedded split name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]`, pixels
    pub bbox: [f64; 4],
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CocoDoc {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// Non-fatal findings from [`load_annotations`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    /// JSON paths of keys that are neither in the schema nor standard COCO
    /// extras, e.g. `annotations[3].occlusion`.
    pub unknown_fields: Vec<String>,
}

const TOP_KEYS: &[&str] = &["images", "annotations", "categories", "info", "licenses"];
const IMAGE_KEYS: &[&str] = &[
    "id",
    "file_name",
    "width",
    "height",
    "split",
    "license",
    "coco_url",
    "flickr_url",
    "date_captured",
];
const ANN_KEYS: &[&str] = &["id", "image_id", "category_id", "bbox", "area", "iscrowd", "segmentation"];
const CAT_KEYS: &[&str] = &["id", "name", "supercategory"];

/// Byte offset of a 1-based `(line, column)` position.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

fn parse_error(text: &str, e: &serde_json::Error) -> Error {
    Error::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    }
}

fn section<'a>(root: &'a serde_json::Map<String, Value>, key: &str) -> Result<&'a [Value]> {
    match root.get(key) {
        Some(Value::Array(a)) => Ok(a),
        Some(_) => Err(Error::Format(format!("`{key}` must be an array"))),
        None => Err(Error::Format(format!("missing `{key}` array"))),
    }
}

fn typed<T: for<'de> Deserialize<'de>>(
    items: &[Value],
    name: &str,
    known: &[&str],
    report: &mut LoadReport,
) -> Result<Vec<T>> {
    items
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if let Value::Object(m) = v {
                for k in m.keys().filter(|k| !known.contains(&k.as_str())) {
                    report.unknown_fields.push(format!("{name}[{i}].{k}"));
                }
            }
            serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("{name}[{i}]: {e}")))
        })
        .collect()
}

/// Parse and validate a COCO document held in memory.
pub fn parse_annotations(text: &str) -> Result<(CocoDoc, LoadReport)> {
    let root: Value = serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;
    let Value::Object(root) = root else {
        return Err(Error::Format("top level must be an object".into()));
    };
    let mut report = LoadReport::default();
    for k in root.keys().filter(|k| !TOP_KEYS.contains(&k.as_str())) {
        report.unknown_fields.push(k.clone());
    }
    let raw_anns = section(&root, "annotations")?;
    let doc = CocoDoc {
        images: typed(section(&root, "images")?, "images", IMAGE_KEYS, &mut report)?,
        annotations: typed(raw_anns, "annotations", ANN_KEYS, &mut report)?,
        categories: typed(section(&root, "categories")?, "categories", CAT_KEYS, &mut report)?,
    };
    if doc.annotations.len() != raw_anns.len() {
        return Err(Error::Integrity(format!(
            "read {} of {} annotations",
            doc.annotations.len(),
            raw_anns.len()
        )));
    }
    doc.validate()?;
    Ok((doc, report))
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<(CocoDoc, LoadReport)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text)
}

impl CocoDoc {
    /// Referential integrity, unique ids, boxes inside their image and
    /// positive areas.
    pub fn validate(&self) -> Result<()> {
        let mut images = HashMap::new();
        for im in &self.images {
            if images.insert(im.id, im).is_some() {
                return Err(Error::Integrity(format!("duplicate image id {}", im.id)));
            }
        }
        let mut cats = HashSet::new();
        for c in &self.categories {
            if !cats.insert(c.id) {
                return Err(Error::Integrity(format!("duplicate category id {}", c.id)));
            }
        }
        let mut ann_ids = HashSet::new();
        for a in &self.annotations {
            if !ann_ids.insert(a.id) {
                return Err(Error::Integrity(format!("duplicate annotation id {}", a.id)));
            }
            let im = images.get(&a.image_id).ok_or_else(|| {
                Error::Integrity(format!("annotation {} references missing image id {}", a.id, a.image_id))
            })?;
            if !cats.contains(&a.category_id) {
                return Err(Error::Integrity(format!(
                    "annotation {} references missing category id {}",
                    a.id, a.category_id
                )));
            }
            let [x, y, w, h] = a.bbox;
            let tol = 1e-6;
            let inside = x >= -tol && y >= -tol && x + w <= im.width as f64 + tol && y + h <= im.height as f64 + tol;
            if !(w > 0.0 && h > 0.0 && inside) {
                return Err(Error::Integrity(format!(
                    "annotation {} bbox {:?} outside image {} ({}x{})",
                    a.id, a.bbox, im.id, im.width, im.height
                )));
            }
            if !(a.area > 0.0) {
                return Err(Error::Integrity(format!("annotation {} has non-positive area {}", a.id, a.area)));
            }
        }
        Ok(())
    }

    pub fn category_ids(&self) -> Vec<u64> {
        self.categories.iter().map(|c| c.id).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}

/// Split name per image id.
pub type SplitAssignment = BTreeMap<u64, String>;

/// Splits embedded in the images' `split` field.
pub fn embedded_splits(doc: &CocoDoc) -> SplitAssignment {
    doc.images
        .iter()
        .filter_map(|im| im.split.clone().map(|s| (im.id, s)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsRow {
    pub category: String,
    pub counts: Vec<u64>,
    pub total: u64,
}

/// Per-category counts by split, laid out like a dataset statistics table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsTable {
    pub splits: Vec<String>,
    pub images: StatsRow,
    pub categories: Vec<StatsRow>,
    pub totals: StatsRow,
}

fn row(category: &str, counts: Vec<u64>) -> StatsRow {
    StatsRow {
        category: category.to_string(),
        total: counts.iter().sum(),
        counts,
    }
}

/// Count images and annotations per split. `split_order` fixes the column
/// order; images with no assignment are counted under `"unassigned"`.
pub fn dataset_stats(doc: &CocoDoc, splits: &SplitAssignment, split_order: &[&str]) -> StatsTable {
    let mut names: Vec<String> = split_order.iter().map(|s| s.to_string()).collect();
    let column = |names: &mut Vec<String>, s: &str| match names.iter().position(|n| n == s) {
        Some(i) => i,
        None => {
            names.push(s.to_string());
            names.len() - 1
        }
    };
    let mut img_col = HashMap::new();
    for im in &doc.images {
        let s = splits.get(&im.id).map(String::as_str).unwrap_or("unassigned");
        img_col.insert(im.id, column(&mut names, s));
    }
    let ncol = names.len();
    let mut images = vec![0u64; ncol];
    for c in img_col.values() {
        images[*c] += 1;
    }
    let cat_row: HashMap<u64, usize> = doc.categories.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    let mut counts = vec![vec![0u64; ncol]; doc.categories.len()];
    for a in &doc.annotations {
        if let (Some(&r), Some(&c)) = (cat_row.get(&a.category_id), img_col.get(&a.image_id)) {
            counts[r][c] += 1;
        }
    }
    let totals: Vec<u64> = (0..ncol).map(|c| counts.iter().map(|r| r[c]).sum()).collect();
    StatsTable {
        splits: names,
        images: row("Images", images),
        categories: doc
            .categories
            .iter()
            .zip(counts)
            .map(|(c, n)| row(&c.name, n))
            .collect(),
        totals: row("Total Objects", totals),
    }
}

impl StatsTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["category".to_string()];
        header.extend(self.splits.iter().cloned());
        header.push("total".into());
        out.write_record(&header)?;
        for r in std::iter::once(&self.images).chain(&self.categories).chain(std::iter::once(&self.totals)) {
            let mut rec = vec![r.category.clone()];
            rec.extend(r.counts.iter().map(u64::to_string));
            rec.push(r.total.to_string());
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }
}

/// Per-split image and per-category annotation counts, as recorded alongside
/// a fixture or published for a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountsManifest {
    pub splits: Vec<String>,
    pub images: BTreeMap<String, u64>,
    pub categories: Vec<BTreeMap<String, Value>>,
    #[serde(default)]
    pub total_objects: Option<BTreeMap<String, u64>>,
}

impl CountsManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| parse_error(&text, &e))
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories
            .iter()
            .map(|c| c.get("name").and_then(Value::as_str).unwrap_or_default().to_string())
            .collect()
    }

    /// Count for `category` (by position) in `split`.
    pub fn count(&self, category: usize, split: &str) -> u64 {
        self.categories[category].get(split).and_then(Value::as_u64).unwrap_or(0)
    }

    /// A document with exactly these counts: one tiny box per annotation,
    /// spread round-robin over the images of its split.
    pub fn to_doc(&self, width: u32, height: u32) -> Result<(CocoDoc, SplitAssignment)> {
        let mut doc = CocoDoc::default();
        let mut splits = SplitAssignment::new();
        for (i, name) in self.category_names().into_iter().enumerate() {
            doc.categories.push(CocoCategory { id: i as u64 + 1, name });
        }
        for split in &self.splits {
            let n_img = self.images.get(split).copied().unwrap_or(0);
            let first = doc.images.len() as u64 + 1;
            for k in 0..n_img {
                let id = first + k;
                doc.images.push(CocoImage {
                    id,
                    file_name: format!("{split}_{k:06}.jpg"),
                    width,
                    height,
                    split: None,
                });
                splits.insert(id, split.clone());
            }
            for c in 0..self.categories.len() {
                let n = self.count(c, split);
                if n > 0 && n_img == 0 {
                    return Err(Error::Config(format!("split {split} has annotations but no images")));
                }
                for k in 0..n {
                    doc.annotations.push(CocoAnnotation {
                        id: doc.annotations.len() as u64 + 1,
                        image_id: first + k % n_img,
                        category_id: c as u64 + 1,
                        bbox: [0.0, 0.0, 16.0, 16.0],
                        area: 256.0,
                    });
                }
            }
        }
        Ok((doc, splits))
    }
}
