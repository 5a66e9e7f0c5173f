//! Deterministic synthetic traffic scenes: shaded rectangles and trapezoids
//! on a textured road, with perspective foreshortening, shear toward a
//! vanishing column and depth-ordered occlusion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::coco::{CocoAnnotation, CocoCategory, CocoDoc, CocoImage};
use crate::error::{Error, Result};
use crate::eval::GtBox;
use crate::tensor::Tensor;

pub const CATEGORY_NAMES: [&str; 3] = ["car", "pedestrian", "truck"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSceneSpec {
    /// `(height, width)`
    pub image_size: (usize, usize),
    /// Inclusive range.
    pub object_count: (usize, usize),
    /// Side lengths in pixels before perspective scaling; the shorter side
    /// never drops below `scale_range.0`.
    pub scale_range: (f64, f64),
    pub occlusion_cap: f64,
    /// Horizontal shear per unit height at the image border.
    pub shear: f64,
    /// Scale multiplier at the top row; the bottom row uses 1.
    pub horizon_scale: f64,
    pub seed: u64,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            object_count: (1, 3),
            scale_range: (6.0, 28.0),
            occlusion_cap: 0.75,
            shear: 0.25,
            horizon_scale: 0.5,
            seed: 0,
        }
    }
}

impl SynthSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let (lo, hi) = self.scale_range;
        let bad = |m: &str| Err(Error::Config(format!("synthetic scene: {m}")));
        if h < 8 || w < 8 {
            return bad("image must be at least 8x8");
        }
        if self.object_count.0 > self.object_count.1 {
            return bad("object_count range is reversed");
        }
        if !(lo >= 1.0 && hi >= lo && hi <= (h.min(w) as f64) * 0.75) {
            return bad("scale_range must satisfy 1 <= lo <= hi <= 0.75 * min(H, W)");
        }
        if !(0.0..=1.0).contains(&self.occlusion_cap) {
            return bad("occlusion_cap must lie in [0, 1]");
        }
        if !(self.shear.is_finite() && self.shear.abs() <= 1.0) {
            return bad("shear must lie in [-1, 1]");
        }
        if !(self.horizon_scale > 0.0 && self.horizon_scale <= 1.0) {
            return bad("horizon_scale must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthObject {
    /// 1-based, indexes [`CATEGORY_NAMES`].
    pub category_id: u64,
    /// `[x, y, w, h]` tight around the polygon, clipped to the image.
    pub bbox: [f64; 4],
    /// Convex outline, clockwise in image coordinates.
    pub polygon: Vec<(f64, f64)>,
    /// Larger is nearer to the camera.
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f64>,
    /// Far to near.
    pub objects: Vec<SynthObject>,
}

fn xyxy(b: [f64; 4]) -> [f64; 4] {
    [b[0], b[1], b[0] + b[2], b[1] + b[3]]
}

/// Area of `target ∩ (∪ others)` by coordinate compression.
pub fn covered_area(target: [f64; 4], others: &[[f64; 4]]) -> f64 {
    let t = xyxy(target);
    let clipped: Vec<[f64; 4]> = others
        .iter()
        .map(|o| {
            let o = xyxy(*o);
            [o[0].max(t[0]), o[1].max(t[1]), o[2].min(t[2]), o[3].min(t[3])]
        })
        .filter(|c| c[2] > c[0] && c[3] > c[1])
        .collect();
    let mut xs: Vec<f64> = clipped.iter().flat_map(|c| [c[0], c[2]]).collect();
    let mut ys: Vec<f64> = clipped.iter().flat_map(|c| [c[1], c[3]]).collect();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let mut area = 0.0;
    for xw in xs.windows(2) {
        for yw in ys.windows(2) {
            let (mx, my) = ((xw[0] + xw[1]) / 2.0, (yw[0] + yw[1]) / 2.0);
            if clipped.iter().any(|c| mx > c[0] && mx < c[2] && my > c[1] && my < c[3]) {
                area += (xw[1] - xw[0]) * (yw[1] - yw[0]);
            }
        }
    }
    area
}

/// Fraction of each object's box hidden behind the union of nearer boxes.
pub fn occlusion_fractions(objects: &[SynthObject]) -> Vec<f64> {
    objects
        .iter()
        .map(|o| {
            let nearer: Vec<[f64; 4]> = objects.iter().filter(|p| p.depth > o.depth).map(|p| p.bbox).collect();
            covered_area(o.bbox, &nearer) / (o.bbox[2] * o.bbox[3])
        })
        .collect()
}

fn inside_convex(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let n = poly.len();
    (0..n).all(|i| {
        let (ax, ay) = poly[i];
        let (bx, by) = poly[(i + 1) % n];
        (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0.0
    })
}

/// Pixels whose centre lies inside the object's outline, ignoring
/// occlusion. Row-major `H * W`.
pub fn object_mask(obj: &SynthObject, image_size: (usize, usize)) -> Vec<bool> {
    let (h, w) = image_size;
    let mut mask = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            mask[i * w + j] = inside_convex(&obj.polygon, j as f64 + 0.5, i as f64 + 0.5);
        }
    }
    mask
}

const PALETTE: [[f64; 3]; 3] = [[0.85, 0.2, 0.15], [0.2, 0.75, 0.25], [0.2, 0.35, 0.9]];

fn propose(spec: &SynthSceneSpec, rng: &mut ChaCha8Rng) -> SynthObject {
    let (ih, iw) = (spec.image_size.0 as f64, spec.image_size.1 as f64);
    let (lo, hi) = spec.scale_range;
    let class = rng.random_range(0..CATEGORY_NAMES.len());
    let long = rng.random_range(lo..=hi);
    let short = long * rng.random_range(0.45..0.65);
    let (bw, bh) = match class {
        1 => (short, long),
        _ => (long, short),
    };
    // Bottom edge position drives foreshortening.
    let bottom_frac = rng.random_range(0.15..1.0);
    let s = spec.horizon_scale + (1.0 - spec.horizon_scale) * bottom_frac;
    let w = (bw * s).clamp(lo, iw - 2.0);
    let h = (bh * s).clamp(lo, ih - 2.0);
    let y1 = (bottom_frac * ih).clamp(h + 1.0, ih - 1.0);
    let y0 = y1 - h;
    let top_ratio = if class == 2 { 0.65 } else { 1.0 };
    let inset = w * (1.0 - top_ratio) / 2.0;
    let x0 = rng.random_range(1.0..(iw - 1.0 - w).max(1.0 + 1e-9));
    let centre = x0 + w / 2.0;
    let k = spec.shear * (centre - iw / 2.0) / (iw / 2.0);
    let mut lean = k * h;
    // Keep the sheared top edge inside the image.
    lean = lean.clamp(1.0 - (x0 + inset), iw - 1.0 - (x0 + w - inset));
    let polygon = vec![
        (x0 + inset + lean, y0),
        (x0 + w - inset + lean, y0),
        (x0 + w, y1),
        (x0, y1),
    ];
    let minx = polygon.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).max(0.0);
    let maxx = polygon.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).min(iw);
    let bbox = [minx, y0.max(0.0), maxx - minx, y1.min(ih) - y0.max(0.0)];
    SynthObject {
        category_id: class as u64 + 1,
        bbox,
        polygon,
        depth: y1,
    }
}

fn render(spec: &SynthSceneSpec, objects: &[SynthObject], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let (h, w) = spec.image_size;
    let mut img = vec![0.0; 3 * h * w];
    let tint: [f64; 3] = [rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04), 0.0];
    for i in 0..h {
        let base = 0.35 + 0.15 * i as f64 / h as f64;
        for j in 0..w {
            let n = rng.random_range(-0.04..0.04);
            for (c, t) in tint.iter().enumerate() {
                img[(c * h + i) * w + j] = base + t + n;
            }
        }
    }
    for obj in objects {
        let col = PALETTE[obj.category_id as usize - 1];
        let shade = rng.random_range(0.8..1.1);
        let [_, y0, _, bh] = obj.bbox;
        let mask = object_mask(obj, spec.image_size);
        for i in 0..h {
            let v = shade * (1.0 - 0.25 * ((i as f64 + 0.5 - y0) / bh).clamp(0.0, 1.0));
            for j in 0..w {
                if mask[i * w + j] {
                    for (c, cv) in col.iter().enumerate() {
                        img[(c * h + i) * w + j] = cv * v;
                    }
                }
            }
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::from_vec(&[3, h, w], img).expect("shape matches")
}

/// Render one scene. Pure in `spec` (including its seed).
pub fn synth_generate(spec: &SynthSceneSpec) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.object_count;
    let count = rng.random_range(lo..=hi);
    let mut objects: Vec<SynthObject> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while objects.len() < count {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Config(format!(
                "could not place {count} objects under occlusion cap {}",
                spec.occlusion_cap
            )));
        }
        // Start over occasionally so a crowded early layout cannot block placement.
        if attempts.is_multiple_of(200) {
            objects.clear();
        }
        let cand = propose(spec, &mut rng);
        if objects.iter().any(|o| o.depth == cand.depth) {
            continue;
        }
        let mut trial = objects.clone();
        trial.push(cand);
        if occlusion_fractions(&trial).iter().all(|&f| f <= spec.occlusion_cap) {
            objects = trial;
        }
    }
    objects.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    let image = render(spec, &objects, &mut rng);
    Ok(SynthScene { image, objects })
}

/// `n` scenes whose per-image seeds derive from `spec.seed`.
pub fn synth_dataset(spec: &SynthSceneSpec, n: usize) -> Result<Vec<SynthScene>> {
    let mut seeder = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..n)
        .map(|_| {
            let s = SynthSceneSpec {
                seed: seeder.random(),
                ..spec.clone()
            };
            synth_generate(&s)
        })
        .collect()
}

pub fn synth_categories() -> Vec<CocoCategory> {
    CATEGORY_NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| CocoCategory {
            id: i as u64 + 1,
            name: n.to_string(),
        })
        .collect()
}

/// Ground truth in evaluator form; image ids are `first_id + index`.
pub fn scenes_to_gts(scenes: &[SynthScene], first_id: u64) -> Vec<GtBox> {
    scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.objects.iter().map(move |o| GtBox {
                image_id: first_id + i as u64,
                category_id: o.category_id,
                bbox: o.bbox,
                area: o.bbox[2] * o.bbox[3],
            })
        })
        .collect()
}

/// Scenes as a COCO document with image ids starting at 1.
pub fn scenes_to_coco(scenes: &[SynthScene]) -> CocoDoc {
    let mut doc = CocoDoc {
        categories: synth_categories(),
        ..Default::default()
    };
    for (i, s) in scenes.iter().enumerate() {
        let id = i as u64 + 1;
        let shape = s.image.shape();
        doc.images.push(CocoImage {
            id,
            file_name: format!("synth_{id:05}.ppm"),
            width: shape[2] as u32,
            height: shape[1] as u32,
            split: None,
        });
        for o in &s.objects {
            doc.annotations.push(CocoAnnotation {
                id: doc.annotations.len() as u64 + 1,
                image_id: id,
                category_id: o.category_id,
                bbox: o.bbox,
                area: o.bbox[2] * o.bbox[3],
            });
        }
    }
    doc
}
