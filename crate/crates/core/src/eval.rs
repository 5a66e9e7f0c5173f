//! Box overlap measures and COCO-style average precision.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `[x1, y1, x2, y2]`
pub type Xyxy = [f64; 4];

fn check(b: &Xyxy) -> Result<()> {
    if !(b.iter().all(|v| v.is_finite()) && b[2] > b[0] && b[3] > b[1]) {
        return Err(Error::DegenerateBox(*b));
    }
    Ok(())
}

fn area(b: &Xyxy) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

fn inter_union(a: &Xyxy, b: &Xyxy) -> (f64, f64) {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    (inter, area(a) + area(b) - inter)
}

pub fn iou(a: &Xyxy, b: &Xyxy) -> Result<f64> {
    check(a)?;
    check(b)?;
    let (i, u) = inter_union(a, b);
    Ok(i / u)
}

/// `IoU - (enclosure - union) / enclosure`
pub fn giou(a: &Xyxy, b: &Xyxy) -> Result<f64> {
    check(a)?;
    check(b)?;
    let (i, u) = inter_union(a, b);
    let enc = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    Ok(i / u - (enc - u) / enc)
}

pub fn cxcywh_to_xyxy(b: [f64; 4]) -> Xyxy {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

pub fn xyxy_to_cxcywh(b: Xyxy) -> [f64; 4] {
    [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0, b[2] - b[0], b[3] - b[1]]
}

pub fn xywh_to_xyxy(b: [f64; 4]) -> Xyxy {
    [b[0], b[1], b[0] + b[2], b[1] + b[3]]
}

/// One scored detection in COCO results layout (`bbox` is `[x, y, w, h]`
/// in pixels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Annotated box, `[x, y, w, h]` in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub area: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaRanges {
    /// Areas strictly below this are small.
    pub small_max: f64,
    /// Areas strictly above this are large.
    pub large_min: f64,
}

impl Default for AreaRanges {
    fn default() -> Self {
        Self {
            small_max: 32.0 * 32.0,
            large_min: 96.0 * 96.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stratum {
    Small,
    Medium,
    Large,
}

impl AreaRanges {
    pub fn stratum(&self, area: f64) -> Stratum {
        if area < self.small_max {
            Stratum::Small
        } else if area > self.large_min {
            Stratum::Large
        } else {
            Stratum::Medium
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Range {
    All,
    Only(Stratum),
}

impl Range {
    fn contains(self, ranges: &AreaRanges, area: f64) -> bool {
        match self {
            Range::All => true,
            Range::Only(s) => ranges.stratum(area) == s,
        }
    }
}

/// `0.50, 0.55, ..., 0.95`
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// `0.00, 0.01, ..., 1.00`
pub fn recall_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

pub const MAX_DETS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub category_id: u64,
    pub iou_threshold: f64,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    /// Interpolated precision on the 101-point recall grid at IoU 0.5.
    pub pr_curves: Vec<PrCurve>,
}

/// Score-ordered true/false-positive flags for one category and threshold.
struct Matches {
    scores: Vec<f64>,
    tp: Vec<bool>,
    num_gt: usize,
}

fn match_category(
    dets: &[&Detection],
    gts: &[&GtBox],
    thr: f64,
    range: Range,
    ranges: &AreaRanges,
) -> Result<Matches> {
    let mut images: BTreeSet<u64> = dets.iter().map(|d| d.image_id).collect();
    images.extend(gts.iter().map(|g| g.image_id));
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut num_gt = 0;
    for img in images {
        let img_gts: Vec<&GtBox> = gts.iter().copied().filter(|g| g.image_id == img).collect();
        let ignored: Vec<bool> = img_gts.iter().map(|g| !range.contains(ranges, g.area)).collect();
        num_gt += ignored.iter().filter(|&&i| !i).count();
        let mut img_dets: Vec<&Detection> = dets.iter().copied().filter(|d| d.image_id == img).collect();
        img_dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        img_dets.truncate(MAX_DETS);
        let gt_boxes: Vec<Xyxy> = img_gts.iter().map(|g| xywh_to_xyxy(g.bbox)).collect();
        let mut taken = vec![false; img_gts.len()];
        for d in img_dets {
            let db = xywh_to_xyxy(d.bbox);
            // best free non-ignored GT, else any ignored GT
            let mut best: Option<(usize, f64)> = None;
            for pass_ignored in [false, true] {
                for (gi, gb) in gt_boxes.iter().enumerate() {
                    if ignored[gi] != pass_ignored || (!pass_ignored && taken[gi]) {
                        continue;
                    }
                    let v = iou(&db, gb)?;
                    if v >= thr && best.is_none_or(|(_, b)| v > b) {
                        best = Some((gi, v));
                    }
                }
                if best.is_some() {
                    break;
                }
            }
            match best {
                Some((gi, _)) if ignored[gi] => {}
                Some((gi, _)) => {
                    taken[gi] = true;
                    scored.push((d.score, true));
                }
                None => {
                    let a = d.bbox[2] * d.bbox[3];
                    if range.contains(ranges, a) {
                        scored.push((d.score, false));
                    }
                }
            }
        }
    }
    // stable: equal scores keep image order
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(Matches {
        scores: scored.iter().map(|s| s.0).collect(),
        tp: scored.iter().map(|s| s.1).collect(),
        num_gt,
    })
}

/// Raw (recall, precision) after each detection in score order.
fn pr_points(m: &Matches) -> (Vec<f64>, Vec<f64>) {
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut rc = Vec::with_capacity(m.tp.len());
    let mut pr = Vec::with_capacity(m.tp.len());
    for &t in &m.tp {
        if t {
            tp += 1;
        } else {
            fp += 1;
        }
        rc.push(if m.num_gt == 0 { 0.0 } else { tp as f64 / m.num_gt as f64 });
        pr.push(tp as f64 / (tp + fp) as f64);
    }
    (rc, pr)
}

/// 101-point interpolated precision; `None` when the category has no GT.
fn interpolated(m: &Matches) -> Option<Vec<f64>> {
    if m.num_gt == 0 {
        return None;
    }
    let (rc, mut pr) = pr_points(m);
    for i in (0..pr.len().saturating_sub(1)).rev() {
        pr[i] = pr[i].max(pr[i + 1]);
    }
    Some(
        recall_grid()
            .iter()
            .map(|&r| {
                let idx = rc.partition_point(|&v| v < r);
                pr.get(idx).copied().unwrap_or(0.0)
            })
            .collect(),
    )
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// COCO-style evaluation: greedy score-ordered matching per image and
/// category, each GT matched at most once, 101-point interpolation, means
/// over IoU 0.50:0.05:0.95 and categories with at least one GT. Strata drop
/// GTs outside the area range and unmatched detections outside it.
pub fn ap_evaluate(dets: &[Detection], gts: &[GtBox], categories: &[u64], ranges: &AreaRanges) -> Result<ApReport> {
    let known: BTreeSet<u64> = categories.iter().copied().collect();
    for id in dets.iter().map(|d| d.category_id).chain(gts.iter().map(|g| g.category_id)) {
        if !known.contains(&id) {
            return Err(Error::UnknownCategory(id));
        }
    }
    for d in dets {
        check(&xywh_to_xyxy(d.bbox))?;
    }
    for g in gts {
        check(&xywh_to_xyxy(g.bbox))?;
    }
    let mut by_cat_d: BTreeMap<u64, Vec<&Detection>> = BTreeMap::new();
    let mut by_cat_g: BTreeMap<u64, Vec<&GtBox>> = BTreeMap::new();
    for d in dets {
        by_cat_d.entry(d.category_id).or_default().push(d);
    }
    for g in gts {
        by_cat_g.entry(g.category_id).or_default().push(g);
    }
    let thresholds = iou_thresholds();
    let ap_by = |range: Range, thrs: &[f64]| -> Result<(f64, Vec<PrCurve>)> {
        let mut vals = Vec::new();
        let mut curves = Vec::new();
        for &cat in &known {
            let d = by_cat_d.get(&cat).map(Vec::as_slice).unwrap_or(&[]);
            let g = by_cat_g.get(&cat).map(Vec::as_slice).unwrap_or(&[]);
            for &t in thrs {
                let m = match_category(d, g, t, range, ranges)?;
                if let Some(p) = interpolated(&m) {
                    let ap = mean(&p);
                    vals.push(ap);
                    if range == Range::All && t == 0.5 {
                        curves.push(PrCurve {
                            category_id: cat,
                            iou_threshold: t,
                            recall: recall_grid(),
                            precision: p,
                            ap,
                        });
                    }
                }
            }
        }
        Ok((mean(&vals), curves))
    };
    let (ap50, pr_curves) = ap_by(Range::All, &[0.5])?;
    Ok(ApReport {
        ap: ap_by(Range::All, &thresholds)?.0,
        ap50,
        ap75: ap_by(Range::All, &[thresholds[5]])?.0,
        ap_s: ap_by(Range::Only(Stratum::Small), &thresholds)?.0,
        ap_m: ap_by(Range::Only(Stratum::Medium), &thresholds)?.0,
        ap_l: ap_by(Range::Only(Stratum::Large), &thresholds)?.0,
        pr_curves,
    })
}

/// Raw precision/recall sequence for one category at one threshold, in
/// score order. Exposed for fixtures and plots.
pub fn raw_pr(dets: &[Detection], gts: &[GtBox], category: u64, thr: f64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let d: Vec<&Detection> = dets.iter().filter(|d| d.category_id == category).collect();
    let g: Vec<&GtBox> = gts.iter().filter(|g| g.category_id == category).collect();
    let m = match_category(&d, &g, thr, Range::All, &AreaRanges::default())?;
    let (rc, pr) = pr_points(&m);
    Ok((m.scores, rc, pr))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub iters: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
}

/// Nearest-rank percentiles over per-iteration wall-clock samples.
pub fn latency_stats(samples_ms: &[f64]) -> LatencyStats {
    let mut s = samples_ms.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = |q: f64| {
        if s.is_empty() {
            0.0
        } else {
            let i = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1;
            s[i]
        }
    };
    let mean_ms = mean(&s);
    LatencyStats {
        iters: s.len(),
        mean_ms,
        p50_ms: rank(0.5),
        p95_ms: rank(0.95),
        fps: if mean_ms > 0.0 { 1000.0 / mean_ms } else { 0.0 },
    }
}
