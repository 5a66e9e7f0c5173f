use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::eval::{cxcywh_to_xyxy, giou};
use crate::tensor::{Scalar, Tensor};

use super::config::LossWeights;
use super::matcher::{hungarian_match, MatchResult};
use super::model::softmax_row;

/// Ground-truth object: 0-based class index and normalized `(cx, cy, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub class: usize,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

pub struct SetLoss {
    pub cls: Var,
    pub l1: Var,
    pub giou: Var,
    pub total: Var,
    pub matches: Vec<MatchResult>,
}

impl SetLoss {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Var| g.value(x).item().as_f64();
        LossBreakdown {
            cls: v(self.cls),
            l1: v(self.l1),
            giou: v(self.giou),
            total: v(self.total),
        }
    }
}

/// `Q x T` matching cost for one image from predicted probabilities and
/// boxes.
pub fn matching_cost(
    logits: &[Vec<f64>],
    boxes: &[[f64; 4]],
    targets: &[Target],
    w: &LossWeights,
) -> Result<Vec<f64>> {
    let mut cost = Vec::with_capacity(logits.len() * targets.len());
    for (l, b) in logits.iter().zip(boxes) {
        let p = softmax_row(l);
        for t in targets {
            let l1: f64 = b.iter().zip(&t.bbox).map(|(x, y)| (x - y).abs()).sum();
            let gi = giou(&cxcywh_to_xyxy(*b), &cxcywh_to_xyxy(t.bbox))?;
            cost.push(w.cls * -p[t.class] + w.l1 * l1 + w.giou * (1.0 - gi));
        }
    }
    Ok(cost)
}

fn col<T: Scalar>(g: &mut Graph<T>, x: Var, i: usize) -> Result<Var> {
    g.narrow(x, 1, i, 1)
}

/// `(x1, y1, x2, y2)` columns of an `[M, 4]` centre-size box tensor.
fn corners<T: Scalar>(g: &mut Graph<T>, b: Var) -> Result<[Var; 4]> {
    let (cx, cy, w, h) = (col(g, b, 0)?, col(g, b, 1)?, col(g, b, 2)?, col(g, b, 3)?);
    let hw = g.scale(w, 0.5)?;
    let hh = g.scale(h, 0.5)?;
    Ok([g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?])
}

/// Row-wise GIoU of two `[M, 4]` centre-size box tensors, `[M, 1]`.
pub fn giou_rows<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let [ax1, ay1, ax2, ay2] = corners(g, a)?;
    let [bx1, by1, bx2, by2] = corners(g, b)?;
    let span = |g: &mut Graph<T>, lo: Var, hi: Var| g.sub(hi, lo);
    let ix1 = g.maximum(ax1, bx1)?;
    let ix2 = g.minimum(ax2, bx2)?;
    let iy1 = g.maximum(ay1, by1)?;
    let iy2 = g.minimum(ay2, by2)?;
    let iw = span(g, ix1, ix2)?;
    let iw = g.relu(iw)?;
    let ih = span(g, iy1, iy2)?;
    let ih = g.relu(ih)?;
    let inter = g.mul(iw, ih)?;
    let aw = span(g, ax1, ax2)?;
    let ah = span(g, ay1, ay2)?;
    let area_a = g.mul(aw, ah)?;
    let bw = span(g, bx1, bx2)?;
    let bh = span(g, by1, by2)?;
    let area_b = g.mul(bw, bh)?;
    let sum = g.add(area_a, area_b)?;
    let union = g.sub(sum, inter)?;
    let iou = g.div(inter, union)?;
    let ex1 = g.minimum(ax1, bx1)?;
    let ex2 = g.maximum(ax2, bx2)?;
    let ey1 = g.minimum(ay1, by1)?;
    let ey2 = g.maximum(ay2, by2)?;
    let ew = span(g, ex1, ex2)?;
    let eh = span(g, ey1, ey2)?;
    let encl = g.mul(ew, eh)?;
    let gap = g.sub(encl, union)?;
    let frac = g.div(gap, encl)?;
    g.sub(iou, frac)
}

/// Set-prediction loss over a batch: Hungarian matching per image, then
/// weighted cross-entropy over all queries (unmatched queries target the
/// no-object class with weight `no_object`) and L1 + (1 - GIoU) over
/// matched boxes, both divided by the batch's target count.
pub fn set_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    boxes: Var,
    targets: &[Vec<Target>],
    w: &LossWeights,
) -> Result<SetLoss> {
    let (n, q, k) = match *g.shape(logits) {
        [n, q, k] => (n, q, k),
        ref s => return Err(Error::shape("set_loss", format!("logits must be [N,Q,K], got {s:?}"))),
    };
    if g.shape(boxes) != [n, q, 4] || targets.len() != n {
        return Err(Error::shape(
            "set_loss",
            format!("boxes {:?}, {} target lists for batch {n}", g.shape(boxes), targets.len()),
        ));
    }
    let no_object = k - 1;
    if let Some(t) = targets.iter().flatten().find(|t| t.class >= no_object) {
        return Err(Error::Config(format!("target class {} out of range for {no_object} classes", t.class)));
    }
    let sets = super::model::split_sets(g.value(logits), g.value(boxes));
    let mut cls_idx = vec![no_object; n * q];
    let mut cls_w = vec![w.no_object; n * q];
    let mut rows = Vec::new();
    let mut tgt_boxes = Vec::new();
    let mut matches = Vec::with_capacity(n);
    for (i, (set, tg)) in sets.iter().zip(targets).enumerate() {
        let cost = matching_cost(&set.class_logits, &set.boxes, tg, w)?;
        let m = hungarian_match(&cost, q, tg.len())?;
        for &(qi, ti) in &m.pairs {
            cls_idx[i * q + qi] = tg[ti].class;
            cls_w[i * q + qi] = 1.0;
            rows.push(i * q + qi);
            tgt_boxes.extend_from_slice(&tg[ti].bbox);
        }
        matches.push(m);
    }

    let flat = g.reshape(logits, &[n * q, k])?;
    let logp = g.log_softmax(flat, 1)?;
    let picked = g.pick(logp, &cls_idx)?;
    let wsum: f64 = cls_w.iter().sum();
    let wv = g.constant(Tensor::from_f64_slice(&[n * q], &cls_w)?);
    let weighted = g.mul(picked, wv)?;
    let s = g.sum(weighted)?;
    let cls = g.scale(s, if wsum > 0.0 { -1.0 / wsum } else { 0.0 })?;

    let m = rows.len();
    let (l1, gi) = if m == 0 {
        let z = g.constant(Tensor::scalar(T::zero()));
        (z, z)
    } else {
        let norm = 1.0 / m as f64;
        let fb = g.reshape(boxes, &[n * q, 4])?;
        let pb = g.index_select(fb, &rows)?;
        let tb = g.constant(Tensor::from_f64_slice(&[m, 4], &tgt_boxes)?);
        let d = g.sub(pb, tb)?;
        let d = g.abs(d)?;
        let l1 = g.sum(d)?;
        let l1 = g.scale(l1, norm)?;
        let gr = giou_rows(g, pb, tb)?;
        let gs = g.sum(gr)?;
        // sum(1 - giou) / m
        let gs = g.scale(gs, -norm)?;
        let gi = g.add_scalar(gs, 1.0)?;
        (l1, gi)
    };
    let a = g.scale(cls, w.cls)?;
    let b = g.scale(l1, w.l1)?;
    let c = g.scale(gi, w.giou)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(SetLoss {
        cls,
        l1,
        giou: gi,
        total,
        matches,
    })
}
