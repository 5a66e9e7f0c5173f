use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{scenes_to_gts, synth_categories, synth_dataset, SynthScene, SynthSceneSpec};
use crate::error::{Error, Result};
use crate::eval::{ap_evaluate, ApReport, AreaRanges, Detection};
use crate::tensor::{Scalar, Tensor};

use super::loss::{set_loss, LossBreakdown, Target};
use super::model::{forward, predict, DetectionSet, Model};
use super::optim::{adamw_step, AdamState};

pub struct Batch<T: Scalar> {
    /// `[N, 3, H, W]`
    pub images: Tensor<T>,
    pub targets: Vec<Vec<Target>>,
}

/// Per-sample training augmentation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    /// Left-right mirror, applied before the shift.
    pub flip: bool,
    /// `(dy, dx)` pixel translation; uncovered pixels repeat the edge.
    pub shift: (isize, isize),
}

/// Normalized targets of a scene under `aug`. Boxes are clipped to the
/// image; boxes left narrower than 2 px on either side are dropped.
pub fn scene_targets(scene: &SynthScene, aug: Augment) -> Vec<Target> {
    let (h, w) = (scene.image.shape()[1] as f64, scene.image.shape()[2] as f64);
    let (dy, dx) = (aug.shift.0 as f64, aug.shift.1 as f64);
    scene
        .objects
        .iter()
        .filter_map(|o| {
            let [x, y, bw, bh] = o.bbox;
            let x = if aug.flip { w - x - bw } else { x };
            let (x0, x1) = ((x + dx).max(0.0), (x + bw + dx).min(w));
            let (y0, y1) = ((y + dy).max(0.0), (y + bh + dy).min(h));
            (x1 - x0 >= 2.0 && y1 - y0 >= 2.0).then(|| Target {
                class: o.category_id as usize - 1,
                bbox: [(x0 + x1) / 2.0 / w, (y0 + y1) / 2.0 / h, (x1 - x0) / w, (y1 - y0) / h],
            })
        })
        .collect()
}

/// Stack scenes into a batch. `augs` may be shorter than `scenes`; missing
/// entries mean no augmentation.
pub fn make_batch<T: Scalar>(scenes: &[&SynthScene], augs: &[Augment]) -> Result<Batch<T>> {
    let first = scenes.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let s = first.image.shape().to_vec();
    let (h, w) = (s[1], s[2]);
    let mut data = Vec::with_capacity(scenes.len() * 3 * h * w);
    let mut targets = Vec::with_capacity(scenes.len());
    for (k, sc) in scenes.iter().enumerate() {
        if sc.image.shape() != s.as_slice() {
            return Err(Error::shape("make_batch", format!("{:?} vs {s:?}", sc.image.shape())));
        }
        let aug = augs.get(k).copied().unwrap_or_default();
        let src = |n: usize, d: isize, o: usize| (o as isize - d).clamp(0, n as isize - 1) as usize;
        let d = sc.image.data();
        for c in 0..3 {
            for i in 0..h {
                let ii = src(h, aug.shift.0, i);
                for j in 0..w {
                    let jj = src(w, aug.shift.1, j);
                    let jj = if aug.flip { w - 1 - jj } else { jj };
                    data.push(T::from_f64(d[(c * h + ii) * w + jj]));
                }
            }
        }
        targets.push(scene_targets(sc, aug));
    }
    Ok(Batch {
        images: Tensor::from_vec(&[scenes.len(), 3, h, w], data)?,
        targets,
    })
}

/// Forward, match, loss, backward and one AdamW update. Returns the loss
/// before the update and the learning rate applied.
pub fn train_step<T: Scalar>(model: &mut Model<T>, batch: &Batch<T>, opt: &mut AdamState) -> Result<(LossBreakdown, f64)> {
    let q = model.cfg.query_count;
    if let Some(t) = batch.targets.iter().find(|t| t.len() > q) {
        return Err(Error::Config(format!("image with {} objects exceeds query_count {q}", t.len())));
    }
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, true);
    let x = g.constant(batch.images.clone());
    let step = opt.step + 1;
    let non_finite = |e: Error| match e {
        Error::NonFinite { op, index } => Error::NonFiniteLoss { step, detail: format!("non-finite value in {op} at element {index}") },
        e => e,
    };
    let out = forward(&mut g, &p, model, x).map_err(non_finite)?;
    let loss = set_loss(&mut g, out.logits, out.boxes, &batch.targets, &model.cfg.loss).map_err(non_finite)?;
    let br = loss.breakdown(&g);
    if ![br.cls, br.l1, br.giou, br.total].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: opt.step + 1,
            detail: format!("cls {} l1 {} giou {} total {}", br.cls, br.l1, br.giou, br.total),
        });
    }
    g.backward(loss.total)?;
    let grads: Vec<Vec<f64>> = p
        .vars()
        .iter()
        .zip(model.store.iter())
        .map(|(&v, (_, t))| match g.grad(v) {
            Some(gr) => gr.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();
    if let Some(k) = grads.iter().position(|gk| gk.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteLoss {
            step: opt.step + 1,
            detail: format!("non-finite gradient for {}", model.store.iter().nth(k).map(|(n, _)| n).unwrap_or("?")),
        });
    }
    let lr = adamw_step(&mut model.store, &grads, opt, &model.cfg.optimizer)?;
    Ok((br, lr))
}

/// Loss of the current parameters on `batch`, without updating.
pub fn evaluate_loss<T: Scalar>(model: &Model<T>, batch: &Batch<T>) -> Result<LossBreakdown> {
    let mut g = Graph::inference();
    let p = model.store.bind(&mut g, false);
    let x = g.constant(batch.images.clone());
    let out = forward(&mut g, &p, model, x)?;
    Ok(set_loss(&mut g, out.logits, out.boxes, &batch.targets, &model.cfg.loss)?.breakdown(&g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub train_images: usize,
    pub val_images: usize,
    pub batch_size: usize,
    pub steps: usize,
    /// Random left-right mirroring of training samples.
    pub flip: bool,
    /// Largest random translation in pixels along each axis.
    #[serde(default = "default_max_shift")]
    pub max_shift: usize,
    pub scene: SynthSceneSpec,
}

fn default_max_shift() -> usize {
    4
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            train_images: 32,
            val_images: 16,
            batch_size: 8,
            steps: 2000,
            flip: true,
            max_shift: default_max_shift(),
            scene: SynthSceneSpec::default(),
        }
    }
}

pub struct SynthSplit {
    pub train: Vec<SynthScene>,
    pub val: Vec<SynthScene>,
}

/// Disjoint train and held-out scene sets derived from `scene.seed`.
pub fn synth_split(opts: &TrainOptions) -> Result<SynthSplit> {
    let spec = |salt: u64| SynthSceneSpec {
        seed: opts.scene.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt),
        ..opts.scene.clone()
    };
    Ok(SynthSplit {
        train: synth_dataset(&spec(1), opts.train_images)?,
        val: synth_dataset(&spec(2), opts.val_images)?,
    })
}

/// Sample indices and augmentations for 0-based `step`: consecutive slices
/// of per-epoch seeded permutations, so a resumed run sees the same stream.
pub fn batch_plan(seed: u64, n: usize, batch_size: usize, step: usize, flip: bool, max_shift: usize) -> Vec<(usize, Augment)> {
    let perm = |epoch: usize| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407)));
        idx
    };
    let start = step * batch_size;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    let m = max_shift as i64;
    (start..start + batch_size)
        .map(|j| {
            let e = j / n;
            if cached.as_ref().is_none_or(|c| c.0 != e) {
                cached = Some((e, perm(e)));
            }
            let i = cached.as_ref().expect("cached").1[j % n];
            let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(17) ^ j as u64);
            let flip = flip && rng.random_bool(0.5);
            let shift = if m > 0 { (rng.random_range(-m..=m) as isize, rng.random_range(-m..=m) as isize) } else { (0, 0) };
            (i, Augment { flip, shift })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

/// Train until `opt.step` reaches `opts.steps`, calling `on_step` after each
/// update. Stops early if the callback returns `false`.
pub fn run_training<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut AdamState,
    train: &[SynthScene],
    opts: &TrainOptions,
    mut on_step: impl FnMut(&Model<T>, &StepRecord) -> Result<bool>,
) -> Result<()> {
    if train.is_empty() || opts.batch_size == 0 {
        return Err(Error::Config("training needs at least one image and a positive batch size".into()));
    }
    while opt.step < opts.steps {
        let plan = batch_plan(model.cfg.seed, train.len(), opts.batch_size, opt.step, opts.flip, opts.max_shift);
        let scenes: Vec<&SynthScene> = plan.iter().map(|&(i, _)| &train[i]).collect();
        let augs: Vec<Augment> = plan.iter().map(|&(_, a)| a).collect();
        let batch = make_batch(&scenes, &augs)?;
        let (loss, lr) = train_step(model, &batch, opt)?;
        let rec = StepRecord { step: opt.step, loss, lr };
        if !on_step(model, &rec)? {
            break;
        }
    }
    Ok(())
}

/// Mean loss over `scenes`, evaluated in batches of `batch_size`.
pub fn dataset_loss<T: Scalar>(model: &Model<T>, scenes: &[SynthScene], batch_size: usize) -> Result<LossBreakdown> {
    let parts: Vec<(usize, LossBreakdown)> = scenes
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let refs: Vec<&SynthScene> = chunk.iter().collect();
            let b = make_batch::<T>(&refs, &[])?;
            Ok((chunk.len(), evaluate_loss(model, &b)?))
        })
        .collect::<Result<_>>()?;
    let n = scenes.len().max(1) as f64;
    let mut acc = LossBreakdown::default();
    for (k, l) in parts {
        let f = k as f64 / n;
        acc.cls += f * l.cls;
        acc.l1 += f * l.l1;
        acc.giou += f * l.giou;
        acc.total += f * l.total;
    }
    Ok(acc)
}

/// Area strata scaled to 64x64 scenes: small below 12², large above 24².
pub fn toy_area_ranges() -> AreaRanges {
    AreaRanges {
        small_max: 144.0,
        large_min: 576.0,
    }
}

/// Predictions for every scene, image ids `first_id + index`.
pub fn predict_scenes<T: Scalar>(model: &Model<T>, scenes: &[SynthScene], first_id: u64) -> Result<Vec<Detection>> {
    let sets: Vec<Vec<DetectionSet>> = scenes
        .par_chunks(8)
        .map(|chunk| {
            let refs: Vec<&SynthScene> = chunk.iter().collect();
            predict(model, &make_batch::<T>(&refs, &[])?.images)
        })
        .collect::<Result<_>>()?;
    let (h, w) = model.cfg.input_size;
    Ok(sets
        .into_iter()
        .flatten()
        .enumerate()
        .flat_map(|(i, s)| s.to_detections(first_id + i as u64, w as f64, h as f64))
        .collect())
}

pub fn evaluate_scenes<T: Scalar>(model: &Model<T>, scenes: &[SynthScene]) -> Result<(ApReport, Vec<Detection>)> {
    let dets = predict_scenes(model, scenes, 1)?;
    let gts = scenes_to_gts(scenes, 1);
    let cats: Vec<u64> = synth_categories().iter().map(|c| c.id).collect();
    Ok((ap_evaluate(&dets, &gts, &cats, &toy_area_ranges())?, dets))
}
