use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attn::{grid_positions, map_to_tokens, multi_head_attention, saa_forward, sinusoidal_pe, QkvParams, SaaParams};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geom::{pafc_forward, plain_stage_forward, PafcConfig, PafcParams, PlainStageParams};
use crate::nn::{Bindings, Conv, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

use super::config::{BackboneMode, ModelConfig};

#[derive(Debug, Clone)]
pub enum Stage {
    Pafc(PafcParams, PafcConfig),
    Plain(PlainStageParams),
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub qkv: QkvParams,
    pub proj: Linear,
    pub norm1: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub stages: Vec<Stage>,
    pub input_proj: Option<Conv>,
    /// Channel norm on the encoder input.
    pub input_norm: LayerNorm,
    pub encoder: SaaParams,
    /// `[Q, C]`
    pub queries: ParamId,
    pub decoder: Vec<DecoderLayer>,
    pub class_head: Linear,
    pub box_hidden: Linear,
    pub box_out: Linear,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub params: ModelParams,
}

/// Per-image predictions, `Q` rows each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    /// `(cx, cy, w, h)` normalized to `[0, 1]`.
    pub boxes: Vec<[f64; 4]>,
    /// `class_count + 1` logits per query; the last is no-object.
    pub class_logits: Vec<Vec<f64>>,
}

pub struct ForwardOut {
    /// `[N, Q, class_count + 1]`
    pub logits: Var,
    /// `[N, Q, 4]` after sigmoid
    pub boxes: Var,
    /// Encoder gate map, when the encoder has one.
    pub gate: Option<Var>,
}

/// Initialize a model from `cfg.seed`.
pub fn build_model<T: Scalar>(cfg: &ModelConfig) -> Result<Model<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init = Init::new(&mut store, &mut rng);
    let mut stages = Vec::with_capacity(cfg.stage_channels.len());
    let mut c_in = 3;
    for (s, &c_out) in cfg.stage_channels.iter().enumerate() {
        let pcfg = PafcConfig {
            in_channels: c_in,
            out_channels: c_out,
            arb_count: cfg.arb_count,
            stride: 2,
            gdu: cfg.gdu.clone(),
        };
        let name = format!("stage{s}");
        stages.push(match cfg.backbone {
            BackboneMode::Pafc => Stage::Pafc(PafcParams::new(&mut init, &name, &pcfg)?, pcfg),
            BackboneMode::Plain => Stage::Plain(PlainStageParams::new(&mut init, &name, &pcfg)),
        });
        c_in = c_out;
    }
    let d = cfg.saa.embed_dim;
    let input_proj = (c_in != d).then(|| Conv::new(&mut init, "input_proj", c_in, d, 1, 1));
    let input_norm = LayerNorm::new(&mut init, "input_norm", d);
    let encoder = SaaParams::new(&mut init, "encoder", &cfg.saa)?;
    let queries = init.normal("queries", &[cfg.query_count, d], 1.0);
    let decoder = (0..cfg.decoder_layers)
        .map(|l| {
            init.scope(&format!("decoder{l}"), |i| DecoderLayer {
                qkv: QkvParams::new(i, d),
                proj: Linear::new(i, "proj", d, d),
                norm1: LayerNorm::new(i, "norm1", d),
                ffn1: Linear::new(i, "ffn1", d, cfg.decoder_ffn),
                ffn2: Linear::new(i, "ffn2", cfg.decoder_ffn, d),
                norm2: LayerNorm::new(i, "norm2", d),
            })
        })
        .collect();
    let class_head = Linear::new(&mut init, "class_head", d, cfg.class_count + 1);
    let box_hidden = Linear::new(&mut init, "box_hidden", d, d);
    let box_out = Linear::new(&mut init, "box_out", d, 4);
    // Boxes start at their anchors with about a quarter of the image size.
    let bias = Tensor::from_f64_slice(&[4], &[0.0, 0.0, -1.0, -1.0])?;
    store.set(box_out.b, bias)?;
    Ok(Model {
        cfg: cfg.clone(),
        store,
        params: ModelParams {
            stages,
            input_proj,
            input_norm,
            encoder,
            queries,
            decoder,
            class_head,
            box_hidden,
            box_out,
        },
    })
}

impl<T: Scalar> Model<T> {
    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            params: self.params.clone(),
        }
    }
}

/// Fixed input normalization applied to `[0, 1]` pixels.
pub const IMAGE_MEAN: f64 = 0.5;
pub const IMAGE_STD: f64 = 0.25;

/// Encoder feature map `[N, C, H/s, W/s]`.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bindings,
    model: &Model<T>,
    images: Var,
) -> Result<(Var, Option<Var>)> {
    let cfg = &model.cfg;
    let s = g.shape(images).to_vec();
    if s.len() != 4 || s[1] != 3 || (s[2], s[3]) != cfg.input_size {
        return Err(Error::shape(
            "forward",
            format!("expected [N,3,{},{}], got {s:?}", cfg.input_size.0, cfg.input_size.1),
        ));
    }
    let x = g.add_scalar(images, -IMAGE_MEAN)?;
    let mut x = g.scale(x, 1.0 / IMAGE_STD)?;
    for stage in &model.params.stages {
        x = match stage {
            Stage::Pafc(sp, sc) => pafc_forward(g, p, sp, sc, x)?,
            Stage::Plain(sp) => plain_stage_forward(g, p, sp, x)?,
        };
    }
    if let Some(proj) = &model.params.input_proj {
        x = proj.forward(g, p, x)?;
    }
    let x = model.params.input_norm.forward_channels(g, p, x)?;
    let enc = saa_forward(g, p, &model.params.encoder, &cfg.saa, x)?;
    Ok((enc.out, enc.gate))
}

/// Backbone, encoder, decoder and heads.
pub fn forward<T: Scalar>(g: &mut Graph<T>, p: &Bindings, model: &Model<T>, images: Var) -> Result<ForwardOut> {
    let cfg = &model.cfg;
    let (memory, gate) = encode(g, p, model, images)?;
    let (n, d, fh, fw) = {
        let s = g.shape(memory);
        (s[0], s[1], s[2], s[3])
    };
    let q = cfg.query_count;
    let mem = map_to_tokens(g, memory)?;
    let pe = g.constant(sinusoidal_pe(&grid_positions(fh, fw), d, cfg.saa.pe_temperature));
    let mem_k = g.add(mem, pe)?;
    let queries = p.get(model.params.queries);
    let queries = g.reshape(queries, &[1, q, d])?;
    let zeros = g.constant(Tensor::zeros(&[n, q, d]));
    let mut tgt = g.add(zeros, queries)?;
    let anchors = query_anchors(q);
    let anchor_px: Vec<(f64, f64)> = anchors.iter().map(|&(y, x)| (y * fh as f64 - 0.5, x * fw as f64 - 0.5)).collect();
    let query_pe = g.constant(sinusoidal_pe::<T>(&anchor_px, d, cfg.saa.pe_temperature).reshaped(&[1, q, d])?);
    let prior = g.constant(anchor_prior(&anchor_px, fh, fw, q));
    let mut probs = None;
    for layer in &model.params.decoder {
        let tq = g.add(tgt, query_pe)?;
        let qq = layer.qkv.q.forward(g, p, tq)?;
        let kk = g.linear(mem_k, p.get(layer.qkv.k), None)?;
        let vv = layer.qkv.v.forward(g, p, mem_k)?;
        let att = multi_head_attention(g, qq, kk, vv, cfg.saa.heads, Some(prior))?;
        probs = Some(att.probs);
        let a = layer.proj.forward(g, p, att.out)?;
        let t = g.add(tgt, a)?;
        let t = layer.norm1.forward(g, p, t)?;
        let f = layer.ffn1.forward(g, p, t)?;
        let f = g.silu(f)?;
        let f = layer.ffn2.forward(g, p, f)?;
        let t = g.add(t, f)?;
        tgt = layer.norm2.forward(g, p, t)?;
    }
    let logits = model.params.class_head.forward(g, p, tgt)?;
    let h = model.params.box_hidden.forward(g, p, tgt)?;
    let h = g.silu(h)?;
    let b = model.params.box_out.forward(g, p, h)?;
    let b = match probs {
        Some(probs) => {
            let centre = attention_centroid(g, probs, fh, fw)?;
            let zeros = g.constant(Tensor::zeros(&[n, q, 2]));
            let shift = g.concat(&[centre, zeros], 2)?;
            g.add(b, shift)?
        }
        None => {
            let logit = |v: f64| (v / (1.0 - v)).ln();
            let shift: Vec<f64> = anchors.iter().flat_map(|&(y, x)| [logit(x), logit(y), 0.0, 0.0]).collect();
            let shift = g.constant(Tensor::from_f64_slice(&[1, q, 4], &shift)?);
            g.add(b, shift)?
        }
    };
    let boxes = g.sigmoid(b)?;
    Ok(ForwardOut { logits, boxes, gate })
}

/// Logit of the head-averaged attention centroid of the last decoder layer,
/// `[N, Q, 2]` as `(x, y)` in normalized image coordinates.
fn attention_centroid<T: Scalar>(g: &mut Graph<T>, probs: Var, fh: usize, fw: usize) -> Result<Var> {
    let coords: Vec<f64> = grid_positions(fh, fw)
        .iter()
        .flat_map(|&(y, x)| [(x + 0.5) / fw as f64, (y + 0.5) / fh as f64])
        .collect();
    let coords = g.constant(Tensor::from_f64_slice(&[fh * fw, 2], &coords)?);
    let pm = g.mean_axis(probs, 1, false)?;
    let m = g.linear(pm, coords, None)?;
    let lm = g.ln(m)?;
    let rest = g.neg(m)?;
    let rest = g.add_scalar(rest, 1.0)?;
    let lr = g.ln(rest)?;
    g.sub(lm, lr)
}

/// Gaussian log-prior `[1, 1, Q, fh*fw]` on cross-attention logits centred on
/// each query's anchor, with the anchor spacing as standard deviation.
fn anchor_prior<T: Scalar>(anchor_px: &[(f64, f64)], fh: usize, fw: usize, q: usize) -> Tensor<T> {
    let side = (1..).find(|s| s * s >= q).unwrap_or(1) as f64;
    let (sy, sx) = (fh as f64 / side, fw as f64 / side);
    let mut data = Vec::with_capacity(q * fh * fw);
    for &(ay, ax) in anchor_px {
        for i in 0..fh {
            for j in 0..fw {
                let (dy, dx) = ((i as f64 - ay) / sy, (j as f64 - ax) / sx);
                data.push(T::from_f64(-0.5 * (dy * dy + dx * dx)));
            }
        }
    }
    Tensor::from_vec(&[1, 1, q, fh * fw], data).expect("shape matches")
}

/// Fixed normalized `(y, x)` reference points, row-major on the smallest
/// square grid holding `q` points. Box centres are predicted relative to
/// them.
pub fn query_anchors(q: usize) -> Vec<(f64, f64)> {
    let side = (1..).find(|s| s * s >= q).unwrap_or(1);
    (0..q)
        .map(|i| (((i / side) as f64 + 0.5) / side as f64, ((i % side) as f64 + 0.5) / side as f64))
        .collect()
}

/// Inference over a `[N, 3, H, W]` batch.
pub fn predict<T: Scalar>(model: &Model<T>, images: &Tensor<T>) -> Result<Vec<DetectionSet>> {
    let mut g = Graph::inference();
    let p = model.store.bind(&mut g, false);
    let x = g.constant(images.clone());
    let out = forward(&mut g, &p, model, x)?;
    Ok(split_sets(g.value(out.logits), g.value(out.boxes)))
}

pub(crate) fn split_sets<T: Scalar>(logits: &Tensor<T>, boxes: &Tensor<T>) -> Vec<DetectionSet> {
    let (n, q, k) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let l = logits.to_f64_vec();
    let b = boxes.to_f64_vec();
    (0..n)
        .map(|i| DetectionSet {
            boxes: (0..q)
                .map(|j| {
                    let o = (i * q + j) * 4;
                    [b[o], b[o + 1], b[o + 2], b[o + 3]]
                })
                .collect(),
            class_logits: (0..q).map(|j| l[(i * q + j) * k..(i * q + j + 1) * k].to_vec()).collect(),
        })
        .collect()
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl DetectionSet {
    /// One scored detection per query in pixel `[x, y, w, h]`; the score is
    /// the softmax probability of the best non-background class. Category
    /// ids are `class index + 1`.
    pub fn to_detections(&self, image_id: u64, width: f64, height: f64) -> Vec<crate::eval::Detection> {
        self.boxes
            .iter()
            .zip(&self.class_logits)
            .map(|(b, l)| {
                let p = softmax_row(l);
                let (cls, score) = p[..p.len() - 1]
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                let [cx, cy, w, h] = *b;
                crate::eval::Detection {
                    image_id,
                    category_id: cls as u64 + 1,
                    bbox: [(cx - w / 2.0) * width, (cy - h / 2.0) * height, w * width, h * height],
                    score,
                }
            })
            .collect()
    }
}
