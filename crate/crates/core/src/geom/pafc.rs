//! Cascade of refinement blocks over half the channels, fused with
//! softmax-weighted stage outputs.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bindings, Conv, Init, LayerNorm, ParamId};
use crate::tensor::Scalar;

use super::arb::{arb_forward, ArbParams};
use super::gdu::GduConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PafcConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of cascade outputs after the split; `n - 1` refinement blocks.
    pub arb_count: usize,
    pub stride: usize,
    pub gdu: GduConfig,
}

impl PafcConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.out_channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "cascade split needs an even channel count, got {}",
                self.out_channels
            )));
        }
        if self.arb_count == 0 {
            return Err(Error::Config("arb_count must be at least 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        self.gdu.validate()
    }

    /// Channels entering the fusion convolution.
    pub fn fusion_channels(&self) -> usize {
        self.out_channels / 2 * (self.arb_count + 1)
    }
}

#[derive(Debug, Clone)]
pub struct PafcParams {
    pub stem: Conv,
    pub arbs: Vec<ArbParams>,
    /// One logit per stage output `Y_0..Y_n`.
    pub stage_weights: ParamId,
    pub fusion: Conv,
}

impl PafcParams {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: &PafcConfig) -> Result<Self> {
        cfg.validate()?;
        let half = cfg.out_channels / 2;
        Ok(init.scope(name, |i| PafcParams {
            stem: Conv::new(i, "stem", cfg.in_channels, cfg.out_channels, 3, cfg.stride),
            arbs: (0..cfg.arb_count - 1)
                .map(|k| ArbParams::new(i, &format!("arb{k}"), half, &cfg.gdu))
                .collect(),
            stage_weights: i.zeros("stage_weights", &[cfg.arb_count + 1]),
            fusion: Conv::new(i, "fusion", cfg.fusion_channels(), cfg.out_channels, 1, 1),
        }))
    }
}

pub fn pafc_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bindings,
    params: &PafcParams,
    cfg: &PafcConfig,
    x: Var,
) -> Result<Var> {
    let c = g.shape(x)[1];
    if c != cfg.in_channels {
        return Err(Error::shape("pafc_forward", format!("axis C: expected {}, got {c}", cfg.in_channels)));
    }
    let stem = params.stem.forward(g, p, x)?;
    let stem = g.silu(stem)?;
    let half = cfg.out_channels / 2;
    let parts = g.split(stem, 1, &[half, half])?;
    let mut stages = vec![parts[0], parts[1]];
    for arb in &params.arbs {
        let prev = *stages.last().expect("non-empty");
        stages.push(arb_forward(g, p, arb, &cfg.gdu, prev)?);
    }
    let n = stages.len();
    let w = g.softmax(p.get(params.stage_weights), 0)?;
    let mut weighted = Vec::with_capacity(n);
    for (k, &y) in stages.iter().enumerate() {
        let wk = g.narrow(w, 0, k, 1)?;
        let wk = g.reshape(wk, &[1, 1, 1, 1])?;
        weighted.push(g.mul(y, wk)?);
    }
    let cat = g.concat(&weighted, 1)?;
    params.fusion.forward(g, p, cat)
}

/// Ablation stand-in: stem conv followed by full-width residual conv blocks.
#[derive(Debug, Clone)]
pub struct PlainStageParams {
    pub stem: Conv,
    pub blocks: Vec<(Conv, LayerNorm, Conv)>,
}

impl PlainStageParams {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: &PafcConfig) -> Self {
        let c = cfg.out_channels;
        init.scope(name, |i| PlainStageParams {
            stem: Conv::new(i, "stem", cfg.in_channels, c, 3, cfg.stride),
            blocks: (0..cfg.arb_count.saturating_sub(1))
                .map(|k| {
                    i.scope(&format!("block{k}"), |i| {
                        (Conv::new(i, "conv1", c, c, 3, 1), LayerNorm::new(i, "norm", c), Conv::new(i, "conv2", c, c, 3, 1))
                    })
                })
                .collect(),
        })
    }
}

pub fn plain_stage_forward<T: Scalar>(g: &mut Graph<T>, p: &Bindings, params: &PlainStageParams, x: Var) -> Result<Var> {
    let s = params.stem.forward(g, p, x)?;
    let mut y = g.silu(s)?;
    for (c1, ln, c2) in &params.blocks {
        let h = c1.forward(g, p, y)?;
        let h = ln.forward_channels(g, p, h)?;
        let h = g.silu(h)?;
        let h = c2.forward(g, p, h)?;
        y = g.add(y, h)?;
    }
    Ok(y)
}
