//! Adaptive Refinement Block: a residual unit around a GDU.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::nn::{Bindings, Conv, Init, LayerNorm};
use crate::tensor::Scalar;

use super::gdu::{gdu_forward, GduConfig, GduParams};

#[derive(Debug, Clone)]
pub struct ArbParams {
    pub gdu: GduParams,
    pub norm: LayerNorm,
    pub proj: Conv,
}

impl ArbParams {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize, cfg: &GduConfig) -> Self {
        init.scope(name, |i| ArbParams {
            gdu: GduParams::new(i, "gdu", channels, cfg),
            norm: LayerNorm::new(i, "norm", channels),
            proj: Conv::new(i, "proj", channels, channels, 1, 1),
        })
    }
}

/// `y + proj(silu(norm(gdu(y))))`
pub fn arb_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bindings,
    params: &ArbParams,
    cfg: &GduConfig,
    y: Var,
) -> Result<Var> {
    let d = gdu_forward(g, p, &params.gdu, cfg, y)?.out;
    let n = params.norm.forward_channels(g, p, d)?;
    let a = g.silu(n)?;
    let o = params.proj.forward(g, p, a)?;
    g.add(y, o)
}
