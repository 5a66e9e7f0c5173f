//! Scale-aware attention: windowed local attention with a relative position
//! bias, spatial-reduction global attention with sinusoidal positions, and a
//! per-pixel gate blending the two.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bindings, Conv, Init, LayerNorm, Linear, ParamId};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// `sigmoid(conv1x1(x))`
    Learned,
    /// Constant weight on the global branch.
    Frozen(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnMode {
    /// Local + global branches with gated fusion.
    ScaleAware,
    /// Single full self-attention over all tokens.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaaConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub window: usize,
    pub reduction: usize,
    pub ffn_dim: usize,
    #[serde(default = "default_pe_temperature")]
    pub pe_temperature: f64,
    #[serde(default = "default_gate")]
    pub gate: GateMode,
    #[serde(default = "default_mode")]
    pub mode: AttnMode,
}

fn default_pe_temperature() -> f64 {
    10000.0
}

fn default_gate() -> GateMode {
    GateMode::Learned
}

fn default_mode() -> AttnMode {
    AttnMode::ScaleAware
}

impl Default for SaaConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            heads: 4,
            window: 2,
            reduction: 2,
            ffn_dim: 128,
            pe_temperature: default_pe_temperature(),
            gate: default_gate(),
            mode: default_mode(),
        }
    }
}

impl SaaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "embed_dim {} must be a multiple of 4 for 2D sinusoidal positions",
                self.embed_dim
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        if self.reduction == 0 {
            return Err(Error::Config("reduction must be at least 1".into()));
        }
        if let GateMode::Frozen(v) = self.gate {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("frozen gate {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Everything needed to undo [`window_partition`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    pub window: usize,
}

impl WindowLayout {
    pub fn rows(&self) -> usize {
        self.padded_h / self.window
    }

    pub fn cols(&self) -> usize {
        self.padded_w / self.window
    }

    pub fn windows_per_image(&self) -> usize {
        self.rows() * self.cols()
    }
}

/// Zero-pad to multiples of `window`, then cut into `[N*nw, C, w, w]`
/// with windows in row-major order per image.
pub fn window_partition<T: Scalar>(g: &mut Graph<T>, x: Var, window: usize) -> Result<(Var, WindowLayout)> {
    if window == 0 {
        return Err(Error::shape("window_partition", "window size must be positive"));
    }
    let (n, c, h, w) = match *g.shape(x) {
        [n, c, h, w] => (n, c, h, w),
        ref s => return Err(Error::shape("window_partition", format!("expected [N,C,H,W], got {s:?}"))),
    };
    let layout = WindowLayout {
        n,
        c,
        h,
        w,
        padded_h: h.div_ceil(window) * window,
        padded_w: w.div_ceil(window) * window,
        window,
    };
    let padded = if layout.padded_h != h || layout.padded_w != w {
        g.pad2d(x, 0, layout.padded_h - h, 0, layout.padded_w - w)?
    } else {
        x
    };
    let (rb, cb) = (layout.rows(), layout.cols());
    let t = g.reshape(padded, &[n, c, rb, window, cb, window])?;
    let t = g.permute(t, &[0, 2, 4, 1, 3, 5])?;
    let t = g.reshape(t, &[n * rb * cb, c, window, window])?;
    Ok((t, layout))
}

pub fn window_merge<T: Scalar>(g: &mut Graph<T>, windows: Var, layout: &WindowLayout) -> Result<Var> {
    let l = layout;
    let t = g.reshape(windows, &[l.n, l.rows(), l.cols(), l.c, l.window, l.window])?;
    let t = g.permute(t, &[0, 3, 1, 4, 2, 5])?;
    let mut t = g.reshape(t, &[l.n, l.c, l.padded_h, l.padded_w])?;
    if l.padded_h != l.h {
        t = g.narrow(t, 2, 0, l.h)?;
    }
    if l.padded_w != l.w {
        t = g.narrow(t, 3, 0, l.w)?;
    }
    Ok(t)
}

/// `[N,C,H,W] -> [N,H*W,C]`
pub fn map_to_tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let t = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.permute(t, &[0, 2, 1])
}

/// `[N,H*W,C] -> [N,C,H,W]`
pub fn tokens_to_map<T: Scalar>(g: &mut Graph<T>, t: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(t).to_vec();
    let m = g.permute(t, &[0, 2, 1])?;
    g.reshape(m, &[s[0], s[2], h, w])
}

fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, c) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, t, heads, c / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, t, c / heads])
}

fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var, b: usize, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (t, d) = (s[1], s[2]);
    let x = g.reshape(x, &[b, heads, t, d])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b, t, heads * d])
}

pub struct AttnOutput {
    /// `[B, Tq, C]`
    pub out: Var,
    /// `[B, heads, Tq, Tk]`
    pub probs: Var,
}

/// Scaled dot-product attention over projected `q [B,Tq,C]`, `k, v [B,Tk,C]`
/// with an optional additive logit bias broadcastable to `[B,heads,Tq,Tk]`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    bias: Option<Var>,
) -> Result<AttnOutput> {
    let (b, tq, c) = match *g.shape(q) {
        [b, t, c] => (b, t, c),
        ref s => return Err(Error::shape("attention", format!("q must be [B,T,C], got {s:?}"))),
    };
    let tk = g.shape(k)[1];
    if g.shape(k) != [b, tk, c] || g.shape(v) != [b, tk, c] {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", g.shape(q), g.shape(k), g.shape(v)),
        ));
    }
    let qh = split_heads(g, q, heads)?;
    let kh = split_heads(g, k, heads)?;
    let vh = split_heads(g, v, heads)?;
    let logits = g.matmul_ext(qh, kh, true)?;
    let logits = g.scale(logits, 1.0 / ((c / heads) as f64).sqrt())?;
    let mut logits = g.reshape(logits, &[b, heads, tq, tk])?;
    if let Some(bias) = bias {
        logits = g.add(logits, bias)?;
    }
    let probs = g.softmax(logits, 3)?;
    let p = g.reshape(probs, &[b * heads, tq, tk])?;
    let o = g.matmul(p, vh)?;
    let out = merge_heads(g, o, b, heads)?;
    Ok(AttnOutput { out, probs })
}

/// Fixed 2D sinusoidal encoding, `[P, dim]`: the first half of the
/// channels encodes the row, the second the column, each as interleaved
/// sin/cos pairs over geometric frequencies.
pub fn sinusoidal_pe<T: Scalar>(positions: &[(f64, f64)], dim: usize, temperature: f64) -> Tensor<T> {
    let quarter = dim / 4;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &(y, x) in positions {
        for coord in [y, x] {
            for i in 0..quarter {
                let f = temperature.powf(-(i as f64) / quarter as f64);
                data.push(T::from_f64((coord * f).sin()));
                data.push(T::from_f64((coord * f).cos()));
            }
        }
    }
    Tensor::from_vec(&[positions.len(), dim], data).expect("pe shape")
}

/// Pixel-centre positions of an `h x w` map, row-major.
pub fn grid_positions(h: usize, w: usize) -> Vec<(f64, f64)> {
    (0..h).flat_map(|y| (0..w).map(move |x| (y as f64, x as f64))).collect()
}

/// Centres, in full-resolution pixels, of the `r x r` pooling cells
/// (partial edge cells use the centre of the covered pixels).
pub fn pooled_positions(h: usize, w: usize, r: usize) -> Vec<(f64, f64)> {
    let centre = |i: usize, extent: usize| {
        let start = i * r;
        let end = (start + r).min(extent);
        (start + end - 1) as f64 / 2.0
    };
    let (ph, pw) = (h.div_ceil(r), w.div_ceil(r));
    (0..ph)
        .flat_map(|y| (0..pw).map(move |x| (centre(y, h), centre(x, w))))
        .collect()
}

/// Row index into the `[(2w-1)^2, heads]` bias table for every token pair of
/// a `w x w` window, `[T*T]` row-major over (query, key).
pub fn relative_index(window: usize) -> Vec<usize> {
    let t = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        for j in 0..t {
            let dy = (i / window) as isize - (j / window) as isize + window as isize - 1;
            let dx = (i % window) as isize - (j % window) as isize + window as isize - 1;
            idx.push(dy as usize * span + dx as usize);
        }
    }
    idx
}

/// Query/key/value projections. Keys carry no bias: a key bias shifts a
/// whole logit row and cancels in the softmax.
#[derive(Debug, Clone)]
pub struct QkvParams {
    pub q: Linear,
    /// `[C, C]`
    pub k: ParamId,
    pub v: Linear,
}

impl QkvParams {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize) -> Self {
        QkvParams {
            q: Linear::new(init, "q", c, c),
            k: init.fan_in_uniform("k", &[c, c], c),
            v: Linear::new(init, "v", c, c),
        }
    }

    pub fn project<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, xq: Var, xkv: Var) -> Result<(Var, Var, Var)> {
        let q = self.q.forward(g, p, xq)?;
        let k = g.linear(xkv, p.get(self.k), None)?;
        let v = self.v.forward(g, p, xkv)?;
        Ok((q, k, v))
    }
}

#[derive(Debug, Clone)]
pub struct LdbParams {
    pub qkv: QkvParams,
    pub proj: Linear,
    /// `[(2w-1)^2, heads]`, zero at initialization
    pub lpe: ParamId,
}

impl LdbParams {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: &SaaConfig) -> Self {
        let c = cfg.embed_dim;
        let span = 2 * cfg.window - 1;
        init.scope(name, |i| LdbParams {
            qkv: QkvParams::new(i, c),
            proj: Linear::new(i, "proj", c, c),
            lpe: i.zeros("lpe", &[span * span, cfg.heads]),
        })
    }
}

#[derive(Debug, Clone)]
pub struct GcbParams {
    pub qkv: QkvParams,
    /// `[C, C]` projection of the sinusoidal positions, shared by Q and K
    pub pos: ParamId,
    pub proj: Linear,
}

impl GcbParams {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: &SaaConfig) -> Self {
        let c = cfg.embed_dim;
        init.scope(name, |i| GcbParams {
            qkv: QkvParams::new(i, c),
            pos: i.fan_in_uniform("pos", &[c, c], c),
            proj: Linear::new(i, "proj", c, c),
        })
    }
}

/// Windowed self-attention; output has the input's shape.
pub fn local_detail_attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bindings,
    params: &LdbParams,
    cfg: &SaaConfig,
    x: Var,
) -> Result<AttnOutput> {
    let c = cfg.embed_dim;
    let win = cfg.window;
    let (windows, layout) = window_partition(g, x, win)?;
    let b = layout.n * layout.windows_per_image();
    let t = win * win;
    let tokens = g.reshape(windows, &[b, c, t])?;
    let tokens = g.permute(tokens, &[0, 2, 1])?;
    let (q, k, v) = params.qkv.project(g, p, tokens, tokens)?;
    let bias = g.index_select(p.get(params.lpe), &relative_index(win))?;
    let bias = g.permute(bias, &[1, 0])?;
    let bias = g.reshape(bias, &[cfg.heads, t, t])?;
    let att = multi_head_attention(g, q, k, v, cfg.heads, Some(bias))?;
    let out = params.proj.forward(g, p, att.out)?;
    let out = g.permute(out, &[0, 2, 1])?;
    let out = g.reshape(out, &[b, c, win, win])?;
    let out = window_merge(g, out, &layout)?;
    Ok(AttnOutput { out, probs: att.probs })
}

/// Full-resolution queries against keys and values from an `r x r`
/// average-pooled map; output has the input's shape.
pub fn global_context_attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bindings,
    params: &GcbParams,
    cfg: &SaaConfig,
    x: Var,
) -> Result<AttnOutput> {
    let (n, c, h, w) = match *g.shape(x) {
        [n, c, h, w] => (n, c, h, w),
        ref s => return Err(Error::shape("global_context_attention", format!("expected [N,C,H,W], got {s:?}"))),
    };
    if c != cfg.embed_dim {
        return Err(Error::shape("global_context_attention", format!("axis C: {c} vs embed_dim {}", cfg.embed_dim)));
    }
    let r = cfg.reduction;
    let pooled = g.avg_pool2d(x, r)?;
    let qt = map_to_tokens(g, x)?;
    let kt = map_to_tokens(g, pooled)?;
    let pe_q = g.constant(sinusoidal_pe(&grid_positions(h, w), c, cfg.pe_temperature));
    let pe_k = g.constant(sinusoidal_pe(&pooled_positions(h, w, r), c, cfg.pe_temperature));
    let pe_q = g.matmul(pe_q, p.get(params.pos))?;
    let pe_k = g.matmul(pe_k, p.get(params.pos))?;
    let (q, k, v) = params.qkv.project(g, p, qt, kt)?;
    let q = g.add(q, pe_q)?;
    let k = g.add(k, pe_k)?;
    let att = multi_head_attention(g, q, k, v, cfg.heads, None)?;
    let out = params.proj.forward(g, p, att.out)?;
    let out = tokens_to_map(g, out, h, w)?;
    debug_assert_eq!(g.shape(out), [n, c, h, w]);
    Ok(AttnOutput { out, probs: att.probs })
}

/// `local * (1 - gate) + global * gate + cross`, gate broadcast over channels.
pub fn gate_fuse<T: Scalar>(g: &mut Graph<T>, f_local: Var, f_global: Var, w_gate: Var, f_cross: Var) -> Result<Var> {
    if g.shape(f_local) != g.shape(f_global) || g.shape(f_local) != g.shape(f_cross) {
        return Err(Error::shape(
            "gate_fuse",
            format!(
                "local {:?}, global {:?}, cross {:?}",
                g.shape(f_local),
                g.shape(f_global),
                g.shape(f_cross)
            ),
        ));
    }
    let neg = g.neg(w_gate)?;
    let keep = g.add_scalar(neg, 1.0)?;
    let a = g.mul(f_local, keep)?;
    let b = g.mul(f_global, w_gate)?;
    if g.shape(a) != g.shape(f_local) {
        return Err(Error::shape("gate_fuse", format!("gate {:?} does not broadcast", g.shape(w_gate))));
    }
    let s = g.add(a, b)?;
    g.add(s, f_cross)
}

#[derive(Debug, Clone)]
pub struct SaaParams {
    pub ldb: Option<LdbParams>,
    pub gcb: GcbParams,
    pub gate: Option<Conv>,
    pub cross: Option<Conv>,
    pub norm1: LayerNorm,
    pub ffn1: Conv,
    pub ffn2: Conv,
    pub norm2: LayerNorm,
}

impl SaaParams {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: &SaaConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let scale_aware = cfg.mode == AttnMode::ScaleAware;
        Ok(init.scope(name, |i| SaaParams {
            ldb: scale_aware.then(|| LdbParams::new(i, "ldb", cfg)),
            gcb: GcbParams::new(i, "gcb", cfg),
            gate: (scale_aware && cfg.gate == GateMode::Learned).then(|| Conv::zeroed(i, "gate", c, 1, 1)),
            cross: scale_aware.then(|| Conv::zeroed(i, "cross", c, c, 1)),
            norm1: LayerNorm::new(i, "norm1", c),
            ffn1: Conv::new(i, "ffn1", c, cfg.ffn_dim, 1, 1),
            ffn2: Conv::new(i, "ffn2", cfg.ffn_dim, c, 1, 1),
            norm2: LayerNorm::new(i, "norm2", c),
        }))
    }
}

pub struct SaaOutput {
    pub out: Var,
    /// `[N,1,H,W]` gate map; absent in plain mode.
    pub gate: Option<Var>,
}

/// `[N,1,H,W]` gate in `[0, 1]`.
pub fn gate_map<T: Scalar>(g: &mut Graph<T>, p: &Bindings, params: &SaaParams, cfg: &SaaConfig, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    match (cfg.gate, &params.gate) {
        (GateMode::Learned, Some(conv)) => {
            let logits = conv.forward(g, p, x)?;
            g.sigmoid(logits)
        }
        (GateMode::Frozen(v), _) => Ok(g.constant(Tensor::full(&[s[0], 1, s[2], s[3]], T::from_f64(v)))),
        (GateMode::Learned, None) => Err(Error::Config("learned gate requested but no gate head was built".into())),
    }
}

/// Encoder layer: attention mixing, then `LN(x + mix)` and
/// `LN(y + FFN(y))`.
pub fn saa_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bindings,
    params: &SaaParams,
    cfg: &SaaConfig,
    x: Var,
) -> Result<SaaOutput> {
    let global = global_context_attention(g, p, &params.gcb, cfg, x)?.out;
    let (mixed, gate) = match (cfg.mode, &params.ldb, &params.cross) {
        (AttnMode::Plain, _, _) => (global, None),
        (AttnMode::ScaleAware, Some(ldb), Some(cross)) => {
            let local = local_detail_attention(g, p, ldb, cfg, x)?.out;
            let w_gate = gate_map(g, p, params, cfg, x)?;
            let prod = g.mul(local, global)?;
            let f_cross = cross.forward(g, p, prod)?;
            (gate_fuse(g, local, global, w_gate, f_cross)?, Some(w_gate))
        }
        _ => return Err(Error::Config("scale-aware mode requires local and cross parameters".into())),
    };
    let y = g.add(x, mixed)?;
    let y = params.norm1.forward_channels(g, p, y)?;
    let f = params.ffn1.forward(g, p, y)?;
    let f = g.silu(f)?;
    let f = params.ffn2.forward(g, p, f)?;
    let z = g.add(y, f)?;
    let out = params.norm2.forward_channels(g, p, z)?;
    Ok(SaaOutput { out, gate })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_index_centre_and_range() {
        let idx = relative_index(2);
        assert_eq!(idx.len(), 16);
        assert!(idx.iter().all(|&i| i < 9));
        for t in 0..4 {
            assert_eq!(idx[t * 4 + t], 4);
        }
    }

    #[test]
    fn pooled_positions_cover_partial_cells() {
        assert_eq!(pooled_positions(5, 4, 2), vec![(0.5, 0.5), (0.5, 2.5), (2.5, 0.5), (2.5, 2.5), (4.0, 0.5), (4.0, 2.5)]);
        assert_eq!(pooled_positions(3, 3, 1), grid_positions(3, 3));
    }

    #[test]
    fn config_validation() {
        assert!(SaaConfig::default().validate().is_ok());
        assert!(SaaConfig { heads: 3, ..SaaConfig::default() }.validate().is_err());
        assert!(SaaConfig { window: 0, ..SaaConfig::default() }.validate().is_err());
        assert!(SaaConfig { reduction: 0, ..SaaConfig::default() }.validate().is_err());
        assert!(SaaConfig { gate: GateMode::Frozen(1.5), ..SaaConfig::default() }.validate().is_err());
    }
}
