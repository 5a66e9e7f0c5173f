//! Direct 2D convolution (im2col + GEMM), depthwise convolution and
//! average pooling on `[N,C,H,W]` tensors.

use super::graph::{BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::kernels::{matmul_nn, matmul_nt, matmul_tn};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh {
            return Err(Error::shape("conv2d", format!("axis H: extent {h} + 2*{pad} < kernel {kh}")));
        }
        if w + 2 * pad < kw {
            return Err(Error::shape("conv2d", format!("axis W: extent {w} + 2*{pad} < kernel {kw}")));
        }
        Ok(Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfold one image `[C,H,W]` into `[C*kh*kw, Ho*Wo]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[C,H,W]`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            x[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn expect_rank4(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected [N,C,H,W], got {s:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    /// Dense convolution. `w` is `[O,C,kh,kw]`, `b` is `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = expect_rank4("conv2d", self.shape(x))?;
        let (o, cw, kh, kw) = expect_rank4("conv2d", self.shape(w))?;
        if c != cw {
            return Err(Error::shape("conv2d", format!("axis C: input has {c} channels, weight expects {cw}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d", format!("axis O: bias {:?} vs {o} filters", self.shape(b))));
            }
        }
        let geom = ConvGeom::new(c, h, wd, kh, kw, stride, pad)?;
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![T::zero(); n * o * p];
        let mut saved_cols: Vec<T> = Vec::new();
        if !geom.is_pointwise() {
            saved_cols = vec![T::zero(); n * rows * p];
        }
        for img in 0..n {
            let xi = &xs[img * c * h * wd..(img + 1) * c * h * wd];
            let cols: &[T] = if geom.is_pointwise() {
                xi
            } else {
                let dst = &mut saved_cols[img * rows * p..(img + 1) * rows * p];
                im2col(xi, &geom, dst);
                dst
            };
            matmul_nn(ws, cols, &mut out[img * o * p..(img + 1) * o * p], o, rows, p, false);
        }
        if let Some(b) = b {
            let bs = self.value(b).data();
            for img in 0..n {
                for oc in 0..o {
                    let bias = bs[oc];
                    out[(img * o + oc) * p..(img * o + oc + 1) * p].iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let value = Tensor::from_vec(&[n, o, geom.ho, geom.wo], out)?;
        let inputs: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        let has_bias = b.is_some();
        self.push(
            "conv2d",
            value,
            &inputs,
            Box::new(move |ctx: &BackwardCtx<T>| {
                let xs = ctx.inputs[0].data();
                let ws = ctx.inputs[1].data();
                let g = ctx.grad;
                let mut gx = vec![T::zero(); xs.len()];
                let mut gw = vec![T::zero(); ws.len()];
                let mut dcols = vec![T::zero(); rows * p];
                for img in 0..n {
                    let go = &g[img * o * p..(img + 1) * o * p];
                    let cols: &[T] = if geom.is_pointwise() {
                        &xs[img * c * h * wd..(img + 1) * c * h * wd]
                    } else {
                        &saved_cols[img * rows * p..(img + 1) * rows * p]
                    };
                    matmul_nt(go, cols, &mut gw, o, p, rows, true);
                    let gxi = &mut gx[img * c * h * wd..(img + 1) * c * h * wd];
                    if geom.is_pointwise() {
                        matmul_tn(ws, go, gxi, rows, o, p, false);
                    } else {
                        matmul_tn(ws, go, &mut dcols, rows, o, p, false);
                        col2im(&dcols, &geom, gxi);
                    }
                }
                let mut grads = vec![Some(gx), Some(gw)];
                if has_bias {
                    let mut gb = vec![T::zero(); o];
                    for img in 0..n {
                        for (oc, gbv) in gb.iter_mut().enumerate() {
                            *gbv += g[(img * o + oc) * p..(img * o + oc + 1) * p].iter().copied().sum::<T>();
                        }
                    }
                    grads.push(Some(gb));
                }
                grads
            }),
        )
    }

    /// Per-channel convolution, stride 1. `w` is `[C,kh,kw]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = expect_rank4("depthwise_conv2d", self.shape(x))?;
        let ws_shape = self.shape(w).to_vec();
        let (cw, kh, kw) = match ws_shape[..] {
            [cw, kh, kw] => (cw, kh, kw),
            _ => return Err(Error::shape("depthwise_conv2d", format!("weight must be [C,kh,kw], got {ws_shape:?}"))),
        };
        if cw != c {
            return Err(Error::shape("depthwise_conv2d", format!("axis C: input has {c} channels, weight has {cw}")));
        }
        let geom = ConvGeom::new(1, h, wd, kh, kw, 1, pad)?;
        let (ho, wo) = (geom.ho, geom.wo);
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for img in 0..n {
            for ch in 0..c {
                let plane = &xs[(img * c + ch) * h * wd..(img * c + ch + 1) * h * wd];
                let kern = &ws[ch * kh * kw..(ch + 1) * kh * kw];
                let dst = &mut out[(img * c + ch) * ho * wo..(img * c + ch + 1) * ho * wo];
                depthwise_plane(plane, kern, dst, &geom);
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
        self.push(
            "depthwise_conv2d",
            value,
            &[x, w],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let xs = ctx.inputs[0].data();
                let ws = ctx.inputs[1].data();
                let g = ctx.grad;
                let mut gx = vec![T::zero(); xs.len()];
                let mut gw = vec![T::zero(); ws.len()];
                for img in 0..n {
                    for ch in 0..c {
                        let poff = (img * c + ch) * h * wd;
                        let goff = (img * c + ch) * ho * wo;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wv = ws[(ch * kh + ky) * kw + kx];
                                let mut acc = T::zero();
                                for oy in 0..ho {
                                    let iy = (oy + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for ox in 0..wo {
                                        let ix = (ox + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = poff + iy as usize * wd + ix as usize;
                                        let gv = g[goff + oy * wo + ox];
                                        acc += gv * xs[xi];
                                        gx[xi] += gv * wv;
                                    }
                                }
                                gw[(ch * kh + ky) * kw + kx] += acc;
                            }
                        }
                    }
                }
                vec![Some(gx), Some(gw)]
            }),
        )
    }

    /// Depthwise-separable convolution: per-channel `[C,k,k]` kernel (same
    /// padding) followed by pointwise `[O,C]` mixing.
    pub fn dwconv(&mut self, x: Var, w_depth: Var, w_point: Var) -> Result<Var> {
        let c = expect_rank4("dwconv", self.shape(x))?.1;
        let k = *self.shape(w_depth).get(1).unwrap_or(&1);
        let wp = self.shape(w_point).to_vec();
        let (o, cp) = match wp[..] {
            [o, cp] => (o, cp),
            _ => return Err(Error::shape("dwconv", format!("pointwise weight must be [O,C], got {wp:?}"))),
        };
        if cp != c {
            return Err(Error::shape("dwconv", format!("axis C: input has {c} channels, pointwise expects {cp}")));
        }
        let d = self.depthwise_conv2d(x, w_depth, k / 2)?;
        let wp = self.reshape(w_point, &[o, c, 1, 1])?;
        self.conv2d(d, wp, None, 1, 0)
    }

    /// Average pooling with an `r x r` window and stride `r`. Partial windows
    /// at the border average over the elements they cover, so the output is
    /// `ceil(H/r) x ceil(W/r)`.
    pub fn avg_pool2d(&mut self, x: Var, r: usize) -> Result<Var> {
        let (n, c, h, w) = expect_rank4("avg_pool2d", self.shape(x))?;
        if r == 0 {
            return Err(Error::shape("avg_pool2d", "window must be positive"));
        }
        if r == 1 {
            return Ok(x);
        }
        let (ho, wo) = (h.div_ceil(r), w.div_ceil(r));
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for pl in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y0, y1) = (oy * r, ((oy + 1) * r).min(h));
                    let (x0, x1) = (ox * r, ((ox + 1) * r).min(w));
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += xs[(pl * h + y) * w + xx];
                        }
                    }
                    out[(pl * ho + oy) * wo + ox] = acc / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
        self.push(
            "avg_pool2d",
            value,
            &[x],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let g = ctx.grad;
                let mut gx = vec![T::zero(); n * c * h * w];
                for pl in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let (y0, y1) = (oy * r, ((oy + 1) * r).min(h));
                            let (x0, x1) = (ox * r, ((ox + 1) * r).min(w));
                            let share = g[(pl * ho + oy) * wo + ox] / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    gx[(pl * h + y) * w + xx] += share;
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

fn depthwise_plane<T: Scalar>(plane: &[T], kern: &[T], dst: &mut [T], g: &ConvGeom) {
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let mut acc = T::zero();
            for ky in 0..g.kh {
                let iy = (oy + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    acc += kern[ky * g.kw + kx] * plane[iy as usize * g.w + ix as usize];
                }
            }
            dst[oy * g.wo + ox] = acc;
        }
    }
}
