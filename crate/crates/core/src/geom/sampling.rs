//! Bilinear sampling at fractional coordinates and the modulated deformable
//! convolution built on it. Samples outside the map read as zero.

use crate::autograd::{BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::kernels::{matmul_nn, matmul_nt, matmul_tn};
use crate::tensor::{Scalar, Tensor};

/// The four neighbours of a fractional coordinate with their weights.
/// Out-of-range neighbours carry `None`.
#[derive(Debug, Clone, Copy)]
pub struct Corners<T> {
    idx: [Option<usize>; 4],
    ly: T,
    lx: T,
}

impl<T: Scalar> Corners<T> {
    pub fn new(h: usize, w: usize, y: T, x: T) -> Self {
        let (y0, x0) = (y.floor(), x.floor());
        let (ly, lx) = (y - y0, x - x0);
        let (y0, x0) = (y0.as_f64() as i64, x0.as_f64() as i64);
        let at = |yy: i64, xx: i64| {
            (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w).then(|| yy as usize * w + xx as usize)
        };
        Self {
            idx: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)],
            ly,
            lx,
        }
    }

    fn weights(&self) -> [T; 4] {
        let (ly, lx, one) = (self.ly, self.lx, T::one());
        [(one - ly) * (one - lx), (one - ly) * lx, ly * (one - lx), ly * lx]
    }

    fn fetch(&self, plane: &[T]) -> [T; 4] {
        self.idx.map(|i| i.map_or(T::zero(), |i| plane[i]))
    }

    /// Interpolated value.
    pub fn sample(&self, plane: &[T]) -> T {
        let v = self.fetch(plane);
        let wts = self.weights();
        wts[0] * v[0] + wts[1] * v[1] + wts[2] * v[2] + wts[3] * v[3]
    }

    /// Partial derivatives of the interpolated value w.r.t. `(y, x)`.
    pub fn coord_grad(&self, plane: &[T]) -> (T, T) {
        let v = self.fetch(plane);
        let one = T::one();
        let dy = (one - self.lx) * (v[2] - v[0]) + self.lx * (v[3] - v[1]);
        let dx = (one - self.ly) * (v[1] - v[0]) + self.ly * (v[3] - v[2]);
        (dy, dx)
    }

    /// Scatter `g` into `plane_grad` with the interpolation weights.
    pub fn scatter(&self, plane_grad: &mut [T], g: T) {
        let wts = self.weights();
        for (i, wt) in self.idx.iter().zip(wts) {
            if let Some(i) = i {
                plane_grad[*i] += g * wt;
            }
        }
    }
}

/// Bilinear interpolation of a single `[H,W]` plane at `(y, x)`.
pub fn bilinear<T: Scalar>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    Corners::new(h, w, y, x).sample(plane)
}

impl<T: Scalar> Graph<T> {
    /// Sample `x: [N,C,H,W]` at `coords: [N,P,2]` (each `(y, x)` in pixel
    /// units) giving `[N,C,P]`. Differentiable in both arguments.
    pub fn bilinear_sample(&mut self, x: Var, coords: Var) -> Result<Var> {
        let (n, c, h, w) = match *self.shape(x) {
            [n, c, h, w] => (n, c, h, w),
            ref s => return Err(Error::shape("bilinear_sample", format!("x must be [N,C,H,W], got {s:?}"))),
        };
        let p = match *self.shape(coords) {
            [cn, p, 2] if cn == n => p,
            ref s => {
                return Err(Error::shape("bilinear_sample", format!("coords must be [{n},P,2], got {s:?}")));
            }
        };
        let (xs, cs) = (self.value(x).data(), self.value(coords).data());
        let mut out = vec![T::zero(); n * c * p];
        for img in 0..n {
            for pi in 0..p {
                let base = (img * p + pi) * 2;
                let cr = Corners::new(h, w, cs[base], cs[base + 1]);
                for ch in 0..c {
                    let plane = &xs[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
                    out[(img * c + ch) * p + pi] = cr.sample(plane);
                }
            }
        }
        self.push(
            "bilinear_sample",
            Tensor::from_vec(&[n, c, p], out)?,
            &[x, coords],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let (xs, cs, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
                let mut gx = vec![T::zero(); xs.len()];
                let mut gc = vec![T::zero(); cs.len()];
                for img in 0..n {
                    for pi in 0..p {
                        let base = (img * p + pi) * 2;
                        let cr = Corners::new(h, w, cs[base], cs[base + 1]);
                        for ch in 0..c {
                            let off = (img * c + ch) * h * w;
                            let gv = g[(img * c + ch) * p + pi];
                            let (dy, dx) = cr.coord_grad(&xs[off..off + h * w]);
                            gc[base] += gv * dy;
                            gc[base + 1] += gv * dx;
                            cr.scatter(&mut gx[off..off + h * w], gv);
                        }
                    }
                }
                vec![Some(gx), Some(gc)]
            }),
        )
    }

    /// Modulated deformable convolution with stride 1 and "same" output size.
    ///
    /// * `x`: `[N,C,H,W]`
    /// * `offsets`: `[N,2K,H,W]`, channel `2k` is the row offset of kernel
    ///   point `k` and `2k+1` its column offset
    /// * `modulation`: `[N,K,H,W]`, multiplies each sampled value
    /// * `weight`: `[O,C,K]`
    ///
    /// `out[o,p] = sum_{c,k} weight[o,c,k] * modulation[k,p] *
    /// x_c(p + p_k + offset_k(p))`
    pub fn deform_conv2d(
        &mut self,
        x: Var,
        offsets: Var,
        modulation: Var,
        weight: Var,
        kernel_points: &[(i32, i32)],
    ) -> Result<Var> {
        let op = "deform_conv2d";
        let (n, c, h, w) = match *self.shape(x) {
            [n, c, h, w] => (n, c, h, w),
            ref s => return Err(Error::shape(op, format!("x must be [N,C,H,W], got {s:?}"))),
        };
        let k = kernel_points.len();
        if self.shape(offsets) != [n, 2 * k, h, w] {
            return Err(Error::shape(op, format!("offsets {:?}, expected {:?}", self.shape(offsets), [n, 2 * k, h, w])));
        }
        if self.shape(modulation) != [n, k, h, w] {
            return Err(Error::shape(op, format!("modulation {:?}, expected {:?}", self.shape(modulation), [n, k, h, w])));
        }
        let o = match *self.shape(weight) {
            [o, wc, wk] if wc == c && wk == k => o,
            ref s => return Err(Error::shape(op, format!("weight {s:?}, expected [O,{c},{k}]"))),
        };
        let hw = h * w;
        let rows = c * k;
        let kp: Vec<(i32, i32)> = kernel_points.to_vec();
        let (xs, offs, mods, ws) = (
            self.value(x).data(),
            self.value(offsets).data(),
            self.value(modulation).data(),
            self.value(weight).data(),
        );
        // samples[img][c*K + k][p]: unmodulated bilinear samples
        let mut samples = vec![T::zero(); n * rows * hw];
        let mut cols = vec![T::zero(); rows * hw];
        let mut out = vec![T::zero(); n * o * hw];
        for img in 0..n {
            let samp = &mut samples[img * rows * hw..(img + 1) * rows * hw];
            for (ki, &(dy, dx)) in kp.iter().enumerate() {
                for py in 0..h {
                    for px in 0..w {
                        let pi = py * w + px;
                        let oy = offs[((img * 2 * k) + 2 * ki) * hw + pi];
                        let ox = offs[((img * 2 * k) + 2 * ki + 1) * hw + pi];
                        let cr = Corners::new(
                            h,
                            w,
                            T::from_f64((py as i32 + dy) as f64) + oy,
                            T::from_f64((px as i32 + dx) as f64) + ox,
                        );
                        let m = mods[(img * k + ki) * hw + pi];
                        for ch in 0..c {
                            let plane = &xs[(img * c + ch) * hw..(img * c + ch + 1) * hw];
                            let s = cr.sample(plane);
                            let row = ch * k + ki;
                            samp[row * hw + pi] = s;
                            cols[row * hw + pi] = s * m;
                        }
                    }
                }
            }
            matmul_nn(ws, &cols, &mut out[img * o * hw..(img + 1) * o * hw], o, rows, hw, false);
        }
        self.push(
            op,
            Tensor::from_vec(&[n, o, h, w], out)?,
            &[x, offsets, modulation, weight],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let (xs, offs, mods, ws) = (
                    ctx.inputs[0].data(),
                    ctx.inputs[1].data(),
                    ctx.inputs[2].data(),
                    ctx.inputs[3].data(),
                );
                let g = ctx.grad;
                let mut gx = vec![T::zero(); xs.len()];
                let mut goff = vec![T::zero(); offs.len()];
                let mut gmod = vec![T::zero(); mods.len()];
                let mut gw = vec![T::zero(); ws.len()];
                let mut cols = vec![T::zero(); rows * hw];
                let mut dcols = vec![T::zero(); rows * hw];
                for img in 0..n {
                    let samp = &samples[img * rows * hw..(img + 1) * rows * hw];
                    for row in 0..rows {
                        let ki = row % k;
                        for pi in 0..hw {
                            cols[row * hw + pi] = samp[row * hw + pi] * mods[(img * k + ki) * hw + pi];
                        }
                    }
                    let go = &g[img * o * hw..(img + 1) * o * hw];
                    matmul_nt(go, &cols, &mut gw, o, hw, rows, true);
                    matmul_tn(ws, go, &mut dcols, rows, o, hw, false);
                    for (ki, &(dy, dx)) in kp.iter().enumerate() {
                        for py in 0..h {
                            for px in 0..w {
                                let pi = py * w + px;
                                let oyi = ((img * 2 * k) + 2 * ki) * hw + pi;
                                let oxi = oyi + hw;
                                let cr = Corners::new(
                                    h,
                                    w,
                                    T::from_f64((py as i32 + dy) as f64) + offs[oyi],
                                    T::from_f64((px as i32 + dx) as f64) + offs[oxi],
                                );
                                let mi = (img * k + ki) * hw + pi;
                                let m = mods[mi];
                                let (mut gm, mut gy, mut gxx) = (T::zero(), T::zero(), T::zero());
                                for ch in 0..c {
                                    let row = ch * k + ki;
                                    let d = dcols[row * hw + pi];
                                    if d == T::zero() {
                                        continue;
                                    }
                                    gm += d * samp[row * hw + pi];
                                    let ds = d * m;
                                    let poff = (img * c + ch) * hw;
                                    let (cy, cx) = cr.coord_grad(&xs[poff..poff + hw]);
                                    gy += ds * cy;
                                    gxx += ds * cx;
                                    cr.scatter(&mut gx[poff..poff + hw], ds);
                                }
                                gmod[mi] += gm;
                                goff[oyi] += gy;
                                goff[oxi] += gxx;
                            }
                        }
                    }
                }
                vec![Some(gx), Some(goff), Some(gmod), Some(gw)]
            }),
        )
    }
}
