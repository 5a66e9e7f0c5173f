//! Primitive differentiable ops. Each registers its backward rule on the
//! graph at forward time.

use super::graph::{BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::kernels::{matmul_nn, matmul_nt, matmul_tn};
use crate::tensor::{numel, strides, Scalar, Tensor};

/// Numpy-style broadcast of two shapes (right aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index into a tensor of shape `src`
/// broadcast to `out`. `None` when the shapes are identical.
fn broadcast_map(src: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if src == out {
        return None;
    }
    let rank = out.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; rank];
    for i in 0..src.len() {
        let o = i + rank - src.len();
        eff[o] = if src[i] == 1 { 0 } else { src_strides[i] };
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        map.push(offset);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += eff[d];
            if counter[d] < out[d] {
                break;
            }
            offset -= eff[d] * out[d];
            counter[d] = 0;
        }
    }
    Some(map)
}

fn reduce_to<T: Scalar>(g: &[T], map: &Option<Vec<usize>>, src_len: usize, scale: impl Fn(usize) -> T) -> Vec<T> {
    match map {
        None => g.iter().enumerate().map(|(i, &v)| v * scale(i)).collect(),
        Some(m) => {
            let mut out = vec![T::zero(); src_len];
            for (i, (&gi, &si)) in g.iter().zip(m).enumerate() {
                out[si] += gi * scale(i);
            }
            out
        }
    }
}

fn at(map: &Option<Vec<usize>>, i: usize) -> usize {
    match map {
        None => i,
        Some(m) => m[i],
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

impl<T: Scalar> Graph<T> {
    fn binary(&mut self, op: &'static str, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::shape(op, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let ma = broadcast_map(&sa, &out_shape);
        let mb = broadcast_map(&sb, &out_shape);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let n = numel(&out_shape);
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
            BinaryKind::Max => x.max(y),
            BinaryKind::Min => x.min(y),
        };
        let data: Vec<T> = match (&ma, &mb) {
            (None, None) => xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(xa[at(&ma, i)], xb[at(&mb, i)])).collect(),
        };
        let value = Tensor::from_vec(&out_shape, data)?;
        let (la, lb) = (xa.len(), xb.len());
        self.push(
            op,
            value,
            &[a, b],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let (xa, xb) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let g = ctx.grad;
                let xs = |i: usize| (xa[at(&ma, i)], xb[at(&mb, i)]);
                let (ga, gb) = match kind {
                    BinaryKind::Add => (
                        reduce_to(g, &ma, la, |_| T::one()),
                        reduce_to(g, &mb, lb, |_| T::one()),
                    ),
                    BinaryKind::Sub => (
                        reduce_to(g, &ma, la, |_| T::one()),
                        reduce_to(g, &mb, lb, |_| -T::one()),
                    ),
                    BinaryKind::Mul => (
                        reduce_to(g, &ma, la, |i| xs(i).1),
                        reduce_to(g, &mb, lb, |i| xs(i).0),
                    ),
                    BinaryKind::Div => (
                        reduce_to(g, &ma, la, |i| T::one() / xs(i).1),
                        reduce_to(g, &mb, lb, |i| {
                            let (x, y) = xs(i);
                            -x / (y * y)
                        }),
                    ),
                    // Ties route the gradient to the first operand.
                    BinaryKind::Max => (
                        reduce_to(g, &ma, la, |i| if xs(i).0 >= xs(i).1 { T::one() } else { T::zero() }),
                        reduce_to(g, &mb, lb, |i| if xs(i).0 >= xs(i).1 { T::zero() } else { T::one() }),
                    ),
                    BinaryKind::Min => (
                        reduce_to(g, &ma, la, |i| if xs(i).0 <= xs(i).1 { T::one() } else { T::zero() }),
                        reduce_to(g, &mb, lb, |i| if xs(i).0 <= xs(i).1 { T::zero() } else { T::one() }),
                    ),
                };
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", BinaryKind::Div, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", BinaryKind::Max, a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", BinaryKind::Min, a, b)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_vec(xv.shape(), data)?;
        self.push(
            op,
            value,
            &[x],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let (xs, ys) = (ctx.inputs[0].data(), ctx.output.data());
                let g = ctx
                    .grad
                    .iter()
                    .zip(xs.iter().zip(ys))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", x, |v| -v, |_, _| -T::one())
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        self.unary("scale", x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        self.unary("add_scalar", x, move |v| v + c, |_, _| T::one())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary("ln", x, |v| v.ln(), |x, _| T::one() / x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, |x, _| x + x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, |v| v.sqrt(), |_, y| T::from_f64(0.5) / y)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, |v| v.abs(), |x, _| x.signum())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "relu",
            x,
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary("silu", x, |v| v * sigmoid(v), |x, _| {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.numel();
        let total = xv.data().iter().copied().sum::<T>();
        self.push(
            "sum",
            Tensor::scalar(total),
            &[x],
            Box::new(move |ctx: &BackwardCtx<T>| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over one axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} for rank {}", shape.len())));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xs[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        self.push(
            "sum_axis",
            Tensor::from_vec(&out_shape, out)?,
            &[x],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let mut g = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        g[base..base + inner].copy_from_slice(&ctx.grad[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let len = self.shape(x).get(axis).copied().unwrap_or(1).max(1);
        let s = self.sum_axis(x, axis, keepdim)?;
        self.scale(s, 1.0 / len as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if numel(shape) != xv.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", xv.shape())));
        }
        let value = Tensor::from_vec(shape, xv.data().to_vec())?;
        self.push(
            "reshape",
            value,
            &[x],
            Box::new(|ctx: &BackwardCtx<T>| vec![Some(ctx.grad.to_vec())]),
        )
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("bad permutation {perm:?} for rank {rank}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        // map[i] = source index of output element i
        let n = numel(&shape);
        let mut map = Vec::with_capacity(n);
        let mut counter = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..n {
            map.push(offset);
            for d in (0..rank).rev() {
                counter[d] += 1;
                offset += src_strides[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                offset -= src_strides[d] * out_shape[d];
                counter[d] = 0;
            }
        }
        let xs = self.value(x).data();
        let data = map.iter().map(|&s| xs[s]).collect();
        self.push(
            "permute",
            Tensor::from_vec(&out_shape, data)?,
            &[x],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let mut g = vec![T::zero(); map.len()];
                for (gi, &s) in ctx.grad.iter().zip(&map) {
                    g[s] = *gi;
                }
                vec![Some(g)]
            }),
        )
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let full = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&xs[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.push(
            "narrow",
            Tensor::from_vec(&out_shape, data)?,
            &[x],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let mut g = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    g[base..base + len * inner]
                        .copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Split along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let extent = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("split", format!("axis {axis} out of range")))?;
        if sizes.iter().sum::<usize>() != extent {
            return Err(Error::shape("split", format!("sizes {sizes:?} do not sum to {extent}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut lens = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &l) in xs.iter().zip(&lens) {
                let d = self.value(v).data();
                data.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let lens_bw = lens.clone();
        self.push(
            "concat",
            Tensor::from_vec(&out_shape, data)?,
            xs,
            Box::new(move |ctx: &BackwardCtx<T>| {
                let mut grads: Vec<Vec<T>> =
                    lens_bw.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gv, &l) in grads.iter_mut().zip(&lens_bw) {
                        gv.extend_from_slice(&ctx.grad[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        )
    }

    /// Rows of `x` (axis 0) selected by `indices`; repeats allowed.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape.first().ok_or_else(|| Error::shape("index_select", "rank 0"))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("index_select", format!("index {bad} >= {rows}")));
        }
        let row: usize = shape[1..].iter().product();
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&xs[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let idx = indices.to_vec();
        self.push(
            "index_select",
            Tensor::from_vec(&out_shape, data)?,
            &[x],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let mut g = vec![T::zero(); rows * row];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..row {
                        g[i * row + j] += ctx.grad[k * row + j];
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// `out[r] = x[r, idx[r]]` for a rank-2 `x`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != idx.len() || idx.iter().any(|&i| i >= shape[1]) {
            return Err(Error::shape("pick", format!("{shape:?} with {} indices", idx.len())));
        }
        let cols = shape[1];
        let xs = self.value(x).data();
        let data = idx.iter().enumerate().map(|(r, &c)| xs[r * cols + c]).collect();
        let idx = idx.to_vec();
        self.push(
            "pick",
            Tensor::from_vec(&[shape[0]], data)?,
            &[x],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let mut g = vec![T::zero(); idx.len() * cols];
                for (r, &c) in idx.iter().enumerate() {
                    g[r * cols + c] = ctx.grad[r];
                }
                vec![Some(g)]
            }),
        )
    }

    /// Zero padding of the last two axes of an `[N,C,H,W]` tensor.
    pub fn pad2d(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("pad2d", format!("expected rank 4, got {shape:?}")));
        }
        if top + bottom + left + right == 0 {
            return Ok(x);
        }
        let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
        let (hp, wp) = (h + top + bottom, w + left + right);
        let xs = self.value(x).data();
        let mut data = vec![T::zero(); planes * hp * wp];
        for p in 0..planes {
            for y in 0..h {
                let src = (p * h + y) * w;
                let dst = (p * hp + y + top) * wp + left;
                data[dst..dst + w].copy_from_slice(&xs[src..src + w]);
            }
        }
        self.push(
            "pad2d",
            Tensor::from_vec(&[shape[0], shape[1], hp, wp], data)?,
            &[x],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let mut g = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for y in 0..h {
                        let dst = (p * h + y) * w;
                        let src = (p * hp + y + top) * wp + left;
                        g[dst..dst + w].copy_from_slice(&ctx.grad[src..src + w]);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Batched matrix product. Supported layouts: `[M,K]x[K,N]`,
    /// `[..,M,K]x[..,K,N]` with equal batch extents, and `[..,M,K]x[K,N]`
    /// (shared right operand). With `trans_b` the right operand is given as
    /// `[..,N,K]`.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {sa:?} x {sb:?} (trans_b={trans_b})"),
            ));
        }
        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        let shared_b = sb.len() == 2;
        if !shared_b && (sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::shape("matmul", format!("batch extents differ: {sa:?} x {sb:?}")));
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch_a * m * n];
        // Shared right operand: fold batch into rows.
        let (bm, nb) = if shared_b { (batch_a * m, 1) } else { (m, batch_a) };
        for bi in 0..nb {
            let ab = &xa[bi * bm * k..(bi + 1) * bm * k];
            let bb = &xb[bi * k * n..(bi + 1) * k * n];
            let cb = &mut out[bi * bm * n..(bi + 1) * bm * n];
            if trans_b {
                matmul_nt(ab, bb, cb, bm, k, n, false);
            } else {
                matmul_nn(ab, bb, cb, bm, k, n, false);
            }
        }
        self.push(
            "matmul",
            Tensor::from_vec(&out_shape, out)?,
            &[a, b],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let (xa, xb) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let g = ctx.grad;
                let mut ga = vec![T::zero(); xa.len()];
                let mut gb = vec![T::zero(); xb.len()];
                for bi in 0..nb {
                    let ab = &xa[bi * bm * k..(bi + 1) * bm * k];
                    let bb = &xb[bi * k * n..(bi + 1) * k * n];
                    let gc = &g[bi * bm * n..(bi + 1) * bm * n];
                    let ga_b = &mut ga[bi * bm * k..(bi + 1) * bm * k];
                    let gb_b = &mut gb[bi * k * n..(bi + 1) * k * n];
                    if trans_b {
                        // C = A B^T with B [n,k]: dA = dC B, dB = dC^T A
                        matmul_nn(gc, bb, ga_b, bm, n, k, false);
                        matmul_tn(gc, ab, gb_b, n, bm, k, true);
                    } else {
                        // C = A B: dA = dC B^T, dB = A^T dC
                        matmul_nt(gc, bb, ga_b, bm, n, k, false);
                        matmul_tn(ab, gc, gb_b, k, bm, n, true);
                    }
                }
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// `x @ w + b` over the last axis; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_split("softmax", x, axis)?;
        let xv = self.value(x);
        let data = softmax_raw(xv.data(), outer, len, inner);
        let value = Tensor::from_vec(xv.shape(), data)?;
        self.push(
            "softmax",
            value,
            &[x],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let (y, g) = (ctx.output.data(), ctx.grad);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let dotp: T = (0..len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                        for a in 0..len {
                            dx[idx(a)] = y[idx(a)] * (g[idx(a)] - dotp);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_split("log_softmax", x, axis)?;
        let xv = self.value(x);
        let xs = xv.data();
        let mut out = vec![T::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let mx = (0..len).map(|a| xs[idx(a)]).fold(T::neg_infinity(), T::max);
                let lse = (0..len).map(|a| (xs[idx(a)] - mx).exp()).sum::<T>().ln() + mx;
                for a in 0..len {
                    out[idx(a)] = xs[idx(a)] - lse;
                }
            }
        }
        let value = Tensor::from_vec(xv.shape(), out)?;
        self.push(
            "log_softmax",
            value,
            &[x],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let (y, g) = (ctx.output.data(), ctx.grad);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let gs: T = (0..len).map(|a| g[idx(a)]).sum();
                        for a in 0..len {
                            dx[idx(a)] = g[idx(a)] - y[idx(a)].exp() * gs;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    fn axis_split(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::shape(op, format!("axis {axis} for shape {s:?}")));
        }
        Ok((
            s[..axis].iter().product(),
            s[axis],
            s[axis + 1..].iter().product(),
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`
    /// (both shaped `[D]`).
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layernorm", "rank 0"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layernorm",
                format!("affine params must be [{d}], got {:?} / {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let rows = numel(&shape) / d.max(1);
        let eps = T::from_f64(eps);
        let (xs, gs, bs) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xs.len()];
        let mut xhat = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); rows];
        let inv_d = T::one() / T::from_f64(d as f64);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gs[j] + bs[j];
            }
        }
        self.push(
            "layernorm",
            Tensor::from_vec(&shape, out)?,
            &[x, gamma, beta],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let gam = ctx.inputs[1].data();
                let g = ctx.grad;
                let mut dx = vec![T::zero(); g.len()];
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                    }
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        dx[r * d + j] = rstd[r] * inv_d * (T::from_f64(d as f64) * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                vec![Some(dx), Some(dg), Some(db)]
            }),
        )
    }

    /// Layer normalization over the channel axis of an `[N,C,H,W]` map.
    pub fn layernorm_channels(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.permute(x, &[0, 2, 3, 1])?;
        let t = self.layernorm(t, gamma, beta, eps)?;
        self.permute(t, &[0, 3, 1, 2])
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_raw<T: Scalar>(xs: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); xs.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mx = (0..len).map(|a| xs[idx(a)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for a in 0..len {
                let e = (xs[idx(a)] - mx).exp();
                out[idx(a)] = e;
                total += e;
            }
            for a in 0..len {
                out[idx(a)] = out[idx(a)] / total;
            }
        }
    }
    out
}
