//! Geometric Deformable Unit: two axis-specialised deformable branches whose
//! samples are re-weighted by a decaying function of offset magnitude.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bindings, Init, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// Offsets mostly along x; the row component is capped by epsilon.
    Horizontal,
    /// Offsets mostly along y; the column component is capped by epsilon.
    Vertical,
}

impl Branch {
    /// `(row scale, column scale)` applied to the tanh-squashed offsets.
    pub fn axis_scales(self, sigma: f64, epsilon: f64) -> (f64, f64) {
        match self {
            Branch::Horizontal => (epsilon, sigma),
            Branch::Vertical => (sigma, epsilon),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Horizontal => "horizontal",
            Branch::Vertical => "vertical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GduConfig {
    /// Kernel grid positions `(dy, dx)`; must contain the origin.
    pub kernel_points: Vec<(i32, i32)>,
    /// Offset bound along a branch's principal axis, in pixels.
    pub sigma: f64,
    /// Offset bound along the cross axis, in pixels.
    pub epsilon: f64,
    /// Length scale of the magnitude modulation, in pixels.
    pub tau: f64,
    pub branches: Vec<Branch>,
}

impl Default for GduConfig {
    fn default() -> Self {
        Self::square(3, 4.0)
    }
}

impl GduConfig {
    /// `k x k` grid centred on the origin with `epsilon = sigma / 4` and
    /// `tau = 4`.
    pub fn square(k: usize, sigma: f64) -> Self {
        let r = (k / 2) as i32;
        let kernel_points = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect();
        Self {
            kernel_points,
            sigma,
            epsilon: sigma / 4.0,
            tau: 4.0,
            branches: vec![Branch::Horizontal, Branch::Vertical],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.kernel_points.contains(&(0, 0)) {
            return Err(Error::Config("GDU kernel points must contain the origin".into()));
        }
        if !(self.sigma >= 0.0 && self.epsilon >= 0.0 && self.epsilon <= self.sigma) {
            return Err(Error::Config(format!(
                "GDU bounds need 0 <= epsilon ({}) <= sigma ({})",
                self.epsilon, self.sigma
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("GDU tau must be positive, got {}", self.tau)));
        }
        if self.branches.is_empty() {
            return Err(Error::Config("GDU needs at least one branch".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.kernel_points.len()
    }

    /// Largest kernel reach from the origin along either axis.
    pub fn radius(&self) -> usize {
        self.kernel_points
            .iter()
            .map(|&(y, x)| y.unsigned_abs().max(x.unsigned_abs()) as usize)
            .max()
            .unwrap_or(0)
    }
}

/// `psi(r) = exp(-(r / tau)^2)`: 1 at zero offset, strictly decreasing.
pub fn modulation_psi(r: f64, tau: f64) -> f64 {
    (-(r / tau).powi(2)).exp()
}

/// Per-branch sampling field produced by [`predict_offsets`].
#[derive(Debug, Clone, Copy)]
pub struct OffsetField {
    pub branch: Branch,
    /// `[N, 2K, H, W]`, pixels (row, column interleaved per kernel point)
    pub offsets: Var,
    /// `[N, K, H, W]`, sigmoid output
    pub mod_weights: Var,
    /// `[N, K, H, W]`, in `(0, 1]`
    pub psi: Var,
}

#[derive(Debug, Clone)]
pub struct BranchParams {
    pub branch: Branch,
    pub offset_w: ParamId,
    pub offset_b: ParamId,
    pub mod_w: ParamId,
    pub mod_b: ParamId,
    /// `[C, C, K]`
    pub kernel: ParamId,
}

#[derive(Debug, Clone)]
pub struct GduParams {
    pub channels: usize,
    pub dw_depth: ParamId,
    pub dw_point: ParamId,
    pub branches: Vec<BranchParams>,
    pub merge_w: ParamId,
    pub merge_b: ParamId,
}

impl GduParams {
    /// Offset and modulation heads start at zero, so a fresh GDU samples the
    /// regular grid.
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize, cfg: &GduConfig) -> Self {
        let k = cfg.k();
        let kk = (2 * cfg.radius() + 1).max(3);
        init.scope(name, |i| {
            let dw_depth = i.fan_in_uniform("dw_depth", &[channels, kk, kk], kk * kk);
            let dw_point = i.fan_in_uniform("dw_point", &[channels, channels], channels);
            let branches = cfg
                .branches
                .iter()
                .map(|&b| {
                    i.scope(b.name(), |i| BranchParams {
                        branch: b,
                        offset_w: i.zeros("offset_w", &[2 * k, channels, 1, 1]),
                        offset_b: i.zeros("offset_b", &[2 * k]),
                        mod_w: i.zeros("mod_w", &[k, channels, 1, 1]),
                        mod_b: i.zeros("mod_b", &[k]),
                        kernel: i.fan_in_uniform("kernel", &[channels, channels, k], channels * k),
                    })
                })
                .collect();
            GduParams {
                channels,
                dw_depth,
                dw_point,
                branches,
                merge_w: i.fan_in_uniform("merge_w", &[channels, channels, 1, 1], channels),
                merge_b: i.zeros("merge_b", &[channels]),
            }
        })
    }
}

/// Small random offset and modulation heads whose biases put every sample
/// about half a pixel from the grid, away from the bilinear kinks at integer
/// coordinates. Used by finite-difference checks.
pub fn offset_heads_off_grid<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    params: &GduParams,
    cfg: &GduConfig,
    rng: &mut R,
    weight_std: f64,
) -> Result<()> {
    for bp in &params.branches {
        let (sy, sx) = bp.branch.axis_scales(cfg.sigma, cfg.epsilon);
        for id in [bp.offset_w, bp.mod_w, bp.mod_b] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::randn(&shape, weight_std, rng))?;
        }
        let bias: Vec<f64> = (0..2 * cfg.k())
            .map(|j| {
                let s = if j % 2 == 0 { sy } else { sx };
                let target = if (j / 2) % 2 == 0 { 0.5 } else { -0.5 };
                if s > 0.5 { (target / s).atanh() } else { 0.0 }
            })
            .collect();
        store.set(bp.offset_b, Tensor::from_f64_slice(&[2 * cfg.k()], &bias)?)?;
    }
    Ok(())
}

/// Offsets, modulation weights and psi for every branch.
pub fn predict_offsets<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bindings,
    params: &GduParams,
    cfg: &GduConfig,
    x: Var,
) -> Result<Vec<OffsetField>> {
    let k = cfg.k();
    let trunk = g.dwconv(x, p.get(params.dw_depth), p.get(params.dw_point))?;
    let mut fields = Vec::with_capacity(params.branches.len());
    for bp in &params.branches {
        let raw = g.conv2d(trunk, p.get(bp.offset_w), Some(p.get(bp.offset_b)), 1, 0)?;
        let squashed = g.tanh(raw)?;
        let (sy, sx) = bp.branch.axis_scales(cfg.sigma, cfg.epsilon);
        let scales: Vec<f64> = (0..k).flat_map(|_| [sy, sx]).collect();
        let scales = g.constant(Tensor::from_f64_slice(&[1, 2 * k, 1, 1], &scales)?);
        let offsets = g.mul(squashed, scales)?;
        let mod_raw = g.conv2d(trunk, p.get(bp.mod_w), Some(p.get(bp.mod_b)), 1, 0)?;
        let mod_weights = g.sigmoid(mod_raw)?;
        let psi = psi_field(g, offsets, cfg.tau)?;
        fields.push(OffsetField {
            branch: bp.branch,
            offsets,
            mod_weights,
            psi,
        });
    }
    Ok(fields)
}

/// `psi(|offset_k|)` for every kernel point of an `[N,2K,H,W]` offset map.
pub fn psi_field<T: Scalar>(g: &mut Graph<T>, offsets: Var, tau: f64) -> Result<Var> {
    let s = g.shape(offsets).to_vec();
    let (n, k2, h, w) = (s[0], s[1], s[2], s[3]);
    let pairs = g.reshape(offsets, &[n, k2 / 2, 2, h, w])?;
    let sq = g.square(pairs)?;
    let r2 = g.sum_axis(sq, 2, false)?;
    let scaled = g.scale(r2, -1.0 / (tau * tau))?;
    g.exp(scaled)
}

/// One deformable branch with an explicit sampling field: sums kernel
/// weights times `omega * psi` times the bilinear sample. `psi = None`
/// disables the magnitude modulation.
pub fn gdu_sample<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    offsets: Var,
    omega: Var,
    psi: Option<Var>,
    kernel: Var,
    kernel_points: &[(i32, i32)],
) -> Result<Var> {
    let modulation = match psi {
        Some(psi) => g.mul(omega, psi)?,
        None => omega,
    };
    g.deform_conv2d(x, offsets, modulation, kernel, kernel_points)
}

pub struct GduOutput {
    pub out: Var,
    pub fields: Vec<OffsetField>,
}

/// Full GDU: predict per-branch fields, sample each branch, average the
/// branches and mix with a pointwise convolution.
pub fn gdu_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bindings,
    params: &GduParams,
    cfg: &GduConfig,
    x: Var,
) -> Result<GduOutput> {
    let (h, w) = (g.shape(x)[2], g.shape(x)[3]);
    let extent = 2 * cfg.radius() + 1;
    if h < extent || w < extent {
        return Err(Error::shape("gdu_forward", format!("spatial {h}x{w} smaller than kernel extent {extent}")));
    }
    let fields = predict_offsets(g, p, params, cfg, x)?;
    let mut branch_outs = Vec::with_capacity(fields.len());
    for (f, bp) in fields.iter().zip(&params.branches) {
        branch_outs.push(gdu_sample(
            g,
            x,
            f.offsets,
            f.mod_weights,
            Some(f.psi),
            p.get(bp.kernel),
            &cfg.kernel_points,
        )?);
    }
    let mut combined = branch_outs[0];
    for &b in &branch_outs[1..] {
        combined = g.add(combined, b)?;
    }
    if branch_outs.len() > 1 {
        combined = g.scale(combined, 1.0 / branch_outs.len() as f64)?;
    }
    let out = g.conv2d(combined, p.get(params.merge_w), Some(p.get(params.merge_b)), 1, 0)?;
    Ok(GduOutput { out, fields })
}
