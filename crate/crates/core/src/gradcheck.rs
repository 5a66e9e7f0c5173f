//! Central finite-difference gradient checker.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many evenly spaced elements per input.
    pub max_elems_per_input: Option<usize>,
    /// Seed for the random projection applied to non-scalar outputs.
    pub seed: u64,
    /// Combine central differences at `eps` and `eps / 2` to cancel the
    /// leading truncation term.
    pub richardson: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-5,
            max_elems_per_input: None,
            seed: 0,
            richardson: true,
        }
    }
}

impl GradcheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrLocation {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    pub worst: Option<ErrLocation>,
    pub failure: Option<String>,
}

impl GradcheckReport {
    fn failed(msg: String) -> Self {
        Self {
            max_rel_err: f64::INFINITY,
            pass: false,
            checked: 0,
            worst: None,
            failure: Some(msg),
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_loss<F>(f: &F, g: &mut Graph<f64>, vars: &[Var], projection: &mut Option<Tensor<f64>>, seed: u64) -> Result<Var>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let out = f(g, vars)?;
    if g.value(out).numel() == 1 {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let proj = projection.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&shape, 1.0, &mut rng)
    });
    let r = g.constant(proj.clone());
    let prod = g.mul(out, r)?;
    g.sum(prod)
}

/// Compare backward gradients of `f` against central differences for every
/// element of every input. Non-scalar outputs are reduced with a fixed
/// random projection.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], opts: &GradcheckOptions) -> GradcheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut projection = None;
    let eval = |xs: &[Tensor<f64>], projection: &mut Option<Tensor<f64>>| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = scalar_loss(&f, &mut g, &vars, projection, opts.seed)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let analytic: Vec<Vec<f64>> = match scalar_loss(&f, &mut g, &vars, &mut projection, opts.seed)
        .and_then(|loss| g.backward(loss))
    {
        Ok(()) => vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default()).collect(),
        Err(e) => return GradcheckReport::failed(format!("forward/backward failed: {e}")),
    };

    let mut worst: Option<ErrLocation> = None;
    let mut max_err = 0.0f64;
    let mut checked = 0;
    let mut xs: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = match opts.max_elems_per_input {
            Some(m) if m < n => (0..m).map(|j| j * n / m).collect(),
            _ => (0..n).collect(),
        };
        for e in picks {
            let orig = input.data()[e];
            let mut central = |h: f64| -> Result<f64> {
                xs[i].data_mut()[e] = orig + h;
                let plus = eval(&xs, &mut projection);
                xs[i].data_mut()[e] = orig - h;
                let minus = eval(&xs, &mut projection);
                xs[i].data_mut()[e] = orig;
                Ok((plus? - minus?) / (2.0 * h))
            };
            let numeric = if opts.richardson {
                central(opts.eps).and_then(|d1| central(opts.eps / 2.0).map(|d2| (4.0 * d2 - d1) / 3.0))
            } else {
                central(opts.eps)
            };
            let numeric = match numeric {
                Ok(v) => v,
                Err(err) => return GradcheckReport::failed(format!("input {i} element {e}: {err}")),
            };
            let a = analytic[i][e];
            if !numeric.is_finite() || !a.is_finite() {
                return GradcheckReport::failed(format!("input {i} element {e}: non-finite gradient"));
            }
            let err = rel_err(a, numeric);
            checked += 1;
            if err > max_err || worst.is_none() {
                max_err = max_err.max(err);
                worst = Some(ErrLocation {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    GradcheckReport {
        max_rel_err: max_err,
        pass: max_err < opts.tol,
        checked,
        worst,
        failure: None,
    }
}
