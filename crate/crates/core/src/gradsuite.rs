//! Registry of gradient checks covering every differentiable operator and
//! a micro end-to-end detector.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attn::{
    gate_fuse, global_context_attention, local_detail_attention, multi_head_attention, saa_forward, GcbParams,
    LdbParams, SaaConfig, SaaParams,
};
use crate::autograd::{Graph, Var};
use crate::detector::{build_model, forward, giou_rows, set_loss, LossWeights, ModelConfig, Stage, Target};
use crate::error::{Error, Result};
use crate::geom::gdu::offset_heads_off_grid;
use crate::geom::{arb_forward, gdu_forward, pafc_forward, ArbParams, GduConfig, GduParams, PafcConfig, PafcParams};
use crate::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use crate::nn::{Bindings, Init, ParamStore};
use crate::tensor::Tensor;

pub const OP_TOL: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-4;
/// Finite-difference step for single operators.
pub const OP_EPS: f64 = 1e-4;
/// Step for the end-to-end model. Rounding noise in the loss is about
/// `2e-11 / eps`, which must stay below the `1e-8` floor of the relative
/// error; extrapolation keeps the truncation error small at this size.
pub const MODEL_EPS: f64 = 1e-2;

pub struct GradCase {
    pub name: &'static str,
    pub tol: f64,
    run: fn(bool, f64) -> GradcheckReport,
}

impl GradCase {
    /// With `sabotage`, the case's backward is scaled by 1.1 at its output.
    pub fn run(&self, sabotage: bool) -> GradcheckReport {
        (self.run)(sabotage, self.tol)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub name: String,
    pub tol: f64,
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
    pub failure: Option<String>,
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn opts(eps: f64, tol: f64) -> GradcheckOptions {
    GradcheckOptions {
        eps,
        tol,
        max_elems_per_input: Some(10),
        ..GradcheckOptions::default()
    }
}

/// Identity whose backward scales the incoming gradient by 1.1.
fn faulty(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let v = g.value(y).clone();
    g.custom("faulty_identity", &[y], v, |ctx| vec![Some(ctx.grad.iter().map(|v| v * 1.1).collect())])
}

fn finish(g: &mut Graph<f64>, y: Var, sabotage: bool) -> Result<Var> {
    if sabotage {
        faulty(g, y)
    } else {
        Ok(y)
    }
}

fn check(
    inputs: &[Tensor<f64>],
    tol: f64,
    sabotage: bool,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> GradcheckReport {
    check_eps(inputs, OP_EPS, tol, sabotage, f)
}

fn check_eps(
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    sabotage: bool,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> GradcheckReport {
    gradcheck(
        |g, v| {
            let y = f(g, v)?;
            finish(g, y, sabotage)
        },
        inputs,
        &opts(eps, tol),
    )
}

/// Checks jointly over `x` and every parameter in `store`.
fn check_store(
    store: &ParamStore<f64>,
    x: Tensor<f64>,
    tol: f64,
    sabotage: bool,
    f: impl Fn(&mut Graph<f64>, &Bindings, Var) -> Result<Var>,
) -> GradcheckReport {
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    check(&inputs, tol, sabotage, |g, v| f(g, &Bindings::from_vars(v[1..].to_vec()), v[0]))
}

fn setup_failed(e: Error) -> GradcheckReport {
    GradcheckReport {
        max_rel_err: f64::INFINITY,
        pass: false,
        checked: 0,
        worst: None,
        failure: Some(format!("setup failed: {e}")),
    }
}

/// Fill every all-zero parameter with small noise so zero-initialized heads
/// carry gradient signal.
fn perturb_zero_params(store: &mut ParamStore<f64>, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            let shape = t.shape().to_vec();
            *t = Tensor::randn(&shape, std, &mut rng);
        }
    }
}

fn attn_cfg() -> SaaConfig {
    SaaConfig {
        embed_dim: 8,
        heads: 2,
        window: 2,
        reduction: 2,
        ffn_dim: 16,
        ..SaaConfig::default()
    }
}

fn case_conv2d(sab: bool, tol: f64) -> GradcheckReport {
    check(&[randn(&[2, 3, 5, 6], 1), randn(&[4, 3, 3, 3], 2), randn(&[4], 3)], tol, sab, |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 2, 1)
    })
}

fn case_depthwise_conv2d(sab: bool, tol: f64) -> GradcheckReport {
    check(&[randn(&[1, 3, 5, 5], 4), randn(&[3, 3, 3], 5)], tol, sab, |g, v| g.depthwise_conv2d(v[0], v[1], 1))
}

fn case_dwconv(sab: bool, tol: f64) -> GradcheckReport {
    check(&[randn(&[1, 3, 5, 4], 6), randn(&[3, 3, 3], 7), randn(&[5, 3], 8)], tol, sab, |g, v| {
        g.dwconv(v[0], v[1], v[2])
    })
}

fn case_avg_pool2d(sab: bool, tol: f64) -> GradcheckReport {
    check(&[randn(&[1, 2, 5, 4], 9)], tol, sab, |g, v| g.avg_pool2d(v[0], 2))
}

/// Coordinates with fractional parts in `[0.2, 0.8]` so finite differences
/// never cross a cell boundary.
fn off_grid(shape: &[usize], lo: i32, hi: i32, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi) as f64 + rng.random_range(0.2..0.8)).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

fn case_bilinear_sample(sab: bool, tol: f64) -> GradcheckReport {
    check(&[randn(&[2, 3, 4, 5], 10), off_grid(&[2, 6, 2], -1, 4, 11)], tol, sab, |g, v| g.bilinear_sample(v[0], v[1]))
}

fn case_deform_conv2d(sab: bool, tol: f64) -> GradcheckReport {
    let points = GduConfig::default().kernel_points;
    let k = points.len();
    let inputs = [
        randn(&[1, 2, 4, 4], 12),
        off_grid(&[1, 2 * k, 4, 4], -1, 1, 13),
        randn(&[1, k, 4, 4], 14),
        randn(&[3, 2, k], 15),
    ];
    check(&inputs, tol, sab, move |g, v| g.deform_conv2d(v[0], v[1], v[2], v[3], &points))
}

fn case_layernorm(sab: bool, tol: f64) -> GradcheckReport {
    check(&[randn(&[3, 6], 16), randn(&[6], 17), randn(&[6], 18)], tol, sab, |g, v| g.layernorm(v[0], v[1], v[2], 1e-5))
}

fn case_softmax(sab: bool, tol: f64) -> GradcheckReport {
    check(&[randn(&[3, 5], 19)], tol, sab, |g, v| {
        let a = g.softmax(v[0], 1)?;
        let b = g.log_softmax(v[0], 0)?;
        g.add(a, b)
    })
}

fn case_matmul(sab: bool, tol: f64) -> GradcheckReport {
    check(&[randn(&[2, 3, 4], 20), randn(&[4, 5], 21), randn(&[5], 22)], tol, sab, |g, v| g.linear(v[0], v[1], Some(v[2])))
}

fn case_gdu_forward(sab: bool, tol: f64) -> GradcheckReport {
    let cfg = GduConfig::default();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let params = GduParams::new(&mut Init::new(&mut store, &mut rng), "gdu", 3, &cfg);
    if let Err(e) = offset_heads_off_grid(&mut store, &params, &cfg, &mut rng, 0.05) {
        return setup_failed(e);
    }
    check_store(&store, randn(&[1, 3, 5, 5], 24), tol, sab, |g, p, x| Ok(gdu_forward(g, p, &params, &cfg, x)?.out))
}

fn case_arb_forward(sab: bool, tol: f64) -> GradcheckReport {
    let cfg = GduConfig::default();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let params = ArbParams::new(&mut Init::new(&mut store, &mut rng), "arb", 2, &cfg);
    if let Err(e) = offset_heads_off_grid(&mut store, &params.gdu, &cfg, &mut rng, 0.05) {
        return setup_failed(e);
    }
    check_store(&store, randn(&[1, 2, 4, 5], 26), tol, sab, |g, p, x| arb_forward(g, p, &params, &cfg, x))
}

fn case_pafc_forward(sab: bool, tol: f64) -> GradcheckReport {
    let cfg = PafcConfig {
        in_channels: 4,
        out_channels: 4,
        arb_count: 3,
        stride: 1,
        gdu: GduConfig::default(),
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let params = match PafcParams::new(&mut Init::new(&mut store, &mut rng), "pafc", &cfg) {
        Ok(p) => p,
        Err(e) => return setup_failed(e),
    };
    for arb in &params.arbs {
        if let Err(e) = offset_heads_off_grid(&mut store, &arb.gdu, &cfg.gdu, &mut rng, 0.05) {
            return setup_failed(e);
        }
    }
    let sw = Tensor::randn(&[cfg.arb_count + 1], 0.5, &mut rng);
    if let Err(e) = store.set(params.stage_weights, sw) {
        return setup_failed(e);
    }
    check_store(&store, randn(&[1, 4, 5, 5], 28), tol, sab, |g, p, x| pafc_forward(g, p, &params, &cfg, x))
}

fn randomized<P>(seed: u64, make: impl FnOnce(&mut Init<'_, f64>) -> P) -> (ParamStore<f64>, P) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = make(&mut Init::new(&mut store, &mut rng));
    for t in store.tensors_mut() {
        let shape = t.shape().to_vec();
        *t = Tensor::randn(&shape, 0.4, &mut rng);
    }
    (store, params)
}

fn case_multi_head_attention(sab: bool, tol: f64) -> GradcheckReport {
    let inputs = [randn(&[2, 3, 4], 29), randn(&[2, 5, 4], 30), randn(&[2, 5, 4], 31), randn(&[2, 3, 5], 32)];
    check(&inputs, tol, sab, |g, v| {
        let bias = g.reshape(v[3], &[2, 1, 3, 5])?;
        Ok(multi_head_attention(g, v[0], v[1], v[2], 2, Some(bias))?.out)
    })
}

fn case_local_attention(sab: bool, tol: f64) -> GradcheckReport {
    let c = attn_cfg();
    let (store, params) = randomized(33, |i| LdbParams::new(i, "ldb", &c));
    check_store(&store, randn(&[1, 8, 3, 5], 34), tol, sab, |g, p, x| Ok(local_detail_attention(g, p, &params, &c, x)?.out))
}

fn case_global_attention(sab: bool, tol: f64) -> GradcheckReport {
    let c = attn_cfg();
    let (store, params) = randomized(35, |i| GcbParams::new(i, "gcb", &c));
    check_store(&store, randn(&[1, 8, 5, 4], 36), tol, sab, |g, p, x| Ok(global_context_attention(g, p, &params, &c, x)?.out))
}

fn case_gate_fuse(sab: bool, tol: f64) -> GradcheckReport {
    let inputs = [randn(&[1, 3, 2, 3], 37), randn(&[1, 3, 2, 3], 38), randn(&[1, 1, 2, 3], 39), randn(&[1, 3, 2, 3], 40)];
    check(&inputs, tol, sab, |g, v| {
        let w = g.sigmoid(v[2])?;
        gate_fuse(g, v[0], v[1], w, v[3])
    })
}

fn case_saa_forward(sab: bool, tol: f64) -> GradcheckReport {
    let c = attn_cfg();
    let (store, params) = randomized(41, |i| SaaParams::new(i, "saa", &c));
    let params = match params {
        Ok(p) => p,
        Err(e) => return setup_failed(e),
    };
    check_store(&store, randn(&[1, 8, 4, 5], 42), tol, sab, |g, p, x| Ok(saa_forward(g, p, &params, &c, x)?.out))
}

/// Overlapping `(cx, cy, w, h)` rows away from the piecewise boundaries.
fn box_rows(rows: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows)
        .flat_map(|_| {
            [
                rng.random_range(0.4..0.6),
                rng.random_range(0.4..0.6),
                rng.random_range(0.2..0.5),
                rng.random_range(0.2..0.5),
            ]
        })
        .collect();
    Tensor::from_vec(&[rows, 4], data).expect("shape")
}

fn case_giou(sab: bool, tol: f64) -> GradcheckReport {
    check(&[box_rows(5, 43), box_rows(5, 44)], tol, sab, |g, v| giou_rows(g, v[0], v[1]))
}

fn fixed_targets() -> Vec<Vec<Target>> {
    vec![
        vec![
            Target { class: 0, bbox: [0.31, 0.42, 0.23, 0.33] },
            Target { class: 1, bbox: [0.68, 0.61, 0.27, 0.21] },
        ],
        vec![Target { class: 1, bbox: [0.52, 0.47, 0.41, 0.36] }],
    ]
}

fn case_set_loss(sab: bool, tol: f64) -> GradcheckReport {
    let targets = fixed_targets();
    let w = LossWeights::default();
    check(&[randn(&[2, 4, 3], 45), Tensor::randn(&[2, 4, 4], 0.5, &mut ChaCha8Rng::seed_from_u64(46))], tol, sab, move |g, v| {
        let boxes = g.sigmoid(v[1])?;
        Ok(set_loss(g, v[0], boxes, &targets, &w)?.total)
    })
}

fn case_micro_model(sab: bool, tol: f64) -> GradcheckReport {
    let cfg = ModelConfig::micro();
    let mut model = match build_model::<f64>(&cfg) {
        Ok(m) => m,
        Err(e) => return setup_failed(e),
    };
    perturb_zero_params(&mut model.store, 47, 0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(48);
    for stage in &model.params.stages {
        if let Stage::Pafc(sp, sc) = stage {
            for arb in &sp.arbs {
                if let Err(e) = offset_heads_off_grid(&mut model.store, &arb.gdu, &sc.gdu, &mut rng, 0.05) {
                    return setup_failed(e);
                }
            }
        }
    }
    let (h, w) = cfg.input_size;
    let images = Tensor::rand_uniform(&[2, 3, h, w], 0.0, 1.0, &mut rng);
    let targets = fixed_targets();
    let model = &model;
    let mut inputs = vec![images];
    inputs.extend(model.store.iter().map(|(_, t)| t.clone()));
    check_eps(&inputs, MODEL_EPS, tol, sab, |g, v| {
        let p = Bindings::from_vars(v[1..].to_vec());
        let out = forward(g, &p, model, v[0])?;
        Ok(set_loss(g, out.logits, out.boxes, &targets, &model.cfg.loss)?.total)
    })
}

/// Every registered case, in report order.
pub fn registry() -> Vec<GradCase> {
    let c = |name, tol, run| GradCase { name, tol, run };
    vec![
        c("conv2d", OP_TOL, case_conv2d as fn(bool, f64) -> GradcheckReport),
        c("depthwise_conv2d", OP_TOL, case_depthwise_conv2d),
        c("dwconv", OP_TOL, case_dwconv),
        c("avg_pool2d", OP_TOL, case_avg_pool2d),
        c("bilinear_sample", OP_TOL, case_bilinear_sample),
        c("deform_conv2d", OP_TOL, case_deform_conv2d),
        c("layernorm", OP_TOL, case_layernorm),
        c("softmax", OP_TOL, case_softmax),
        c("linear", OP_TOL, case_matmul),
        c("gdu_forward", OP_TOL, case_gdu_forward),
        c("arb_forward", OP_TOL, case_arb_forward),
        c("pafc_forward", OP_TOL, case_pafc_forward),
        c("multi_head_attention", OP_TOL, case_multi_head_attention),
        c("local_attention", OP_TOL, case_local_attention),
        c("global_attention", OP_TOL, case_global_attention),
        c("gate_fuse", OP_TOL, case_gate_fuse),
        c("saa_forward", OP_TOL, case_saa_forward),
        c("giou", OP_TOL, case_giou),
        c("set_loss", OP_TOL, case_set_loss),
        c("micro_model", MODEL_TOL, case_micro_model),
    ]
}

/// Run every case; the one named `sabotage` (if any) gets a faulty backward.
pub fn run_suite(sabotage: Option<&str>, mut progress: impl FnMut(&SuiteRow, f64)) -> Result<Vec<SuiteRow>> {
    let cases = registry();
    if let Some(name) = sabotage {
        if !cases.iter().any(|c| c.name == name) {
            return Err(Error::Config(format!("unknown gradcheck case {name:?}")));
        }
    }
    let mut rows = Vec::with_capacity(cases.len());
    for case in &cases {
        let t = Instant::now();
        let r = case.run(sabotage == Some(case.name));
        let row = SuiteRow {
            name: case.name.to_string(),
            tol: case.tol,
            max_rel_err: r.max_rel_err,
            checked: r.checked,
            pass: r.pass,
            failure: r.failure,
        };
        progress(&row, t.elapsed().as_secs_f64());
        rows.push(row);
    }
    Ok(rows)
}

/// `op,tol,max_rel_err,checked,pass`
pub fn write_suite_csv(rows: &[SuiteRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "op,tol,max_rel_err,checked,pass")?;
    for r in rows {
        writeln!(w, "{},{:e},{:e},{},{}", r.name, r.tol, r.max_rel_err, r.checked, r.pass)?;
    }
    Ok(())
}
