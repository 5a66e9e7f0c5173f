//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero if any fail.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use flowdet_core::attn::{global_context_attention, local_detail_attention};
use flowdet_core::autograd::Graph;
use flowdet_core::data::{dataset_stats, CountsManifest};
use flowdet_core::detector::{
    ablation_harness, brute_force_match, build_model, conv_flops, count_flops, dataset_loss,
    evaluate_scenes, hungarian_match, run_training, synth_split, window_sweep, AblationMode,
    AdamState, ModelConfig, TrainOptions, WINDOW_SWEEP,
};
use flowdet_core::eval::{ap_evaluate, giou, iou, raw_pr, AreaRanges, Detection, GtBox};
use flowdet_core::geom::{gdu_sample, GduConfig};
use flowdet_core::gradsuite::run_suite;
use flowdet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let rows = run_suite(None, |_, _| {}).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{} {:.2e}", r.name, r.max_rel_err))
        .collect();
    let worst_op = rows
        .iter()
        .filter(|r| r.name != "micro_model")
        .map(|r| r.max_rel_err)
        .fold(0.0, f64::max);
    let model = rows
        .iter()
        .find(|r| r.name == "micro_model")
        .map(|r| r.max_rel_err)
        .unwrap_or(f64::NAN);
    let required = [
        "conv2d",
        "dwconv",
        "bilinear_sample",
        "gdu_forward",
        "arb_forward",
        "pafc_forward",
        "local_attention",
        "global_attention",
        "gate_fuse",
        "saa_forward",
        "set_loss",
        "micro_model",
    ];
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|n| !rows.iter().any(|r| r.name == *n))
        .collect();
    check(
        failed.is_empty() && missing.is_empty() && worst_op < 1e-5 && model < 1e-4 && secs < 300.0,
        format!(
            "{} cases, worst operator rel err {worst_op:.2e}, full model {model:.2e}, {secs:.1}s; failed {failed:?}, missing {missing:?}",
            rows.len()
        ),
    )
}

fn oracle_equivalences() -> Outcome {
    let randn = |shape: &[usize], seed: u64| {
        Tensor::<f64>::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    };

    // (a) zero offsets and unit modulation reduce the deformable unit to dense conv
    let cfg = GduConfig::default();
    let (n, c, o, h, w) = (2, 3, 4, 6, 5);
    let mut g = Graph::inference();
    let x = g.constant(randn(&[n, c, h, w], 1));
    let kernel = randn(&[o, c, 3, 3], 2);
    let kv = g.constant(kernel.clone());
    let dense = g.conv2d(x, kv, None, 1, 1).map_err(|e| e.to_string())?;
    let offsets = g.constant(Tensor::zeros(&[n, 18, h, w]));
    let omega = g.constant(Tensor::ones(&[n, 9, h, w]));
    let kflat = g.constant(kernel.reshaped(&[o, c, 9]).map_err(|e| e.to_string())?);
    let deform = gdu_sample(&mut g, x, offsets, omega, None, kflat, &cfg.kernel_points)
        .map_err(|e| e.to_string())?;
    let a = g.value(deform).max_abs_diff(g.value(dense));

    // (b) windowed attention against block-diagonal masked full attention
    let mut b: f64 = 0.0;
    let mut scale = f64::INFINITY;
    for (win, seed) in [(2, 4), (4, 5)] {
        let sc = oracles::cfg(8, 2, win, 1);
        let (mut store, params) = oracles::ldb_setup(&sc, seed);
        let lpe_shape = store.get(params.lpe).shape().to_vec();
        store
            .set(
                params.lpe,
                Tensor::randn(&lpe_shape, 0.5, &mut ChaCha8Rng::seed_from_u64(seed + 100)),
            )
            .map_err(|e| e.to_string())?;
        let x = randn(&[2, 8, 8, 4], seed + 200);
        let mut g = Graph::inference();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let got = local_detail_attention(&mut g, &p, &params, &sc, xv)
            .map_err(|e| e.to_string())?
            .out;
        let v = g.value(got);
        scale = scale.min(v.max_abs_diff(&Tensor::zeros(v.shape())));
        b = b.max(v.max_abs_diff(&oracles::ldb_oracle(&x, &store, &params, &sc)));
    }

    // (c) global branch at reduction 1 against full attention
    let sc = oracles::cfg(8, 2, 2, 1);
    let (mut store, params) = oracles::gcb_setup(&sc, 8);
    oracles::randomize(&mut store, 9, 0.4);
    let x = randn(&[2, 8, 5, 4], 10);
    let mut g = Graph::inference();
    let p = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let got = global_context_attention(&mut g, &p, &params, &sc, xv)
        .map_err(|e| e.to_string())?
        .out;
    let v = g.value(got);
    scale = scale.min(v.max_abs_diff(&Tensor::zeros(v.shape())));
    let cdiff = v.max_abs_diff(&oracles::gcb_full_oracle(&x, &store, &params, &sc));

    // (d) assignment against exhaustive search
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for k in 0..1000 {
        let q = rng.random_range(1..=6);
        let t = rng.random_range(1..=6);
        let cost: Vec<f64> = (0..q * t)
            .map(|_| {
                if k % 2 == 0 {
                    rng.random_range(-5.0..5.0)
                } else {
                    rng.random_range(0..4) as f64
                }
            })
            .collect();
        let total =
            |pairs: &[(usize, usize)]| pairs.iter().map(|&(i, j)| cost[i * t + j]).sum::<f64>();
        let h = hungarian_match(&cost, q, t).map_err(|e| e.to_string())?;
        if total(&h.pairs) != total(&brute_force_match(&cost, q, t).pairs) {
            mismatches += 1;
        }
    }
    check(
        a < 1e-10 && b < 1e-6 && cdiff < 1e-10 && mismatches == 0 && scale > 1e-3,
        format!("(a) {a:.1e} (b) {b:.1e} (c) {cdiff:.1e} max abs diff, smallest output magnitude {scale:.2}; (d) {mismatches}/1000 mismatches"),
    )
}

#[derive(serde::Deserialize)]
struct ApFixture {
    categories: Vec<u64>,
    gts: Vec<GtBox>,
    dets: Vec<Detection>,
    expected: ApExpected,
}

#[derive(serde::Deserialize)]
struct ApExpected {
    precision: Vec<f64>,
    recall: Vec<f64>,
    interpolated_runs: Vec<(usize, f64)>,
    ap50: f64,
}

fn metric_fixtures() -> Outcome {
    let e = |r: flowdet_core::Result<f64>| r.map_err(|e| e.to_string());
    let i = e(iou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]))?;
    let gi = e(giou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]))?;
    let boxes_ok = (i - 1.0 / 7.0).abs() < 1e-9 && (gi + 5.0 / 63.0).abs() < 1e-9;

    let text = std::fs::read_to_string(fixture("ap_fixture.json")).map_err(|e| e.to_string())?;
    let f: ApFixture = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let (_, rc, pr) = raw_pr(&f.dets, &f.gts, 1, 0.5).map_err(|e| e.to_string())?;
    let rep = ap_evaluate(&f.dets, &f.gts, &f.categories, &AreaRanges::default())
        .map_err(|e| e.to_string())?;
    let curve: Vec<f64> = f
        .expected
        .interpolated_runs
        .iter()
        .flat_map(|&(n, v)| std::iter::repeat_n(v, n))
        .collect();
    let pr_ok = rc == f.expected.recall
        && pr == f.expected.precision
        && rep.pr_curves[0].precision == curve;
    let ap_ok = (rep.ap50 - f.expected.ap50).abs() < 1e-12;

    let perfect: Vec<Detection> = f
        .gts
        .iter()
        .map(|g| Detection {
            image_id: g.image_id,
            category_id: g.category_id,
            bbox: g.bbox,
            score: 1.0,
        })
        .collect();
    let p = ap_evaluate(&perfect, &f.gts, &f.categories, &AreaRanges::default())
        .map_err(|e| e.to_string())?;
    check(
        boxes_ok && pr_ok && ap_ok && p.ap == 1.0,
        format!(
            "iou {i:.9} giou {gi:.9}; PR curve exact {pr_ok}; AP50 {:.6}; perfect AP {}",
            rep.ap50, p.ap
        ),
    )
}

fn table_arithmetic() -> Outcome {
    let m = CountsManifest::load(fixture("dataset_counts.json")).map_err(|e| e.to_string())?;
    let (doc, splits) = m.to_doc(1920, 1080).map_err(|e| e.to_string())?;
    let t = dataset_stats(&doc, &splits, &["train", "val", "test"]);
    let mut bad = Vec::new();
    for (c, row) in t.categories.iter().enumerate() {
        let want: Vec<u64> = ["train", "val", "test"]
            .iter()
            .map(|s| m.count(c, s))
            .collect();
        let total = m.categories[c].get("total").and_then(|v| v.as_u64());
        if row.counts != want
            || row.total != row.counts.iter().sum::<u64>()
            || Some(row.total) != total
        {
            bad.push(row.category.clone());
        }
    }
    let col_sums: Vec<u64> = (0..3)
        .map(|k| t.categories.iter().map(|r| r.counts[k]).sum())
        .collect();
    check(
        bad.is_empty() && t.totals.counts == col_sums && t.totals.total == 406_758,
        format!(
            "{} category rows, totals {:?} = {}, mismatched {bad:?}",
            t.categories.len(),
            t.totals.counts,
            t.totals.total
        ),
    )
}

fn desk_training() -> Outcome {
    let cfg = ModelConfig::default();
    let opts = TrainOptions::default();
    let data = synth_split(&opts).map_err(|e| e.to_string())?;
    let mut model = build_model::<f32>(&cfg).map_err(|e| e.to_string())?;
    let params = model.param_count();
    let mut opt = AdamState::new(&model.store);
    let initial = dataset_loss(&model, &data.train, 8)
        .map_err(|e| e.to_string())?
        .total;
    let t = Instant::now();
    let mut halved: Option<(usize, f64)> = None;
    let mut best_ratio = f64::INFINITY;
    let mut ratio_err = None;
    run_training(&mut model, &mut opt, &data.train, &opts, |m, r| {
        if r.step <= 300 && r.step % 25 == 0 && halved.is_none() {
            let l = dataset_loss(m, &data.train, 8)?.total;
            best_ratio = best_ratio.min(l / initial);
            if l <= 0.5 * initial {
                halved = Some((r.step, t.elapsed().as_secs_f64()));
            }
        }
        if r.step == 300 && halved.is_none() && ratio_err.is_none() {
            ratio_err = Some(t.elapsed().as_secs_f64());
        }
        Ok(true)
    })
    .map_err(|e| e.to_string())?;
    let total_secs = t.elapsed().as_secs_f64();
    let (rep, _) = evaluate_scenes(&model, &data.val).map_err(|e| e.to_string())?;
    let loss_ok = matches!(halved, Some((_, s)) if s < 600.0);
    let ap_ok = rep.ap50 >= 0.5 && total_secs < 3600.0;
    let loss_msg = match halved {
        Some((step, s)) => format!("loss halved by step {step} ({s:.0}s)"),
        None => format!("loss not halved within 300 steps (best ratio {best_ratio:.3})"),
    };
    check(
        params <= 200_000 && loss_ok && ap_ok && opts.train_images == 32 && opts.val_images == 16,
        format!(
            "{params} params; {loss_msg}; held-out AP50 {:.3} after {} steps ({total_secs:.0}s)",
            rep.ap50, opts.steps
        ),
    )
}

fn cost_trends() -> Outcome {
    let rows =
        window_sweep(&ModelConfig::default(), &WINDOW_SWEEP, None).map_err(|e| e.to_string())?;
    let flops: Vec<u64> = rows.iter().map(|r| r.flops).collect();
    let increasing = flops.windows(2).all(|w| w[0] < w[1]);
    let kv = |r: usize| {
        let mut c = ModelConfig::default();
        c.saa.reduction = r;
        count_flops(&c).get("encoder.gcb", "kv_path").unwrap_or(0)
    };
    let (kv1, kv2) = (kv(1), kv(2));
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut conv_bad = 0;
    for _ in 0..50 {
        let groups = [1, 2, 4][rng.random_range(0..3)];
        let (ci, co) = (
            groups * rng.random_range(1..6),
            groups * rng.random_range(1..6),
        );
        let (kh, kw) = (rng.random_range(1..6), rng.random_range(1..6));
        let (ho, wo) = (rng.random_range(1..33), rng.random_range(1..33));
        let closed = 2 * (co * ho * wo * (ci / groups) * kh * kw) as u64;
        if conv_flops(ci, co, kh, kw, ho, wo, groups) != closed {
            conv_bad += 1;
        }
    }
    check(
        increasing && kv1 > 0 && 4 * kv2 == kv1 && conv_bad == 0,
        format!("window FLOPs {flops:?}; kv r=1 {kv1}, r=2 {kv2}; {conv_bad}/50 conv mismatches"),
    )
}

fn ablation() -> Outcome {
    let rows = ablation_harness(&ModelConfig::default(), &AblationMode::ALL, None)
        .map_err(|e| e.to_string())?;
    let get = |s: &str| rows.iter().find(|r| r.setting == s).map(|r| r.flops);
    let (full, plain) = (get("saa+pafc"), get("plain_attn+plain_conv"));
    check(
        rows.len() == 4 && matches!((full, plain), (Some(a), Some(b)) if a < b),
        format!(
            "{} rows; saa+pafc {full:?} vs plain {plain:?} FLOPs",
            rows.len()
        ),
    )
}

fn run_cli(args: &[&str], out: &Path) -> Result<Vec<u8>, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_flowdet"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)));
    }
    Ok(o.stdout)
}

fn same_files(a: &Path, b: &Path, files: &[&str]) -> Result<Vec<String>, String> {
    let mut differ = Vec::new();
    for f in files {
        let x = std::fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
        if x != y {
            differ.push(f.to_string());
        }
    }
    Ok(differ)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |s: &str| dir.path().join(s);
    let mut differ = Vec::new();
    for run in ["g1", "g2"] {
        run_cli(&["gradcheck", "--seed", "3"], &d(run))?;
    }
    differ.extend(same_files(&d("g1"), &d("g2"), &["gradcheck.csv"])?);
    for run in ["t1", "t2"] {
        run_cli(&["train", "--seed", "5", "--steps", "10"], &d(run))?;
    }
    differ.extend(same_files(
        &d("t1"),
        &d("t2"),
        &["loss.csv", "checkpoint.fdckpt", "eval.json", "config.toml"],
    )?);
    let ck = d("t1").join("checkpoint.fdckpt");
    for run in ["e1", "e2"] {
        run_cli(
            &["eval", "--checkpoint", ck.to_str().unwrap_or_default()],
            &d(run),
        )?;
    }
    differ.extend(same_files(
        &d("e1"),
        &d("e2"),
        &["ap_report.json", "detections.json", "pr_curves.svg"],
    )?);
    check(
        differ.is_empty(),
        format!("gradcheck/train/eval outputs compared byte for byte; differing {differ:?}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradient_suite),
        ("oracle equivalences", oracle_equivalences),
        ("metric fixtures", metric_fixtures),
        ("dataset table arithmetic", table_arithmetic),
        ("desk-scale training", desk_training),
        ("cost-model trends", cost_trends),
        ("ablation harness", ablation),
        ("determinism", determinism),
    ];
    let only: Option<usize> = std::env::var("FLOWDET_CRITERION")
        .ok()
        .and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != k + 1) {
            continue;
        }
        let t = Instant::now();
        let (tag, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{tag} {} {name}: {detail} [{:.1}s]",
            k + 1,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
