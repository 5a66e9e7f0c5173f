use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use flowdet_core::attn::GateMode;
use flowdet_core::data::{
    dataset_stats, embedded_splits, export_detections, load_annotations, load_detections,
    read_split_manifest, SynthSceneSpec, SPLIT_NAMES,
};
use flowdet_core::detector::{
    ablation_harness, build_model, evaluate_scenes, gate_sweep, latency_bench, load_checkpoint,
    predict_scenes, reduction_sweep, run_training, save_checkpoint, synth_split, window_sweep,
    AblationMode, AdamState, MetricRow, ModelConfig, StepRecord, TrainOptions, GATE_SWEEP,
    REDUCTION_SWEEP, WINDOW_SWEEP,
};
use flowdet_core::eval::{ap_evaluate, ApReport, AreaRanges};
use flowdet_core::gradsuite::{run_suite, write_suite_csv};

use crate::config::{to_toml, RunConfig};
use crate::scenes::{annotation_path, doc_gts, load_coco_scenes};
use crate::svg::{bar_chart, line_chart};
use crate::{Outcome, Sweep};

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn gradcheck(rc: &RunConfig, inject: Option<&str>) -> Result<Outcome> {
    let verbose = rc.verbosity > 0;
    let rows = run_suite(inject, |r, secs| {
        if verbose {
            eprintln!("{} {:.2}s", r.name, secs);
        }
    })?;
    let path = rc.path("gradcheck.csv");
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_suite_csv(&rows, BufWriter::new(file))?;
    for r in &rows {
        println!(
            "{:<22} {:>10.3e}  {}",
            r.name,
            r.max_rel_err,
            if r.pass { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<_> = rows.iter().filter(|r| !r.pass).collect();
    for r in &failed {
        let why = r
            .failure
            .as_deref()
            .map(|f| format!(" ({f})"))
            .unwrap_or_default();
        eprintln!(
            "FAIL {}: max rel err {:e} exceeds {:e}{why}",
            r.name, r.max_rel_err, r.tol
        );
    }
    println!("{}/{} cases passed", rows.len() - failed.len(), rows.len());
    Ok(if failed.is_empty() {
        Outcome::Pass
    } else {
        Outcome::Fail
    })
}

fn write_loss_csv(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["step", "cls", "l1", "giou", "total", "lr"])?;
    for r in records {
        let l = &r.loss;
        w.write_record([
            r.step.to_string(),
            l.cls.to_string(),
            l.l1.to_string(),
            l.giou.to_string(),
            l.total.to_string(),
            r.lr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn loss_svg(records: &[StepRecord]) -> String {
    let series = |name: &str, f: fn(&StepRecord) -> f64| {
        (
            name.to_string(),
            records.iter().map(|r| (r.step as f64, f(r))).collect(),
        )
    };
    line_chart(
        "training loss",
        "step",
        "loss",
        &[
            series("total", |r| r.loss.total),
            series("cls", |r| r.loss.cls),
            series("l1", |r| r.loss.l1),
            series("giou", |r| r.loss.giou),
        ],
    )
}

fn pr_svg(report: &ApReport) -> String {
    let series: Vec<(String, Vec<(f64, f64)>)> = report
        .pr_curves
        .iter()
        .map(|c| {
            let pts = c
                .recall
                .iter()
                .copied()
                .zip(c.precision.iter().copied())
                .collect();
            (
                format!("category {} (AP50 {:.3})", c.category_id, c.ap),
                pts,
            )
        })
        .collect();
    line_chart(
        "precision-recall at IoU 0.5",
        "recall",
        "precision",
        &series,
    )
}

fn write_report(rc: &RunConfig, name: &str, report: &ApReport) -> Result<()> {
    write(
        &rc.path(name),
        &(serde_json::to_string_pretty(report)? + "\n"),
    )
}

pub fn train(
    mut rc: RunConfig,
    data: &str,
    checkpoint: Option<&Path>,
    steps: Option<usize>,
) -> Result<Outcome> {
    if let Some(s) = steps {
        rc.train.steps = s;
    }
    let split = synth_split(&rc.train)?;
    let train_scenes = if data == "synthetic" {
        split.train.clone()
    } else {
        load_coco_scenes(Path::new(data), &rc.model)?.scenes
    };
    if train_scenes.is_empty() {
        bail!("no training images in {data}");
    }
    let (mut model, mut opt) = match checkpoint {
        Some(p) => load_checkpoint::<f32>(p, Some(&rc.model))
            .with_context(|| format!("resuming from {}", p.display()))?,
        None => {
            let m = build_model::<f32>(&rc.model)?;
            let o = AdamState::new(&m.store);
            (m, o)
        }
    };
    write(&rc.path("config.toml"), &to_toml(&rc.model, &rc.train))?;
    let verbose = rc.verbosity > 0;
    let t0 = Instant::now();
    let mut records = Vec::new();
    run_training(&mut model, &mut opt, &train_scenes, &rc.train, |_, r| {
        if verbose && (r.step % 50 == 0 || r.step == 1) {
            eprintln!(
                "step {} total {:.4} lr {:.3e} ({:.0}s)",
                r.step,
                r.loss.total,
                r.lr,
                t0.elapsed().as_secs_f64()
            );
        }
        records.push(*r);
        Ok(true)
    })?;
    write_loss_csv(&rc.path("loss.csv"), &records)?;
    write(&rc.path("loss.svg"), &loss_svg(&records))?;
    save_checkpoint(rc.path("checkpoint.fdckpt"), &model, &opt)?;
    let (report, _) = evaluate_scenes(&model, &split.val)?;
    write_report(&rc, "eval.json", &report)?;
    match (records.first(), records.last()) {
        (Some(a), Some(b)) => println!(
            "steps {}..{}: loss {:.4} -> {:.4}",
            a.step, b.step, a.loss.total, b.loss.total
        ),
        _ => println!("already at step {}", opt.step),
    }
    println!("held-out AP {:.4} AP50 {:.4}", report.ap, report.ap50);
    Ok(Outcome::Pass)
}

pub fn eval(
    rc: &RunConfig,
    checkpoint: Option<&Path>,
    data: &str,
    detections: Option<&Path>,
) -> Result<Outcome> {
    let (report, dets) = if let Some(dp) = detections {
        if data == "synthetic" {
            bail!("--detections needs --data pointing at annotations");
        }
        let (doc, _) = load_annotations(annotation_path(Path::new(data)))?;
        let dets = load_detections(dp)?;
        (
            ap_evaluate(
                &dets,
                &doc_gts(&doc),
                &doc.category_ids(),
                &AreaRanges::default(),
            )?,
            dets,
        )
    } else {
        let ck = checkpoint.context("eval needs --checkpoint or --detections")?;
        let expected = rc.explicit.then_some(&rc.model);
        let (model, _) = load_checkpoint::<f32>(ck, expected)
            .with_context(|| format!("loading {}", ck.display()))?;
        if data == "synthetic" {
            let mut opts = rc.train.clone();
            if !rc.explicit {
                // the training run's config.toml sits next to its checkpoint
                let sibling = ck.with_file_name("config.toml");
                opts = match sibling.exists() {
                    true => RunConfig::read_file(&sibling)?.1,
                    false => TrainOptions {
                        scene: SynthSceneSpec {
                            seed: model.cfg.seed,
                            ..opts.scene
                        },
                        ..opts
                    },
                };
            }
            evaluate_scenes(&model, &synth_split(&opts)?.val)?
        } else {
            let cs = load_coco_scenes(Path::new(data), &model.cfg)?;
            let mut dets = predict_scenes(&model, &cs.scenes, 1)?;
            for d in &mut dets {
                d.image_id = cs.ids[d.image_id as usize - 1];
            }
            (
                ap_evaluate(
                    &dets,
                    &doc_gts(&cs.doc),
                    &cs.doc.category_ids(),
                    &AreaRanges::default(),
                )?,
                dets,
            )
        }
    };
    write_report(rc, "ap_report.json", &report)?;
    write(&rc.path("pr_curves.svg"), &pr_svg(&report))?;
    export_detections(&dets, rc.path("detections.json"))?;
    println!(
        "AP {:.4} AP50 {:.4} AP75 {:.4} AP_S {:.4} AP_M {:.4} AP_L {:.4}",
        report.ap, report.ap50, report.ap75, report.ap_s, report.ap_m, report.ap_l
    );
    Ok(Outcome::Pass)
}

pub fn stats(rc: &RunConfig, data: &Path, splits: Option<&Path>) -> Result<Outcome> {
    let (doc, report) = load_annotations(annotation_path(data))?;
    for f in &report.unknown_fields {
        eprintln!("warning: unknown field {f}");
    }
    let assignment = match splits {
        Some(dir) => read_split_manifest(dir)?,
        None => embedded_splits(&doc),
    };
    let order: Vec<&str> = SPLIT_NAMES
        .iter()
        .copied()
        .filter(|s| assignment.values().any(|v| v == s))
        .collect();
    let table = dataset_stats(&doc, &assignment, &order);
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    let text = String::from_utf8(buf)?;
    write(&rc.path("stats.csv"), &text)?;
    print!("{text}");
    Ok(Outcome::Pass)
}

fn sweep_configs(base: &ModelConfig, sweep: Sweep) -> Vec<ModelConfig> {
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match sweep {
        Sweep::Window => WINDOW_SWEEP
            .iter()
            .map(|&w| with(&|c| c.saa.window = w))
            .collect(),
        Sweep::Reduction => REDUCTION_SWEEP
            .iter()
            .map(|&r| with(&|c| c.saa.reduction = r))
            .collect(),
        Sweep::Gate => GATE_SWEEP
            .iter()
            .map(|&g| with(&|c| c.saa.gate = GateMode::Frozen(g)))
            .collect(),
        Sweep::Ablation => AblationMode::ALL.iter().map(|m| m.apply(base)).collect(),
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn bench(rc: &RunConfig, sweep: Sweep, iters: usize, train_steps: usize) -> Result<Outcome> {
    let mut base = rc.model.clone();
    let train = (train_steps > 0).then(|| {
        base.optimizer.total_steps = train_steps;
        TrainOptions {
            steps: train_steps,
            ..rc.train.clone()
        }
    });
    let t = train.as_ref();
    let rows: Vec<MetricRow> = match sweep {
        Sweep::Window => window_sweep(&base, &WINDOW_SWEEP, t)?,
        Sweep::Reduction => reduction_sweep(&base, &REDUCTION_SWEEP, t)?,
        Sweep::Gate => gate_sweep(&base, &GATE_SWEEP, t)?,
        Sweep::Ablation => ablation_harness(&base, &AblationMode::ALL, t)?,
    };
    let name = format!("{sweep:?}").to_lowercase();
    let path = rc.path(&format!("bench_{name}.csv"));
    let mut w =
        csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record([
        "sweep",
        "setting",
        "params",
        "flops",
        "ap",
        "ap50",
        "final_loss",
        "latency_ms_mean",
        "latency_ms_p50",
        "fps",
    ])?;
    for (row, cfg) in rows.iter().zip(sweep_configs(&base, sweep)) {
        let lat = latency_bench(&build_model::<f32>(&cfg)?, iters, 10)?;
        if rc.verbosity > 0 {
            eprintln!("{} {}: {:.2} ms", row.sweep, row.setting, lat.mean_ms);
        }
        w.write_record([
            row.sweep.clone(),
            row.setting.clone(),
            row.params.to_string(),
            row.flops.to_string(),
            opt_cell(row.ap),
            opt_cell(row.ap50),
            opt_cell(row.final_loss),
            format!("{:.4}", lat.mean_ms),
            format!("{:.4}", lat.p50_ms),
            format!("{:.2}", lat.fps),
        ])?;
        println!(
            "{:<24} params {:>7}  flops {:>11}",
            row.setting, row.params, row.flops
        );
    }
    w.flush()?;
    let bars: Vec<(String, f64)> = rows
        .iter()
        .map(|r| (r.setting.clone(), r.flops as f64))
        .collect();
    write(
        &rc.path(&format!("bench_{name}.svg")),
        &bar_chart(&format!("{name} sweep: analytic FLOPs"), "FLOPs", &bars),
    )?;
    Ok(Outcome::Pass)
}
