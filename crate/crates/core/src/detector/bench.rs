//! Ablation runs, parameter sweeps, gate statistics and latency timing.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attn::{AttnMode, GateMode};
use crate::autograd::Graph;
use crate::data::SynthScene;
use crate::error::{Error, Result};
use crate::eval::{latency_stats, LatencyStats};
use crate::tensor::{Scalar, Tensor};

use super::config::{BackboneMode, ModelConfig};
use super::flops::count_flops;
use super::model::{build_model, encode, forward, Model};
use super::optim::AdamState;
use super::train::{evaluate_scenes, make_batch, run_training, synth_split, TrainOptions};

pub const WINDOW_SWEEP: [usize; 4] = [1, 2, 4, 8];
pub const GATE_SWEEP: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];
pub const REDUCTION_SWEEP: [usize; 3] = [1, 2, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMode {
    pub saa: bool,
    pub pafc: bool,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode { saa: false, pafc: false },
        AblationMode { saa: true, pafc: false },
        AblationMode { saa: false, pafc: true },
        AblationMode { saa: true, pafc: true },
    ];

    pub fn label(self) -> String {
        let a = if self.saa { "saa" } else { "plain_attn" };
        let b = if self.pafc { "pafc" } else { "plain_conv" };
        format!("{a}+{b}")
    }

    /// `base` with the encoder and backbone switched per the mode. Plain
    /// attention is full self-attention (reduction 1, no local branch).
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.backbone = if self.pafc { BackboneMode::Pafc } else { BackboneMode::Plain };
        if !self.saa {
            cfg.saa.mode = AttnMode::Plain;
            cfg.saa.reduction = 1;
        } else {
            cfg.saa.mode = AttnMode::ScaleAware;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sweep: String,
    pub setting: String,
    pub params: usize,
    pub flops: u64,
    /// Absent when the row was not trained.
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Train from `cfg.seed` for `opts.steps` and evaluate on the held-out split.
fn train_and_score(cfg: &ModelConfig, opts: &TrainOptions) -> Result<(usize, f64, f64, f64)> {
    let data = synth_split(opts)?;
    let mut model = build_model::<f32>(cfg)?;
    let mut opt = AdamState::new(&model.store);
    let mut last = f64::NAN;
    run_training(&mut model, &mut opt, &data.train, opts, |_, rec| {
        last = rec.loss.total;
        Ok(true)
    })?;
    let (rep, _) = evaluate_scenes(&model, &data.val)?;
    Ok((model.param_count(), rep.ap, rep.ap50, last))
}

fn row(sweep: &str, setting: String, cfg: &ModelConfig, opts: Option<&TrainOptions>) -> Result<MetricRow> {
    let flops = count_flops(cfg).total();
    match opts {
        Some(o) if o.steps > 0 => {
            let (params, ap, ap50, loss) = train_and_score(cfg, o)?;
            Ok(MetricRow {
                sweep: sweep.into(),
                setting,
                params,
                flops,
                ap: Some(ap),
                ap50: Some(ap50),
                final_loss: Some(loss),
            })
        }
        _ => Ok(MetricRow {
            sweep: sweep.into(),
            setting,
            params: build_model::<f32>(cfg)?.param_count(),
            flops,
            ap: None,
            ap50: None,
            final_loss: None,
        }),
    }
}

/// One row per mode. Rows are trained when `train` is given.
pub fn ablation_harness(base: &ModelConfig, modes: &[AblationMode], train: Option<&TrainOptions>) -> Result<Vec<MetricRow>> {
    modes.iter().map(|m| row("ablation", m.label(), &m.apply(base), train)).collect()
}

pub fn window_sweep(base: &ModelConfig, windows: &[usize], train: Option<&TrainOptions>) -> Result<Vec<MetricRow>> {
    windows
        .iter()
        .map(|&w| {
            let mut cfg = base.clone();
            cfg.saa.window = w;
            row("window", w.to_string(), &cfg, train)
        })
        .collect()
}

/// Frozen gate weights on the global branch.
pub fn gate_sweep(base: &ModelConfig, ratios: &[f64], train: Option<&TrainOptions>) -> Result<Vec<MetricRow>> {
    ratios
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            cfg.saa.gate = GateMode::Frozen(v);
            row("gate", format!("{v:.1}"), &cfg, train)
        })
        .collect()
}

pub fn reduction_sweep(base: &ModelConfig, reductions: &[usize], train: Option<&TrainOptions>) -> Result<Vec<MetricRow>> {
    reductions
        .iter()
        .map(|&r| {
            let mut cfg = base.clone();
            cfg.saa.reduction = r;
            row("reduction", r.to_string(), &cfg, train)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Share of pixels weighting the global branch above one half.
    pub global_share: f64,
}

/// Distribution of the encoder gate over `scenes`; `None` without a gate.
pub fn gate_statistics<T: Scalar>(model: &Model<T>, scenes: &[SynthScene]) -> Result<Option<GateStats>> {
    if model.cfg.saa.mode == AttnMode::Plain || scenes.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&SynthScene> = scenes.iter().collect();
    let batch = make_batch::<T>(&refs, &[])?;
    let mut g = Graph::inference();
    let p = model.store.bind(&mut g, false);
    let x = g.constant(batch.images);
    let (_, gate) = encode(&mut g, &p, model, x)?;
    let gate = gate.ok_or_else(|| Error::Config("encoder produced no gate".into()))?;
    let v = g.value(gate).to_f64_vec();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(Some(GateStats {
        mean,
        std: var.sqrt(),
        min: v.iter().copied().fold(f64::INFINITY, f64::min),
        max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        global_share: v.iter().filter(|&&x| x > 0.5).count() as f64 / n,
    }))
}

/// Wall-clock single-image forward timing after at least 10 warmup runs.
pub fn latency_bench<T: Scalar>(model: &Model<T>, iters: usize, warmup: usize) -> Result<LatencyStats> {
    let (h, w) = model.cfg.input_size;
    let img = Tensor::<T>::rand_uniform(&[1, 3, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(model.cfg.seed));
    let run = || -> Result<()> {
        let mut g = Graph::inference();
        let p = model.store.bind(&mut g, false);
        let x = g.constant(img.clone());
        forward(&mut g, &p, model, x)?;
        Ok(())
    };
    for _ in 0..warmup.max(10) {
        run()?;
    }
    let mut samples = Vec::with_capacity(iters.max(1));
    for _ in 0..iters.max(1) {
        let t = Instant::now();
        run()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(latency_stats(&samples))
}
