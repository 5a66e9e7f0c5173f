//! Analytic multiply-add counts (2 FLOPs per multiply-add) for a single
//! image. Normalization, activations and other elementwise work are not
//! counted.

use serde::{Deserialize, Serialize};

use crate::attn::{AttnMode, GateMode, SaaConfig};
use crate::geom::GduConfig;

use super::config::{BackboneMode, ModelConfig};

/// `2 * O * (C / groups) * kh * kw * H' * W'`
pub fn conv_flops(c_in: usize, c_out: usize, kh: usize, kw: usize, h_out: usize, w_out: usize, groups: usize) -> u64 {
    2 * (c_out * (c_in / groups.max(1)) * kh * kw * h_out * w_out) as u64
}

/// Dense projection of `tokens` rows.
pub fn linear_flops(tokens: usize, d_in: usize, d_out: usize) -> u64 {
    2 * (tokens * d_in * d_out) as u64
}

/// Logits plus the weighted value sum: `2 * Tq * Tk * d` each.
pub fn attention_flops(tq: usize, tk: usize, d: usize) -> u64 {
    4 * (tq * tk * d) as u64
}

/// Output extent of a `k x k` convolution with padding `k / 2`.
pub fn conv_out(n: usize, k: usize, stride: usize) -> usize {
    (n + 2 * (k / 2) - k) / stride + 1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopEntry {
    pub module: String,
    pub layer: String,
    pub flops: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub entries: Vec<FlopEntry>,
}

impl FlopReport {
    fn push(&mut self, module: &str, layer: &str, flops: u64) {
        self.entries.push(FlopEntry {
            module: module.to_string(),
            layer: layer.to_string(),
            flops,
        });
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    /// Sum over entries whose module equals `module` or starts with
    /// `module.`.
    pub fn module_total(&self, module: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.module == module || e.module.starts_with(&format!("{module}.")))
            .map(|e| e.flops)
            .sum()
    }

    pub fn get(&self, module: &str, layer: &str) -> Option<u64> {
        self.entries.iter().find(|e| e.module == module && e.layer == layer).map(|e| e.flops)
    }

    /// `(module, total)` in first-appearance order.
    pub fn per_module(&self) -> Vec<(String, u64)> {
        let mut out: Vec<(String, u64)> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|(m, _)| *m == e.module) {
                Some(slot) => slot.1 += e.flops,
                None => out.push((e.module.clone(), e.flops)),
            }
        }
        out
    }
}

fn gdu_flops(r: &mut FlopReport, module: &str, c: usize, h: usize, w: usize, cfg: &GduConfig) {
    let hw = h * w;
    let k = cfg.k();
    r.push(module, "trunk_depthwise", conv_flops(c, c, 3, 3, h, w, c));
    r.push(module, "trunk_pointwise", conv_flops(c, c, 1, 1, h, w, 1));
    for b in &cfg.branches {
        let name = b.name();
        r.push(module, &format!("{name}.offset_head"), conv_flops(c, 2 * k, 1, 1, h, w, 1));
        r.push(module, &format!("{name}.mod_head"), conv_flops(c, k, 1, 1, h, w, 1));
        r.push(module, &format!("{name}.bilinear"), 2 * 4 * (c * k * hw) as u64);
        r.push(module, &format!("{name}.aggregate"), 2 * (c * c * k * hw) as u64);
    }
    r.push(module, "merge", conv_flops(c, c, 1, 1, h, w, 1));
}

/// Encoder layer on an `h x w` map.
pub fn saa_flops(r: &mut FlopReport, module: &str, cfg: &SaaConfig, h: usize, w: usize) {
    let d = cfg.embed_dim;
    let t = h * w;
    if cfg.mode == AttnMode::ScaleAware {
        let win = cfg.window;
        let tp = h.div_ceil(win) * win * w.div_ceil(win) * win;
        let m = format!("{module}.ldb");
        r.push(&m, "qkv_proj", 3 * linear_flops(tp, d, d));
        r.push(&m, "attention", attention_flops(tp, win * win, d));
        r.push(&m, "out_proj", linear_flops(tp, d, d));
    }
    let red = cfg.reduction;
    let tk = h.div_ceil(red) * w.div_ceil(red);
    let m = format!("{module}.gcb");
    r.push(&m, "q_proj", linear_flops(t, d, d) + linear_flops(t, d, d));
    r.push(&m, "kv_path", 3 * linear_flops(tk, d, d));
    r.push(&m, "attention", attention_flops(t, tk, d));
    r.push(&m, "out_proj", linear_flops(t, d, d));
    if cfg.mode == AttnMode::ScaleAware {
        if cfg.gate == GateMode::Learned {
            r.push(module, "gate", conv_flops(d, 1, 1, 1, h, w, 1));
        }
        r.push(module, "cross", conv_flops(d, d, 1, 1, h, w, 1));
    }
    r.push(module, "ffn", conv_flops(d, cfg.ffn_dim, 1, 1, h, w, 1) + conv_flops(cfg.ffn_dim, d, 1, 1, h, w, 1));
}

/// Per-layer counts for one `input_size` image.
pub fn count_flops(cfg: &ModelConfig) -> FlopReport {
    let mut r = FlopReport::default();
    let (mut h, mut w) = cfg.input_size;
    let mut c_in = 3;
    for (s, &c) in cfg.stage_channels.iter().enumerate() {
        let module = format!("stage{s}");
        let (ho, wo) = (conv_out(h, 3, 2), conv_out(w, 3, 2));
        r.push(&module, "stem", conv_flops(c_in, c, 3, 3, ho, wo, 1));
        match cfg.backbone {
            BackboneMode::Pafc => {
                let half = c / 2;
                for a in 0..cfg.arb_count - 1 {
                    let m = format!("{module}.arb{a}");
                    gdu_flops(&mut r, &format!("{m}.gdu"), half, ho, wo, &cfg.gdu);
                    r.push(&m, "proj", conv_flops(half, half, 1, 1, ho, wo, 1));
                }
                r.push(&module, "fusion", conv_flops(half * (cfg.arb_count + 1), c, 1, 1, ho, wo, 1));
            }
            BackboneMode::Plain => {
                for b in 0..cfg.arb_count - 1 {
                    r.push(&format!("{module}.block{b}"), "convs", 2 * conv_flops(c, c, 3, 3, ho, wo, 1));
                }
            }
        }
        (h, w, c_in) = (ho, wo, c);
    }
    let d = cfg.saa.embed_dim;
    if c_in != d {
        r.push("input_proj", "conv", conv_flops(c_in, d, 1, 1, h, w, 1));
    }
    saa_flops(&mut r, "encoder", &cfg.saa, h, w);
    let (q, t) = (cfg.query_count, h * w);
    for l in 0..cfg.decoder_layers {
        let m = format!("decoder{l}");
        r.push(&m, "q_proj", linear_flops(q, d, d));
        r.push(&m, "kv_proj", 2 * linear_flops(t, d, d));
        r.push(&m, "attention", attention_flops(q, t, d));
        r.push(&m, "out_proj", linear_flops(q, d, d));
        r.push(&m, "ffn", 2 * linear_flops(q, d, cfg.decoder_ffn));
    }
    r.push("heads", "class", linear_flops(q, d, cfg.class_count + 1));
    r.push("heads", "box", linear_flops(q, d, d) + linear_flops(q, d, 4));
    r
}
