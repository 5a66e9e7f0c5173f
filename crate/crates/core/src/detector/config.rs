use serde::{Deserialize, Serialize};

use crate::attn::SaaConfig;
use crate::error::{Error, Result};
use crate::geom::GduConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneMode {
    Pafc,
    /// Stem plus full-width residual 3x3 conv blocks.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    /// Classification weight of queries left unmatched.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
            no_object: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Half-cosine from `lr` to zero over `total_steps`, no warmup.
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub total_steps: usize,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables.
    #[serde(default)]
    pub grad_clip: f64,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            schedule: Schedule::Cosine,
            total_steps: 2000,
            betas: default_betas(),
            eps: default_adam_eps(),
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `(height, width)`
    pub input_size: (usize, usize),
    /// Output channels of each stride-2 backbone stage.
    pub stage_channels: Vec<usize>,
    pub arb_count: usize,
    #[serde(default = "default_backbone")]
    pub backbone: BackboneMode,
    #[serde(default)]
    pub gdu: GduConfig,
    pub saa: SaaConfig,
    pub query_count: usize,
    pub class_count: usize,
    #[serde(default = "default_decoder_layers")]
    pub decoder_layers: usize,
    pub decoder_ffn: usize,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

fn default_backbone() -> BackboneMode {
    BackboneMode::Pafc
}

fn default_decoder_layers() -> usize {
    2
}

impl Default for ModelConfig {
    /// The documented toy configuration.
    fn default() -> Self {
        Self {
            input_size: (64, 64),
            stage_channels: vec![16, 64],
            arb_count: 3,
            backbone: BackboneMode::Pafc,
            gdu: GduConfig::default(),
            saa: SaaConfig::default(),
            query_count: 25,
            class_count: 3,
            decoder_layers: 2,
            decoder_ffn: 64,
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for end-to-end gradient checks.
    pub fn micro() -> Self {
        Self {
            input_size: (16, 16),
            stage_channels: vec![8, 16],
            arb_count: 2,
            saa: SaaConfig {
                embed_dim: 8,
                heads: 2,
                window: 2,
                reduction: 2,
                ffn_dim: 8,
                ..SaaConfig::default()
            },
            query_count: 4,
            class_count: 3,
            decoder_layers: 2,
            decoder_ffn: 8,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Total downsampling of the backbone.
    pub fn stride(&self) -> usize {
        1 << self.stage_channels.len()
    }

    /// `(H, W)` of the encoder feature map.
    pub fn feature_size(&self) -> (usize, usize) {
        let s = self.stride();
        (self.input_size.0 / s, self.input_size.1 / s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (h, w) = self.input_size;
        if self.stage_channels.is_empty() {
            return bad("at least one backbone stage is required".into());
        }
        if h == 0 || w == 0 || h % self.stride() != 0 || w % self.stride() != 0 {
            return bad(format!("input_size {h}x{w} must be a positive multiple of {}", self.stride()));
        }
        if let Some(c) = self.stage_channels.iter().find(|&&c| c == 0 || c % 2 != 0) {
            return bad(format!("stage channels must be even and positive, got {c}"));
        }
        if self.arb_count == 0 {
            return bad("arb_count must be at least 1".into());
        }
        if self.query_count == 0 || self.class_count == 0 || self.decoder_layers == 0 || self.decoder_ffn == 0 {
            return bad("query_count, class_count, decoder_layers and decoder_ffn must be positive".into());
        }
        let l = &self.loss;
        if ![l.cls, l.l1, l.giou, l.no_object].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return bad(format!("loss weights must be finite and non-negative, got {l:?}"));
        }
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr >= 0.0 && o.weight_decay >= 0.0 && o.eps > 0.0 && o.grad_clip >= 0.0) {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        if !(0.0..1.0).contains(&o.betas.0) || !(0.0..1.0).contains(&o.betas.1) {
            return bad(format!("Adam betas {:?} must lie in [0, 1)", o.betas));
        }
        self.saa.validate()?;
        if self.backbone == BackboneMode::Pafc {
            self.gdu.validate()?;
            let reach = self.gdu.radius();
            let (fh, fw) = self.feature_size();
            if fh.min(fw) < 2 * reach + 1 {
                return bad(format!("feature map {fh}x{fw} smaller than the GDU kernel extent"));
            }
        }
        Ok(())
    }
}
