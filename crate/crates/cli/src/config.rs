//! Run configuration: a model config file with an optional `[train]` table.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use flowdet_core::detector::{ModelConfig, TrainOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainOptions,
    pub out: PathBuf,
    pub verbosity: u8,
    /// A config file was given, so checkpoints must match `model`.
    pub explicit: bool,
}

impl RunConfig {
    /// Defaults, overlaid by `path` when given. `seed` replaces both the
    /// model seed and the scene seed.
    pub fn load(path: Option<&Path>, seed: Option<u64>, out: &Path, verbosity: u8) -> Result<Self> {
        let (mut model, mut train) = match path {
            Some(p) => Self::read_file(p)?,
            None => (ModelConfig::default(), TrainOptions::default()),
        };
        if let Some(s) = seed {
            model.seed = s;
            train.scene.seed = s;
        }
        train.steps = model.optimizer.total_steps;
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            model,
            train,
            out: out.to_path_buf(),
            verbosity,
            explicit: path.is_some(),
        })
    }

    pub fn read_file(p: &Path) -> Result<(ModelConfig, TrainOptions)> {
        let text =
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        parse(&text).with_context(|| format!("in {}", p.display()))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn parse(text: &str) -> Result<(ModelConfig, TrainOptions)> {
    let mut table: toml::Table = toml::from_str(text)?;
    let train = match table.remove("train") {
        Some(v) => v.try_into::<TrainOptions>().context("[train]")?,
        None => TrainOptions::default(),
    };
    let model = ModelConfig::from_toml(&toml::to_string(&table)?)?;
    Ok((model, train))
}

/// The effective configuration as a file `load` accepts.
pub fn to_toml(model: &ModelConfig, train: &TrainOptions) -> String {
    let mut table: toml::Table = toml::from_str(&model.to_toml()).expect("valid toml");
    table.insert(
        "train".into(),
        toml::Value::try_from(train).expect("serializable"),
    );
    toml::to_string(&table).expect("serializable")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut m = ModelConfig::micro();
        m.seed = 9;
        let t = TrainOptions {
            batch_size: 3,
            ..TrainOptions::default()
        };
        assert_eq!(parse(&to_toml(&m, &t)).unwrap(), (m, t));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{}\nbogus = 1\n", ModelConfig::default().to_toml());
        assert!(parse(&text).is_err());
        let mut t: toml::Table =
            toml::from_str(&to_toml(&ModelConfig::default(), &TrainOptions::default())).unwrap();
        t["train"]
            .as_table_mut()
            .unwrap()
            .insert("bogus".into(), 1.into());
        assert!(parse(&toml::to_string(&t).unwrap()).is_err());
    }

    #[test]
    fn seed_reaches_model_and_scenes() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("nested/out");
        let rc = RunConfig::load(None, Some(42), &out, 0).unwrap();
        assert_eq!((rc.model.seed, rc.train.scene.seed), (42, 42));
        assert!(out.is_dir());
    }
}
