//! Run configuration: model, optimizer and data settings in one flat
//! `key = value` file, with command-line overrides.

use std::path::PathBuf;

use pointssm_core::config::{parse_bool, parse_flat, parse_value};
use pointssm_core::model::{ModelConfig, MODEL_KEYS};
use pointssm_core::train::{TrainConfig, TRAIN_KEYS};
use pointssm_core::{Error, Result};

/// Environment variable that overrides `out_dir` from a config file.
pub const OUT_ENV: &str = "POINTSSM_OUT";

/// Source of the synthetic dataset, or a directory written by `synth`.
pub const SYNTHETIC: &str = "synthetic";

pub const DATA_KEYS: &[&str] = &[
    "train_data",
    "test_data",
    "train_per_class",
    "test_per_class",
    "n_points",
    "data_seed",
    "augment",
    "out_dir",
];

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// [`SYNTHETIC`] or a directory holding `manifest.csv`.
    pub train_data: String,
    pub test_data: String,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub n_points: usize,
    pub seed: u64,
    pub augment: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_data: SYNTHETIC.into(),
            test_data: SYNTHETIC.into(),
            train_per_class: 200,
            test_per_class: 50,
            n_points: 256,
            seed: 0,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    /// The desk recipe: 8 synthetic classes, 200/50 clouds per class of 256
    /// points, 8 epochs.
    fn default() -> Self {
        Self {
            model: ModelConfig {
                head_pool: true,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                lr: 1e-3,
                warmup_epochs: 1,
                epochs: 8,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
            out_dir: PathBuf::from("runs/latest"),
        }
    }
}

pub fn valid_keys() -> Vec<&'static str> {
    MODEL_KEYS
        .iter()
        .chain(TRAIN_KEYS)
        .chain(DATA_KEYS)
        .copied()
        .collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? || self.train.set(key, value)? {
            return Ok(());
        }
        let d = &mut self.data;
        match key {
            "train_data" => d.train_data = value.to_string(),
            "test_data" => d.test_data = value.to_string(),
            "train_per_class" => d.train_per_class = parse_value(key, value)?,
            "test_per_class" => d.test_per_class = parse_value(key, value)?,
            "n_points" => d.n_points = parse_value(key, value)?,
            "data_seed" => d.seed = parse_value(key, value)?,
            "augment" => d.augment = parse_bool(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{key}`; valid keys: {}",
                    valid_keys().join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Defaults, then the file's settings in order.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_flat(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let need = self.model.num_groups.max(self.model.group_size);
        if self.data.n_points < need {
            return Err(Error::Config(format!(
                "n_points = {} is below max(num_groups, group_size) = {need}",
                self.data.n_points
            )));
        }
        if self.data.train_per_class == 0 {
            return Err(Error::Config("train_per_class must be positive".into()));
        }
        Ok(())
    }

    /// Every setting, one per line; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let data = [
            ("train_data", d.train_data.clone()),
            ("test_data", d.test_data.clone()),
            ("train_per_class", d.train_per_class.to_string()),
            ("test_per_class", d.test_per_class.to_string()),
            ("n_points", d.n_points.to_string()),
            ("data_seed", d.seed.to_string()),
            ("augment", d.augment.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ];
        let mut out = String::from("# model\n");
        let line = |(k, v): (&str, String)| format!("{k} = {v}\n");
        out.extend(self.model.to_pairs().into_iter().map(line));
        out.push_str("\n# optimizer\n");
        out.extend(self.train.to_pairs().into_iter().map(line));
        out.push_str("\n# data\n");
        out.extend(data.into_iter().map(line));
        out
    }
}

/// Reads `--key value` or `--key=value` pairs; dashes in keys become
/// underscores.
pub fn parse_overrides(args: &[String]) -> std::result::Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let body = arg
            .strip_prefix("--")
            .ok_or_else(|| format!("expected `--key value`, got `{arg}`"))?;
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| format!("`--{body}` needs a value"))?;
                (body.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}
