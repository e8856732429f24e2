use crate::config::{fmt_f64, parse_bool, parse_flat, parse_value};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub num_groups: usize,
    pub group_size: usize,
    pub lgp_neighbors: usize,
    pub cofe_groups: usize,
    pub ssm_state: usize,
    pub num_classes: usize,
    pub drop_path_rate: f64,
    pub seed: u64,
    pub use_cofe: bool,
    pub use_geo_weights: bool,
    pub ssm_gate: bool,
    pub share_rev_weights: bool,
    /// Concatenate a max-pool over patch tokens to the class token.
    pub head_pool: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            dim: 64,
            num_groups: 32,
            group_size: 16,
            lgp_neighbors: 8,
            cofe_groups: 4,
            ssm_state: 8,
            num_classes: 8,
            drop_path_rate: 0.1,
            seed: 0,
            use_cofe: true,
            use_geo_weights: true,
            ssm_gate: true,
            share_rev_weights: false,
            head_pool: false,
        }
    }
}

pub const MODEL_KEYS: &[&str] = &[
    "depth",
    "dim",
    "num_groups",
    "group_size",
    "lgp_neighbors",
    "cofe_groups",
    "ssm_state",
    "num_classes",
    "drop_path_rate",
    "seed",
    "use_cofe",
    "use_geo_weights",
    "ssm_gate",
    "share_rev_weights",
    "head_pool",
];

impl ModelConfig {
    /// Full-size setting: 12 layers of width 384 over 128 patches of 32
    /// points, 40 classes.
    pub fn full_size() -> Self {
        Self {
            depth: 12,
            dim: 384,
            num_groups: 128,
            group_size: 32,
            lgp_neighbors: 8,
            cofe_groups: 16,
            ssm_state: 16,
            num_classes: 40,
            drop_path_rate: 0.1,
            ..Self::default()
        }
    }

    /// Smallest setting used by the end-to-end gradient check.
    pub fn toy() -> Self {
        Self {
            depth: 1,
            dim: 16,
            num_groups: 8,
            group_size: 4,
            lgp_neighbors: 4,
            cofe_groups: 4,
            ssm_state: 4,
            num_classes: 4,
            drop_path_rate: 0.0,
            ..Self::default()
        }
    }

    /// Applies one `key = value` setting; `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "depth" => self.depth = parse_value(key, value)?,
            "dim" => self.dim = parse_value(key, value)?,
            "num_groups" => self.num_groups = parse_value(key, value)?,
            "group_size" => self.group_size = parse_value(key, value)?,
            "lgp_neighbors" => self.lgp_neighbors = parse_value(key, value)?,
            "cofe_groups" => self.cofe_groups = parse_value(key, value)?,
            "ssm_state" => self.ssm_state = parse_value(key, value)?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "drop_path_rate" => self.drop_path_rate = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "use_cofe" => self.use_cofe = parse_bool(key, value)?,
            "use_geo_weights" => self.use_geo_weights = parse_bool(key, value)?,
            "ssm_gate" => self.ssm_gate = parse_bool(key, value)?,
            "share_rev_weights" => self.share_rev_weights = parse_bool(key, value)?,
            "head_pool" => self.head_pool = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("depth", self.depth.to_string()),
            ("dim", self.dim.to_string()),
            ("num_groups", self.num_groups.to_string()),
            ("group_size", self.group_size.to_string()),
            ("lgp_neighbors", self.lgp_neighbors.to_string()),
            ("cofe_groups", self.cofe_groups.to_string()),
            ("ssm_state", self.ssm_state.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("drop_path_rate", fmt_f64(self.drop_path_rate)),
            ("seed", self.seed.to_string()),
            ("use_cofe", self.use_cofe.to_string()),
            ("use_geo_weights", self.use_geo_weights.to_string()),
            ("ssm_gate", self.ssm_gate.to_string()),
            ("share_rev_weights", self.share_rev_weights.to_string()),
            ("head_pool", self.head_pool.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Reads text written by [`ModelConfig::to_text`]; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_flat(text)? {
            if !cfg.set(&k, &v)? {
                return Err(Error::Config(format!(
                    "unknown key `{k}`; valid keys: {}",
                    MODEL_KEYS.join(", ")
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("dim", self.dim),
            ("num_groups", self.num_groups),
            ("group_size", self.group_size),
            ("lgp_neighbors", self.lgp_neighbors),
            ("cofe_groups", self.cofe_groups),
            ("ssm_state", self.ssm_state),
            ("num_classes", self.num_classes),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        if !self.dim.is_multiple_of(self.cofe_groups) {
            return Err(Error::Config(format!(
                "cofe_groups = {} does not divide dim = {}",
                self.cofe_groups, self.dim
            )));
        }
        if self.lgp_neighbors > self.num_groups {
            return Err(Error::Config(format!(
                "lgp_neighbors = {} exceeds num_groups = {}",
                self.lgp_neighbors, self.num_groups
            )));
        }
        if !(0.0..=1.0).contains(&self.drop_path_rate) {
            return Err(Error::Config("drop_path_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}
