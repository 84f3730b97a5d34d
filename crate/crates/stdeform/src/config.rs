//! Flat `key = value` model configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! preset = desk
//! t = 2
//! h = 4
//! w = 4
//! c = 24
//! heads = 2
//! points = 4
//! ```
//!
//! Unknown or repeated keys are rejected. `preset` is applied before every
//! other key regardless of its position. When `c` is given without `c_in` or
//! `ffn_hidden`, those follow it (`c_in = c`, `ffn_hidden = 4c`).

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use stdeform_core::blocks::{Activation, ModelConfig};
use stdeform_core::deform::InitMode;

use crate::error::{CliError, CliResult};

pub const KEYS: [&str; 16] = [
    "preset",
    "t",
    "h",
    "w",
    "c",
    "c_in",
    "heads",
    "points",
    "layers_enc",
    "layers_dec",
    "num_queries",
    "seed",
    "init",
    "ffn_hidden",
    "activation",
    "readd_pos",
];

/// Named starting points for a model configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(),
            Preset::Paper => ModelConfig::paper(),
        }
    }
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(format!("unknown preset `{s}` (expected desk or paper)")),
        }
    }
}

/// Model configuration plus the keys a config file set explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    explicit: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new(base: Preset) -> Self {
        RunConfig {
            model: base.model(),
            seed: 0,
            explicit: BTreeMap::new(),
        }
    }

    /// Reads and parses `path` on top of `base`.
    pub fn load(path: &Path, base: Preset) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::ConfigRead {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: Preset) -> CliResult<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::config(format!("line {}: expected `key = value`", n + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(CliError::config(format!(
                    "line {}: unknown key `{key}`",
                    n + 1
                )));
            }
            if value.is_empty() {
                return Err(CliError::config(format!(
                    "line {}: `{key}` has no value",
                    n + 1
                )));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(CliError::config(format!(
                    "line {}: `{key}` given twice",
                    n + 1
                )));
            }
        }
        let preset = match entries.get("preset") {
            Some(v) => v.parse().map_err(CliError::Config)?,
            None => base,
        };
        let mut cfg = RunConfig {
            model: preset.model(),
            seed: 0,
            explicit: entries,
        };
        cfg.apply()?;
        Ok(cfg)
    }

    fn apply(&mut self) -> CliResult<()> {
        let m = &mut self.model;
        for (key, value) in &self.explicit {
            match key.as_str() {
                "preset" => {}
                "t" => m.grid.t = positive(key, value)?,
                "h" => m.grid.h = positive(key, value)?,
                "w" => m.grid.w = positive(key, value)?,
                "c" => m.channels = positive(key, value)?,
                "c_in" => m.input_channels = positive(key, value)?,
                "heads" => m.heads = positive(key, value)?,
                "points" => m.points = positive(key, value)?,
                "layers_enc" => m.layers_enc = number(key, value)?,
                "layers_dec" => m.layers_dec = positive(key, value)?,
                "num_queries" => m.num_queries = positive(key, value)?,
                "ffn_hidden" => m.ffn_hidden = positive(key, value)?,
                "seed" => self.seed = number(key, value)?,
                "init" => {
                    m.init = match value.as_str() {
                        "pattern" => InitMode::Pattern,
                        "random" => InitMode::Random,
                        _ => return Err(bad(key, value, "pattern or random")),
                    }
                }
                "activation" => {
                    m.activation = match value.as_str() {
                        "gelu" => Activation::Gelu,
                        "silu" => Activation::Silu,
                        _ => return Err(bad(key, value, "gelu or silu")),
                    }
                }
                "readd_pos" => {
                    m.readd_pos = value
                        .parse()
                        .map_err(|_| bad(key, value, "true or false"))?
                }
                _ => unreachable!("keys are checked while parsing"),
            }
        }
        let set = |k: &str| self.explicit.contains_key(k);
        if set("c") {
            if !set("c_in") {
                m.input_channels = m.channels;
            }
            if !set("ffn_hidden") {
                m.ffn_hidden = 4 * m.channels;
            }
        }
        m.validate().map_err(|e| CliError::config(e.to_string()))
    }

    /// Whether the config file set `key`.
    pub fn is_set(&self, key: &str) -> bool {
        self.explicit.contains_key(key)
    }

    /// `cli` if given, else the model value when the file set `key`, else `default`.
    pub fn pick(&self, cli: Option<usize>, key: &str, default: usize) -> usize {
        let from_file = || match key {
            "c" => self.model.channels,
            "heads" => self.model.heads,
            "points" => self.model.points,
            other => panic!("no model field for `{other}`"),
        };
        cli.unwrap_or_else(|| {
            if self.is_set(key) {
                from_file()
            } else {
                default
            }
        })
    }
}

fn number<T: FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| bad(key, value, "a non-negative integer"))
}

fn positive(key: &str, value: &str) -> CliResult<usize> {
    match number::<usize>(key, value)? {
        0 => Err(bad(key, value, "a positive integer")),
        v => Ok(v),
    }
}

fn bad(key: &str, value: &str, expected: &str) -> CliError {
    CliError::config(format!("`{key} = {value}`: expected {expected}"))
}
