use std::path::Path;

use anyhow::{bail, Context, Result};
use apsearch::apmetric::coco_thresholds;
use apsearch::{seed, DatasetConfig, SearchConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// T=15, S=4, 300 inner steps, 200 scenes.
    Desk,
    /// T=40, S=8 with the desk inner loop.
    Paper,
}

/// Everything a command needs. Sub-seeds are always derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub thresholds: Vec<f64>,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (rounds, samples) = match preset {
            Preset::Desk => (15, 4),
            Preset::Paper => (40, 8),
        };
        Self {
            seed: 0,
            dataset: DatasetConfig { scenes: 200, ..DatasetConfig::default() },
            train: TrainConfig { steps: 300, ..TrainConfig::default() },
            search: SearchConfig { rounds, samples, ..SearchConfig::default() },
            thresholds: coco_thresholds(),
        }
    }

    /// Preset, then the JSON file on top (objects merged key by key).
    pub fn load(preset: Preset, path: Option<&Path>) -> Result<Self> {
        let mut base = serde_json::to_value(Self::preset(preset))?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let over: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if !over.is_object() {
                bail!("{}: config must be a JSON object", path.display());
            }
            merge(&mut base, over);
        }
        serde_json::from_value(base).context("invalid config")
    }

    /// Pushes the master seed into every sub-config and validates.
    pub fn resolve(mut self) -> Result<Self> {
        self.dataset.seed = self.seed;
        self.train.seed = seed::derive(self.seed, seed::streams::TRAIN_INIT);
        self.search.seed = self.seed;
        self.dataset.validate()?;
        self.train.validate()?;
        self.search.validate()?;
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            bail!("thresholds must be a non-empty list of values in (0, 1)");
        }
        Ok(self)
    }
}

/// Short names accepted in config files for the canonical keys.
const ALIASES: [(&str, &str); 6] =
    [("T", "rounds"), ("S", "samples"), ("M", "segments"), ("G_max", "g_max"), ("A", "anchors"), ("F", "features")];

fn canonical(key: String) -> String {
    ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, c)| c.to_string())
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let k = canonical(k);
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
