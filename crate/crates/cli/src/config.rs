//! The single run configuration document.
//!
//! Every CLI flag maps onto one field here; the whole document is echoed
//! into each run's output directory so a run can be reproduced from its
//! artifacts alone. Unknown fields are rejected; missing fields take the
//! defaults below.

use std::fs;
use std::path::Path;

use audiofault_core::audio::ChannelPolicy;
use audiofault_core::augment::AugmentRanges;
use audiofault_core::dataset::synth::SynthConfig;
use audiofault_core::error::{Error, Result};
use audiofault_core::features::SpectrogramParams;
use audiofault_core::model::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for splitting and balancing; `--seed` also copies it
    /// into `synth.seed` and `train.seed`.
    pub seed: u64,
    /// How multi-channel recordings reduce to mono before featurization.
    pub channel_policy: ChannelPolicy,
    /// Train/val/test fractions.
    pub split_fractions: (f64, f64, f64),
    /// How many feature images `prepare` renders as PNG samples.
    pub sample_png_count: usize,
    pub spectrogram: SpectrogramParams,
    pub augment: AugmentRanges,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            channel_policy: ChannelPolicy::SelectChannel(0),
            split_fractions: (0.8, 0.1, 0.1),
            sample_png_count: 8,
            spectrogram: SpectrogramParams::default(),
            augment: AugmentRanges::default(),
            synth: SynthConfig {
                seed: 42,
                ..SynthConfig::default()
            },
            model: ModelConfig::default(),
            train: TrainConfig {
                seed: 42,
                ..TrainConfig::default()
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Propagate one master seed into every seeded stage.
    pub fn set_global_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
    }

    /// Apply one `--set path=value` override; the path is dot-separated
    /// (array indices are numeric segments), the value is parsed as JSON
    /// when possible and treated as a bare string otherwise.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment.split_once('=').ok_or_else(|| {
            Error::Config(format!("override {assignment:?} is not of the form path=value"))
        })?;
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));

        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let mut cursor = &mut doc;
        let segments: Vec<&str> = path.split('.').collect();
        for (i, seg) in segments.iter().enumerate() {
            let last = i + 1 == segments.len();
            let next = match cursor {
                serde_json::Value::Object(map) => map.get_mut(*seg).ok_or_else(|| {
                    Error::Config(format!("no config field {path:?} (unknown key {seg:?})"))
                })?,
                serde_json::Value::Array(items) => {
                    let idx: usize = seg.parse().map_err(|_| {
                        Error::Config(format!("{seg:?} in {path:?} is not an array index"))
                    })?;
                    items.get_mut(idx).ok_or_else(|| {
                        Error::Config(format!("index {idx} out of bounds in {path:?}"))
                    })?
                }
                _ => {
                    return Err(Error::Config(format!(
                        "{path:?} descends into a scalar at {seg:?}"
                    )))
                }
            };
            if last {
                *next = value;
                break;
            }
            cursor = next;
        }
        *self = serde_json::from_value(doc)
            .map_err(|e| Error::Config(format!("override {assignment:?}: {e}")))?;
        Ok(())
    }
}
