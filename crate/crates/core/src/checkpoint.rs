//! Versioned JSON container for a trained model.
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! save/load cycle reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::denoiser::{Denoiser, DenoiserConfig, Layer};
use crate::diffusion::{NoiseSchedule, ScheduleParams, TrainReport};
use crate::{Error, Result};

pub const FORMAT: &str = "tsedit-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form description of the training data, e.g. `sines`.
    pub label: String,
    pub schedule: ScheduleParams,
    pub model: Denoiser,
    pub norm: Normalization,
    pub train_report: Option<TrainReport>,
}

#[derive(Serialize, Deserialize)]
struct Stored {
    format: String,
    version: u32,
    label: String,
    schedule: ScheduleParams,
    denoiser: DenoiserConfig,
    layers: Vec<Layer>,
    norm: Normalization,
    #[serde(default)]
    train_report: Option<TrainReport>,
}

impl Checkpoint {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_params(self.schedule)
    }

    pub fn to_json(&self) -> Result<String> {
        let stored = Stored {
            format: FORMAT.into(),
            version: VERSION,
            label: self.label.clone(),
            schedule: self.schedule,
            denoiser: self.model.config().clone(),
            layers: self.model.layers().to_vec(),
            norm: self.norm.clone(),
            train_report: self.train_report.clone(),
        };
        Ok(serde_json::to_string(&stored)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stored: Stored = serde_json::from_str(text)?;
        if stored.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", stored.format)));
        }
        if stored.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {VERSION})",
                stored.version
            )));
        }
        if stored.schedule.steps != stored.denoiser.diffusion_steps {
            return Err(Error::Checkpoint(format!(
                "schedule has {} steps but the denoiser embeds {}",
                stored.schedule.steps, stored.denoiser.diffusion_steps
            )));
        }
        if stored.norm.ranges.len() != stored.denoiser.channels {
            return Err(Error::Checkpoint("normalization does not match channel count".into()));
        }
        NoiseSchedule::from_params(stored.schedule)?;
        Ok(Checkpoint {
            label: stored.label,
            schedule: stored.schedule,
            model: Denoiser::from_parts(stored.denoiser, stored.layers)?,
            norm: stored.norm,
            train_report: stored.train_report,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Checkpoint::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let cfg = DenoiserConfig {
            len: 5,
            channels: 2,
            hidden: vec![7],
            embed_dim: 4,
            diffusion_steps: 12,
        };
        Checkpoint {
            label: "sines".into(),
            schedule: ScheduleParams {
                steps: 12,
                beta_min: 1e-4,
                beta_max: 0.02,
            },
            model: Denoiser::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap(),
            norm: Normalization {
                ranges: vec![(0.1 + 0.2, 1.0 / 3.0), (-7.25, 1e-300)],
            },
            train_report: None,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.model.layers().iter().zip(ck.model.layers()) {
            let bits = |t: &crate::autodiff::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.weight), bits(&b.weight));
        }
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn rejects_foreign_or_inconsistent_files() {
        let text = sample().to_json().unwrap();
        assert!(Checkpoint::from_json(&text.replace(FORMAT, "other")).is_err());
        assert!(Checkpoint::from_json(&text.replace("\"version\":1", "\"version\":9")).is_err());
        assert!(Checkpoint::from_json("{}").is_err());
    }
}
