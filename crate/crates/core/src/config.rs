//! Run configuration, read from TOML with one table per subsystem.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{domain, Error, Result};
use crate::losses::LossConfig;
use crate::model::Arch;
use crate::oracle::NoiseConfig;
use crate::sampler::SamplerConfig;
use crate::schedule::{Schedule, DEFAULT_GRID_SIZE};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleChoice {
    #[default]
    Linear,
    BlendedArgmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub kind: ScheduleChoice,
    pub lambda_blend: f64,
    pub mc_samples: usize,
    pub grid_size: usize,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleChoice::Linear,
            lambda_blend: 0.9,
            mc_samples: 50_000,
            grid_size: DEFAULT_GRID_SIZE,
            seed: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self, vocab: usize, noise: &NoiseConfig) -> Result<Schedule> {
        match self.kind {
            ScheduleChoice::Linear => Ok(Schedule::linear()),
            ScheduleChoice::BlendedArgmax => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                Schedule::blended_argmax(
                    self.lambda_blend,
                    vocab,
                    noise.std,
                    self.mc_samples,
                    self.grid_size,
                    &mut rng,
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_width: usize,
    pub n_layers: usize,
    pub conditional: bool,
    /// Longest context a conditional model accepts; 0 is unbounded.
    pub max_context: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_width: 64,
            n_layers: 2,
            conditional: false,
            max_context: 0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn arch(&self, seq_len: usize, vocab: usize) -> Result<Arch> {
        let mut a = Arch::new(self.hidden_width, self.n_layers, seq_len, vocab);
        if self.conditional {
            a = a.conditional(self.max_context);
        }
        a.validate()?;
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub noise: NoiseConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise.std > 0.0) {
            return domain("noise.std must be positive");
        }
        self.loss.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = Config::default();
        let back = Config::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = Config::parse(
            "[schedule]\nkind = \"blended-argmax\"\n[loss]\nkind = \"esd\"\n[train]\nsteps = 7\n[noise]\nstd = 0.5\n",
        )
        .unwrap();
        assert_eq!(c.schedule.kind, ScheduleChoice::BlendedArgmax);
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.noise.std, 0.5);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::parse("[train]\nlr = -1.0\n").is_err());
        assert!(Config::parse("[loss]\nadaptive_c = 0.0\n").is_err());
        assert!(Config::parse("[sampler]\nnfe = 0\n").is_err());
        assert!(Config::parse("[noise]\nstd = 0.0\n").is_err());
        assert!(Config::parse("not toml [").is_err());
    }

    #[test]
    fn builds_schedules() {
        let n = NoiseConfig::default();
        let lin = ScheduleConfig::default().build(4, &n).unwrap();
        assert_eq!(lin, Schedule::linear());
        let cfg = ScheduleConfig {
            kind: ScheduleChoice::BlendedArgmax,
            mc_samples: 5000,
            grid_size: 33,
            ..Default::default()
        };
        let a = cfg.build(4, &n).unwrap();
        assert_eq!(a, cfg.build(4, &n).unwrap());
        assert_eq!(a.beta(1.0), 1.0);
    }
}
