use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::scoring::ScoreConfig;
use crate::surgery::AdaptationPlan;

/// Synthetic task parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Number of non-blank symbols; must match the model vocabulary.
    pub vocab: usize,
    /// Inclusive range of label lengths.
    pub seq_len_range: [usize; 2],
    pub frames_per_symbol: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { vocab: 8, seq_len_range: [3, 8], frames_per_symbol: 8, noise_std: 0.0, seed: 7 }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab < 2 {
            return bad(format!("data vocab {} must be at least 2", self.vocab));
        }
        if self.frames_per_symbol < 4 {
            return bad(format!("frames_per_symbol {} is below the stride of 4", self.frames_per_symbol));
        }
        let [lo, hi] = self.seq_len_range;
        if lo == 0 || lo > hi {
            return bad(format!("seq_len_range [{lo}, {hi}] is empty or starts at 0"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} invalid", self.noise_std));
        }
        Ok(())
    }
}

/// Optimisation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Seeds the scaling coin and surgery noise.
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            total_steps: 3000,
            batch_size: 8,
            lr_start: 4e-6,
            lr_peak: 4e-4,
            lr_final: 1e-7,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            seed: 11,
        }
    }
}

/// Everything a training run depends on. A missing `plan` section means the
/// run never performs surgery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub score: ScoreConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<AdaptationPlan>,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub data: DataConfig,
}

impl Default for TrainConfig {
    /// The desk-scale run: one event at 20% of 3000 steps, δ = 0.15, taylor scores.
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            score: ScoreConfig::default(),
            plan: Some(AdaptationPlan { noise_std: 0.0, ..AdaptationPlan::default() }),
            train: TrainSettings::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.dims()?;
        self.score.validate()?;
        self.data.validate()?;
        let t = &self.train;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if t.total_steps == 0 || t.batch_size == 0 {
            return bad("total_steps and batch_size must be positive".into());
        }
        if !(t.lr_final > 0.0 && t.lr_final < t.lr_start && t.lr_start < t.lr_peak) {
            return bad(format!(
                "learning rates must satisfy 0 < final ({}) < start ({}) < peak ({})",
                t.lr_final, t.lr_start, t.lr_peak
            ));
        }
        if !(0.0..1.0).contains(&t.adam_beta1)
            || !(0.0..1.0).contains(&t.adam_beta2)
            || t.adam_eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
        {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.data.vocab != self.model.vocab {
            return bad(format!("data vocab {} differs from model vocab {}", self.data.vocab, self.model.vocab));
        }
        if let Some(plan) = &self.plan {
            plan.event_steps(t.total_steps)?;
            if plan.t_end(t.total_steps) >= t.total_steps {
                return bad("T_end must come before the last step".into());
            }
        }
        Ok(())
    }

    /// Adaptation event steps (empty without an active plan).
    pub fn event_steps(&self) -> Result<Vec<usize>> {
        match &self.plan {
            Some(plan) => plan.event_steps(self.train.total_steps),
            None => Ok(Vec::new()),
        }
    }

    /// Points every seed of the run at `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Architecture;
    use crate::scoring::Metric;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.event_steps().unwrap(), vec![600]);
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn sections_are_optional_and_partial() {
        let cfg = TrainConfig::from_toml(
            "[model]\narchitecture = \"ebranchformer_lite\"\n[score]\nmetric = \"magnitude\"\n[train]\ntotal_steps = 100\n",
        )
        .unwrap();
        assert_eq!(cfg.model.architecture, Architecture::EbranchformerLite);
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.score.metric, Metric::Magnitude);
        assert!(cfg.plan.is_none());
        assert!(cfg.event_steps().unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "[train]\nlr_start = 1e-3\n",
            "[data]\nframes_per_symbol = 3\n",
            "[data]\nvocab = 5\n",
            "[model]\nwidth = 3\n",
            "[plan]\ndelta = 0.6\n",
            "[plan]\nt_end_fraction = 1.0\n",
            "[train]\ntotal_steps = 0\n",
        ] {
            assert!(matches!(TrainConfig::from_toml(text), Err(Error::InvalidConfig(_))), "{text}");
        }
    }
}
