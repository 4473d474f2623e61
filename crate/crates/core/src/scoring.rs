//! Importance scores of parameter groups.
//!
//! Magnitude, gradient and first-order Taylor scores are exponentially
//! smoothed per-group statistics stored on each [`ParameterGroup`]; the
//! learnable metric instead ranks by each group's trainable scale.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{GroupId, ParameterGroup, PartitionedEncoder};
use crate::error::{Error, Result};
use crate::tensor::{derive_seed, Float};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Magnitude,
    Gradient,
    Taylor,
    Learnable,
}

impl Metric {
    pub fn needs_grads(self) -> bool {
        matches!(self, Metric::Gradient | Metric::Taylor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub metric: Metric,
    /// Smoothing factor in (0, 1]; 1 disables smoothing.
    pub alpha: f64,
    /// Steps between score refreshes.
    pub update_interval: usize,
    /// Probability that a training step uses scaled weights (learnable metric).
    #[serde(default = "default_scale_prob")]
    pub scale_prob: f64,
}

fn default_scale_prob() -> f64 {
    0.5
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig { metric: Metric::Taylor, alpha: 0.9, update_interval: 50, scale_prob: 0.5 }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if self.update_interval == 0 {
            return Err(Error::InvalidConfig("update_interval must be >= 1".into()));
        }
        if self.metric == Metric::Learnable && self.scale_prob != 0.5 {
            return Err(Error::InvalidConfig(format!(
                "learnable scores sample scaled steps with probability 0.5, got {}",
                self.scale_prob
            )));
        }
        Ok(())
    }
}

/// Per-group statistic before smoothing.
///
/// With `N` weights: magnitude `Σ|w|/N`, gradient `sqrt(Σ g²)/N`,
/// Taylor `sqrt(Σ (g·w)²)/N`.
pub fn instantaneous_score(metric: Metric, weights: &[f64], grads: Option<&[f64]>) -> Result<f64> {
    let n = weights.len() as f64;
    if weights.is_empty() {
        return Err(Error::InvalidState("empty parameter group".into()));
    }
    let grads = || {
        grads
            .filter(|g| g.len() == weights.len())
            .ok_or_else(|| Error::InvalidState(format!("{metric:?} score needs gradients")))
    };
    Ok(match metric {
        Metric::Magnitude => weights.iter().map(|w| w.abs()).sum::<f64>() / n,
        Metric::Gradient => grads()?.iter().map(|g| g * g).sum::<f64>().sqrt() / n,
        Metric::Taylor => grads()?.iter().zip(weights).map(|(g, w)| (g * w).powi(2)).sum::<f64>().sqrt() / n,
        Metric::Learnable => return Err(Error::InvalidState("learnable scores are not computed from weights".into())),
    })
}

/// `(1 - α) s_prev + α s_inst`
pub fn smooth(prev: f64, instantaneous: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * prev + alpha * instantaneous
}

/// Whether a training step runs with learnable scales applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingTag {
    Scaled,
    Unscaled,
}

/// Mutable scoring state owned by the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreState {
    pub config: ScoreConfig,
    /// Seed of the per-step scaled/unscaled coin.
    pub seed: u64,
    pub steps_since_update: usize,
}

const SCALE_COIN_STREAM: u64 = 0x5ca1e;

fn group_stats<F: Float>(group: &ParameterGroup<F>, metric: Metric) -> Result<f64> {
    let weights: Vec<f64> = group.slices.iter().flat_map(|p| p.value.data().iter().map(|x| x.as_f64())).collect();
    let grads = if metric.needs_grads() {
        let mut g = Vec::with_capacity(weights.len());
        for p in &group.slices {
            let pg = p
                .value
                .grad()
                .ok_or_else(|| Error::InvalidState(format!("{metric:?} score of {} needs gradients", group.id)))?;
            g.extend(pg.iter().map(|x| x.as_f64()));
        }
        Some(g)
    } else {
        None
    };
    instantaneous_score(metric, &weights, grads.as_deref())
}

impl ScoreState {
    pub fn new(config: ScoreConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(ScoreState { config, seed, steps_since_update: 0 })
    }

    pub fn metric(&self) -> Metric {
        self.config.metric
    }

    /// Counts one optimizer step; true when a refresh is due.
    pub fn tick(&mut self) -> bool {
        self.steps_since_update += 1;
        self.steps_since_update >= self.config.update_interval
    }

    /// Refreshes every group's smoothed score from current weights / gradients.
    pub fn update_scores<F: Float>(&mut self, model: &mut PartitionedEncoder<F>) -> Result<()> {
        self.steps_since_update = 0;
        let metric = self.config.metric;
        if metric == Metric::Learnable {
            return Ok(());
        }
        let alpha = self.config.alpha;
        let updates =
            model.groups().map(|g| Ok(smooth(g.score, group_stats(g, metric)?, alpha))).collect::<Result<Vec<_>>>()?;
        for (g, s) in model.groups_mut().zip(updates) {
            g.score = s;
        }
        Ok(())
    }

    /// Draws the scaled/unscaled coin for `step`: one draw per step for the
    /// whole model, always unscaled unless the metric is learnable.
    pub fn apply_learnable_scales(&self, step: usize) -> ScalingTag {
        if self.config.metric != Metric::Learnable {
            return ScalingTag::Unscaled;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[SCALE_COIN_STREAM, step as u64]));
        if rng.random_bool(self.config.scale_prob) {
            ScalingTag::Scaled
        } else {
            ScalingTag::Unscaled
        }
    }

    /// Ranking key of one group under the configured metric.
    pub fn score_of<F: Float>(&self, group: &ParameterGroup<F>) -> f64 {
        match self.config.metric {
            Metric::Learnable => group.learnable_scale().as_f64(),
            _ => group.score,
        }
    }

    /// Groups in descending importance; ties by ascending [`GroupId`].
    pub fn rank_groups<F: Float>(&self, model: &PartitionedEncoder<F>) -> Result<Vec<GroupId>> {
        let mut scored = Vec::new();
        for g in model.groups() {
            let s = self.score_of(g);
            if !s.is_finite() {
                return Err(Error::InvalidState(format!("group {} has no valid score ({s})", g.id)));
            }
            scored.push((s, g.id));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(scored.into_iter().map(|(_, id)| id).collect())
    }

    /// TSV `group_id<TAB>param_count<TAB>score`, one line per group.
    pub fn score_table<F: Float>(&self, model: &PartitionedEncoder<F>) -> String {
        let mut out = String::new();
        let mut groups: Vec<_> = model.groups().collect();
        groups.sort_by_key(|g| g.id);
        for g in groups {
            let _ = writeln!(out, "{}\t{}\t{}", g.id, g.param_count(), self.score_of(g));
        }
        out
    }
}

/// Sets every learnable scale back to 1 and clears its optimizer state.
pub fn reset_learnable_scores<F: Float>(model: &mut PartitionedEncoder<F>) {
    for g in model.groups_mut() {
        g.scale.value.data_mut()[0] = F::one();
        g.scale.value.zero_grad();
        g.scale.clear_moments();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{ModelConfig, ModuleKind};
    use proptest::prelude::*;

    #[test]
    fn hand_evaluated_metrics() {
        let mag = instantaneous_score(Metric::Magnitude, &[0.3, -0.5], None).unwrap();
        assert!((smooth(0.0, mag, 1.0) - 0.4).abs() < 1e-12);
        let grad = instantaneous_score(Metric::Gradient, &[0.0, 0.0], Some(&[3.0, 4.0])).unwrap();
        assert!((smooth(0.0, grad, 1.0) - 2.5).abs() < 1e-12);
        let taylor = instantaneous_score(Metric::Taylor, &[2.0, 0.0], Some(&[1.0, 7.0])).unwrap();
        assert!((smooth(0.0, taylor, 1.0) - 1.0).abs() < 1e-12);
        assert!((smooth(0.5, 1.0, 0.9) - 0.95).abs() < 1e-12);
    }

    #[test]
    fn missing_grads_is_invalid_state() {
        assert!(matches!(instantaneous_score(Metric::Taylor, &[1.0], None), Err(Error::InvalidState(_))));
        let mut model = PartitionedEncoder::<f32>::build(&ModelConfig::default()).unwrap();
        let mut state = ScoreState::new(ScoreConfig::default(), 0).unwrap();
        assert!(matches!(state.update_scores(&mut model), Err(Error::InvalidState(_))));
    }

    #[test]
    fn config_validation() {
        let bad_alpha = ScoreConfig { alpha: 0.0, ..ScoreConfig::default() };
        assert!(bad_alpha.validate().is_err());
        let bad_prob = ScoreConfig { metric: Metric::Learnable, scale_prob: 0.3, ..ScoreConfig::default() };
        assert!(bad_prob.validate().is_err());
        let bad_interval = ScoreConfig { update_interval: 0, ..ScoreConfig::default() };
        assert!(bad_interval.validate().is_err());
    }

    fn ids(n: usize) -> Vec<GroupId> {
        (0..n).map(|slot| GroupId { layer: 0, kind: ModuleKind::Ffn1, slot, generation: 0 }).collect()
    }

    #[test]
    fn ranking_sorts_descending_with_id_tie_break() {
        let mut model = PartitionedEncoder::<f32>::build(&ModelConfig::default()).unwrap();
        let state = ScoreState::new(ScoreConfig::default(), 0).unwrap();
        // all-equal scores: GroupId order
        let all: Vec<GroupId> = model.enumerate_groups().into_iter().map(|g| g.id).collect();
        assert_eq!(state.rank_groups(&model).unwrap(), all);

        let want = ids(3);
        for (g, s) in model.groups_mut().zip([0.9, 0.1, 0.5]) {
            g.score = s;
        }
        let ranking = state.rank_groups(&model).unwrap();
        assert_eq!(&ranking[..3], &[want[0], want[2], want[1]]);

        for g in model.groups_mut() {
            g.score *= 7.5;
        }
        assert_eq!(state.rank_groups(&model).unwrap(), ranking);
    }

    #[test]
    fn learnable_coin_is_reproducible_and_balanced() {
        let cfg = ScoreConfig { metric: Metric::Learnable, ..ScoreConfig::default() };
        let a = ScoreState::new(cfg.clone(), 11).unwrap();
        let b = ScoreState::new(cfg, 11).unwrap();
        let pa: Vec<_> = (0..1000).map(|s| a.apply_learnable_scales(s)).collect();
        let pb: Vec<_> = (0..1000).map(|s| b.apply_learnable_scales(s)).collect();
        assert_eq!(pa, pb);
        let scaled = pa.iter().filter(|t| **t == ScalingTag::Scaled).count();
        assert!((400..600).contains(&scaled), "{scaled}");

        let taylor = ScoreState::new(ScoreConfig::default(), 11).unwrap();
        assert!((0..100).all(|s| taylor.apply_learnable_scales(s) == ScalingTag::Unscaled));
    }

    #[test]
    fn reset_is_idempotent_and_ranks_by_id() {
        let mut model = PartitionedEncoder::<f32>::build(&ModelConfig::default()).unwrap();
        for (i, g) in model.groups_mut().enumerate() {
            g.scale.value.data_mut()[0] = 0.5 + i as f32;
            g.scale.m[0] = 1.0;
        }
        reset_learnable_scores(&mut model);
        let once = model.clone();
        reset_learnable_scores(&mut model);
        assert_eq!(once, model);
        assert!(model.groups().all(|g| g.learnable_scale() == 1.0 && g.scale.m[0] == 0.0));
        let state = ScoreState::new(ScoreConfig { metric: Metric::Learnable, ..ScoreConfig::default() }, 0).unwrap();
        let all: Vec<GroupId> = model.enumerate_groups().into_iter().map(|g| g.id).collect();
        assert_eq!(state.rank_groups(&model).unwrap(), all);
    }

    proptest! {
        #[test]
        fn scores_are_nonnegative(w in prop::collection::vec(-10.0f64..10.0, 1..40), seed in 0u64..1000) {
            let g: Vec<f64> = w.iter().enumerate().map(|(i, x)| x * ((i as u64 ^ seed) % 7) as f64 - 3.0).collect();
            for m in [Metric::Magnitude, Metric::Gradient, Metric::Taylor] {
                prop_assert!(instantaneous_score(m, &w, Some(&g)).unwrap() >= 0.0);
            }
        }

        #[test]
        fn smoothing_is_convex(prev in 0.0f64..100.0, inst in 0.0f64..100.0, alpha in 1e-6f64..=1.0) {
            let s = smooth(prev, inst, alpha);
            prop_assert!(s >= prev.min(inst) - 1e-12 && s <= prev.max(inst) + 1e-12);
            prop_assert_eq!(smooth(prev, inst, 1.0), inst);
        }
    }
}
