//! Grow-and-drop surgery on parameter groups.
//!
//! At each adaptation event the groups are ranked, the lowest-ranked ones
//! are deleted and the highest-ranked ones duplicated, each side limited to
//! a budget of `⌊(δ / I) · P⌋` weights where `P` is the current number of
//! partitioned encoder weights.

use std::collections::HashSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{GroupId, Param, ParamScope, PartitionedEncoder};
use crate::error::{Error, Result};
use crate::scoring::{reset_learnable_scores, ScoreState};
use crate::tensor::{derive_seed, Float};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Exact copy of the source weights and optimizer moments.
    Copy,
    /// Copy plus Gaussian noise of `noise_std` per element.
    CopyNoise,
    /// Fresh weights from the module's initial distribution, zero moments.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationPlan {
    /// Adaptation ratio δ in [0, 0.5].
    pub delta: f64,
    /// Number of adaptation events I.
    pub iterations: usize,
    /// T_end / T_total.
    pub t_end_fraction: f64,
    pub init: InitStrategy,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
}

fn default_noise_std() -> f64 {
    0.01
}

impl Default for AdaptationPlan {
    fn default() -> Self {
        AdaptationPlan {
            delta: 0.15,
            iterations: 1,
            t_end_fraction: 0.2,
            init: InitStrategy::Copy,
            noise_std: default_noise_std(),
        }
    }
}

const PPM: u128 = 1_000_000;

/// Fraction as an exact count of millionths, so `0.15 * 100` floors to 15.
fn to_ppm(x: f64) -> u128 {
    (x * PPM as f64).round() as u128
}

impl AdaptationPlan {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.delta) {
            return Err(Error::InvalidConfig(format!("delta {} outside [0, 0.5]", self.delta)));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(self.t_end_fraction > 0.0 && self.t_end_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!("t_end_fraction {} outside (0, 1)", self.t_end_fraction)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_std {} invalid", self.noise_std)));
        }
        Ok(())
    }

    /// A zero-budget plan never touches the model.
    pub fn is_active(&self) -> bool {
        to_ppm(self.delta) > 0
    }

    pub fn t_end(&self, total_steps: usize) -> usize {
        (total_steps as u128 * to_ppm(self.t_end_fraction) / PPM) as usize
    }

    /// Event steps `⌊i · T_end / I⌋` for `i = 1..=I`; empty for inactive plans.
    pub fn event_steps(&self, total_steps: usize) -> Result<Vec<usize>> {
        self.validate()?;
        if !self.is_active() {
            return Ok(Vec::new());
        }
        let t_end = self.t_end(total_steps);
        if t_end < self.iterations {
            return Err(Error::InvalidConfig(format!("T_end = {t_end} leaves no room for {} events", self.iterations)));
        }
        Ok((1..=self.iterations).map(|i| i * t_end / self.iterations).collect())
    }

    /// Per-event budget `⌊(δ / I) · total⌋`.
    pub fn budget(&self, total_params: usize) -> usize {
        budget(self.delta, self.iterations, total_params)
    }
}

fn budget(delta: f64, iterations: usize, total: usize) -> usize {
    (total as u128 * to_ppm(delta) / (PPM * iterations as u128)) as usize
}

/// Outcome of one adaptation event.
#[derive(Debug, Clone, PartialEq)]
pub struct SurgeryReport {
    pub step: usize,
    /// Dropped groups with their ids before the event.
    pub dropped: Vec<(GroupId, usize)>,
    /// `(source id before the event, new id, param_count)`.
    pub grown: Vec<(GroupId, GroupId, usize)>,
    pub params_before: usize,
    pub params_after: usize,
}

impl SurgeryReport {
    pub fn dropped_params(&self) -> usize {
        self.dropped.iter().map(|d| d.1).sum()
    }

    pub fn grown_params(&self) -> usize {
        self.grown.iter().map(|g| g.2).sum()
    }
}

impl fmt::Display for SurgeryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[surgery step={}]", self.step)?;
        writeln!(f, "params_before={}", self.params_before)?;
        writeln!(f, "params_after={}", self.params_after)?;
        writeln!(f, "dropped_total={}", self.dropped_params())?;
        writeln!(f, "grown_total={}", self.grown_params())?;
        for (id, n) in &self.dropped {
            writeln!(f, "drop {id} {n}")?;
        }
        for (src, new, n) in &self.grown {
            writeln!(f, "grow {src} -> {new} {n}")?;
        }
        writeln!(f, "[/surgery]")
    }
}

/// Picks the groups to grow and drop.
///
/// `ranked` lists every live group with its size, most important first.
/// Each set is the longest prefix (from its end of the ranking) whose
/// cumulative size stays within the budget; the drop prefix also stops
/// before it would reach a group selected for growth.
pub fn select_adaptation_sets(
    ranked: &[(GroupId, usize)],
    delta: f64,
    iterations: usize,
) -> Result<(Vec<GroupId>, Vec<GroupId>)> {
    if !(0.0..=0.5).contains(&delta) {
        return Err(Error::InvalidConfig(format!("delta {delta} outside [0, 0.5]")));
    }
    if iterations == 0 {
        return Err(Error::InvalidConfig("iterations must be >= 1".into()));
    }
    let total: usize = ranked.iter().map(|r| r.1).sum();
    let b = budget(delta, iterations, total);

    let take_prefix = |iter: &mut dyn Iterator<Item = &(GroupId, usize)>, stop: &HashSet<GroupId>| {
        let mut used = 0;
        let mut out = Vec::new();
        for &(id, size) in iter {
            if stop.contains(&id) || used + size > b {
                break;
            }
            used += size;
            out.push(id);
        }
        out
    };
    let grow = take_prefix(&mut ranked.iter(), &HashSet::new());
    let grow_set: HashSet<GroupId> = grow.iter().copied().collect();
    let drop = take_prefix(&mut ranked.iter().rev(), &grow_set);
    Ok((grow, drop))
}

fn fresh_group_seed(seed: u64, step: usize, ordinal: usize) -> u64 {
    derive_seed(seed, &[0x6772_6f77, step as u64, ordinal as u64])
}

/// Weights (and inherited score) for a duplicate of `source`.
fn grown_slices<F: Float>(
    model: &PartitionedEncoder<F>,
    source: GroupId,
    init: InitStrategy,
    noise_std: f64,
    seed: u64,
) -> Result<(Vec<Param<F>>, f64)> {
    let src = model.group(source).ok_or_else(|| Error::NotFound(format!("group {source}")))?;
    let mut slices = match init {
        InitStrategy::Copy | InitStrategy::CopyNoise => src.slices.clone(),
        InitStrategy::Random => model.dims().fresh_slices(source.kind, seed)?,
    };
    if init == InitStrategy::CopyNoise && noise_std > 0.0 {
        let noise =
            Normal::new(0.0, noise_std).map_err(|e| Error::InvalidConfig(format!("noise std {noise_std}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut slices {
            for w in p.value.data_mut() {
                *w = *w + F::of(noise.sample(&mut rng));
            }
        }
    }
    for p in &mut slices {
        p.value.zero_grad();
    }
    Ok((slices, src.score))
}

/// Duplicates `source` into a new group of the same module; returns the new id.
pub fn grow_group<F: Float>(
    model: &mut PartitionedEncoder<F>,
    source: GroupId,
    init: InitStrategy,
    noise_std: f64,
    seed: u64,
) -> Result<GroupId> {
    let (slices, score) = grown_slices(model, source, init, noise_std, seed)?;
    model.append_group(source.layer, source.kind, slices, score)
}

/// Deletes a group; returns its parameter count.
pub fn drop_group<F: Float>(model: &mut PartitionedEncoder<F>, id: GroupId) -> Result<usize> {
    Ok(model.remove_group(id)?.param_count())
}

/// Runs one adaptation event at `step`: rank, select, drop, grow, then reset
/// learnable scales.
pub fn apply_adaptation<F: Float>(
    model: &mut PartitionedEncoder<F>,
    state: &ScoreState,
    plan: &AdaptationPlan,
    step: usize,
    total_steps: usize,
    seed: u64,
) -> Result<SurgeryReport> {
    if !plan.event_steps(total_steps)?.contains(&step) {
        return Err(Error::InvalidState(format!("step {step} is not an adaptation event")));
    }
    let ranking = state.rank_groups(model)?;
    let ranked: Vec<(GroupId, usize)> =
        ranking.iter().map(|&id| (id, model.group(id).map(|g| g.param_count()).unwrap_or(0))).collect();
    let (grow, drop) = select_adaptation_sets(&ranked, plan.delta, plan.iterations)?;
    let params_before = model.count_params(ParamScope::EncoderGroups);

    // Duplicates are built before any drop so sources resolve by pre-event ids.
    let staged = grow
        .iter()
        .enumerate()
        .map(|(ordinal, &src)| {
            let seed = fresh_group_seed(seed, step, ordinal);
            Ok((src, grown_slices(model, src, plan.init, plan.noise_std, seed)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut dropped: Vec<(GroupId, usize)> =
        drop.iter().map(|&id| (id, model.group(id).map(|g| g.param_count()).unwrap_or(0))).collect();
    let mut order = drop.clone();
    order.sort_by(|a, b| b.cmp(a));
    for id in order {
        drop_group(model, id)?;
    }
    dropped.sort_by_key(|d| d.0);

    let mut grown = Vec::with_capacity(staged.len());
    for (src, (slices, score)) in staged {
        let n = slices.iter().map(Param::len).sum();
        let new = model.append_group(src.layer, src.kind, slices, score)?;
        grown.push((src, new, n));
    }
    reset_learnable_scores(model);

    let params_after = model.count_params(ParamScope::EncoderGroups);
    Ok(SurgeryReport { step, dropped, grown, params_before, params_after })
}
