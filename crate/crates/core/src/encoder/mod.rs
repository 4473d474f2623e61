//! Partitioned Conformer / E-Branchformer-lite CTC encoder.
//!
//! Every partitioned module computes `module(x) = Σ_g group_g(LN(x))`, so
//! groups can be duplicated or deleted without touching their siblings and a
//! module's output is exactly the sum of its groups' contributions.

mod group;
#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

use crate::ctc::{self, LabelSeq};
use crate::error::{Error, Result};
use crate::tensor::{derive_seed, Float, Init, NodeId, Tape, Tensor};

pub use group::{GroupId, ModuleKind, Param, ParameterGroup};

/// Frames stacked by the front-end; the output rate is one frame in four.
pub const SUBSAMPLING: usize = 4;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Conformer,
    EbranchformerLite,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Conformer => "conformer",
            Architecture::EbranchformerLite => "ebranchformer_lite",
        }
    }

    /// Module order inside one block.
    pub fn block_layout(self) -> [ModuleKind; 4] {
        match self {
            Architecture::Conformer => [ModuleKind::Ffn1, ModuleKind::Mhsa, ModuleKind::Conv, ModuleKind::Ffn2],
            Architecture::EbranchformerLite => {
                [ModuleKind::Ffn1, ModuleKind::Mhsa, ModuleKind::Cgmlp, ModuleKind::Ffn2]
            }
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conformer" => Ok(Architecture::Conformer),
            "ebranchformer_lite" => Ok(Architecture::EbranchformerLite),
            _ => Err(Error::InvalidConfig(format!("unknown architecture {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub d_model: usize,
    pub layers: usize,
    pub kernel_size: usize,
    /// C: groups per feed-forward module.
    pub ffn_groups: usize,
    /// M: groups per convolution (or cgMLP) module.
    pub conv_groups: usize,
    /// Number of non-blank labels.
    pub vocab: usize,
    pub feature_dim: usize,
    pub seed: u64,
    /// Feed-forward inner width; `4 * d_model` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_dim: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::Conformer,
            d_model: 64,
            layers: 2,
            kernel_size: 9,
            ffn_groups: 4,
            conv_groups: 4,
            vocab: 8,
            feature_dim: 16,
            seed: 1,
            ffn_dim: None,
        }
    }
}

/// Derived widths of every partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub d_head: usize,
    /// Hidden width of one FFN group (d_ff / C).
    pub ffn_group_width: usize,
    /// Post-GLU channels of one conv group (2 d_model / M).
    pub conv_group_channels: usize,
    /// Gated channels of one cgMLP group (d_inter / 2M).
    pub cgmlp_group_channels: usize,
    pub d_inter: usize,
    pub kernel: usize,
    pub classes: usize,
    pub stacked_features: usize,
}

impl ModelConfig {
    pub fn dims(&self) -> Result<Dims> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let d = self.d_model;
        if d == 0 || self.layers == 0 || self.vocab == 0 || self.feature_dim == 0 {
            return bad("d_model, layers, vocab and feature_dim must be positive".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel_size {} must be odd", self.kernel_size));
        }
        if self.ffn_groups == 0 || self.conv_groups == 0 {
            return bad("group counts must be positive".into());
        }
        let d_ff = self.ffn_dim.unwrap_or(4 * d);
        if !d_ff.is_multiple_of(self.ffn_groups) {
            return bad(format!("d_ff {d_ff} not divisible by C={}", self.ffn_groups));
        }
        // W_in^m has 4d/M columns that GLU halves, so 4d must split into M even blocks.
        if !(4 * d).is_multiple_of(2 * self.conv_groups) {
            return bad(format!("4*d_model={} not divisible into {} GLU blocks", 4 * d, self.conv_groups));
        }
        let d_inter = 6 * d;
        if self.architecture == Architecture::EbranchformerLite && !d_inter.is_multiple_of(2 * self.conv_groups) {
            return bad(format!("d_inter={d_inter} not divisible into {} gated blocks", self.conv_groups));
        }
        let heads = (d / 64).max(1);
        if !d.is_multiple_of(heads) {
            return bad(format!("d_model {d} not divisible by {heads} heads"));
        }
        Ok(Dims {
            d_model: d,
            d_ff,
            heads,
            d_head: d / heads,
            ffn_group_width: d_ff / self.ffn_groups,
            conv_group_channels: 2 * d / self.conv_groups,
            cgmlp_group_channels: d_inter / (2 * self.conv_groups),
            d_inter,
            kernel: self.kernel_size,
            classes: self.vocab + 1,
            stacked_features: SUBSAMPLING * self.feature_dim,
        })
    }

    /// Groups per module at build time.
    pub fn initial_groups(&self, kind: ModuleKind) -> Result<usize> {
        let dims = self.dims()?;
        Ok(match kind {
            ModuleKind::Ffn1 | ModuleKind::Ffn2 => self.ffn_groups,
            ModuleKind::Mhsa => dims.heads,
            ModuleKind::Conv | ModuleKind::Cgmlp => self.conv_groups,
        })
    }
}

impl Dims {
    /// Shapes and fan-ins of the slices of one group of `kind`.
    pub fn slice_shapes(&self, kind: ModuleKind) -> Vec<([usize; 2], usize)> {
        let d = self.d_model;
        match kind {
            ModuleKind::Ffn1 | ModuleKind::Ffn2 => {
                let w = self.ffn_group_width;
                vec![([d, w], d), ([w, d], self.d_ff)]
            }
            ModuleKind::Mhsa => {
                let h = self.d_head;
                vec![([d, h], d), ([d, h], d), ([d, h], d), ([h, d], self.heads * h)]
            }
            ModuleKind::Conv => {
                let c = self.conv_group_channels;
                vec![([d, 2 * c], d), ([self.kernel, c], self.kernel), ([c, d], 2 * d)]
            }
            ModuleKind::Cgmlp => {
                let c = self.cgmlp_group_channels;
                vec![([d, 2 * c], d), ([self.kernel, c], self.kernel), ([c, d], self.d_inter / 2)]
            }
        }
    }

    pub fn group_param_count(&self, kind: ModuleKind) -> usize {
        self.slice_shapes(kind).iter().map(|(s, _)| s[0] * s[1]).sum()
    }

    /// Freshly initialised slices for one group: N(0, 1/fan_in) weights.
    pub fn fresh_slices<F: Float>(&self, kind: ModuleKind, seed: u64) -> Result<Vec<Param<F>>> {
        self.slice_shapes(kind)
            .into_iter()
            .zip(kind.slice_names())
            .enumerate()
            .map(|(i, ((shape, fan_in), &name))| {
                let init =
                    Init::Normal { mean: 0.0, std: 1.0 / (fan_in as f64).sqrt(), seed: derive_seed(seed, &[i as u64]) };
                Ok(Param::new(name, Tensor::alloc(&shape, init)?))
            })
            .collect()
    }
}

/// One partitioned module: a pre-norm followed by a sum over groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Module<F> {
    pub kind: ModuleKind,
    pub norm_gamma: Param<F>,
    pub norm_beta: Param<F>,
    pub groups: Vec<ParameterGroup<F>>,
}

impl<F: Float> Module<F> {
    pub fn param_count(&self) -> usize {
        self.groups.iter().map(ParameterGroup::param_count).sum()
    }

    fn renumber(&mut self) {
        for (slot, g) in self.groups.iter_mut().enumerate() {
            g.id.slot = slot;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    pub modules: Vec<Module<F>>,
}

/// `(id, param_count, score)` row of [`PartitionedEncoder::enumerate_groups`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub id: GroupId,
    pub param_count: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    All,
    EncoderGroups,
    Frontend,
    /// Final norm plus the output projection.
    Head,
    /// Per-module pre-norms.
    Norms,
}

/// Nodes produced by one recorded forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub log_probs: NodeId,
    /// One entry per parameter in [`PartitionedEncoder::params`] order;
    /// `None` for parameters that did not take part (unused learnable scales).
    pub bindings: Vec<Option<NodeId>>,
}

/// The full layered model.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedEncoder<F> {
    config: ModelConfig,
    dims: Dims,
    pub frontend_w: Param<F>,
    pub frontend_b: Param<F>,
    pub layers: Vec<Layer<F>>,
    pub final_gamma: Param<F>,
    pub final_beta: Param<F>,
    pub head_w: Param<F>,
    pub head_b: Param<F>,
    /// Last generation number handed out to a grown group.
    pub growth_counter: u32,
}

fn norm_params<F: Float>(d: usize) -> Result<(Param<F>, Param<F>)> {
    Ok((
        Param::new("norm_gamma", Tensor::alloc(&[d], Init::Constant(1.0))?),
        Param::new("norm_beta", Tensor::alloc(&[d], Init::Zeros)?),
    ))
}

fn kind_index(kind: ModuleKind) -> u64 {
    kind as u64
}

impl<F: Float> PartitionedEncoder<F> {
    /// Builds a freshly initialised model; all randomness derives from `cfg.seed`.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        let dims = cfg.dims()?;
        let d = dims.d_model;
        let seed = cfg.seed;
        let matrix = |shape: [usize; 2], fan_in: usize, path: &[u64]| -> Result<Tensor<F>> {
            Tensor::alloc(
                &shape,
                Init::Normal { mean: 0.0, std: 1.0 / (fan_in as f64).sqrt(), seed: derive_seed(seed, path) },
            )
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for layer in 0..cfg.layers {
            let mut modules = Vec::with_capacity(4);
            for kind in cfg.architecture.block_layout() {
                let (norm_gamma, norm_beta) = norm_params(d)?;
                let groups = (0..cfg.initial_groups(kind)?)
                    .map(|slot| {
                        let id = GroupId { layer, kind, slot, generation: 0 };
                        let gseed = derive_seed(seed, &[1, layer as u64, kind_index(kind), slot as u64]);
                        Ok(ParameterGroup::new(id, dims.fresh_slices(kind, gseed)?))
                    })
                    .collect::<Result<_>>()?;
                modules.push(Module { kind, norm_gamma, norm_beta, groups });
            }
            layers.push(Layer { modules });
        }
        let (final_gamma, final_beta) = norm_params(d)?;
        Ok(PartitionedEncoder {
            config: cfg.clone(),
            dims,
            frontend_w: Param::new("frontend_w", matrix([dims.stacked_features, d], dims.stacked_features, &[0, 0])?),
            frontend_b: Param::new("frontend_b", Tensor::alloc(&[d], Init::Zeros)?),
            layers,
            final_gamma,
            final_beta,
            head_w: Param::new("head_w", matrix([d, dims.classes], d, &[2, 0])?),
            head_b: Param::new("head_b", Tensor::alloc(&[dims.classes], Init::Zeros)?),
            growth_counter: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    /// Converts every tensor (and moment buffer) to another float width.
    pub fn cast<G: Float>(&self) -> PartitionedEncoder<G> {
        fn p<F: Float, G: Float>(p: &Param<F>) -> Param<G> {
            Param {
                name: p.name,
                value: p.value.cast(),
                m: p.m.iter().map(|x| G::of(x.as_f64())).collect(),
                v: p.v.iter().map(|x| G::of(x.as_f64())).collect(),
            }
        }
        PartitionedEncoder {
            config: self.config.clone(),
            dims: self.dims,
            frontend_w: p(&self.frontend_w),
            frontend_b: p(&self.frontend_b),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    modules: l
                        .modules
                        .iter()
                        .map(|m| Module {
                            kind: m.kind,
                            norm_gamma: p(&m.norm_gamma),
                            norm_beta: p(&m.norm_beta),
                            groups: m
                                .groups
                                .iter()
                                .map(|g| ParameterGroup {
                                    id: g.id,
                                    slices: g.slices.iter().map(p).collect(),
                                    score: g.score,
                                    scale: p(&g.scale),
                                })
                                .collect(),
                        })
                        .collect(),
                })
                .collect(),
            final_gamma: p(&self.final_gamma),
            final_beta: p(&self.final_beta),
            head_w: p(&self.head_w),
            head_b: p(&self.head_b),
            growth_counter: self.growth_counter,
        }
    }

    // ---- parameter registry -------------------------------------------------

    /// Every trainable tensor in canonical order.
    pub fn params(&self) -> Vec<&Param<F>> {
        let mut out = vec![&self.frontend_w, &self.frontend_b];
        for m in self.layers.iter().flat_map(|l| &l.modules) {
            out.push(&m.norm_gamma);
            out.push(&m.norm_beta);
            for g in &m.groups {
                out.extend(&g.slices);
                out.push(&g.scale);
            }
        }
        out.extend([&self.final_gamma, &self.final_beta, &self.head_w, &self.head_b]);
        out
    }

    /// Mutable twin of [`Self::params`], same order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = vec![&mut self.frontend_w, &mut self.frontend_b];
        for m in self.layers.iter_mut().flat_map(|l| &mut l.modules) {
            out.push(&mut m.norm_gamma);
            out.push(&mut m.norm_beta);
            for g in &mut m.groups {
                out.extend(&mut g.slices);
                out.push(&mut g.scale);
            }
        }
        out.extend([&mut self.final_gamma, &mut self.final_beta, &mut self.head_w, &mut self.head_b]);
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.value.zero_grad();
        }
    }

    /// Adds per-parameter gradients (in [`Self::params`] order) into the model.
    pub fn accumulate_grads(&mut self, grads: &[Option<Vec<F>>]) -> Result<()> {
        let params = self.params_mut();
        if params.len() != grads.len() {
            return Err(Error::InvalidState(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (p, g) in params.into_iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != p.len() {
                    return Err(Error::InvalidState(format!(
                        "gradient of length {} for parameter {} of length {}",
                        g.len(),
                        p.name,
                        p.len()
                    )));
                }
                p.value.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    // ---- group registry -----------------------------------------------------

    pub fn module(&self, layer: usize, kind: ModuleKind) -> Option<&Module<F>> {
        self.layers.get(layer)?.modules.iter().find(|m| m.kind == kind)
    }

    pub fn module_mut(&mut self, layer: usize, kind: ModuleKind) -> Option<&mut Module<F>> {
        self.layers.get_mut(layer)?.modules.iter_mut().find(|m| m.kind == kind)
    }

    pub fn group(&self, id: GroupId) -> Option<&ParameterGroup<F>> {
        self.module(id.layer, id.kind)?.groups.get(id.slot).filter(|g| g.id == id)
    }

    pub fn group_mut(&mut self, id: GroupId) -> Option<&mut ParameterGroup<F>> {
        self.module_mut(id.layer, id.kind)?.groups.get_mut(id.slot).filter(|g| g.id == id)
    }

    pub fn groups(&self) -> impl Iterator<Item = &ParameterGroup<F>> {
        self.layers.iter().flat_map(|l| &l.modules).flat_map(|m| &m.groups)
    }

    pub fn groups_mut(&mut self) -> impl Iterator<Item = &mut ParameterGroup<F>> {
        self.layers.iter_mut().flat_map(|l| &mut l.modules).flat_map(|m| &mut m.groups)
    }

    /// All groups ordered by (layer, kind, slot).
    pub fn enumerate_groups(&self) -> Vec<GroupSummary> {
        let mut out: Vec<GroupSummary> =
            self.groups().map(|g| GroupSummary { id: g.id, param_count: g.param_count(), score: g.score }).collect();
        out.sort_by_key(|s| s.id);
        out
    }

    pub fn count_params(&self, scope: ParamScope) -> usize {
        let norms: usize =
            self.layers.iter().flat_map(|l| &l.modules).map(|m| m.norm_gamma.len() + m.norm_beta.len()).sum();
        let groups: usize = self.groups().map(ParameterGroup::param_count).sum();
        let frontend = self.frontend_w.len() + self.frontend_b.len();
        let head = self.final_gamma.len() + self.final_beta.len() + self.head_w.len() + self.head_b.len();
        match scope {
            ParamScope::All => norms + groups + frontend + head,
            ParamScope::EncoderGroups => groups,
            ParamScope::Frontend => frontend,
            ParamScope::Head => head,
            ParamScope::Norms => norms,
        }
    }

    /// Removes a group and renumbers its siblings contiguously.
    pub fn remove_group(&mut self, id: GroupId) -> Result<ParameterGroup<F>> {
        if self.group(id).is_none() {
            return Err(Error::NotFound(format!("group {id}")));
        }
        let module = self.module_mut(id.layer, id.kind).expect("group exists");
        let removed = module.groups.remove(id.slot);
        module.renumber();
        Ok(removed)
    }

    /// Appends a group built from `slices` to the module `(layer, kind)` and
    /// returns its new id (with a fresh generation number).
    pub fn append_group(
        &mut self,
        layer: usize,
        kind: ModuleKind,
        slices: Vec<Param<F>>,
        score: f64,
    ) -> Result<GroupId> {
        let expected = self.dims.slice_shapes(kind);
        let shapes_ok =
            slices.len() == expected.len() && slices.iter().zip(&expected).all(|(p, (s, _))| p.value.shape() == s);
        if !shapes_ok {
            return Err(Error::InvalidShape(format!("slices do not match a {kind} group")));
        }
        let generation = self.growth_counter + 1;
        let module = self.module_mut(layer, kind).ok_or_else(|| Error::NotFound(format!("module L{layer}.{kind}")))?;
        let id = GroupId { layer, kind, slot: module.groups.len(), generation };
        let mut group = ParameterGroup::new(id, slices);
        group.score = score;
        module.groups.push(group);
        self.growth_counter = generation;
        Ok(id)
    }

    /// Concatenated `(W_ff1, W_ff2)` of an FFN module: `d_model x d_ff_current`
    /// and `d_ff_current x d_model`.
    pub fn ffn_matrices(&self, layer: usize, kind: ModuleKind) -> Result<(Tensor<F>, Tensor<F>)> {
        if !kind.is_ffn() {
            return Err(Error::InvalidInput(format!("{kind} is not a feed-forward module")));
        }
        let module = self.module(layer, kind).ok_or_else(|| Error::NotFound(format!("module L{layer}.{kind}")))?;
        let d = self.dims.d_model;
        let w = self.dims.ffn_group_width;
        let hidden = w * module.groups.len();
        if hidden == 0 {
            return Err(Error::InvalidState(format!("L{layer}.{kind} has no groups")));
        }
        let mut w1 = vec![F::zero(); d * hidden];
        let mut w2 = Vec::with_capacity(hidden * d);
        for (gi, g) in module.groups.iter().enumerate() {
            let a = g.slices[0].value.data();
            for r in 0..d {
                w1[r * hidden + gi * w..r * hidden + (gi + 1) * w].copy_from_slice(&a[r * w..(r + 1) * w]);
            }
            w2.extend_from_slice(g.slices[1].value.data());
        }
        Ok((Tensor::from_vec(&[d, hidden], w1)?, Tensor::from_vec(&[hidden, d], w2)?))
    }

    // ---- forward --------------------------------------------------------------

    /// Stacks groups of four frames: `[T, f] -> [T/4, 4f]` (trailing frames dropped).
    pub fn stack_frames(&self, features: &Tensor<F>) -> Result<Tensor<F>> {
        let &[frames, f] = features.shape() else {
            return Err(Error::InvalidShape(format!("features must be [T, f], got {:?}", features.shape())));
        };
        if f != self.config.feature_dim {
            return Err(Error::InvalidShape(format!(
                "expected {} features per frame, got {f}",
                self.config.feature_dim
            )));
        }
        if frames < SUBSAMPLING {
            return Err(Error::InvalidShape(format!("need at least {SUBSAMPLING} frames, got {frames}")));
        }
        let out_frames = frames / SUBSAMPLING;
        let data = features.data()[..out_frames * SUBSAMPLING * f].to_vec();
        Tensor::from_vec(&[out_frames, SUBSAMPLING * f], data)
    }

    /// Records the full forward pass on `tape`.
    ///
    /// When `scaled` is set, every group's weights are multiplied by its
    /// learnable scale and the scales become differentiable leaves.
    pub fn forward_tape(&self, tape: &mut Tape<F>, features: &Tensor<F>, scaled: bool) -> Result<ForwardPass> {
        let stacked = self.stack_frames(features)?;
        let mut b = Binder { tape, bindings: Vec::new() };
        let fw = b.bind(&self.frontend_w)?;
        let fb = b.bind(&self.frontend_b)?;
        let input = b.tape.constant(stacked)?;
        let mut x = b.tape.matmul(input, fw)?;
        x = b.tape.add_row(x, fb)?;

        for layer in &self.layers {
            x = self.block_forward(&mut b, layer, x, scaled)?;
        }
        let gamma = b.bind(&self.final_gamma)?;
        let beta = b.bind(&self.final_beta)?;
        x = b.tape.layer_norm(x, gamma, beta, F::of(LN_EPS))?;
        let hw = b.bind(&self.head_w)?;
        let hb = b.bind(&self.head_b)?;
        let logits = b.tape.matmul(x, hw)?;
        let logits = b.tape.add_row(logits, hb)?;
        let log_probs = b.tape.log_softmax(logits)?;
        Ok(ForwardPass { log_probs, bindings: b.bindings })
    }

    /// One encoder block: half-step FFN1, attention, convolution (or the
    /// attention/cgMLP pair summed in parallel), half-step FFN2, each with a
    /// residual connection.
    fn block_forward(&self, b: &mut Binder<'_, F>, layer: &Layer<F>, mut x: NodeId, scaled: bool) -> Result<NodeId> {
        let modules = &layer.modules;
        let mut i = 0;
        while i < modules.len() {
            let m = &modules[i];
            let parallel = self.config.architecture == Architecture::EbranchformerLite
                && m.kind == ModuleKind::Mhsa
                && modules.get(i + 1).is_some_and(|n| n.kind == ModuleKind::Cgmlp);
            if parallel {
                let attn = module_forward_bound(b, &self.dims, m, x, scaled)?;
                let local = module_forward_bound(b, &self.dims, &modules[i + 1], x, scaled)?;
                let merged = b.tape.add(attn, local)?;
                x = b.tape.add(x, merged)?;
                i += 2;
                continue;
            }
            let mut out = module_forward_bound(b, &self.dims, m, x, scaled)?;
            if m.kind.is_ffn() {
                out = b.tape.scale(out, F::of(0.5))?;
            }
            x = b.tape.add(x, out)?;
            i += 1;
        }
        Ok(x)
    }

    /// Log-probabilities `[T/4, vocab + 1]` for one utterance.
    pub fn forward(&self, features: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let pass = self.forward_tape(&mut tape, features, false)?;
        Ok(tape.value(pass.log_probs).clone().with_requires_grad(false))
    }
}

impl<F: Float> PartitionedEncoder<F> {
    fn module_or_err(&self, layer: usize, kind: ModuleKind) -> Result<&Module<F>> {
        self.module(layer, kind).ok_or_else(|| Error::NotFound(format!("module L{layer}.{kind}")))
    }

    /// Output of module `(layer, kind)` for module input `x` (`[T, d_model]`,
    /// before the module's own pre-norm); the residual is not included.
    pub fn module_output(&self, layer: usize, kind: ModuleKind, x: &Tensor<F>) -> Result<Tensor<F>> {
        let module = self.module_or_err(layer, kind)?;
        let mut tape = Tape::new();
        let mut b = Binder { tape: &mut tape, bindings: Vec::new() };
        let xi = b.tape.constant(x.clone())?;
        let out = module_forward_bound(&mut b, &self.dims, module, xi, false)?;
        Ok(tape.value(out).clone().with_requires_grad(false))
    }

    /// Additive term of one group inside its module's output for module input `x`.
    pub fn group_contribution(&self, id: GroupId, x: &Tensor<F>) -> Result<Tensor<F>> {
        let group = self.group(id).ok_or_else(|| Error::NotFound(format!("group {id}")))?;
        let module = self.module_or_err(id.layer, id.kind)?;
        let mut tape = Tape::new();
        let xn = normalized_input(&mut tape, module, x)?;
        let slices = group.slices.iter().map(|p| tape.constant(p.value.clone())).collect::<Result<Vec<_>>>()?;
        let out = group_forward(&mut tape, &self.dims, id.kind, xn, &slices)?;
        Ok(tape.value(out).clone())
    }

    /// CTC loss of one utterance and the gradient of `loss_weight * loss`
    /// for every parameter (in [`Self::params`] order).
    pub fn loss_and_grads(
        &self,
        features: &Tensor<F>,
        labels: &LabelSeq,
        scaled: bool,
        loss_weight: F,
    ) -> Result<(f64, Vec<Option<Vec<F>>>)> {
        let mut tape = Tape::new();
        let pass = self.forward_tape(&mut tape, features, scaled)?;
        let loss = ctc::ctc_loss_node(&mut tape, pass.log_probs, labels)?;
        let value = tape.value(loss).data()[0].as_f64();
        let weighted = tape.scale(loss, loss_weight)?;
        tape.backward(weighted)?;
        let grads = pass.bindings.iter().map(|b| b.and_then(|id| tape.take_grad(id))).collect();
        Ok((value, grads))
    }

    /// CTC loss of one utterance without gradients.
    pub fn loss(&self, features: &Tensor<F>, labels: &LabelSeq) -> Result<f64> {
        ctc::ctc_loss(&self.forward(features)?, labels)
    }
}

/// Records leaves for parameters in canonical order.
struct Binder<'t, F> {
    tape: &'t mut Tape<F>,
    bindings: Vec<Option<NodeId>>,
}

impl<F: Float> Binder<'_, F> {
    fn bind(&mut self, p: &Param<F>) -> Result<NodeId> {
        let id = self.tape.leaf(p.value.clone())?;
        self.bindings.push(Some(id));
        Ok(id)
    }

    fn skip(&mut self) {
        self.bindings.push(None);
    }
}

fn normalized_input<F: Float>(tape: &mut Tape<F>, module: &Module<F>, x: &Tensor<F>) -> Result<NodeId> {
    let xi = tape.constant(x.clone())?;
    let gamma = tape.constant(module.norm_gamma.value.clone())?;
    let beta = tape.constant(module.norm_beta.value.clone())?;
    tape.layer_norm(xi, gamma, beta, F::of(LN_EPS))
}

fn module_forward_bound<F: Float>(
    b: &mut Binder<'_, F>,
    dims: &Dims,
    module: &Module<F>,
    x: NodeId,
    scaled: bool,
) -> Result<NodeId> {
    let gamma = b.bind(&module.norm_gamma)?;
    let beta = b.bind(&module.norm_beta)?;
    let xn = b.tape.layer_norm(x, gamma, beta, F::of(LN_EPS))?;
    let mut total: Option<NodeId> = None;
    for g in &module.groups {
        let mut slices = g.slices.iter().map(|p| b.bind(p)).collect::<Result<Vec<_>>>()?;
        if scaled {
            let s = b.bind(&g.scale)?;
            for w in &mut slices {
                *w = b.tape.scale_by(*w, s)?;
            }
        } else {
            b.skip();
        }
        let out = group_forward(b.tape, dims, module.kind, xn, &slices)?;
        total = Some(match total {
            Some(acc) => b.tape.add(acc, out)?,
            None => out,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => {
            let shape = b.tape.value(x).shape().to_vec();
            b.tape.zeros(&shape)
        }
    }
}

/// One group's additive term given the normalised module input `xn`.
fn group_forward<F: Float>(
    tape: &mut Tape<F>,
    dims: &Dims,
    kind: ModuleKind,
    xn: NodeId,
    w: &[NodeId],
) -> Result<NodeId> {
    match kind {
        ModuleKind::Ffn1 | ModuleKind::Ffn2 => {
            let h = tape.matmul(xn, w[0])?;
            let h = tape.swish(h)?;
            tape.matmul(h, w[1])
        }
        ModuleKind::Mhsa => {
            let q = tape.matmul(xn, w[0])?;
            let k = tape.matmul(xn, w[1])?;
            let v = tape.matmul(xn, w[2])?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, F::of(1.0 / (dims.d_head as f64).sqrt()))?;
            let attn = tape.softmax(scores)?;
            let ctx = tape.matmul(attn, v)?;
            tape.matmul(ctx, w[3])
        }
        ModuleKind::Conv => {
            let u = tape.matmul(xn, w[0])?;
            let gated = tape.glu(u)?;
            let y = tape.depthwise_conv1d(gated, w[1])?;
            let y = tape.swish(y)?;
            tape.matmul(y, w[2])
        }
        ModuleKind::Cgmlp => {
            let c = dims.cgmlp_group_channels;
            let u = tape.matmul(xn, w[0])?;
            let u = tape.swish(u)?;
            let value = tape.narrow_cols(u, 0, c)?;
            let gate = tape.narrow_cols(u, c, c)?;
            let gate = tape.depthwise_conv1d(gate, w[1])?;
            let z = tape.mul(value, gate)?;
            tape.matmul(z, w[2])
        }
    }
}
