use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// The five partitioned module types of an encoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleKind {
    Ffn1,
    Mhsa,
    Conv,
    Ffn2,
    Cgmlp,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 5] =
        [ModuleKind::Ffn1, ModuleKind::Mhsa, ModuleKind::Conv, ModuleKind::Ffn2, ModuleKind::Cgmlp];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Ffn1 => "FFN1",
            ModuleKind::Mhsa => "MHSA",
            ModuleKind::Conv => "CONV",
            ModuleKind::Ffn2 => "FFN2",
            ModuleKind::Cgmlp => "CGMLP",
        }
    }

    pub fn is_ffn(self) -> bool {
        matches!(self, ModuleKind::Ffn1 | ModuleKind::Ffn2)
    }

    /// Names of the weight slices every group of this kind owns.
    pub fn slice_names(self) -> &'static [&'static str] {
        match self {
            ModuleKind::Ffn1 | ModuleKind::Ffn2 => &["w_ff1", "w_ff2"],
            ModuleKind::Mhsa => &["w_q", "w_k", "w_v", "w_o"],
            ModuleKind::Conv => &["w_in", "w_conv", "w_out"],
            ModuleKind::Cgmlp => &["w_up", "w_conv", "w_down"],
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModuleKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown module kind {s:?}")))
    }
}

/// Identity of a parameter group. Ordering is (layer, kind, slot, generation),
/// which is also the ranking tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupId {
    pub layer: usize,
    pub kind: ModuleKind,
    pub slot: usize,
    /// 0 for groups created at build time, a fresh counter value for grown ones.
    pub generation: u32,
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}.{}.g{}", self.layer, self.kind, self.slot, self.generation)
    }
}

impl FromStr for GroupId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("malformed group id {s:?}"));
        let parts: Vec<&str> = s.split('.').collect();
        let [layer, kind, slot, generation] = parts[..] else { return Err(bad()) };
        Ok(GroupId {
            layer: layer.strip_prefix('L').and_then(|x| x.parse().ok()).ok_or_else(bad)?,
            kind: kind.parse()?,
            slot: slot.parse().map_err(|_| bad())?,
            generation: generation.strip_prefix('g').and_then(|x| x.parse().ok()).ok_or_else(bad)?,
        })
    }
}

/// A trainable tensor together with its Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: &'static str,
    pub value: Tensor<F>,
    pub m: Vec<F>,
    pub v: Vec<F>,
}

impl<F: Float> Param<F> {
    pub fn new(name: &'static str, value: Tensor<F>) -> Self {
        let n = value.len();
        Param { name, value: value.with_requires_grad(true), m: vec![F::zero(); n], v: vec![F::zero(); n] }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn clear_moments(&mut self) {
        self.m.iter_mut().for_each(|x| *x = F::zero());
        self.v.iter_mut().for_each(|x| *x = F::zero());
    }
}

/// One independently growable / droppable slice of a module.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGroup<F> {
    pub id: GroupId,
    /// Weight slices in [`ModuleKind::slice_names`] order.
    pub slices: Vec<Param<F>>,
    /// Smoothed importance score.
    pub score: f64,
    /// Learnable scale applied to every slice element on scaled steps.
    pub scale: Param<F>,
}

impl<F: Float> ParameterGroup<F> {
    pub fn new(id: GroupId, slices: Vec<Param<F>>) -> Self {
        ParameterGroup { id, slices, score: 0.0, scale: unit_scale() }
    }

    /// Number of scalar weights across all slices (the scale is not counted).
    pub fn param_count(&self) -> usize {
        self.slices.iter().map(Param::len).sum()
    }

    pub fn learnable_scale(&self) -> F {
        self.scale.value.data()[0]
    }
}

fn unit_scale<F: Float>() -> Param<F> {
    Param::new("scale", Tensor::scalar(F::one()))
}
