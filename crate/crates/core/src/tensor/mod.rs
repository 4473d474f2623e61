//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! Everything is generic over [`Float`] so the same model code runs in `f32`
//! for training and in `f64` for gradient verification.

mod gradcheck;
mod tape;

use std::fmt;
use std::iter::Sum;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

pub use gradcheck::{compare_with_central_differences, finite_diff_check, relative_error, GradCheckReport};
pub use tape::{NodeId, Tape};

/// Scalar element type of a [`Tensor`].
pub trait Float: num_traits::Float + fmt::Debug + fmt::Display + Default + Send + Sync + Sum + 'static {
    const NAME: &'static str;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Float for f32 {
    const NAME: &'static str = "f32";

    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    const NAME: &'static str = "f64";

    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Initialisation recipe for [`Tensor::alloc`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
    Normal { mean: f64, std: f64, seed: u64 },
}

/// Dense row-major array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(format!("dimensions must be >= 1, got {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<F: Float> Tensor<F> {
    pub fn alloc(shape: &[usize], init: Init) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = match init {
            Init::Zeros => vec![F::zero(); n],
            Init::Constant(c) => vec![F::of(c); n],
            Init::Uniform { lo, hi, seed } => {
                let dist =
                    Uniform::new(lo, hi).map_err(|e| Error::InvalidConfig(format!("uniform({lo}, {hi}): {e}")))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| F::of(dist.sample(&mut rng))).collect()
            }
            Init::Normal { mean, std, seed } => {
                let dist =
                    Normal::new(mean, std).map_err(|e| Error::InvalidConfig(format!("normal({mean}, {std}): {e}")))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| F::of(dist.sample(&mut rng))).collect()
            }
        };
        Ok(Tensor { shape: shape.to_vec(), data, grad: None, requires_grad: false })
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape(format!("shape {shape:?} needs {n} elements, got {}", data.len())));
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None, requires_grad: false })
    }

    pub fn scalar(x: F) -> Self {
        Tensor { shape: vec![1], data: vec![x], grad: None, requires_grad: false }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<F>> {
        self.grad.as_mut()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[F]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::InvalidShape(format!(
                "gradient of length {} for tensor of length {}",
                g.len(),
                self.data.len()
            )));
        }
        let buf = self.grad.get_or_insert_with(|| vec![F::zero(); g.len()]);
        for (b, &x) in buf.iter_mut().zip(g) {
            *b = *b + x;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Number of rows when viewed as a matrix over the last axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.as_f64())).collect(),
            grad: self.grad.as_ref().map(|g| g.iter().map(|x| G::of(x.as_f64())).collect()),
            requires_grad: self.requires_grad,
        }
    }
}

/// Mixes a base seed with a path of integers into a fresh seed (SplitMix64).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alloc_zeros_and_constant() {
        let z = Tensor::<f32>::alloc(&[2, 2], Init::Zeros).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let c = Tensor::<f64>::alloc(&[3], Init::Constant(1.5)).unwrap();
        assert_eq!(c.data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn alloc_is_deterministic_per_seed() {
        let init = Init::Uniform { lo: -1.0, hi: 1.0, seed: 7 };
        let a = Tensor::<f32>::alloc(&[4], init).unwrap();
        let b = Tensor::<f32>::alloc(&[4], init).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|x| (-1.0..1.0).contains(x)));
        let n1 = Tensor::<f64>::alloc(&[16], Init::Normal { mean: 0.0, std: 1.0, seed: 3 }).unwrap();
        let n2 = Tensor::<f64>::alloc(&[16], Init::Normal { mean: 0.0, std: 1.0, seed: 4 }).unwrap();
        assert_ne!(n1, n2);
    }

    #[test]
    fn alloc_rejects_zero_dims() {
        assert!(matches!(Tensor::<f32>::alloc(&[2, 0], Init::Zeros), Err(Error::InvalidShape(_))));
        assert!(matches!(Tensor::<f32>::alloc(&[], Init::Zeros), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn grad_accumulates_until_zeroed() {
        let mut t = Tensor::<f64>::alloc(&[2], Init::Zeros).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }
}
