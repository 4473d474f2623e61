use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::ctc::LabelSeq;
use crate::error::{Error, Result};
use crate::harness::config::DataConfig;
use crate::tensor::{derive_seed, Float, Tensor};

const EMBED_STREAM: u64 = 0xe4b;
const TRAIN_STREAM: u64 = 0x7a1;
const EVAL_STREAM: u64 = 0xe7a;

/// One synthetic utterance: `[T, feature_dim]` features and their transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance<F> {
    pub features: Tensor<F>,
    pub labels: LabelSeq,
}

/// Symbols rendered as fixed random feature vectors, each held for
/// `frames_per_symbol` frames.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    cfg: DataConfig,
    feature_dim: usize,
    /// `embeddings[s - 1]` renders symbol `s`.
    embeddings: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn new(cfg: &DataConfig, feature_dim: usize) -> Result<Self> {
        cfg.validate()?;
        if feature_dim == 0 {
            return Err(Error::InvalidConfig("feature_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[EMBED_STREAM]));
        let embeddings =
            (0..cfg.vocab).map(|_| (0..feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        Ok(SyntheticTask { cfg: cfg.clone(), feature_dim, embeddings })
    }

    pub fn config(&self) -> &DataConfig {
        &self.cfg
    }

    /// Draws a transcript: uniform length, then symbols uniform over those
    /// differing from their predecessor.
    pub fn draw_labels(&self, rng: &mut impl Rng) -> LabelSeq {
        let [lo, hi] = self.cfg.seq_len_range;
        let n = rng.random_range(lo..=hi);
        let v = self.cfg.vocab;
        let mut out: Vec<usize> = Vec::with_capacity(n);
        for _ in 0..n {
            let s = match out.last() {
                None => rng.random_range(1..=v),
                Some(&prev) => {
                    let s = rng.random_range(1..v);
                    if s >= prev {
                        s + 1
                    } else {
                        s
                    }
                }
            };
            out.push(s);
        }
        LabelSeq::new(out).expect("symbols are never blank")
    }

    /// Renders `labels` with noise drawn from `seed`.
    pub fn render<F: Float>(&self, labels: &LabelSeq, seed: u64) -> Result<Tensor<F>> {
        let fps = self.cfg.frames_per_symbol;
        let mut data = Vec::with_capacity(labels.len() * fps * self.feature_dim);
        for &s in labels.symbols() {
            let e = self
                .embeddings
                .get(s.wrapping_sub(1))
                .ok_or_else(|| Error::InvalidInput(format!("symbol {s} outside vocab {}", self.cfg.vocab)))?;
            for _ in 0..fps {
                data.extend_from_slice(e);
            }
        }
        if self.cfg.noise_std > 0.0 {
            let noise =
                Normal::new(0.0, self.cfg.noise_std).map_err(|e| Error::InvalidConfig(format!("noise_std: {e}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            data.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
        }
        Tensor::from_vec(&[labels.len() * fps, self.feature_dim], data.into_iter().map(F::of).collect())
    }

    pub fn utterance<F: Float>(&self, seed: u64) -> Result<Utterance<F>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = self.draw_labels(&mut rng);
        let features = self.render(&labels, rng.random())?;
        Ok(Utterance { features, labels })
    }

    /// Training batch for `step`.
    pub fn batch<F: Float>(&self, step: usize, batch_size: usize) -> Result<Vec<Utterance<F>>> {
        (0..batch_size)
            .map(|i| self.utterance(derive_seed(self.cfg.seed, &[TRAIN_STREAM, step as u64, i as u64])))
            .collect()
    }

    /// Held-out utterance `index` of evaluation stream `eval_seed`.
    pub fn held_out<F: Float>(&self, eval_seed: u64, index: usize) -> Result<Utterance<F>> {
        self.utterance(derive_seed(self.cfg.seed, &[EVAL_STREAM, eval_seed, index as u64]))
    }
}

/// `batch_size` utterances generated from `seed`.
pub fn generate_synthetic_batch<F: Float>(
    cfg: &DataConfig,
    feature_dim: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Utterance<F>>> {
    let task = SyntheticTask::new(cfg, feature_dim)?;
    (0..batch_size).map(|i| task.utterance(derive_seed(seed, &[i as u64]))).collect()
}
