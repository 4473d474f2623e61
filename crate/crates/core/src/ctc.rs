//! Connectionist Temporal Classification.
//!
//! The loss is computed with the forward-backward recursions over the
//! blank-augmented label sequence `∅ l1 ∅ l2 … lS ∅`, entirely in log space.
//! Blank is always class 0.

use crate::error::{Error, Result};
use crate::tensor::{Float, NodeId, Tape, Tensor};

pub const BLANK: usize = 0;

/// A label sequence over `1..=vocab`; never contains [`BLANK`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct LabelSeq(Vec<usize>);

impl LabelSeq {
    pub fn new(symbols: Vec<usize>) -> Result<Self> {
        if symbols.contains(&BLANK) {
            return Err(Error::InvalidInput("label sequence contains the blank symbol".into()));
        }
        Ok(LabelSeq(symbols))
    }

    pub fn symbols(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Minimum frame count that admits an alignment: one frame per label plus
    /// a separating blank between equal neighbours.
    pub fn min_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

pub(crate) fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Log forward/backward scores over `frames x (2S+1)` extended states.
///
/// `beta[t][s]` excludes the emission at `t`, so `alpha[t][s] + beta[t][s]`
/// is the log mass of all alignments occupying `s` at `t`.
#[derive(Debug, Clone)]
pub struct CtcTable {
    pub frames: usize,
    pub states: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl CtcTable {
    /// `log p(labels | x)` evaluated through the cut at frame `t`.
    pub fn log_likelihood_at(&self, t: usize) -> f64 {
        let row = t * self.states;
        (0..self.states).map(|s| self.alpha[row + s] + self.beta[row + s]).fold(f64::NEG_INFINITY, log_sum_exp)
    }
}

#[derive(Debug, Clone)]
pub struct CtcOutput {
    /// `-log p(labels | x)`
    pub loss: f64,
    /// d loss / d log_probs, same layout as the input.
    pub grad: Vec<f64>,
    pub table: CtcTable,
}

fn check_input<F: Float>(log_probs: &Tensor<F>, labels: &LabelSeq) -> Result<(usize, usize)> {
    let &[frames, classes] = log_probs.shape() else {
        return Err(Error::InvalidShape(format!(
            "ctc: log_probs must be [frames, classes], got {:?}",
            log_probs.shape()
        )));
    };
    if classes < 2 {
        return Err(Error::InvalidShape("ctc: need at least blank plus one label".into()));
    }
    if let Some(&bad) = labels.symbols().iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidInput(format!("label {bad} outside vocabulary of {classes}")));
    }
    if frames < labels.min_frames() {
        return Err(Error::InfeasibleAlignment { frames, labels: labels.len() });
    }
    Ok((frames, classes))
}

/// Exact CTC loss and gradient by forward-backward.
pub fn ctc_forward_backward<F: Float>(log_probs: &Tensor<F>, labels: &LabelSeq) -> Result<CtcOutput> {
    let (frames, classes) = check_input(log_probs, labels)?;
    let lp = |t: usize, k: usize| log_probs.data()[t * classes + k].as_f64();
    let ext: Vec<usize> = std::iter::once(BLANK).chain(labels.symbols().iter().flat_map(|&l| [l, BLANK])).collect();
    let states = ext.len();
    // a skip from s-2 to s is legal for a label that differs from the previous label
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![neg; frames * states];
    alpha[0] = lp(0, ext[0]);
    if states > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * states);
        let prev = &prev[(t - 1) * states..];
        for s in 0..states {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_sum_exp(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = log_sum_exp(acc, prev[s - 2]);
            }
            cur[s] = if acc == neg { neg } else { acc + lp(t, ext[s]) };
        }
    }

    let mut beta = vec![neg; frames * states];
    let last = (frames - 1) * states;
    beta[last + states - 1] = 0.0;
    if states > 1 {
        beta[last + states - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * states);
        let cur = &mut cur[t * states..];
        for s in 0..states {
            let mut acc = next[s] + lp(t + 1, ext[s]);
            if s + 1 < states {
                acc = log_sum_exp(acc, next[s + 1] + lp(t + 1, ext[s + 1]));
            }
            if s + 2 < states && can_skip(s + 2) {
                acc = log_sum_exp(acc, next[s + 2] + lp(t + 1, ext[s + 2]));
            }
            cur[s] = acc;
        }
    }

    let mut log_p = alpha[last + states - 1];
    if states > 1 {
        log_p = log_sum_exp(log_p, alpha[last + states - 2]);
    }
    if log_p == neg {
        return Err(Error::InfeasibleAlignment { frames, labels: labels.len() });
    }

    let mut grad = vec![0.0; frames * classes];
    for t in 0..frames {
        let mut occ = vec![neg; classes];
        for s in 0..states {
            let v = alpha[t * states + s] + beta[t * states + s];
            occ[ext[s]] = log_sum_exp(occ[ext[s]], v);
        }
        for k in 0..classes {
            grad[t * classes + k] = -(occ[k] - log_p).exp();
        }
    }

    Ok(CtcOutput { loss: -log_p, grad, table: CtcTable { frames, states, alpha, beta } })
}

/// `-log p(labels | log_probs)`.
pub fn ctc_loss<F: Float>(log_probs: &Tensor<F>, labels: &LabelSeq) -> Result<f64> {
    Ok(ctc_forward_backward(log_probs, labels)?.loss)
}

/// Records the CTC loss of a `[frames, classes]` node as a differentiable scalar.
pub fn ctc_loss_node<F: Float>(tape: &mut Tape<F>, log_probs: NodeId, labels: &LabelSeq) -> Result<NodeId> {
    let out = ctc_forward_backward(tape.value(log_probs), labels)?;
    let grad = out.grad.iter().map(|&g| F::of(g)).collect();
    tape.custom_scalar("ctc_loss", log_probs, F::of(out.loss), grad)
}

/// Merges repeated frame labels, then removes blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

const ORACLE_MAX_FRAMES: usize = 8;
const ORACLE_MAX_CLASSES: usize = 5;

/// Reference CTC loss by enumerating every frame-level path.
pub fn ctc_brute_force<F: Float>(log_probs: &Tensor<F>, labels: &LabelSeq) -> Result<f64> {
    let &[frames, classes] = log_probs.shape() else {
        return Err(Error::InvalidShape(format!("ctc: bad shape {:?}", log_probs.shape())));
    };
    if frames > ORACLE_MAX_FRAMES || classes > ORACLE_MAX_CLASSES {
        return Err(Error::OracleTooLarge(format!(
            "{classes}^{frames} paths (limit {ORACLE_MAX_CLASSES}^{ORACLE_MAX_FRAMES})"
        )));
    }
    if let Some(&bad) = labels.symbols().iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidInput(format!("label {bad} outside vocabulary of {classes}")));
    }
    let lp = log_probs.data();
    let mut path = vec![0usize; frames];
    let mut total = f64::NEG_INFINITY;
    loop {
        if collapse(&path) == labels.symbols() {
            let score: f64 = path.iter().enumerate().map(|(t, &k)| lp[t * classes + k].as_f64()).sum();
            total = log_sum_exp(total, score);
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == frames {
                return if total == f64::NEG_INFINITY {
                    Err(Error::InfeasibleAlignment { frames, labels: labels.len() })
                } else {
                    Ok(-total)
                };
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Per-frame argmax followed by [`collapse`].
pub fn greedy_decode<F: Float>(log_probs: &Tensor<F>) -> LabelSeq {
    let classes = log_probs.cols();
    let path: Vec<usize> = log_probs
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, F::neg_infinity()), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect();
    LabelSeq(collapse(&path))
}

/// Edit distance divided by `max(1, len(reference))`.
pub fn label_error_rate(hyp: &LabelSeq, reference: &LabelSeq) -> f64 {
    let (a, b) = (hyp.symbols(), reference.symbols());
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()] as f64 / b.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(s: &[usize]) -> LabelSeq {
        LabelSeq::new(s.to_vec()).unwrap()
    }

    fn log_rows(rows: &[&[f64]]) -> Tensor<f64> {
        let c = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect();
        Tensor::from_vec(&[rows.len(), c], data).unwrap()
    }

    #[test]
    fn single_frame_single_label() {
        let lp = log_rows(&[&[0.25, 0.5, 0.25]]);
        let loss = ctc_loss(&lp, &labels(&[1])).unwrap();
        assert!((loss - 0.5f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_uniform_three_paths() {
        let third = 1.0 / 3.0;
        let lp = log_rows(&[&[third; 3], &[third; 3]]);
        let loss = ctc_loss(&lp, &labels(&[1])).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        let oracle = ctc_brute_force(&lp, &labels(&[1])).unwrap();
        assert!((loss - oracle).abs() < 1e-9);
    }

    #[test]
    fn empty_labels_is_all_blank_path() {
        let lp = log_rows(&[&[0.7, 0.2, 0.1], &[0.4, 0.5, 0.1], &[0.9, 0.05, 0.05]]);
        let loss = ctc_loss(&lp, &labels(&[])).unwrap();
        let expected = -(0.7f64.ln() + 0.4f64.ln() + 0.9f64.ln());
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn infeasible_on_both_paths() {
        let lp = log_rows(&[&[0.5, 0.25, 0.25], &[0.5, 0.25, 0.25]]);
        // [1,1] needs three frames
        assert!(matches!(ctc_loss(&lp, &labels(&[1, 1])), Err(Error::InfeasibleAlignment { .. })));
        assert!(matches!(ctc_brute_force(&lp, &labels(&[1, 1])), Err(Error::InfeasibleAlignment { .. })));
        assert!(matches!(ctc_loss(&lp, &labels(&[1, 2, 1])), Err(Error::InfeasibleAlignment { .. })));
    }

    #[test]
    fn oracle_refuses_large_inputs() {
        let lp = Tensor::<f64>::from_vec(&[9, 3], vec![-(3f64.ln()); 27]).unwrap();
        assert!(matches!(ctc_brute_force(&lp, &labels(&[1])), Err(Error::OracleTooLarge(_))));
    }

    #[test]
    fn blank_in_labels_rejected() {
        assert!(LabelSeq::new(vec![1, 0]).is_err());
    }

    #[test]
    fn constant_cut_property() {
        let lp = log_rows(&[&[0.5, 0.3, 0.2], &[0.1, 0.6, 0.3], &[0.3, 0.3, 0.4], &[0.2, 0.2, 0.6], &[0.6, 0.3, 0.1]]);
        let out = ctc_forward_backward(&lp, &labels(&[1, 2])).unwrap();
        for t in 0..5 {
            assert!((out.table.log_likelihood_at(t) + out.loss).abs() < 1e-5);
        }
    }

    #[test]
    fn greedy_collapse_rules() {
        let one_hot = |path: &[usize]| {
            let data = path.iter().flat_map(|&k| (0..3).map(move |c| if c == k { 0.0 } else { -5.0 })).collect();
            Tensor::<f64>::from_vec(&[path.len(), 3], data).unwrap()
        };
        assert_eq!(greedy_decode(&one_hot(&[0, 1, 1, 0, 2])), labels(&[1, 2]));
        assert_eq!(greedy_decode(&one_hot(&[0, 0, 0])), labels(&[]));
        assert_eq!(greedy_decode(&one_hot(&[1, 0, 1])), labels(&[1, 1]));
    }

    #[test]
    fn label_error_rates() {
        assert_eq!(label_error_rate(&labels(&[1, 2]), &labels(&[1, 2])), 0.0);
        assert_eq!(label_error_rate(&labels(&[]), &labels(&[1, 2])), 1.0);
        assert_eq!(label_error_rate(&labels(&[1, 3]), &labels(&[1, 2])), 0.5);
        assert_eq!(label_error_rate(&labels(&[1]), &labels(&[])), 1.0);
    }
}
