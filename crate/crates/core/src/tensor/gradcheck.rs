use super::{NodeId, Tape, Tensor};
use crate::error::Result;

/// Outcome of comparing autodiff gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Flat index (across all parameters) of the worst entry.
    pub worst_index: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Gradients below this magnitude are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares precomputed `analytic` gradients of `f` at `x0` against central
/// differences `(f(x+h) - f(x-h)) / 2h`.
pub fn compare_with_central_differences(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x0: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(x0.len(), analytic.len());
    let mut x = x0.to_vec();
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst_index: 0, tol };
    for i in 0..x.len() {
        x[i] = x0[i] + h;
        let plus = f(&x)?;
        x[i] = x0[i] - h;
        let minus = f(&x)?;
        x[i] = x0[i];
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Gradient check of a scalar function built on a fresh tape from `params`.
///
/// `build` receives the tape and one leaf per parameter tensor and returns the
/// scalar output node.
pub fn finite_diff_check<B>(mut build: B, params: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    B: FnMut(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let leaves = params.iter().map(|p| tape.leaf(p.clone().with_requires_grad(true))).collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &leaves)?;
    tape.backward(out)?;
    let analytic: Vec<f64> = leaves.iter().flat_map(|&l| tape.grad(l).unwrap_or_default().to_vec()).collect();

    let x0: Vec<f64> = params.iter().flat_map(|p| p.data().to_vec()).collect();
    let eval = |flat: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let mut offset = 0;
        let mut leaves = Vec::with_capacity(params.len());
        for p in params {
            let data = flat[offset..offset + p.len()].to_vec();
            offset += p.len();
            leaves.push(tape.leaf(Tensor::from_vec(p.shape(), data)?)?);
        }
        let out = build(&mut tape, &leaves)?;
        Ok(tape.value(out).data()[0])
    };
    compare_with_central_differences(eval, &x0, &analytic, h, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn normal(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::alloc(shape, Init::Normal { mean: 0.0, std: 1.0, seed }).unwrap()
    }

    #[test]
    fn identity_has_zero_error() {
        let w = Tensor::from_vec(&[1], vec![0.7]).unwrap();
        let r = finite_diff_check(|t, p| t.sum(p[0]), &[w], 1e-5, 1e-4).unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
    }

    fn mlp(t: &mut Tape<f64>, p: &[NodeId]) -> Result<NodeId> {
        let h = t.matmul(p[0], p[1])?;
        let h = t.add_row(h, p[2])?;
        let h = t.swish(h)?;
        let o = t.matmul(h, p[3])?;
        let o = t.mul(o, o)?;
        t.sum(o)
    }

    #[test]
    fn two_layer_mlp_matches() {
        let params = [normal(&[3, 4], 1), normal(&[4, 5], 2), normal(&[5], 3), normal(&[5, 2], 4)];
        let r = finite_diff_check(mlp, &params, 1e-5, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn corrupted_backward_rule_is_detected() {
        let params = [normal(&[3, 4], 1), normal(&[4, 5], 2), normal(&[5], 3), normal(&[5, 2], 4)];
        let r = finite_diff_check(
            |t, p| {
                t.inject_matmul_bug = true;
                mlp(t, p)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_err > 0.1, "{r:?}");
        assert!(!r.passed());
    }
}
