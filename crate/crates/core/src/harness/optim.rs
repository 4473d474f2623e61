use crate::encoder::Param;
use crate::error::{Error, Result};
use crate::harness::config::TrainSettings;
use crate::tensor::Float;

/// Piecewise-linear one-cycle schedule: start to peak over the first 45% of
/// steps, back to start by 90%, then down to the final rate at `total`.
pub fn one_cycle_lr(step: usize, total: usize, start: f64, peak: f64, end: f64) -> Result<f64> {
    if step > total {
        return Err(Error::InvalidState(format!("step {step} past the last step {total}")));
    }
    let rise = total * 45 / 100;
    let fall = total * 90 / 100;
    let lerp = |a: f64, b: f64, s0: usize, s1: usize| {
        if step == s1 {
            b
        } else {
            a + (b - a) * (step - s0) as f64 / (s1 - s0) as f64
        }
    };
    Ok(if step <= rise {
        lerp(start, peak, 0, rise)
    } else if step <= fall {
        lerp(peak, start, rise, fall)
    } else {
        lerp(start, end, fall, total)
    })
}

/// Learning rate for `step` under a run's settings.
pub fn scheduled_lr(step: usize, t: &TrainSettings) -> Result<f64> {
    one_cycle_lr(step, t.total_steps, t.lr_start, t.lr_peak, t.lr_final)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn from_settings(t: &TrainSettings) -> Self {
        Adam { beta1: t.adam_beta1, beta2: t.adam_beta2, eps: t.adam_eps }
    }

    /// One bias-corrected update at step count `t` (1-based). Parameters
    /// without a gradient are left untouched.
    pub fn step<'a, F: Float>(
        &self,
        params: impl IntoIterator<Item = &'a mut Param<F>>,
        t: u64,
        lr: f64,
    ) -> Result<()> {
        if t == 0 {
            return Err(Error::InvalidState("adam step count starts at 1".into()));
        }
        let c1 = 1.0 - self.beta1.powi(t.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - self.beta2.powi(t.min(i32::MAX as u64) as i32);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one, eps) = (F::one(), F::of(self.eps));
        let (step_size, c2) = (F::of(lr / c1), F::of(c2));
        for p in params {
            let n = p.value.len();
            if p.m.len() != n || p.v.len() != n {
                return Err(Error::InvalidState(format!(
                    "moments of {} have lengths {}/{} for {n} weights",
                    p.name,
                    p.m.len(),
                    p.v.len()
                )));
            }
            let Some(grad) = p.value.grad().map(<[F]>::to_vec) else { continue };
            let (m, v) = (&mut p.m, &mut p.v);
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m).zip(v) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w = *w - step_size * *m / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    #[test]
    fn endpoints_are_exact() {
        let lr = |s| one_cycle_lr(s, 3000, 4e-6, 4e-4, 1e-7).unwrap();
        assert_eq!(lr(0), 4e-6);
        assert_eq!(lr(1350), 4e-4);
        assert_eq!(lr(2700), 4e-6);
        assert_eq!(lr(3000), 1e-7);
        assert!((lr(675) - (4e-6 + 4e-4) / 2.0).abs() < 1e-18);
        assert!(matches!(one_cycle_lr(3001, 3000, 4e-6, 4e-4, 1e-7), Err(Error::InvalidState(_))));
        assert_eq!(one_cycle_lr(1, 1, 4e-6, 4e-4, 1e-7).unwrap(), 1e-7);
    }

    proptest! {
        #[test]
        fn schedule_stays_in_range_and_is_piecewise_monotone(total in 1usize..5000, frac in 0.0f64..=1.0) {
            let step = (frac * total as f64) as usize;
            let lr = one_cycle_lr(step, total, 4e-6, 4e-4, 1e-7).unwrap();
            prop_assert!((1e-7..=4e-4).contains(&lr));
            if step > 0 && step <= total * 45 / 100 {
                prop_assert!(lr >= one_cycle_lr(step - 1, total, 4e-6, 4e-4, 1e-7).unwrap());
            }
            if step > total * 45 / 100 + 1 {
                prop_assert!(lr <= one_cycle_lr(step - 1, total, 4e-6, 4e-4, 1e-7).unwrap());
            }
        }
    }

    fn single(w: f64, g: Option<f64>) -> Param<f64> {
        let mut p = Param::new("w", Tensor::from_vec(&[1], vec![w]).unwrap());
        if let Some(g) = g {
            p.value.accumulate_grad(&[g]).unwrap();
        }
        p
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let adam = Adam { beta1: 0.9, beta2: 0.98, eps: 1e-9 };
        for g in [0.3, -2.0, 1e-4] {
            let mut p = single(1.0, Some(g));
            adam.step([&mut p], 1, 1e-2).unwrap();
            // m̂ = g, v̂ = g², so Δ = -lr·g/(|g| + eps)
            let expect = 1.0 - 1e-2 * g / (g.abs() + 1e-9);
            assert!((p.value.data()[0] - expect).abs() < 1e-15);
            assert!((p.m[0] - 0.1 * g).abs() < 1e-15);
            assert!((p.v[0] - 0.02 * g * g).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_and_missing_gradients() {
        let adam = Adam { beta1: 0.9, beta2: 0.98, eps: 1e-9 };
        let mut zero = single(0.5, Some(0.0));
        let mut none = single(0.5, None);
        adam.step([&mut zero, &mut none], 1, 1e-2).unwrap();
        assert_eq!(zero.value.data()[0], 0.5);
        assert_eq!(none.value.data()[0], 0.5);
        assert!(adam.step([&mut zero], 0, 1e-2).is_err());
    }

    #[test]
    fn mismatched_moments_rejected() {
        let adam = Adam { beta1: 0.9, beta2: 0.98, eps: 1e-9 };
        let mut p = single(0.5, Some(1.0));
        p.m.push(0.0);
        assert!(matches!(adam.step([&mut p], 1, 1e-2), Err(Error::InvalidState(_))));
    }

    #[test]
    fn matches_reference_over_several_steps() {
        let adam = Adam { beta1: 0.9, beta2: 0.98, eps: 1e-9 };
        let grads = [0.5, -0.2, 0.1, 0.7];
        let mut p = single(1.0, None);
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (i, &g) in grads.iter().enumerate() {
            p.value.zero_grad();
            p.value.accumulate_grad(&[g]).unwrap();
            adam.step([&mut p], i as u64 + 1, 1e-3).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.98 * v + 0.02 * g * g;
            let t = i as i32 + 1;
            w -= 1e-3 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.98f64.powi(t))).sqrt() + 1e-9);
        }
        assert!((p.value.data()[0] - w).abs() < 1e-12);
    }
}
