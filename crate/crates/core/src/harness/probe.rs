use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{ModelConfig, PartitionedEncoder};
use crate::error::Result;
use crate::harness::checkpoint::param_names;
use crate::harness::config::DataConfig;
use crate::harness::data::SyntheticTask;
use crate::tensor::{compare_with_central_differences, derive_seed, GradCheckReport, Tape};

/// One probed weight: `(parameter name, flat element index)`.
pub type ProbePoint = (String, usize);

/// Checks the encoder + CTC gradient of `probes` randomly chosen weights
/// against central differences in double precision.
///
/// Parameters are drawn uniformly from the parameter list (so norms, biases
/// and scales are as likely as big matrices), then an element uniformly.
pub fn encoder_gradcheck(
    model_cfg: &ModelConfig,
    data: &DataConfig,
    probes: usize,
    seed: u64,
    scaled: bool,
    tol: f64,
) -> Result<(Vec<ProbePoint>, GradCheckReport)> {
    let mut model = PartitionedEncoder::<f64>::build(model_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x9c]));
    if scaled {
        for g in model.groups_mut() {
            g.scale.value.data_mut()[0] = rng.random_range(0.5..1.5);
        }
    }
    let task = SyntheticTask::new(data, model_cfg.feature_dim)?;
    let utt = task.utterance::<f64>(derive_seed(seed, &[0x7e]))?;

    let (_, grads) = model.loss_and_grads(&utt.features, &utt.labels, scaled, 1.0)?;
    let names = param_names(&model);
    let trainable: Vec<usize> = (0..names.len()).filter(|&i| grads[i].is_some()).collect();
    let points: Vec<(usize, usize)> = (0..probes)
        .map(|_| {
            let p = trainable[rng.random_range(0..trainable.len())];
            (p, rng.random_range(0..model.params()[p].len()))
        })
        .collect();
    let x0: Vec<f64> = points.iter().map(|&(p, e)| model.params()[p].value.data()[e]).collect();
    let analytic: Vec<f64> = points.iter().map(|&(p, e)| grads[p].as_ref().expect("trainable")[e]).collect();

    let loss_at = |x: &[f64]| {
        let mut probe = model.clone();
        {
            let mut params = probe.params_mut();
            for (&(p, e), &v) in points.iter().zip(x) {
                params[p].value.data_mut()[e] = v;
            }
        }
        let mut tape = Tape::new();
        let pass = probe.forward_tape(&mut tape, &utt.features, scaled)?;
        let loss = crate::ctc::ctc_loss_node(&mut tape, pass.log_probs, &utt.labels)?;
        Ok(tape.value(loss).data()[0])
    };
    let report = compare_with_central_differences(loss_at, &x0, &analytic, 1e-5, tol)?;
    Ok((points.into_iter().map(|(p, e)| (names[p].clone(), e)).collect(), report))
}
