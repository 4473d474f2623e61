use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::ctc::{greedy_decode, label_error_rate};
use crate::encoder::{ModuleKind, PartitionedEncoder};
use crate::error::{Error, Result};
use crate::harness::checkpoint::CheckpointManifest;
use crate::harness::config::DataConfig;
use crate::harness::data::SyntheticTask;
use crate::tensor::Float;

/// Per-module parameter ratio between two snapshots of the same model.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionReport {
    /// `(layer, kind, params_after / params_before)` in block order.
    pub rows: Vec<(usize, ModuleKind, f64)>,
}

impl DistributionReport {
    pub fn ratio(&self, layer: usize, kind: ModuleKind) -> Option<f64> {
        self.rows.iter().find(|r| r.0 == layer && r.1 == kind).map(|r| r.2)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("layer\tmodule_kind\tratio\n");
        for (layer, kind, ratio) in &self.rows {
            let _ = writeln!(out, "{layer}\t{kind}\t{ratio:.4}");
        }
        out
    }
}

fn module_sizes(m: &CheckpointManifest) -> BTreeMap<(usize, ModuleKind), usize> {
    let mut sizes = BTreeMap::new();
    for l in 0..m.config.model.layers {
        for kind in m.config.model.architecture.block_layout() {
            sizes.insert((l, kind), 0);
        }
    }
    for g in &m.groups {
        *sizes.entry((g.id.layer, g.id.kind)).or_insert(0) += g.param_count;
    }
    sizes
}

/// Compares the group parameter counts recorded in two manifests.
pub fn report_distribution(before: &CheckpointManifest, after: &CheckpointManifest) -> Result<DistributionReport> {
    let (a, b) = (&before.config.model, &after.config.model);
    if a.architecture != b.architecture || a.layers != b.layers || a.d_model != b.d_model {
        return Err(Error::InvalidInput(format!(
            "cannot compare {} x{} (d={}) with {} x{} (d={})",
            a.architecture.as_str(),
            a.layers,
            a.d_model,
            b.architecture.as_str(),
            b.layers,
            b.d_model
        )));
    }
    let (sb, sa) = (module_sizes(before), module_sizes(after));
    let mut rows = Vec::with_capacity(sb.len());
    for l in 0..a.layers {
        for kind in a.architecture.block_layout() {
            let p0 = sb[&(l, kind)];
            let p1 = sa[&(l, kind)];
            let ratio = if p0 == 0 {
                if p1 == 0 {
                    1.0
                } else {
                    f64::INFINITY
                }
            } else {
                p1 as f64 / p0 as f64
            };
            rows.push((l, kind, ratio));
        }
    }
    Ok(DistributionReport { rows })
}

/// Mean greedy label error rate on `n` held-out utterances of stream `eval_seed`.
pub fn evaluate<F: Float>(model: &PartitionedEncoder<F>, n: usize, data: &DataConfig, eval_seed: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidInput("need at least one evaluation utterance".into()));
    }
    let task = SyntheticTask::new(data, model.config().feature_dim)?;
    let rates = (0..n)
        .into_par_iter()
        .map(|i| {
            let u = task.held_out::<F>(eval_seed, i)?;
            let hyp = greedy_decode(&model.forward(&u.features)?);
            Ok(label_error_rate(&hyp, &u.labels))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(rates.iter().sum::<f64>() / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::checkpoint::{read_manifest, save_checkpoint, TrainState};
    use crate::harness::config::TrainConfig;
    use crate::surgery::{drop_group, grow_group, InitStrategy};

    fn manifest_of(model: &PartitionedEncoder<f32>, cfg: &TrainConfig) -> CheckpointManifest {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(model, cfg, &TrainState::default(), dir.path()).unwrap();
        read_manifest(dir.path()).unwrap()
    }

    #[test]
    fn ratios_follow_group_counts() {
        let cfg = TrainConfig::default();
        let base = PartitionedEncoder::<f32>::build(&cfg.model).unwrap();
        let m0 = manifest_of(&base, &cfg);
        let same = report_distribution(&m0, &m0).unwrap();
        assert_eq!(same.rows.len(), 8);
        assert!(same.rows.iter().all(|r| r.2 == 1.0));

        let mut model = base.clone();
        let ffn = model.module(0, ModuleKind::Ffn1).unwrap().groups[0].id;
        drop_group(&mut model, ffn).unwrap();
        let head = model.module(1, ModuleKind::Mhsa).unwrap().groups[0].id;
        grow_group(&mut model, head, InitStrategy::Copy, 0.0, 0).unwrap();
        let rep = report_distribution(&m0, &manifest_of(&model, &cfg)).unwrap();
        assert_eq!(rep.ratio(0, ModuleKind::Ffn1), Some(0.75));
        assert_eq!(rep.ratio(1, ModuleKind::Mhsa), Some(2.0));
        assert_eq!(rep.ratio(0, ModuleKind::Conv), Some(1.0));
        assert!(rep.to_tsv().starts_with("layer\tmodule_kind\tratio\n0\tFFN1\t0.7500\n"));

        let mut gone = base.clone();
        let head = gone.module(0, ModuleKind::Mhsa).unwrap().groups[0].id;
        drop_group(&mut gone, head).unwrap();
        let rep = report_distribution(&m0, &manifest_of(&gone, &cfg)).unwrap();
        assert_eq!(rep.ratio(0, ModuleKind::Mhsa), Some(0.0));
    }

    #[test]
    fn mismatched_models_rejected() {
        let cfg = TrainConfig::default();
        let mut deep = cfg.clone();
        deep.model.layers = 3;
        let a = manifest_of(&PartitionedEncoder::build(&cfg.model).unwrap(), &cfg);
        let b = manifest_of(&PartitionedEncoder::build(&deep.model).unwrap(), &deep);
        assert!(matches!(report_distribution(&a, &b), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn untrained_model_scores_near_one_and_is_deterministic() {
        let cfg = TrainConfig::default();
        let model = PartitionedEncoder::<f32>::build(&cfg.model).unwrap();
        let a = evaluate(&model, 40, &cfg.data, 0).unwrap();
        assert_eq!(a, evaluate(&model, 40, &cfg.data, 0).unwrap());
        assert!(a > 0.7, "untrained LER {a}");
    }
}
