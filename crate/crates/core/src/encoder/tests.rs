use super::*;

fn cfg(arch: Architecture, d_model: usize, layers: usize) -> ModelConfig {
    ModelConfig { architecture: arch, d_model, layers, kernel_size: 3, ..ModelConfig::default() }
}

fn random_input<F: Float>(frames: usize, width: usize, seed: u64) -> Tensor<F> {
    Tensor::alloc(&[frames, width], Init::Normal { mean: 0.0, std: 1.0, seed }).unwrap()
}

fn rel_err<F: Float>(a: &[F], b: &[F]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y.as_f64().powi(2)).sum();
    (num / den.max(1e-30)).sqrt()
}

#[test]
fn partition_counts() {
    let m = PartitionedEncoder::<f32>::build(&cfg(Architecture::Conformer, 64, 2)).unwrap();
    assert_eq!(m.dims().heads, 1);
    assert_eq!(m.enumerate_groups().len(), (8 + 1 + 4) * 2);

    // H = 256/64 = 4 heads; the formula gives (2C + H + M) * L groups.
    let big = cfg(Architecture::Conformer, 256, 12);
    let per_layer: usize = big.architecture.block_layout().iter().map(|&k| big.initial_groups(k).unwrap()).sum();
    assert_eq!(per_layer * big.layers, 192);

    let eb = PartitionedEncoder::<f32>::build(&cfg(Architecture::EbranchformerLite, 64, 2)).unwrap();
    assert_eq!(eb.enumerate_groups().len(), 26);
    assert_eq!(eb.dims().d_inter, 384);
}

#[test]
fn indivisible_widths_are_rejected() {
    let c = ModelConfig { ffn_dim: Some(10), ..ModelConfig::default() };
    assert!(matches!(PartitionedEncoder::<f32>::build(&c), Err(Error::InvalidConfig(_))));
    let c = ModelConfig { conv_groups: 3, ..ModelConfig::default() };
    assert!(matches!(c.dims(), Err(Error::InvalidConfig(_))));
    let c = ModelConfig { kernel_size: 4, ..ModelConfig::default() };
    assert!(matches!(c.dims(), Err(Error::InvalidConfig(_))));
}

#[test]
fn group_param_counts() {
    let c = cfg(Architecture::Conformer, 64, 1);
    let d = c.dims().unwrap();
    let m = 64;
    assert_eq!(d.group_param_count(ModuleKind::Ffn1), 2 * m * d.ffn_group_width);
    assert_eq!(d.group_param_count(ModuleKind::Mhsa), 4 * m * d.d_head);
    assert_eq!(d.group_param_count(ModuleKind::Conv), m * (4 * m / 4) + 3 * (2 * m / 4) + (2 * m / 4) * m);
    let model = PartitionedEncoder::<f32>::build(&c).unwrap();
    let total: usize = model.enumerate_groups().iter().map(|g| g.param_count).sum();
    assert_eq!(total, model.count_params(ParamScope::EncoderGroups));
    assert_eq!(
        model.count_params(ParamScope::All),
        total
            + model.count_params(ParamScope::Norms)
            + model.count_params(ParamScope::Frontend)
            + model.count_params(ParamScope::Head)
    );
}

#[test]
fn forward_rows_are_log_distributions_and_deterministic() {
    let c = cfg(Architecture::Conformer, 64, 2);
    let model = PartitionedEncoder::<f32>::build(&c).unwrap();
    let x = random_input::<f32>(26, c.feature_dim, 5);
    let a = model.forward(&x).unwrap();
    assert_eq!(a.shape(), &[6, 9]);
    for row in a.data().chunks(9) {
        let s: f64 = row.iter().map(|v| (*v as f64).exp()).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
    let b = model.forward(&x).unwrap();
    assert_eq!(a.data(), b.data());

    let short = random_input::<f32>(3, c.feature_dim, 5);
    assert!(matches!(model.forward(&short), Err(Error::InvalidShape(_))));
}

#[test]
fn module_output_is_sum_of_group_contributions() {
    for arch in [Architecture::Conformer, Architecture::EbranchformerLite] {
        let model = PartitionedEncoder::<f32>::build(&cfg(arch, 64, 1)).unwrap();
        for kind in arch.block_layout() {
            for seed in 0..3 {
                let x = random_input::<f32>(7, 64, seed);
                let out = model.module_output(0, kind, &x).unwrap();
                let module = model.module(0, kind).unwrap();
                let mut sum = vec![0.0f32; out.len()];
                for g in &module.groups {
                    let c = model.group_contribution(g.id, &x).unwrap();
                    sum.iter_mut().zip(c.data()).for_each(|(s, v)| *s += v);
                }
                let err = rel_err(out.data(), &sum);
                assert!(err < 1e-6, "{arch:?} {kind}: rel err {err}");
            }
        }
    }
}

#[test]
fn zeroed_group_contributes_nothing() {
    let mut model = PartitionedEncoder::<f32>::build(&cfg(Architecture::Conformer, 64, 1)).unwrap();
    let id = model.module(0, ModuleKind::Conv).unwrap().groups[2].id;
    for s in &mut model.group_mut(id).unwrap().slices {
        s.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let c = model.group_contribution(id, &random_input(5, 64, 1)).unwrap();
    assert!(c.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_head_contribution_is_module_output() {
    let model = PartitionedEncoder::<f32>::build(&cfg(Architecture::Conformer, 64, 1)).unwrap();
    let x = random_input::<f32>(6, 64, 2);
    let head = model.module(0, ModuleKind::Mhsa).unwrap().groups[0].id;
    assert_eq!(
        model.group_contribution(head, &x).unwrap().data(),
        model.module_output(0, ModuleKind::Mhsa, &x).unwrap().data()
    );
}

#[test]
fn unknown_group_is_not_found() {
    let model = PartitionedEncoder::<f32>::build(&cfg(Architecture::Conformer, 64, 1)).unwrap();
    let id = GroupId { layer: 0, kind: ModuleKind::Ffn1, slot: 9, generation: 0 };
    assert!(matches!(model.group_contribution(id, &random_input(4, 64, 0)), Err(Error::NotFound(_))));
    let stale = GroupId { layer: 0, kind: ModuleKind::Ffn1, slot: 0, generation: 3 };
    assert!(model.group(stale).is_none());
}

#[test]
fn append_keeps_slots_contiguous_and_follows_width_law() {
    let mut model = PartitionedEncoder::<f32>::build(&cfg(Architecture::Conformer, 64, 2)).unwrap();
    let src = model.module(0, ModuleKind::Ffn1).unwrap().groups[1].clone();
    let (w1, w2) = model.ffn_matrices(0, ModuleKind::Ffn1).unwrap();
    assert_eq!(w1.shape(), &[64, 256]);
    assert_eq!(w2.shape(), &[256, 64]);
    let id = model.append_group(0, ModuleKind::Ffn1, src.slices.clone(), src.score).unwrap();
    assert_eq!(id.slot, 4);
    assert_eq!(id.generation, 1);
    let groups = model.enumerate_groups();
    assert_eq!(groups.len(), 27);
    let (w1, _) = model.ffn_matrices(0, ModuleKind::Ffn1).unwrap();
    assert_eq!(w1.shape(), &[64, 256 * 5 / 4]);

    model.remove_group(GroupId { layer: 0, kind: ModuleKind::Ffn1, slot: 0, generation: 0 }).unwrap();
    let slots: Vec<usize> = model.module(0, ModuleKind::Ffn1).unwrap().groups.iter().map(|g| g.id.slot).collect();
    assert_eq!(slots, vec![0, 1, 2, 3]);
}

#[test]
fn empty_attention_module_still_runs() {
    let c = cfg(Architecture::Conformer, 64, 2);
    let mut model = PartitionedEncoder::<f32>::build(&c).unwrap();
    let head = model.module(1, ModuleKind::Mhsa).unwrap().groups[0].id;
    model.remove_group(head).unwrap();
    let x = random_input::<f32>(7, 64, 3);
    let out = model.module_output(1, ModuleKind::Mhsa, &x).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
    let lp = model.forward(&random_input(20, c.feature_dim, 4)).unwrap();
    assert!(lp.all_finite());
}

#[test]
fn bindings_align_with_parameter_order() {
    let c = cfg(Architecture::EbranchformerLite, 64, 2);
    let model = PartitionedEncoder::<f64>::build(&c).unwrap();
    let x = random_input::<f64>(16, c.feature_dim, 9);
    for scaled in [false, true] {
        let mut tape = Tape::new();
        let pass = model.forward_tape(&mut tape, &x, scaled).unwrap();
        let params = model.params();
        assert_eq!(pass.bindings.len(), params.len());
        for (b, p) in pass.bindings.iter().zip(&params) {
            match b {
                Some(id) => assert_eq!(tape.value(*id).shape(), p.value.shape(), "{}", p.name),
                None => assert!(!scaled && p.name == "scale"),
            }
        }
    }
}

#[test]
fn unit_scales_leave_forward_unchanged() {
    let c = cfg(Architecture::Conformer, 64, 2);
    let model = PartitionedEncoder::<f32>::build(&c).unwrap();
    let x = random_input::<f32>(16, c.feature_dim, 9);
    let run = |scaled| {
        let mut tape = Tape::new();
        let pass = model.forward_tape(&mut tape, &x, scaled).unwrap();
        tape.value(pass.log_probs).data().to_vec()
    };
    assert_eq!(run(false), run(true));
}
