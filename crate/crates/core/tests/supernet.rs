mod common;

use hpadapt::supernet::{
    space_cost_model, ArchSpace, ConformerModel, DerivedArch, MaterializeInit, ModelInput, Pick, SpaceConfig,
};
use hpadapt::{Error, Tape, Tensor, Var};
use rand::Rng;

const EQ_TOL: f64 = 1e-6;

struct Outputs {
    ctc: Tensor,
    logits: Tensor,
}

enum Mode<'a> {
    OneHotMix(&'a [usize]),
    Choice(&'a [usize]),
}

fn forward(m: &ConformerModel, mode: Mode<'_>, feats: &Tensor, mask: Option<&[bool]>, prefix: &[usize]) -> Outputs {
    let mut tape = Tape::new();
    let w = m.bind(&mut tape, false);
    let choices = m.space().group_choices();
    let picks: Vec<Pick> = match mode {
        Mode::OneHotMix(idx) => idx
            .iter()
            .zip(&choices)
            .map(|(&i, c)| {
                let v = (0..c.len()).map(|j| if i == j { 1.0 } else { 0.0 }).collect();
                Pick::Mix(tape.constant(Tensor::from_vec(v)))
            })
            .collect(),
        Mode::Choice(idx) => idx.iter().map(|&i| Pick::Choice(i)).collect(),
    };
    let enc = m
        .encode(&mut tape, &w, &picks, ModelInput { features: feats, mask })
        .unwrap();
    let ctc = m.ctc_log_probs(&mut tape, &w, &enc).unwrap();
    let logits = m.decode(&mut tape, &w, &picks, &enc, prefix).unwrap();
    Outputs {
        ctc: tape.value(ctc).clone(),
        logits: tape.value(logits).clone(),
    }
}

fn random_indices(space: &ArchSpace, rng: &mut impl Rng) -> Vec<usize> {
    space
        .group_choices()
        .iter()
        .map(|c| rng.gen_range(0..c.len()))
        .collect()
}

fn assert_close(a: &Outputs, b: &Outputs, tol: f64, what: &str) {
    let d = a.ctc.max_abs_diff(&b.ctc).max(a.logits.max_abs_diff(&b.logits));
    assert!(d <= tol, "{what}: max difference {d}");
}

#[test]
fn one_hot_mixing_choice_and_materialized_forwards_agree() {
    let space = SpaceConfig::desk().build().unwrap();
    let model = ConformerModel::new(space.clone(), 11).unwrap();
    let mut rng = common::rng(1);
    let prefix = [space.sentinel(), 3, 1, 4];
    for trial in 0..20 {
        let idx = random_indices(&space, &mut rng);
        let t = rng.gen_range(16..40);
        let feats = common::random_tensor(&[t, space.feat_dim], &mut rng);
        let mixed = forward(&model, Mode::OneHotMix(&idx), &feats, None, &prefix);
        let single = forward(&model, Mode::Choice(&idx), &feats, None, &prefix);
        assert_close(&mixed, &single, EQ_TOL, &format!("trial {trial} mixed vs choice"));

        let arch = space.arch_from_indices(&idx).unwrap();
        let small = model.materialize(&arch, MaterializeInit::Inherit).unwrap();
        let zeros = vec![0; idx.len()];
        let mat = forward(&small, Mode::Choice(&zeros), &feats, None, &prefix);
        assert_close(&mat, &single, 1e-9, &format!("trial {trial} materialized vs choice"));
    }
}

#[test]
fn extreme_architectures_match_one_hot_mixing() {
    let space = SpaceConfig::desk().build().unwrap();
    let model = ConformerModel::new(space.clone(), 2).unwrap();
    let feats = common::random_tensor(&[24, space.feat_dim], &mut common::rng(3));
    let prefix = [space.sentinel(), 2];
    for arch in [space.max_arch(), space.min_arch()] {
        let idx = space.indices_of(&arch).unwrap();
        let a = forward(&model, Mode::OneHotMix(&idx), &feats, None, &prefix);
        let b = forward(&model, Mode::Choice(&idx), &feats, None, &prefix);
        assert_close(&a, &b, EQ_TOL, "extreme arch");
    }
}

#[test]
fn separate_cross_attention_groups_are_equivalent_too() {
    let space = SpaceConfig {
        separate_cross_attention: true,
        ..SpaceConfig::desk()
    }
    .build()
    .unwrap();
    let model = ConformerModel::new(space.clone(), 4).unwrap();
    let mut rng = common::rng(8);
    let prefix = [space.sentinel(), 5];
    for _ in 0..5 {
        let idx = random_indices(&space, &mut rng);
        let feats = common::random_tensor(&[20, space.feat_dim], &mut rng);
        let a = forward(&model, Mode::OneHotMix(&idx), &feats, None, &prefix);
        let b = forward(&model, Mode::Choice(&idx), &feats, None, &prefix);
        assert_close(&a, &b, EQ_TOL, "separate cross attention");
        let arch = space.arch_from_indices(&idx).unwrap();
        let small = model.materialize(&arch, MaterializeInit::Inherit).unwrap();
        assert_eq!(small.param_count(), space_cost_model(&space).exact(&idx));
    }
}

#[test]
fn materialized_count_matches_closed_form() {
    let space = SpaceConfig::desk().build().unwrap();
    let model = ConformerModel::new(space.clone(), 0).unwrap();
    let cost = space_cost_model(&space);
    let mut rng = common::rng(5);
    for _ in 0..30 {
        let idx = random_indices(&space, &mut rng);
        let arch = space.arch_from_indices(&idx).unwrap();
        let small = model.materialize(&arch, MaterializeInit::Fresh { seed: 1 }).unwrap();
        assert_eq!(small.param_count(), cost.exact(&idx));
    }
    let max_idx = space.indices_of(&space.max_arch()).unwrap();
    assert_eq!(model.param_count(), cost.exact(&max_idx));
}

#[test]
fn full_width_block_count_matches_closed_form() {
    let space = SpaceConfig {
        encoder_blocks: 1,
        decoder_blocks: 1,
        vocab: 12,
        ..SpaceConfig::default()
    }
    .build()
    .unwrap();
    let model = ConformerModel::new(space.clone(), 0).unwrap();
    let cost = space_cost_model(&space);
    let mut rng = common::rng(6);
    for _ in 0..3 {
        let idx = random_indices(&space, &mut rng);
        let arch = space.arch_from_indices(&idx).unwrap();
        let small = model.materialize(&arch, MaterializeInit::Inherit).unwrap();
        assert_eq!(small.param_count(), cost.exact(&idx));
    }
}

#[test]
fn fresh_materialization_is_reproducible_and_differs_from_inherit() {
    let space = SpaceConfig::desk().build().unwrap();
    let model = ConformerModel::new(space.clone(), 0).unwrap();
    let arch = space.min_arch();
    let a = model.materialize(&arch, MaterializeInit::Fresh { seed: 42 }).unwrap();
    let b = model.materialize(&arch, MaterializeInit::Fresh { seed: 42 }).unwrap();
    let c = model.materialize(&arch, MaterializeInit::Inherit).unwrap();
    assert!(a.params().bit_eq(b.params()));
    assert!(!a.params().bit_eq(c.params()));
}

#[test]
fn padding_does_not_change_valid_outputs() {
    let space = SpaceConfig::desk().build().unwrap();
    let model = ConformerModel::new(space.clone(), 3).unwrap();
    let mut rng = common::rng(10);
    let idx = random_indices(&space, &mut rng);
    let feats = common::random_tensor(&[20, space.feat_dim], &mut rng);
    let mut padded = feats.data().to_vec();
    padded.extend((0..12 * space.feat_dim).map(|_| rng.gen_range(-1.0..1.0)));
    let padded = Tensor::new(vec![32, space.feat_dim], padded).unwrap();
    let mask: Vec<bool> = (0..32).map(|i| i < 20).collect();
    let prefix = [space.sentinel(), 1, 2];
    let a = forward(&model, Mode::Choice(&idx), &feats, None, &prefix);
    let b = forward(&model, Mode::Choice(&idx), &padded, Some(&mask), &prefix);
    assert_close(&a, &b, 1e-9, "padding");
}

#[test]
fn gradients_reach_every_weight_and_mixing_vector() {
    let space = SpaceConfig::desk().build().unwrap();
    let model = ConformerModel::new(space.clone(), 12).unwrap();
    let mut rng = common::rng(13);
    let feats = common::random_tensor(&[24, space.feat_dim], &mut rng);
    let mut tape = Tape::new();
    let w = model.bind(&mut tape, true);
    let lams: Vec<Var> = space
        .group_choices()
        .iter()
        .map(|c| {
            let raw: Vec<f64> = (0..c.len()).map(|_| rng.gen_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            tape.param(Tensor::from_vec(raw.iter().map(|v| v / s).collect()))
        })
        .collect();
    let picks: Vec<Pick> = lams.iter().map(|&v| Pick::Mix(v)).collect();
    let enc = model.encode(&mut tape, &w, &picks, ModelInput::new(&feats)).unwrap();
    let ctc = model.ctc_log_probs(&mut tape, &w, &enc).unwrap();
    let logits = model
        .decode(&mut tape, &w, &picks, &enc, &[space.sentinel(), 1, 2, 3])
        .unwrap();
    let wc = tape.constant(common::random_tensor(tape.shape(ctc), &mut rng));
    let wl = tape.constant(common::random_tensor(tape.shape(logits), &mut rng));
    let a = tape.mul(ctc, wc).unwrap();
    let b = tape.mul(logits, wl).unwrap();
    let (a, b) = (tape.sum(a), tape.sum(b));
    let loss = tape.add(a, b).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (v, (name, _)) in w.iter().zip(model.params().iter()) {
        let g = grads.get(*v).unwrap();
        assert!(g.data().iter().any(|&x| x != 0.0), "no gradient for {name}");
    }
    for (g, v) in space.groups().iter().zip(&lams) {
        let gr = grads.get(*v).unwrap();
        assert!(
            gr.data().iter().any(|&x| x != 0.0),
            "no gradient for mixing weights of {g}"
        );
    }
}

#[test]
fn unnormalized_mixing_weights_are_rejected() {
    let space = SpaceConfig::desk().build().unwrap();
    let model = ConformerModel::new(space.clone(), 0).unwrap();
    let feats = Tensor::zeros(&[16, space.feat_dim]);
    let mut tape = Tape::new();
    let w = model.bind(&mut tape, false);
    let picks: Vec<Pick> = space
        .group_choices()
        .iter()
        .map(|c| Pick::Mix(tape.constant(Tensor::full(&[c.len()], 0.5))))
        .collect();
    let r = model.encode(&mut tape, &w, &picks, ModelInput::new(&feats));
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
}

#[test]
fn architecture_outside_space_is_rejected() {
    let space = SpaceConfig::desk().build().unwrap();
    let model = ConformerModel::new(space.clone(), 0).unwrap();
    let mut arch: DerivedArch = space.max_arch();
    arch.encoder[0].fd = 100;
    assert!(matches!(model.choice_picks(&arch), Err(Error::InvalidArgument(_))));
    assert!(matches!(
        model.materialize(&arch, MaterializeInit::Inherit),
        Err(Error::InvalidArgument(_))
    ));
}
