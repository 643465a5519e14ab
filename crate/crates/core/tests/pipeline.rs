use hpadapt::data::{generate, Corpus, CorpusSpec, SplitCounts};
use hpadapt::pipeline::checkpoint::FORMAT_VERSION;
use hpadapt::pipeline::{run_recipe, Checkpoint, InitMode, ModelKind, Recipe, Runner, StageConfig, StageKind};
use hpadapt::supernet::{ConformerModel, MaterializeInit, SpaceConfig};
use hpadapt::Error;

fn tiny_corpus() -> Corpus {
    let mut spec = CorpusSpec::default();
    spec.source.mean_frames = 40.0;
    spec.source_counts = SplitCounts::new(10, 3, 3);
    spec.target_counts = SplitCounts::new(10, 3, 3);
    generate(&spec).unwrap()
}

fn stage(name: &str, kind: StageKind, input: Option<&str>, epochs: usize) -> StageConfig {
    let mut s = StageConfig::new(name, kind);
    s.input = input.map(String::from);
    s.epochs = epochs;
    s.batch_size = 4;
    s
}

fn two_arm_recipe(epochs: usize) -> Recipe {
    let mut derive = stage("derive", StageKind::Derive, Some("adapt"), 0);
    derive.inherit_from = Some("pretrain".into());
    Recipe {
        space: SpaceConfig::desk(),
        loss: Default::default(),
        stages: vec![
            stage("pretrain", StageKind::Pretrain, None, epochs),
            stage("adapt", StageKind::Adapt, Some("pretrain"), epochs),
            derive,
            stage("train", StageKind::Train, Some("derive"), epochs),
            stage("finetune", StageKind::Finetune, Some("train"), epochs),
        ],
    }
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let corpus = tiny_corpus();
    let out = run_recipe(&corpus, &two_arm_recipe(1), 3, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (name, ck) in &out.checkpoints {
        let path = dir.path().join(format!("{name}.ckpt"));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert!(back.params.bit_eq(&ck.params), "{name}");
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap(), "{name}");
        assert_eq!(&back, ck, "{name}");
    }
    let sup = &out.checkpoints["adapt"];
    assert!(sup.logits.is_some() && sup.optimizer.logits.is_some());
    assert!(out.checkpoints["finetune"].logits.is_none());
}

#[test]
fn corrupt_or_foreign_files_are_rejected() {
    let corpus = tiny_corpus();
    let out = run_recipe(&corpus, &two_arm_recipe(0), 0, None).unwrap();
    let bytes = out.checkpoints["pretrain"].to_bytes().unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));

    let mut newer = bytes.clone();
    newer[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&newer),
        Err(Error::IncompatibleCheckpoint(_))
    ));

    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Format(_))
    ));
    assert!(matches!(
        Checkpoint::load(std::path::Path::new("/nonexistent/x.ckpt")),
        Err(Error::Missing { .. })
    ));
}

#[test]
fn zero_epoch_stages_leave_state_untouched() {
    let corpus = tiny_corpus();
    let recipe = two_arm_recipe(0);
    let out = run_recipe(&corpus, &recipe, 5, None).unwrap();
    let pre = &out.checkpoints["pretrain"];
    let seed = pre.lineage[0].seed;
    let init = ConformerModel::new(recipe.space.build().unwrap(), seed).unwrap();
    assert!(pre.params.bit_eq(init.params()));
    assert_eq!(pre.lineage.len(), 1);

    let adapt = &out.checkpoints["adapt"];
    assert_eq!(
        adapt.logits.as_ref().unwrap().logits,
        pre.logits.as_ref().unwrap().logits
    );
    assert!(adapt.params.bit_eq(&pre.params));

    let train = &out.checkpoints["train"];
    let fine = &out.checkpoints["finetune"];
    assert!(fine.params.bit_eq(&train.params));
    assert_eq!(fine.space, train.space);
    assert_eq!(fine.arch().unwrap(), train.arch().unwrap());
}

#[test]
fn lineage_is_append_only() {
    let corpus = tiny_corpus();
    let out = run_recipe(&corpus, &two_arm_recipe(0), 1, None).unwrap();
    let names: Vec<&str> = out.checkpoints["finetune"]
        .lineage
        .iter()
        .map(|e| e.config.name.as_str())
        .collect();
    assert_eq!(names, ["pretrain", "adapt", "derive", "train", "finetune"]);
    for (prev, next) in [
        ("pretrain", "adapt"),
        ("adapt", "derive"),
        ("derive", "train"),
        ("train", "finetune"),
    ] {
        let a = &out.checkpoints[prev].lineage;
        assert_eq!(&out.checkpoints[next].lineage[..a.len()], &a[..]);
    }
}

#[test]
fn output_reinitialization_is_scoped() {
    let corpus = tiny_corpus();
    let mut recipe = two_arm_recipe(0);
    recipe.stages[4].reinit_output = true;
    let out = run_recipe(&corpus, &recipe, 2, None).unwrap();
    let before = out.checkpoints["train"].model().unwrap();
    let after = out.checkpoints["finetune"].model().unwrap();
    let outputs = before.output_layer_ids();
    let mut changed = 0;
    for (i, ((na, a), (nb, b))) in before.params().iter().zip(after.params().iter()).enumerate() {
        assert_eq!(na, nb);
        if outputs.iter().any(|id| id.0 == i) {
            changed += usize::from(!a.bit_eq(b));
        } else {
            assert!(a.bit_eq(b), "{na} changed");
        }
    }
    // weight matrices are redrawn; zero biases may coincide
    assert!(changed >= 2);
    assert_eq!(after.space(), before.space());
}

#[test]
fn derive_inherits_or_draws_fresh_weights() {
    let corpus = tiny_corpus();
    let mut recipe = two_arm_recipe(0);
    recipe.stages.truncate(3);
    let out = run_recipe(&corpus, &recipe, 4, None).unwrap();
    let sup = out.checkpoints["pretrain"].model().unwrap();
    let derived = &out.checkpoints["derive"];
    let arch = derived.arch().unwrap();
    let want = sup.materialize(&arch, MaterializeInit::Inherit).unwrap();
    assert!(derived.params.bit_eq(want.params()));

    recipe.stages[2].init = InitMode::Fresh;
    let fresh = run_recipe(&corpus, &recipe, 4, None).unwrap();
    let fresh = &fresh.checkpoints["derive"];
    assert_eq!(fresh.arch().unwrap(), arch);
    assert!(!fresh.params.bit_eq(want.params()));
    let seed = fresh.lineage[2].seed;
    let again = sup.materialize(&arch, MaterializeInit::Fresh { seed }).unwrap();
    assert!(fresh.params.bit_eq(again.params()));
}

#[test]
fn reruns_and_resumes_are_bit_identical() {
    let corpus = tiny_corpus();
    let recipe = two_arm_recipe(1);
    let a = run_recipe(&corpus, &recipe, 9, None).unwrap();
    let b = run_recipe(&corpus, &recipe, 9, None).unwrap();
    for (name, ck) in &a.checkpoints {
        assert_eq!(
            ck.to_bytes().unwrap(),
            b.checkpoints[name].to_bytes().unwrap(),
            "{name}"
        );
    }

    // stop after two stages, then resume the full recipe from disk
    let dir = tempfile::tempdir().unwrap();
    let mut partial = recipe.clone();
    partial.stages.truncate(2);
    run_recipe(&corpus, &partial, 9, Some(dir.path())).unwrap();
    let resumed = run_recipe(&corpus, &recipe, 9, Some(dir.path())).unwrap();
    for (name, ck) in &a.checkpoints {
        assert_eq!(
            ck.to_bytes().unwrap(),
            resumed.checkpoints[name].to_bytes().unwrap(),
            "{name}"
        );
        assert!(dir.path().join(format!("{name}.ckpt")).exists());
    }

    let other = run_recipe(&corpus, &recipe, 10, None).unwrap();
    assert!(!other.checkpoints["pretrain"]
        .params
        .bit_eq(&a.checkpoints["pretrain"].params));
}

#[test]
fn broken_stage_order_is_refused() {
    let corpus = tiny_corpus();
    let space = SpaceConfig::desk();
    let bad = Recipe {
        space: space.clone(),
        loss: Default::default(),
        stages: vec![
            stage("pretrain", StageKind::Pretrain, None, 0),
            stage("finetune", StageKind::Finetune, Some("pretrain"), 0),
        ],
    };
    match run_recipe(&corpus, &bad, 0, None) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "stages[1].input"),
        other => panic!("{other:?}"),
    }
    let missing = Recipe {
        space: space.clone(),
        loss: Default::default(),
        stages: vec![stage("adapt", StageKind::Adapt, Some("nowhere"), 0)],
    };
    assert!(matches!(
        run_recipe(&corpus, &missing, 0, None),
        Err(Error::Config { .. })
    ));

    // a derived checkpoint on disk fed to an adapt stage
    let dir = tempfile::tempdir().unwrap();
    run_recipe(&corpus, &two_arm_recipe(0), 0, Some(dir.path())).unwrap();
    let path = dir.path().join("train.ckpt");
    let foreign = Recipe {
        space: space.clone(),
        loss: Default::default(),
        stages: vec![stage("adapt2", StageKind::Adapt, Some(path.to_str().unwrap()), 0)],
    };
    assert!(matches!(run_recipe(&corpus, &foreign, 0, None), Err(Error::Lineage(_))));

    let gone = dir.path().join("absent.ckpt");
    let absent = Recipe {
        space,
        loss: Default::default(),
        stages: vec![stage("adapt3", StageKind::Adapt, Some(gone.to_str().unwrap()), 0)],
    };
    assert!(matches!(
        run_recipe(&corpus, &absent, 0, None),
        Err(Error::Missing { .. })
    ));
}

#[test]
fn adapting_a_supernet_from_another_space_fails() {
    let corpus = tiny_corpus();
    let dir = tempfile::tempdir().unwrap();
    let mut recipe = two_arm_recipe(0);
    recipe.stages.truncate(1);
    run_recipe(&corpus, &recipe, 0, Some(dir.path())).unwrap();
    let mut narrow = SpaceConfig::desk();
    narrow.fd = vec![32, 64];
    let path = dir.path().join("pretrain.ckpt");
    let adapt = Recipe {
        space: narrow,
        loss: Default::default(),
        stages: vec![stage("adapt", StageKind::Adapt, Some(path.to_str().unwrap()), 0)],
    };
    assert!(matches!(
        run_recipe(&corpus, &adapt, 0, None),
        Err(Error::IncompatibleCheckpoint(_))
    ));
}

#[test]
fn divergence_keeps_the_last_good_state() {
    let corpus = tiny_corpus();
    let recipe = Recipe {
        space: SpaceConfig::desk(),
        loss: Default::default(),
        stages: vec![stage("pretrain", StageKind::Pretrain, None, 0)],
    };
    let mut runner = Runner::new(&corpus, &recipe, 0).unwrap();
    runner.run_stage(&recipe.stages[0]).unwrap();
    let init = runner.checkpoint("pretrain").unwrap().clone();

    let mut wild = stage("wild", StageKind::Adapt, Some("pretrain"), 3);
    wild.lr_weights = 1e300;
    wild.clip = None;
    match runner.run_stage(&wild) {
        Err(Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
    let good = runner.last_good.as_ref().unwrap();
    assert_eq!(good.kind, ModelKind::Supernet);
    assert!(good.params.tensors().iter().all(|t| t.is_finite()));
    let last = good.lineage.last().unwrap();
    assert_eq!(last.config.name, "wild");
    if last.epochs_run == 0 {
        assert!(good.params.bit_eq(&init.params));
    }
    assert!(runner.checkpoint("wild").is_none());
}

#[test]
fn recipes_parse_from_toml_and_reject_unknown_keys() {
    let text = r#"
        [[stages]]
        name = "pretrain"
        kind = "pretrain"
        epochs = 2
        temperature = { start = 1.0, end = 0.5 }

        [[stages]]
        name = "derive"
        kind = "derive"
        input = "pretrain"
        init = "fresh"
    "#;
    let r: Recipe = toml::from_str(text).unwrap();
    assert_eq!(r.space, SpaceConfig::desk());
    assert_eq!(r.stages[1].init, InitMode::Fresh);
    assert_eq!(r.stages[0].patience, 3);
    r.validate().unwrap();
    assert!(toml::from_str::<Recipe>(&text.replace("epochs = 2", "epoch = 2")).is_err());
}
