use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hpadapt::data::SplitCounts;
use hpadapt::report::RunConfig;

fn sample() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

fn hpadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hpadapt")).args(args).output().unwrap()
}

/// The sample config shrunk to seconds: tiny corpus, at most one epoch.
fn tiny(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::load(&sample(), &[]).unwrap();
    cfg.output_dir = dir.join("out");
    cfg.corpus.dir = Some(dir.join("corpus"));
    cfg.seeds = vec![0, 1];
    cfg.corpus.spec.source.mean_frames = 40.0;
    cfg.corpus.spec.source_counts = SplitCounts::new(10, 3, 3);
    cfg.corpus.spec.target_counts = SplitCounts::new(10, 3, 6);
    for s in &mut cfg.recipe.stages {
        s.epochs = s.epochs.min(1);
    }
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn stderr_record(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("not JSON ({e}): {text}"))
}

fn json_file(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn sample_config_is_valid() {
    let cfg = RunConfig::load(&sample(), &[]).unwrap();
    assert_eq!(cfg.systems(), ["finetune_base", "finetune_adapt"]);
    assert!(cfg.sweep.is_some());
}

#[test]
fn gen_data_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = hpadapt(&["gen-data", "-c", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(dir.path().join("corpus/manifest.tsv")).unwrap();
    assert!(manifest.starts_with("id\tdomain\tsplit\tframes\ttokens"));
    assert!(dir.path().join("corpus/corpus.json").exists());
}

#[test]
fn run_evaluate_dump_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let c = cfg.to_str().unwrap();
    let out = hpadapt(&["run", "-c", c]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json_file(&dir.path().join("out/report.json"));
    let systems = report["systems"].as_array().unwrap();
    assert_eq!(systems.len(), 4);
    for name in ["finetune_base", "finetune_adapt"] {
        assert_eq!(systems.iter().filter(|s| s["system"] == name).count(), 2);
    }
    for s in systems {
        let t = &s["ter"];
        let n = |k: &str| t[k]["utterances"].as_u64().unwrap();
        assert_eq!(n("shorter") + n("longer"), n("overall"));
        assert_eq!(n("overall"), 6);
    }

    // rebuilding from checkpoints gives the same scores, every time
    for _ in 0..2 {
        let out = hpadapt(&["evaluate", "-c", c]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let again = json_file(&dir.path().join("out/evaluation.json"));
        assert_eq!(again["systems"], report["systems"]);
    }

    let ck = dir.path().join("out/seed-0/adapt.ckpt");
    let reference = dir.path().join("out/seed-0/pretrain.ckpt");
    let out = hpadapt(&[
        "dump-arch",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--reference",
        reference.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].split_whitespace().take(2).eq(["encoder", "0"]));
    assert!(rows[1].split_whitespace().take(2).eq(["encoder", "1"]));
    assert!(rows[2].split_whitespace().take(2).eq(["decoder", "0"]));
    let out = hpadapt(&["dump-arch", "--checkpoint", ck.to_str().unwrap(), "--json"]);
    let arch: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(arch["encoder"].as_array().unwrap().len(), 2);

    // the arm at the recipe's own η is the plain run
    let out = hpadapt(&["sweep", "-c", c]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = json_file(&dir.path().join("out/sweep.json"));
    assert_eq!(sweep["rows"].as_array().unwrap().len(), 3 * 2);
    let arms = sweep["arms"].as_array().unwrap();
    let eta0: Vec<&serde_json::Value> = arms
        .iter()
        .filter(|a| a["eta"] == 3e-6)
        .flat_map(|a| a["systems"].as_array().unwrap())
        .collect();
    let plain: Vec<&serde_json::Value> = systems.iter().collect();
    assert_eq!(eta0, plain);
}

#[test]
fn invalid_configs_exit_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let text = std::fs::read_to_string(&cfg).unwrap();

    let bad = dir.path().join("bad.toml");
    std::fs::write(
        &bad,
        text.replace("schema_version = 1", "schema_version = 1\nverbose = true"),
    )
    .unwrap();
    let out = hpadapt(&["run", "-c", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let rec = stderr_record(&out);
    assert_eq!(rec["error"], "config");
    assert_eq!(rec["field"], "verbose");

    let out = hpadapt(&["run", "-c", cfg.to_str().unwrap(), "--set", "recipe.stages.1.eta=-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_record(&out)["field"], "recipe.stages[1].eta");

    let out = hpadapt(&["run", "-c", cfg.to_str().unwrap(), "--set", "recipe.stages=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_record(&out)["field"], "recipe.stages");

    let out = hpadapt(&["run", "-c", cfg.to_str().unwrap(), "--set", "recipe.nothing=3"]);
    assert_eq!(out.status.code(), Some(2));

    let out = hpadapt(&["run", "-c", cfg.to_str().unwrap(), "--set", "schema_version=2"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_record(&out)["field"], "schema_version");
}

#[test]
fn missing_checkpoints_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = hpadapt(&["evaluate", "-c", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let rec = stderr_record(&out);
    assert_eq!(rec["error"], "missing");
    assert!(rec["path"].as_str().unwrap().ends_with("finetune_base.ckpt"));

    let out = hpadapt(&["dump-arch", "--checkpoint", "/nonexistent/model.ckpt"]);
    assert_eq!(out.status.code(), Some(3));

    let out = hpadapt(&["run", "-c", "/nonexistent/config.toml"]);
    assert_eq!(out.status.code(), Some(3));
}
