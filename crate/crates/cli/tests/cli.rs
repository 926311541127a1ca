use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_bubblelab");

fn fixture_csv() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/nevada_like_races.csv")
}

fn small_config(dir: &Path) -> PathBuf {
    let text = format!(
        r#"{{
  "seed": 3,
  "data": {{"dataset": {{"bubbles": 40, "swatches": 40}}, "eval_bubbles": 20}},
  "model": {{"architecture": "svm", "train": {{"epochs": 50, "weight_decay": 1e-8, "loss": "hinge", "optimizer": "sgd-momentum"}}}},
  "attack": {{"settings": {{"method": "apgd", "steps": 5}}, "epsilons_255": [4, 64, 255]}},
  "diagnose": {{"settings": {{"steps": 3}}}},
  "channel": {{"test_bubbles": 20, "classifier_data": {{"bubbles": 20, "swatches": 200}}, "denoiser_bubbles": 10,
               "denoiser_train": {{"epochs": 1, "batch_size": 8, "loss": "mse", "validation_fraction": 0.0}}}},
  "impact": {{"ballots": 100000, "races_csv": {:?}, "races_label": "Nevada"}}
}}"#,
        fixture_csv()
    );
    let path = dir.join("small.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn run_in(config: &Path, out: &Path, cmd: &[&str]) -> Output {
    let mut args: Vec<&str> = cmd.to_vec();
    args.extend(["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let o = run(&args);
    assert!(
        o.status.success(),
        "{cmd:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn pipeline(config: &Path, out: &Path) {
    for cmd in ["gen-data", "train", "attack", "diagnose", "channel", "impact", "report"] {
        run_in(config, out, &[cmd]);
    }
}

const PRIMARY: [&str; 16] = [
    "dataset.bbl",
    "gen-data.json",
    "model.bbm",
    "train.csv",
    "train.json",
    "attack.csv",
    "attack.json",
    "diagnose.json",
    "post-channel.bbl",
    "scan-page-0.pgm",
    "denoiser.bbm",
    "channel.json",
    "impact.json",
    "impact.md",
    "attack.md",
    "report.md",
];

#[test]
fn seeded_pipeline_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&config, &a);
    pipeline(&config, &b);
    for name in PRIMARY {
        let x = std::fs::read(a.join(name)).unwrap();
        let y = std::fs::read(b.join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn text_artifacts_carry_hash_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let out = tmp.path().join("o");
    run_in(&config, &out, &["gen-data"]);
    run_in(&config, &out, &["impact"]);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("impact.json")).unwrap()).unwrap();
    let hash = json["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    assert_eq!(json["seed"], 3);
    assert_eq!(json["config"]["impact"]["ballots"], 100000);
    let gen: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("gen-data.json")).unwrap()).unwrap();
    assert_eq!(gen["config_hash"], hash.as_str());
    assert_eq!(gen["files"][0]["name"], "dataset.bbl");
    for name in ["impact.md", "gen-data.md"] {
        let text = std::fs::read_to_string(out.join(name)).unwrap();
        assert!(text.starts_with(&format!("<!-- config_hash={hash} seed=3 -->")), "{name}");
    }
    let log = std::fs::read_to_string(out.join("run.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn seed_flag_changes_the_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let hash_of = |seed: &str, dir: &str| {
        let out = tmp.path().join(dir);
        run(&[
            "impact",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            seed,
        ]);
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("impact.json")).unwrap()).unwrap();
        (v["config_hash"].as_str().unwrap().to_string(), v["seed"].as_u64().unwrap())
    };
    let (h1, s1) = hash_of("10", "x");
    let (h2, s2) = hash_of("11", "y");
    assert_eq!((s1, s2), (10, 11));
    assert_ne!(h1, h2);
}

#[test]
fn gen_data_plans() {
    let o = run(&["gen-data", "--dry-run"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("2000 bubbles") && text.contains("2000 swatches"), "{text}");

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("paper.json");
    std::fs::write(&cfg, r#"{"data": {"dataset": {"bubbles": 42679, "swatches": 423703}}}"#).unwrap();
    let o = run(&["gen-data", "--dry-run", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("42679 bubbles"), "{text}");
    assert!(text.contains("466382 images"), "{text}");
}

#[test]
fn impact_prints_the_worked_race() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["impact", "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("| Closed form | 0.40700 | 0.40255 |"), "{text}");
}

#[test]
fn exit_codes_follow_error_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();

    let o = run(&["attack", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["impact", "--flush-to-zero", "--out", out]);
    assert_eq!(o.status.code(), Some(1));

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"attack": {"settings": {"epsilonn": 0.1}}}"#).unwrap();
    let o = run(&["impact", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("/attack/settings"), "{err}");

    std::fs::write(&bad, r#"{"attack": {"settings": {"epsilon": 2.0}}}"#).unwrap();
    let o = run(&["impact", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["train", "--data", tmp.path().join("missing.bbl").to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8(o.stderr).unwrap().contains("missing.bbl"));

    let races = tmp.path().join("races.csv");
    std::fs::write(&races, "race_id,total_votes,margin_fraction,blank_fraction\na,10,x,0.1\n").unwrap();
    let o = run(&["impact", "--races", races.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8(o.stderr).unwrap().contains("line 2"));

    let cfg = small_config(tmp.path());
    run_in(&cfg, tmp.path(), &["gen-data"]);
    let wild = tmp.path().join("wild.json");
    std::fs::write(
        &wild,
        r#"{"data": {"dataset": {"bubbles": 40, "swatches": 40}},
            "model": {"architecture": "simple-cnn", "train": {"epochs": 1, "batch_size": 16, "learning_rate": 1e200}}}"#,
    )
    .unwrap();
    let o = run(&["train", "--config", wild.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn report_needs_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["report", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}
