use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[pipeline]
seed = 3
adapt_speakers = 2
[pipeline.corpus]
n_speakers = 6
utterances_per_speaker = 20
base_utterances = 100
[pipeline.model]
d_model = 16
n_heads = 2
n_blocks = 1
ff_hidden = 32
n_experts = 3
[pipeline.base]
steps = 20
eval_every = 10
[pipeline.pretrain]
steps = 10
eval_every = 5
[pipeline.adapt]
steps = 6
eval_every = 3
"#;

fn saml(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saml"))
        .args(args)
        .arg("--run-dir")
        .arg(dir)
        .output()
        .expect("spawn saml")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "stdout:\n{stdout}\nstderr:\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

/// Run directory with config, base and quantised checkpoints.
fn quantised_run() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let run = tmp.path().join("run");
    ok(&saml(&run, &["train-base", "--config", cfg.to_str().unwrap()]));
    ok(&saml(&run, &["quantize"]));
    tmp
}

#[test]
fn quantize_reports_nf4_payload_ratio() {
    let tmp = quantised_run();
    let run = tmp.path().join("run");
    let text = std::fs::read_to_string(run.join("compression.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let ratio = v["compression"]["payload_ratio"].as_f64().unwrap();
    assert!((6.8..=7.2).contains(&ratio), "ratio {ratio}");
    assert_eq!(v["compression"]["bits_per_weight"].as_f64().unwrap(), 4.5);
    assert!(run.join("config.toml").exists());
    assert!(run.join("metrics.jsonl").exists());
}

#[test]
fn adapt_rejects_model_that_is_not_pretrained() {
    let tmp = quantised_run();
    let run = tmp.path().join("run");
    let out = saml(&run, &["adapt", "--speaker", "4", "--input", run.join("quantized.ckpt").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage"));
}

#[test]
fn pretrain_prune_and_refuse_overwrite() {
    let tmp = quantised_run();
    let run = tmp.path().join("run");
    ok(&saml(&run, &["pretrain"]));
    let stdout = ok(&saml(&run, &["prune", "--mode", "collapse"]));
    assert!(stdout.contains("removed"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("prune_report.json")).unwrap()).unwrap();
    assert_eq!(report["modes"].as_object().unwrap().len(), 4);
    assert!(run.join("pruned.ckpt").exists());

    let again = saml(&run, &["prune", "--mode", "collapse"]);
    assert_eq!(again.status.code(), Some(2));
    ok(&saml(&run, &["prune", "--mode", "top1-all", "--overwrite"]));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("prune_report.json")).unwrap()).unwrap();
    assert!(report["modes"].as_object().unwrap().values().all(|m| m == "top1_no_router"));

    // a pretraining speaker is never an adaptation target
    let overlap = saml(&run, &["adapt", "--speaker", "0"]);
    assert_eq!(overlap.status.code(), Some(2));
    let stdout = ok(&saml(&run, &["adapt", "--speaker", "5"]));
    assert!(stdout.contains("speaker 5"));
    ok(&saml(&run, &["eval", "--split", "test", "--input", run.join("adapted-5.ckpt").to_str().unwrap()]));
    ok(&saml(&run, &["report"]));
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = saml(tmp.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let out = saml(tmp.path(), &["prune", "--mode", "sideways"]);
    assert_eq!(out.status.code(), Some(1));
    let help = Command::new(env!("CARGO_BIN_EXE_saml")).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn bad_override_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = saml(tmp.path(), &["gen-data", "--set", "pipeline.corpus.vocab_sise=8"]);
    assert_eq!(out.status.code(), Some(2));
    let out = saml(tmp.path(), &["gen-data", "--set", "pipeline.corpus.vocab_size=4", "--set", "pipeline.model.vocab_size=4"]);
    assert_eq!(out.status.code(), Some(2));
}
