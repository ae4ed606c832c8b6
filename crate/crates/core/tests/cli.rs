use std::path::Path;
use std::process::Command;

use fedprompt::checkpoint::load_checkpoint;
use fedprompt::cli::dispatch;
use fedprompt::encoders::load_embeddings;

fn run(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut full = vec!["fedprompt"];
    full.extend_from_slice(args);
    let code = dispatch(full, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn selftest_passes_on_clean_build() {
    let (code, out) = run(&["selftest"]);
    assert_eq!(code, 0, "{out}");
    assert!(!out.contains("FAIL"));
    assert!(out.contains("average base delta: expected +0.11, got +0.11"));
}

#[test]
fn gradcheck_passes() {
    let (code, out) = run(&["gradcheck"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("PASS"));
}

#[test]
fn report_against_embedded_fixture_prints_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = run(&["report", "--out", s(dir.path())]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("average deltas vs reference: base +0.11  new -0.23"), "{out}");
    for f in ["summary.csv", "summary.json", "error_rates.svg", "generalization_gap.svg"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert!(json.to_string().contains("74.58"));
}

#[test]
fn report_reads_result_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("mine.csv");
    std::fs::write(&csv, "name,base,new,gap\nsynthetic,46.23,67.60,21.37\n").unwrap();
    let (code, out) = run(&["report", "--results", s(&csv), "--out", s(dir.path())]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("synthetic"));
    assert!(!out.contains("deltas vs reference"));

    std::fs::write(&csv, "name,base,new,gap\nsynthetic,146.0,67.60,0\n").unwrap();
    assert_eq!(run(&["report", "--results", s(&csv), "--out", s(dir.path())]).0, 2);
}

#[test]
fn make_world_writes_loadable_tables() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = run(&["make-world", "--out", s(dir.path()), "--set", "world.n_new=5"]);
    assert_eq!(code, 0, "{out}");
    let emb = load_embeddings(&dir.path().join("class_embeddings.ftpg")).unwrap();
    assert_eq!(emb.embeddings.shape(), &[65, 32]);
    assert_eq!(emb.labels[64], "new_64");
    assert!(dir.path().join("centers.ftpg").exists());
}

#[test]
fn train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# short run\nfederation.rounds = 3\nfederation.checkpoint_every = 2\n").unwrap();
    let (code, out) = run(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code, 0, "{out}");
    let log = std::fs::read_to_string(dir.path().join("rounds.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["t"], 0);
    assert_eq!(first["selected"].as_array().unwrap().len(), 6);
    let ck = load_checkpoint(&dir.path().join("checkpoint.ftpg")).unwrap();
    assert_eq!(ck.round, 3);
    assert_eq!(ck.config.federation.rounds, 3);
    assert_eq!(load_checkpoint(&dir.path().join("checkpoint_round_0002.ftpg")).unwrap().round, 2);

    let eval_dir = dir.path().join("eval");
    let (code, out) = run(&["eval", "--checkpoint", s(&dir.path().join("checkpoint.ftpg")), "--out", s(&eval_dir)]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("zero-context base"));
    let csv = std::fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    assert!(csv.starts_with("name,base,new,gap\nsynthetic,"), "{csv}");
}

#[test]
fn configuration_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = run(&["train", "--out", s(dir.path()), "--set", "optimizer.nope=1"]);
    assert_eq!(code, 1);
    assert!(out.contains("optimizer.nope"), "{out}");
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "federation.rounds = 2\nfederation.rounds = 3\n").unwrap();
    let (code, out) = run(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code, 1);
    assert!(out.contains("line 2"), "{out}");
    assert_eq!(run(&["train", "--out", s(dir.path()), "--set", "federation.classes_per_client=11"]).0, 1);
    assert_eq!(run(&["no-such-command"]).0, 1);
}

#[test]
fn file_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ftpg");
    assert_eq!(run(&["eval", "--checkpoint", s(&missing)]).0, 2);
    let junk = dir.path().join("junk.ftpg");
    std::fs::write(&junk, b"FTPG\x01\x00\x00\x00\xff").unwrap();
    let (code, out) = run(&["eval", "--checkpoint", s(&junk)]);
    assert_eq!(code, 2);
    assert!(out.contains("at byte 8"), "{out}");
    assert_eq!(run(&["train", "--config", s(&missing), "--out", s(dir.path())]).0, 2);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_fedprompt");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(status(&["selftest"]), Some(0));
    assert_eq!(status(&["--help"]), Some(0));
    assert_eq!(status(&["train"]), Some(1));
    assert_eq!(status(&["eval", "--checkpoint", "/nonexistent/checkpoint.ftpg"]), Some(2));
}
