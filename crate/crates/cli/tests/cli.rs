use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mathgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mathgen")).args(args).arg("-q").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mathgen(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_every_key_with_default() {
    for (sub, keys) in [
        ("preprocess", &["--max-problem-tokens", "--min-freq", "--dev-frac", "--test-frac", "--seed"][..]),
        ("lda-fit", &["--num-topics", "--alpha", "--beta", "--iterations", "--top-k", "--seed"][..]),
        ("kg-pretrain", &["--layers", "--heads", "--dim", "--epochs", "--lr", "--seed"][..]),
        ("train", &["--batch-size", "--learning-rate", "--warmup-steps", "--use-copy", "--kernel-widths", "--seed"][..]),
        ("generate", &["--beam", "--sample-seed", "--topic"][..]),
        ("evaluate", &["--number-basis"][..]),
    ] {
        let out = mathgen(&[sub, "--help"]);
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        for k in keys {
            let line = text.lines().find(|l| l.trim_start().starts_with(k)).unwrap_or_else(|| panic!("{sub}: no {k}"));
            assert!(line.contains("[default: ") || line.contains("required"), "{sub}: {line}");
        }
    }
    let text = String::from_utf8(mathgen(&["train", "--help"]).stdout).unwrap();
    assert!(text.contains("--max-decode-len <VALUE>      [default: 50]"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(mathgen(&["nonsense"]).status.code(), Some(1));
    assert_eq!(mathgen(&["evaluate", "--out-dir", out]).status.code(), Some(1));
    // missing seed is a usage error
    assert_eq!(mathgen(&["lda-fit", "--train", s(&data("problems.jsonl")), "--out-dir", out]).status.code(), Some(1));
    assert_eq!(mathgen(&["preprocess", "--input", "/no/such/file.jsonl", "--out-dir", out]).status.code(), Some(2));
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{not json}\n").unwrap();
    assert_eq!(
        mathgen(&["evaluate", "--candidates", s(&bad), "--references", s(&bad), "--out-dir", out]).status.code(),
        Some(2)
    );
    // unknown config key and ill-typed value
    let cfg = dir.path().join("c.conf");
    fs::write(&cfg, "bogus = 1\n").unwrap();
    assert_eq!(mathgen(&["preprocess", "--input", s(&data("problems.jsonl")), "--out-dir", out, "--config", s(&cfg)]).status.code(), Some(1));
    assert_eq!(mathgen(&["preprocess", "--input", s(&data("problems.jsonl")), "--out-dir", out, "--min-freq", "many"]).status.code(), Some(1));
}

#[test]
fn evaluate_self_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let refs = data("problems.jsonl");
    ok(&["evaluate", "--candidates", s(&refs), "--references", s(&refs), "--out-dir", s(dir.path())]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["bleu2"], 1.0);
    assert_eq!(report["rouge_l"], 1.0);
    assert_eq!(report["number_recall"], 1.0);
}

#[test]
fn preprocess_drops_overlong_problem() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("raw.jsonl");
    let long = vec!["word"; 46].join(" ");
    let ok_len = vec!["word"; 45].join(" ");
    fs::write(
        &input,
        format!("{{\"id\":\"a\",\"equations\":[\"x=1\"],\"problem\":\"{long}\"}}\n{{\"id\":\"b\",\"equations\":[\"x=1\"],\"problem\":\"{ok_len}\"}}\n"),
    )
    .unwrap();
    let out = ok(&["preprocess", "--input", s(&input), "--out-dir", s(dir.path())]);
    assert!(out.contains("dropped (problem > 45 tokens): 1"), "{out}");
    assert!(out.contains("kept: 1"), "{out}");
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"min_freq": 7, "max-problem-tokens": 45}"#).unwrap();
    let out = ok(&["preprocess", "--input", s(&data("problems.jsonl")), "--out-dir", s(dir.path()), "--config", s(&cfg)]);
    assert!(out.contains("min_freq 7"), "{out}");
    let out = ok(&["preprocess", "--input", s(&data("problems.jsonl")), "--out-dir", s(dir.path()), "--config", s(&cfg), "--min-freq", "3"]);
    assert!(out.contains("min_freq 3"), "{out}");
}

fn toy_run(root: &Path) {
    let o = s(root);
    let j = |n: &str| root.join(n).to_str().unwrap().to_string();
    ok(&["preprocess", "--input", s(&data("problems.jsonl")), "--out-dir", o, "--min-freq", "1", "--seed", "3"]);
    ok(&["lda-fit", "--train", &j("train.jsonl"), "--label", &j("dev.jsonl"), "--out-dir", o, "--num-topics", "3", "--iterations", "50", "--seed", "3"]);
    ok(&["kg-pretrain", "--edges", s(&data("conceptnet_sample.tsv")), "--examples", &j("examples.jsonl"), "--out-dir", o, "--dim", "8", "--epochs", "5", "--seed", "3"]);
    let small: String = fs::read_to_string(j("train.jsonl")).unwrap().lines().take(10).map(|l| format!("{l}\n")).collect();
    fs::write(j("small.jsonl"), small).unwrap();
    let cfg = root.join("train.conf");
    fs::write(&cfg, "dim = 8\nnum_topics = 3\nmemory_slots = 4\nkernel_widths = [2, 3]\nepochs = 3\nbatch_size = 2\nwarmup_steps = 5\nword_min_freq = 1\nseed = 3\n").unwrap();
    ok(&[
        "train", "--train", &j("small.jsonl"), "--dev", &j("dev.jsonl"), "--graph", &j("graph.tsv"), "--embeddings", &j("node_embeddings.bin"),
        "--keywords", &j("keywords.json"), "--out-dir", o, "--config", s(&cfg),
    ]);
    ok(&["generate", "--checkpoint", &j("best.ckpt"), "--input", &j("dev.jsonl"), "--out-dir", o, "--beam", "2"]);
    ok(&["evaluate", "--candidates", &j("generated.jsonl"), "--references", &j("dev.jsonl"), "--out-dir", o]);
}

#[test]
fn toy_pipeline_end_to_end_is_reproducible() {
    let start = std::time::Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    toy_run(a.path());
    assert!(start.elapsed().as_secs() < 300);
    toy_run(b.path());
    for f in [
        "examples.jsonl", "train.jsonl", "dev.jsonl", "test.jsonl", "preprocess_report.txt", "lda.bin", "topics.jsonl", "keywords.json", "graph.tsv",
        "node_embeddings.bin", "best.ckpt", "last.ckpt", "loss.csv", "generated.jsonl", "metrics.json",
    ] {
        let (x, y) = (fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        assert!(x == y, "{f} differs between runs");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.path().join("manifest.json")).unwrap()).unwrap();
    for stage in ["preprocess", "lda-fit", "kg-pretrain", "train", "generate", "evaluate"] {
        assert!(manifest["stages"][stage]["inputs"].as_object().is_some_and(|m| !m.is_empty()), "{stage}");
    }
    assert_eq!(manifest["tool"]["version"], env!("CARGO_PKG_VERSION"));
}
