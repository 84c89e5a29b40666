use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dcvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcvae")).args(args).output().expect("spawn dcvae")
}

fn ok(args: &[&str]) -> String {
    let out = dcvae(args);
    assert!(
        out.status.success(),
        "dcvae {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

const SMALL: [&str; 8] = ["--pairs", "240", "--templates", "10", "--topics", "16", "--test-queries", "4"];

fn synth(dir: &Path) {
    let mut args = vec!["synth", "--out", dir.to_str().unwrap(), "--seed", "3"];
    args.extend(SMALL);
    ok(&args);
}

/// synth -> prep -> cluster -> keywords -> pretrain -> train -> generate.
fn staged_run(d: &Path) -> String {
    synth(d);
    ok(&["prep", "--corpus", &p(d, "train.tsv"), "--out", d.to_str().unwrap()]);
    ok(&[
        "cluster", "--vocab", &p(d, "vocab.tsv"), "--latent", &p(d, "latent.txt"),
        "--embeddings", &p(d, "embeddings.txt"), "--K", "4", "--out", &p(d, "clusters.txt"),
    ]);
    ok(&[
        "keywords", "--corpus", &p(d, "train.tsv"), "--vocab", &p(d, "vocab.tsv"),
        "--latent", &p(d, "latent.txt"), "--keyword-source", "response", "--out", &p(d, "kw.txt"),
    ]);
    ok(&[
        "pretrain", "--corpus", &p(d, "train.tsv"), "--keywords", &p(d, "kw.txt"),
        "--vocab", &p(d, "vocab.tsv"), "--latent", &p(d, "latent.txt"), "--clusters", &p(d, "clusters.txt"),
        "--embeddings", &p(d, "embeddings.txt"), "--hidden", "16", "--word-dim", "32",
        "--pretrain-steps", "20", "--pretrain-lr", "3e-3", "--seed", "5", "--out", &p(d, "pre.ckpt"),
    ]);
    ok(&[
        "train", "--corpus", &p(d, "train.tsv"), "--checkpoint", &p(d, "pre.ckpt"),
        "--epochs", "2", "--lr", "3e-3", "--batch", "32", "--seed", "5", "--out", &p(d, "model.ckpt"),
    ]);
    ok(&[
        "generate", "--checkpoint", &p(d, "model.ckpt"), "--test", &p(d, "test.tsv"),
        "--samples", "4", "--beam", "3", "--max-len", "8", "--seed", "5", "--out", &p(d, "gen.tsv"),
    ]);
    fs::read_to_string(d.join("gen.tsv")).unwrap()
}

#[test]
fn staged_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let generated = staged_run(d);
    let test = fs::read_to_string(d.join("test.tsv")).unwrap();
    let queries: BTreeSet<&str> = test.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(generated.lines().count(), 4 * queries.len());
    assert!(generated.lines().all(|l| l.split('\t').count() == 5));

    let log = fs::read_to_string(d.join("model.ckpt.epochs.tsv")).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows[0], "epoch\trecon\tkl\tbow\ttotal");
    assert_eq!(rows.len(), 3);

    let summary = ok(&["evaluate", "--generated", &p(d, "gen.tsv"), "--test", &p(d, "test.tsv"), "--out", &p(d, "report.tsv")]);
    assert!(summary.contains("BLEU-1"));
    let report = fs::read_to_string(d.join("report.tsv")).unwrap();
    for line in report.lines() {
        let (key, value) = line.split_once('\t').unwrap();
        let v: f64 = value.parse().unwrap();
        if key.starts_with("bleu") || key.starts_with("distinct") {
            assert!((0.0..=1.0).contains(&v), "{line}");
        }
    }
}

#[test]
fn staged_pipeline_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(staged_run(a.path()), staged_run(b.path()));
    assert_eq!(
        fs::read(a.path().join("model.ckpt")).unwrap(),
        fs::read(b.path().join("model.ckpt")).unwrap()
    );
}

#[test]
fn misaligned_evaluate_reports_both_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("refs.tsv"), "a b\tx y\nc d\tz w\nc d\tv u\n").unwrap();
    fs::write(d.join("gen.tsv"), "a b\t-\t-\tx y\t-1.0\n").unwrap();
    let out = dcvae(&["evaluate", "--generated", &p(d, "gen.tsv"), "--test", &p(d, "refs.tsv")]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("1 lines") && err.contains("3 lines"), "{err}");
}

#[test]
fn ablate_emits_comparable_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let cfg = d.join("run.cfg");
    fs::write(&cfg, "# small run\nK = 4\nhidden = 8\nepochs = 1\nbatch = 32\npretrain-steps = 5\nsamples = 3\nbeam = 2\nmax-len = 6\nkeyword-source = response\n").unwrap();
    for mode in ["two_stage", "one_stage", "cd", "no_latent"] {
        ok(&[
            "ablate", "--config", cfg.to_str().unwrap(), "--mode", mode, "--corpus", &p(d, "train.tsv"),
            "--test", &p(d, "test.tsv"), "--embeddings", &p(d, "embeddings.txt"), "--out", &p(d, "runs"),
        ]);
        let report = fs::read_to_string(d.join("runs").join(format!("{mode}.report.tsv"))).unwrap();
        assert!(report.contains("distinct2\t"));
        let ck = fs::read_to_string(d.join("runs").join(format!("{mode}.ckpt"))).unwrap();
        assert!(ck.contains(&format!("mode {mode}")));
    }
}

#[test]
fn bad_invocations_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cases: Vec<Vec<String>> = vec![
        vec!["frobnicate".into()],
        vec!["prep".into(), "--corpus".into(), p(d, "missing.tsv"), "--out".into(), p(d, "o")],
        vec!["prep".into(), "--corpus".into(), p(d, "x"), "--out".into(), p(d, "o"), "--no-such-flag".into()],
        vec!["prep".into(), "--corpus".into(), p(d, "x"), "--out".into(), p(d, "o"), "--mode".into(), "bogus".into()],
    ];
    for args in cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = dcvae(&args);
        assert!(!out.status.success(), "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?}");
    }
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("train.tsv"), "a b c\td e f\ng h\ti j\n").unwrap();
    fs::write(d.join("c.cfg"), "vocab-size = 6\n").unwrap();
    let cfg = p(d, "c.cfg");
    let text = ok(&["prep", "--corpus", &p(d, "train.tsv"), "--out", &p(d, "a"), "--config", &cfg]);
    assert!(text.starts_with("vocabulary 10 tokens"), "{text}");
    let text = ok(&["prep", "--corpus", &p(d, "train.tsv"), "--out", &p(d, "b"), "--config", &cfg, "--vocab-size", "100"]);
    assert!(text.starts_with("vocabulary 14 tokens"), "{text}");

    fs::write(d.join("bad.cfg"), "hiden = 3\n").unwrap();
    let out = dcvae(&["prep", "--corpus", &p(d, "train.tsv"), "--out", &p(d, "c"), "--config", &p(d, "bad.cfg")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("hiden"));
}
