use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maccif_cli::RunConfig;
use maccif_core::features::{write_wav, Waveform, SAMPLE_RATE};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn maccif(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maccif")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = maccif(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small() -> String {
    fixture("small.toml").display().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synthetic_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(&["train", "--synthetic", "--deterministic", "--config", &small(), "--seed", seed, "--out", p(&out)]);
        (fs::read(out.join("trace.tsv")).unwrap(), fs::read(out.join("model.ckpt")).unwrap())
    };
    let a = run("a", "7");
    let b = run("b", "7");
    assert_eq!(a, b);
    assert!(!a.0.is_empty());
    assert_ne!(run("c", "8").0, a.0);
    assert!(dir.path().join("a/cycle2.ckpt").exists());
}

#[test]
fn eval_on_separated_scores() {
    let out = ok(&[
        "eval",
        "--scores",
        p(&fixture("separated_scores.txt")),
        "--trials",
        p(&fixture("separated_trials.txt")),
    ]);
    assert!(out.starts_with("eer=0.000000 min_dcf=0.000000"), "{out}");
}

#[test]
fn unknown_key_is_a_usage_error() {
    let out = maccif(&["train", "--synthetic", "--set", "network.chanels=4"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("chanels"));
    assert_eq!(maccif(&["train", "--set", "paths.nope=x"]).status.code(), Some(1));
    assert_eq!(maccif(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(maccif(&["--help"]).status.code(), Some(0));
}

#[test]
fn training_without_a_corpus_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = maccif(&["train", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--synthetic"));
}

#[test]
fn divergence_exits_with_the_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = maccif(&[
        "train",
        "--synthetic",
        "--config",
        &small(),
        "--set",
        "train.lr_max=1e200",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("iteration") && err.contains("non-finite"), "{err}");
}

#[test]
fn missing_embedding_names_the_utterance() {
    let dir = tempfile::tempdir().unwrap();
    let emb = dir.path().join("emb");
    fs::create_dir(&emb).unwrap();
    let out = maccif(&[
        "score",
        "--embeddings",
        p(&emb),
        "--trials",
        p(&fixture("separated_trials.txt")),
        "--out",
        p(&dir.path().join("s.txt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("'a/1'"));
}

#[test]
fn synthetic_pipeline_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s);
    let cfg = small();
    ok(&["train", "--synthetic", "--config", &cfg, "--seed", "3", "--out", p(&d("run"))]);
    ok(&["synth", "--config", &cfg, "--seed", "3", "--out", p(&d("held"))]);
    let extract = |out: &str| {
        ok(&[
            "extract",
            "--checkpoint",
            p(&d("run/model.ckpt")),
            "--utts",
            p(&d("held/utts.txt")),
            "--features",
            p(&d("held/features")),
            "--out",
            p(&d(out)),
        ])
    };
    assert!(extract("emb").starts_with("embeddings=32 "));
    ok(&["score", "--embeddings", p(&d("emb")), "--trials", p(&d("held/trials.txt")), "--out", p(&d("scores.txt"))]);
    let line = ok(&[
        "eval",
        "--scores",
        p(&d("scores.txt")),
        "--trials",
        p(&d("held/trials.txt")),
        "--out",
        p(&d("metrics.txt")),
    ]);
    assert_eq!(fs::read_to_string(d("metrics.txt")).unwrap(), line);
    assert_eq!(fs::read_to_string(d("scores.txt")).unwrap().lines().count(), 40);

    // rerunning overwrites with identical bytes
    extract("emb2");
    for f in fs::read_dir(d("emb")).unwrap() {
        let f = f.unwrap();
        assert_eq!(fs::read(f.path()).unwrap(), fs::read(d("emb2").join(f.file_name())).unwrap());
    }
}

#[test]
fn checkpoint_header_echoes_the_run_config() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "train",
        "--synthetic",
        "--config",
        &small(),
        "--set",
        "paths.trial_list=lists/trials.txt",
        "--out",
        p(dir.path()),
    ]);
    let bytes = fs::read(dir.path().join("model.ckpt")).unwrap();
    let header = String::from_utf8_lossy(&bytes[..bytes.windows(5).position(|w| w == b"\n---\n").unwrap()]).into_owned();
    let cfg = RunConfig::load(Some(&fixture("small.toml")), &["paths.trial_list=lists/trials.txt".into()]).unwrap();
    for (k, v) in cfg.entries() {
        let want = if k == "network.num_speakers" { "8".to_string() } else { v };
        assert!(header.lines().any(|l| l == format!("{k}={want}")), "{k}={want} missing");
    }
    // the header alone rebuilds the config
    let pairs: Vec<(&str, &str)> = header
        .lines()
        .filter_map(|l| l.split_once('='))
        .filter(|(k, _)| k.contains('.') || *k == "preset")
        .collect();
    let mut rebuilt = RunConfig::from_pairs(pairs).unwrap();
    rebuilt.network.num_speakers = cfg.network.num_speakers;
    assert_eq!(rebuilt, cfg);
}

fn tone(path: &Path, hz: f64) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    let samples = (0..8000)
        .map(|i| 0.3 * (2.0 * std::f64::consts::PI * hz * i as f64 / SAMPLE_RATE as f64).sin())
        .collect();
    write_wav(path, &Waveform::new(samples, SAMPLE_RATE).unwrap()).unwrap();
}

#[test]
fn wav_corpus_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s);
    for (spk, base) in [("spk1", 200.0), ("spk2", 900.0)] {
        for u in 0..2 {
            tone(&d(&format!("audio/{spk}/v/{u}.wav")), base + 50.0 * u as f64);
        }
    }
    fs::write(d("trials.txt"), "1 spk1/v/0.wav spk1/v/1.wav\n0 spk1/v/0.wav spk2/v/1.wav\n").unwrap();
    let corpus = format!("paths.corpus_dir={}", p(&d("audio")));
    let cache = format!("paths.feature_cache={}", p(&d("cache")));
    let trials = format!("paths.trial_list={}", p(&d("trials.txt")));
    let cfg = small();
    let with = |args: &[&str]| {
        let mut v = args.to_vec();
        v.extend(["--config", &cfg, "--set", &corpus, "--set", &cache, "--set", &trials]);
        ok(&v)
    };
    with(&["train", "--set", "train.cycle_len_iters=2", "--set", "train.batch_size=2", "--out", p(&d("run"))]);
    assert!(d("cache").read_dir().unwrap().count() == 4);
    with(&["extract", "--checkpoint", p(&d("run/model.ckpt")), "--out", p(&d("emb"))]);
    with(&["score", "--embeddings", p(&d("emb")), "--out", p(&d("scores.txt"))]);
    let line = with(&["eval", "--scores", p(&d("scores.txt"))]);
    assert!(line.starts_with("eer="), "{line}");
}

#[test]
fn gradcheck_passes_at_small_dims() {
    let out = ok(&["gradcheck", "--seed", "1", "--max-dim", "4"]);
    assert!(out.lines().last().unwrap().starts_with("all "), "{out}");
    assert!(!out.contains("FAIL"));
}
