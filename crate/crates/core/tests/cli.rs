use std::path::Path;
use std::process::{Command, Output};

use dsae::cli;
use dsae::config::Config;
use dsae::evaluator::{parse_scores, read_trials, run_trials, Pooling};
use dsae::features::wav::write_wav;
use dsae::manifest::{CorpusManifest, ManifestEntry, Split};
use dsae::segmenter::WindowMode;

fn dsae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsae"))
        .current_dir(dir)
        .args(args)
        .env("DSAE_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = "\
seed = 3
synth.train_speakers = 3
synth.train_utterances = 4
synth.test_speakers = 3
synth.test_utterances = 2
synth.test_min_s = 3
synth.test_max_s = 5
synth.target_trials = 3
synth.nontarget_trials = 5
train.q = 3
train.p = 2
train.max_batches = 6
train.checkpoint_every = 3
paths.manifest = data/manifest.tsv
paths.features = features
paths.checkpoints = ckpt
paths.trials = data/trials.tsv
paths.metrics = ckpt/metrics.tsv
";

#[test]
fn help_on_every_command() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in [None, Some("extract"), Some("synth"), Some("train"), Some("embed"), Some("score"), Some("eer")] {
        let args: Vec<&str> = cmd.into_iter().chain(["--help"]).collect();
        let o = dsae(dir.path(), &args);
        assert_eq!(code(&o), 0, "{args:?}");
        assert!(stdout(&o).contains("Usage"), "{args:?}");
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&dsae(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&dsae(dir.path(), &["eer"])), 2);

    std::fs::write(dir.path().join("bad.conf"), "model.depth = 3\n").unwrap();
    let o = dsae(dir.path(), &["--config", "bad.conf", "synth"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.depth"));

    let o = Command::new(env!("CARGO_BIN_EXE_dsae"))
        .current_dir(dir.path())
        .args(["eer", "x"])
        .env("DSAE_MODEL_DEPTH", "3")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn eer_on_fixture_score_file() {
    let dir = tempfile::tempdir().unwrap();
    let scores = "1\ta\tb\t0.9\n1\ta\tc\t0.8\n1\tb\tc\t0.3\n0\ta\td\t0.6\n0\tb\td\t0.2\n0\tc\td\t0.1\n";
    std::fs::write(dir.path().join("scores.tsv"), scores).unwrap();
    let o = dsae(dir.path(), &["eer", "scores.tsv"]);
    assert_eq!(code(&o), 0);
    let eer: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("eer="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((eer - 1.0 / 3.0).abs() < 1e-15);

    let o = dsae(dir.path(), &["eer", "missing.tsv"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.tsv"));
}

#[test]
fn extract_frame_counts_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::create_dir(root.join("wav")).unwrap();
    let mut entries = Vec::new();
    let mut lengths = Vec::new();
    for k in 0..10 {
        let n = 4000 + 1733 * k;
        let samples: Vec<f64> = (0..n).map(|i| 0.3 * (i as f64 * (0.05 + 0.01 * k as f64)).sin()).collect();
        let rel = format!("wav/u{k}.wav");
        write_wav(&root.join(&rel), &samples).unwrap();
        entries.push(ManifestEntry {
            speaker: format!("s{}", k % 2),
            utterance: format!("u{k}"),
            path: rel.into(),
            split: if k < 6 { Split::Train } else { Split::Test },
        });
        lengths.push(n);
    }
    let manifest = CorpusManifest {
        entries,
        root: root.to_path_buf(),
    };
    manifest.write(&root.join("manifest.tsv")).unwrap();
    std::fs::write(root.join("c.conf"), "features.vad = false\n").unwrap();

    let o = dsae(root, &["--config", "c.conf", "extract", "--manifest", "manifest.tsv", "--out", "f"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("written=11"));
    for (k, n) in lengths.iter().enumerate() {
        // 32 ms windows every 16 ms at 16 kHz
        let expected = (n - 512) / 256 + 1;
        let f = cli::read_normalized(&root.join("f"), &format!("u{k}")).unwrap();
        assert_eq!(f.frames(), expected, "u{k}");
        assert_eq!(f.dims(), 40);
    }
    let dsaf = std::fs::read_dir(root.join("f"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "dsaf")
        .count();
    assert_eq!(dsaf, 10);

    let before = std::fs::metadata(root.join("f/u3.dsaf")).unwrap().modified().unwrap();
    let o = dsae(root, &["--config", "c.conf", "extract", "--manifest", "manifest.tsv", "--out", "f"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("written=0"));
    assert!(stdout(&o).contains("skipped=11"));
    assert_eq!(std::fs::metadata(root.join("f/u3.dsaf")).unwrap().modified().unwrap(), before);

    // an unreadable clip fails the run and is named
    std::fs::write(root.join("wav/u4.wav"), b"not a wav").unwrap();
    let o = dsae(root, &["--config", "c.conf", "extract", "--manifest", "manifest.tsv", "--out", "f"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("u4"));
}

#[test]
fn pipeline_embed_then_score_matches_run_trials() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("small.conf"), SMALL).unwrap();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", "small.conf", "--jobs", "2"];
        all.extend_from_slice(args);
        let o = dsae(root, &all);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    run(&["synth"]);
    run(&["extract"]);
    run(&["train"]);
    run(&["embed", "--out", "emb"]);
    run(&["score", "--embeddings", "emb", "--out", "via_embed.tsv"]);
    run(&["score", "--out", "direct.tsv"]);

    let cfg = Config::parse(SMALL).unwrap();
    let params = cli::load_model(&cfg, &root.join("ckpt/latest.dsac")).unwrap();
    let trials = read_trials(&root.join("data/trials.tsv")).unwrap();
    let policy = cfg.window_policy().with_mode(WindowMode::Test);
    let features = root.join("features");
    let report = run_trials(&params, &trials, |id| cli::read_normalized(&features, id), &policy, Pooling::Attentive).unwrap();

    for file in ["via_embed.tsv", "direct.tsv"] {
        let scored = parse_scores(&std::fs::read_to_string(root.join(file)).unwrap()).unwrap();
        assert_eq!(scored.len(), report.scores.len());
        for (a, b) in scored.iter().zip(&report.scores) {
            assert_eq!(a.trial, b.trial);
            assert!((a.score - b.score).abs() <= 1e-12, "{file}: {} vs {}", a.score, b.score);
        }
    }

    // resuming a finished run trains no further and keeps the log
    let log = std::fs::read(root.join("ckpt/metrics.tsv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&log).lines().count(), 6);
    run(&["train", "--resume"]);
    assert_eq!(std::fs::read(root.join("ckpt/metrics.tsv")).unwrap(), log);

    // a checkpoint trained under another model shape is refused
    let o = dsae(root, &["--config", "small.conf", "--seed", "3", "score"]);
    assert_eq!(code(&o), 0);
    let o = Command::new(env!("CARGO_BIN_EXE_dsae"))
        .current_dir(root)
        .args(["--config", "small.conf", "score"])
        .env("DSAE_MODEL_HIDDEN", "8")
        .output()
        .unwrap();
    assert_eq!(code(&o), 4);
}

#[test]
fn training_resume_reproduces_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("small.conf"), SMALL).unwrap();
    let base = ["--config", "small.conf"];
    for args in [&["synth"][..], &["extract"][..], &["train"][..]] {
        assert_eq!(code(&dsae(root, &[&base[..], args].concat())), 0);
    }
    let full = std::fs::read(root.join("ckpt/metrics.tsv")).unwrap();
    let full_ckpt = std::fs::read(root.join("ckpt/latest.dsac")).unwrap();

    // stop after the first checkpoint, then resume
    std::fs::remove_dir_all(root.join("ckpt")).unwrap();
    let stop = Command::new(env!("CARGO_BIN_EXE_dsae"))
        .current_dir(root)
        .args(["--config", "small.conf", "train"])
        .env("DSAE_TRAIN_MAX_BATCHES", "3")
        .output()
        .unwrap();
    assert_eq!(code(&stop), 0);
    assert_eq!(code(&dsae(root, &["--config", "small.conf", "train", "--resume"])), 0);
    assert_eq!(std::fs::read(root.join("ckpt/metrics.tsv")).unwrap(), full);
    assert_eq!(std::fs::read(root.join("ckpt/latest.dsac")).unwrap(), full_ckpt);
}
