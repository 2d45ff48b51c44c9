//! Acceptance criteria 1–7. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dsae::cli::{self, ScoreSource, TrainPaths};
use dsae::config::Config;
use dsae::evaluator::{compute_eer, Pooling};
use dsae::features::format::{decode_matrix, encode_matrix, encode_norm_stats};
use dsae::features::{read_norm_stats, write_norm_stats, FeatureMatrix, NormStats};
use dsae::loss::{penalty, total_loss, BatchEmbeddings, LossConfig};
use dsae::manifest::{CorpusManifest, Split};
use dsae::model::checkpoint::{put_model, Checkpoint};
use dsae::model::{attention, baseline_average_embed, utterance_embed, ModelConfig, ModelParams};
use dsae::numcore::{grad_check, norm, GradCheckOptions, Matrix, Parameterized};
use dsae::objective::{batch_loss, loss_and_grad, SegmentBatch};
use dsae::segmenter::{segment, WindowMode, WindowPolicy};
use dsae::trainer::{clip_gradients, next_batch, train_step, ClipMode, TrainerState};

const ACCEPTANCE_CONF: &str = include_str!("../../../configs/acceptance.conf");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn desk_model(input_dim: usize) -> ModelConfig {
    ModelConfig {
        input_dim,
        layers: 1,
        hidden: 8,
        embed_dim: 8,
        attn_dim: 8,
        heads: 2,
        ..ModelConfig::default()
    }
}

fn random_features(rng: &mut ChaCha8Rng, frames: usize, dims: usize) -> FeatureMatrix {
    let data = (0..frames * dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
    FeatureMatrix::new(Matrix::from_vec(frames, dims, data).unwrap(), true).unwrap()
}

fn gradient_fidelity() -> dsae::Result<Outcome> {
    let cfg = desk_model(40);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = ModelParams::init(&cfg, &mut rng)?;
    // 2 speakers × 2 utterances × 2 segments: 9 frames cut with a 6-frame window
    let utterances = (0..4)
        .map(|_| segment(&random_features(&mut rng, 9, cfg.input_dim), 6, &WindowPolicy::default()))
        .collect::<dsae::Result<Vec<_>>>()?;
    if utterances.iter().any(|s| s.len() != 2) {
        return Ok(outcome(false, "batch construction did not yield 2 segments per utterance"));
    }
    let batch = SegmentBatch {
        speakers: 2,
        per_speaker: 2,
        utterances,
    };
    let loss_cfg = LossConfig::default();
    let (_, grad) = loss_and_grad(&batch, &params, &loss_cfg)?;
    let opts = GradCheckOptions {
        eps: 1e-5,
        tol: 1e-4,
        max_scalars: params.scalar_count(),
        seed: 0,
    };
    let report = grad_check(&params, &grad, |p| Ok(batch_loss(&batch, p, &loss_cfg)?.total), &opts)?;
    let checked: usize = report.tensors.iter().map(|t| t.checked).sum();
    let worst = report
        .tensors
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .map(|t| t.name.as_str())
        .unwrap_or("-");
    Ok(outcome(
        report.pass && report.non_finite_at.is_none(),
        format!(
            "{checked} scalars, max rel err {:.2e} (in {worst}), tol 1e-4, eps 1e-5",
            report.max_rel_error
        ),
    ))
}

fn loss_identities() -> dsae::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_single: f64 = 0.0;
    for _ in 0..20 {
        let per_speaker = rng.gen_range(1..5);
        let dims = rng.gen_range(2..10);
        let segments: Vec<Matrix> = (0..per_speaker)
            .map(|_| {
                let n = rng.gen_range(1..5);
                let rows = (0..n)
                    .map(|_| {
                        let v: Vec<f64> = (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        let s = norm(&v);
                        v.into_iter().map(|x| x / s).collect()
                    })
                    .collect::<Vec<_>>();
                Matrix::from_rows(&rows).unwrap()
            })
            .collect();
        let utterances = segments.iter().map(dsae::model::mean_rows).collect();
        let attention = segments.iter().map(|s| Matrix::filled(s.rows(), 1, 1.0 / s.rows() as f64)).collect();
        let batch = BatchEmbeddings {
            speakers: 1,
            per_speaker,
            utterances,
            segments,
            attention,
        };
        let w = rng.gen_range(0.1..20.0);
        let b = rng.gen_range(-10.0..10.0);
        let (l, _) = total_loss(&batch, w, b, &LossConfig::default())?;
        worst_single = worst_single.max(l.utterance.abs()).max(l.segment.abs());
    }

    // one-hot heads on distinct segments have orthonormal columns
    let mut worst_penalty: f64 = 0.0;
    for n in 2..8 {
        for r in 2..=n.min(4) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mut a = Matrix::zeros(n, r);
            for (k, &row) in perm.iter().take(r).enumerate() {
                a.set(row, k, 1.0);
            }
            worst_penalty = worst_penalty.max(penalty(&a).abs());
        }
    }

    let policy = WindowPolicy::default().with_mode(WindowMode::Test);
    let mut worst_pool: f64 = 0.0;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut params = ModelParams::init(&desk_model(12), &mut rng)?;
        params.w2.fill(0.0);
        let frames = rng.gen_range(100..500);
        let f = random_features(&mut rng, frames, 12);
        let attentive = utterance_embed(&f, &params, &policy)?.embedding;
        let average = baseline_average_embed(&f, &params, &policy)?;
        for (x, y) in attentive.iter().zip(&average) {
            worst_pool = worst_pool.max((x - y).abs());
        }
    }
    Ok(outcome(
        worst_single <= 1e-12 && worst_penalty <= 1e-12 && worst_pool <= 1e-12,
        format!(
            "Q=1 max |L_u|,|L_s| {worst_single:.1e}; orthonormal max L_p {worst_penalty:.1e}; W2=0 max diff {worst_pool:.1e}"
        ),
    ))
}

/// Exhaustive sweep: every candidate threshold, FAR and FRR counted directly.
fn eer_oracle(scores: &[f64], targets: &[bool]) -> (f64, f64, f64) {
    let mut cuts: Vec<f64> = scores.to_vec();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut thresholds = vec![f64::NEG_INFINITY];
    for k in 1..cuts.len() {
        thresholds.push((cuts[k - 1] + cuts[k]) / 2.0);
    }
    thresholds.push(f64::INFINITY);
    let n_t = targets.iter().filter(|&&t| t).count() as f64;
    let n_n = targets.len() as f64 - n_t;
    let gap: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let mut fa = 0.0;
            let mut fr = 0.0;
            for (&s, &y) in scores.iter().zip(targets) {
                if y && s < t {
                    fr += 1.0;
                }
                if !y && s >= t {
                    fa += 1.0;
                }
            }
            (fa / n_n, fr / n_t)
        })
        .collect();
    for k in 0..thresholds.len() {
        let (far, frr) = gap[k];
        if far == frr {
            return (thresholds[k], thresholds[k], far);
        }
        let (far2, frr2) = gap[k + 1];
        if far2 - frr2 < 0.0 {
            let alpha = (far - frr) / ((far - frr) - (far2 - frr2));
            return (thresholds[k], thresholds[k + 1], far + alpha * (far2 - far));
        }
    }
    unreachable!("FAR − FRR is −1 at +∞")
}

fn eer_matches_oracle() -> dsae::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut outside = 0;
    for case in 0..500 {
        let n = rng.gen_range(2..=100);
        let mut targets: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        targets[0] = true;
        targets[1] = false;
        // coarse grids in some cases so that ties occur
        let levels = if case % 3 == 0 { 8 } else { 1_000_000 };
        let scores: Vec<f64> = targets
            .iter()
            .map(|&t| {
                let shift = if t { 0.15 } else { 0.0 };
                ((rng.gen_range(0.0..1.0) + shift) * levels as f64).floor() / levels as f64
            })
            .collect();
        let got = compute_eer(&scores, &targets)?;
        let (lo, hi, eer) = eer_oracle(&scores, &targets);
        worst = worst.max((got.eer - eer).abs());
        let inside = if lo == hi {
            got.threshold == lo
        } else {
            got.threshold >= lo && got.threshold <= hi
        };
        if !inside {
            outside += 1;
        }
    }
    Ok(outcome(
        worst <= 1e-12 && outside == 0,
        format!("500 cases, max |ΔEER| {worst:.1e}, thresholds outside crossing interval: {outside}"),
    ))
}

fn small_corpus_config() -> Config {
    Config::parse(
        "seed = 4\n\
         synth.train_speakers = 5\n\
         synth.train_utterances = 6\n\
         synth.test_speakers = 3\n\
         synth.test_utterances = 2\n\
         synth.test_min_s = 4\n\
         synth.test_max_s = 6\n\
         synth.target_trials = 3\n\
         synth.nontarget_trials = 6\n\
         train.q = 4\n\
         train.p = 4\n",
    )
    .expect("static config")
}

fn pipeline_invariants() -> dsae::Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| dsae::Error::io("tempdir", e))?;
    let cfg = small_corpus_config();
    let synth = cli::cmd_synth(&cfg, &dir.path().join("data"))?;
    let features = dir.path().join("features");
    cli::cmd_extract(&cfg, &synth.manifest_path, &features)?;
    let manifest = CorpusManifest::read(&synth.manifest_path)?;
    let train = cli::load_split(&manifest, &features, Split::Train)?;
    let test: Vec<FeatureMatrix> = manifest
        .split(Split::Test)
        .map(|e| cli::read_normalized(&features, &e.utterance))
        .collect::<dsae::Result<_>>()?;

    let tc = cfg.train_config()?;
    let model = cfg.model_config();
    let mut state = TrainerState::new(&model, &tc)?;
    let policy = cfg.window_policy().with_mode(WindowMode::Test);
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let mut col_err: f64 = 0.0;
    let mut perm_err: f64 = 0.0;
    let mut unit_err: f64 = 0.0;
    let mut check_outputs = |params: &ModelParams| -> dsae::Result<()> {
        for f in &test {
            let out = utterance_embed(f, params, &policy)?;
            for k in 0..out.attention.cols() {
                col_err = col_err.max((out.attention.col(k).iter().sum::<f64>() - 1.0).abs());
            }
            for n in 0..out.segments.rows() {
                unit_err = unit_err.max((norm(out.segments.row(n)) - 1.0).abs());
            }
            let mut order: Vec<usize> = (0..out.segments.rows()).collect();
            order.shuffle(&mut rng);
            let rows: Vec<Vec<f64>> = order.iter().map(|&r| out.segments.row(r).to_vec()).collect();
            let shuffled = attention::forward(&Matrix::from_rows(&rows)?, params)?;
            for (x, y) in shuffled.embedding.iter().zip(&out.embedding) {
                perm_err = perm_err.max((x - y).abs());
            }
        }
        Ok(())
    };
    check_outputs(&state.params)?;

    let mut clip_worst: f64 = 0.0;
    let mut min_w = state.params.sim_w;
    for step in 0..1000 {
        let (_, batch) = next_batch(&mut state, &train, &tc)?;
        if step % 50 == 0 {
            let (_, grad) = loss_and_grad(&batch, &state.params, &tc.loss)?;
            for scale in [1.0, 1e3] {
                let mut g = grad.clone();
                g.scale(scale);
                clip_gradients(&mut g, tc.clip_norm, ClipMode::Global);
                clip_worst = clip_worst.max(g.norm());
            }
        }
        train_step(&mut state, &batch, &tc)?;
        min_w = min_w.min(state.params.sim_w);
    }
    check_outputs(&state.params)?;

    let pass = col_err <= 1e-9 && perm_err <= 1e-12 && unit_err <= 1e-9 && clip_worst <= 3.0 + 1e-9 && min_w >= 1e-4;
    Ok(outcome(
        pass,
        format!(
            "column sums {col_err:.1e}; permutation {perm_err:.1e}; unit norm {unit_err:.1e}; \
             post-clip norm ≤ {clip_worst:.6}; min w over 1000 steps {min_w:.4}"
        ),
    ))
}

struct EndToEnd {
    metrics: Vec<u8>,
    losses: Vec<f64>,
    attentive: f64,
    average: f64,
    elapsed: Duration,
}

fn end_to_end(root: &Path, threads: usize) -> dsae::Result<EndToEnd> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| dsae::Error::Config(e.to_string()))?;
    pool.install(|| {
        let start = Instant::now();
        let cfg = Config::parse(ACCEPTANCE_CONF)?;
        let synth = cli::cmd_synth(&cfg, &root.join("data"))?;
        let features = root.join("features");
        cli::cmd_extract(&cfg, &synth.manifest_path, &features)?;
        let checkpoints = root.join("checkpoints");
        let metrics = checkpoints.join("metrics.tsv");
        let paths = TrainPaths {
            manifest: &synth.manifest_path,
            features: &features,
            checkpoints: &checkpoints,
            metrics: &metrics,
        };
        let summary = cli::cmd_train(&cfg, &paths, false)?;
        let score = |pooling| {
            let source = ScoreSource::Checkpoint {
                checkpoint: &summary.checkpoint,
                features: &features,
            };
            cli::cmd_score(&cfg, source, &synth.trials_path, pooling)
        };
        let attentive = score(Pooling::Attentive)?.eer;
        let average = score(Pooling::Average)?.eer;
        let bytes = std::fs::read(&metrics).map_err(|e| dsae::Error::io(&metrics, e))?;
        let losses = String::from_utf8_lossy(&bytes)
            .lines()
            .map(|l| l.split('\t').nth(1).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN))
            .collect();
        Ok(EndToEnd {
            metrics: bytes,
            losses,
            attentive,
            average,
            elapsed: start.elapsed(),
        })
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn synthetic_end_to_end(run: &EndToEnd) -> Outcome {
    if run.losses.len() < 110 {
        return outcome(false, format!("only {} logged steps", run.losses.len()));
    }
    // per-batch losses are noisy: compare the first 10 steps with the last 100
    let initial = mean(&run.losses[..10]);
    let last = mean(&run.losses[run.losses.len() - 100..]);
    let ratio = last / initial;
    let a = ratio < 0.25;
    let b = run.attentive < 0.20;
    let c = run.attentive <= run.average + 0.01;
    let fast = run.elapsed < Duration::from_secs(30 * 60);
    outcome(
        a && b && c && fast,
        format!(
            "(a) loss {initial:.4} → {last:.4}, ratio {:.1}% [{}]; (b) EER {:.2}% [{}]; \
             (c) attentive {:.2}% vs average {:.2}% [{}]; {:.0} s on one thread",
            100.0 * ratio,
            if a { "ok" } else { "fail" },
            100.0 * run.attentive,
            if b { "ok" } else { "fail" },
            100.0 * run.attentive,
            100.0 * run.average,
            if c { "ok" } else { "fail" },
            run.elapsed.as_secs_f64(),
        ),
    )
}

fn read(path: &Path) -> dsae::Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| dsae::Error::io(path, e))
}

fn format_round_trips() -> dsae::Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| dsae::Error::io("tempdir", e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = [0usize; 3];

    for case in 0..100 {
        let path = dir.path().join(format!("m{case}.dsaf"));
        let (rows, cols) = (rng.gen_range(0..40), rng.gen_range(1..50));
        let scale = 10f64.powi(rng.gen_range(-6..6));
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let first = encode_matrix(&Matrix::from_vec(rows, cols, data)?);
        dsae::write_atomic(&path, &first)?;
        let again = encode_matrix(&decode_matrix(&read(&path)?)?);
        mismatches[0] += usize::from(first != again);
    }

    for case in 0..100 {
        let path = dir.path().join(format!("n{case}.dsan"));
        let dims = rng.gen_range(1..80);
        let stats = NormStats {
            mean: (0..dims).map(|_| rng.gen_range(-50.0..50.0)).collect(),
            std: (0..dims).map(|_| rng.gen_range(1e-3..20.0)).collect(),
            frame_count: rng.gen_range(1..1_000_000),
            clamped: (0..dims).map(|_| rng.gen_bool(0.1)).collect(),
        };
        write_norm_stats(&path, &stats)?;
        let first = read(&path)?;
        let again = encode_norm_stats(&read_norm_stats(&path)?);
        mismatches[1] += usize::from(first != again);
    }

    for case in 0..100 {
        let path = dir.path().join(format!("c{case}.dsac"));
        let model = ModelConfig {
            input_dim: rng.gen_range(1..20),
            layers: rng.gen_range(1..3),
            hidden: rng.gen_range(1..12),
            embed_dim: rng.gen_range(1..12),
            attn_dim: rng.gen_range(1..12),
            heads: rng.gen_range(1..4),
            ..ModelConfig::default()
        };
        let mut params = ModelParams::init(&model, &mut rng)?;
        params.sim_w = rng.gen_range(0.1..30.0);
        params.sim_b = rng.gen_range(-10.0..10.0);
        let mut ckpt = Checkpoint {
            digest: format!("{:064x}", rng.gen::<u128>()),
            ..Checkpoint::default()
        };
        put_model(&mut ckpt, &params);
        for k in 0..rng.gen_range(0..6) {
            ckpt.metadata.insert(format!("extra.{k}"), format!("{}", rng.gen::<f64>()));
        }
        ckpt.save(&path)?;
        let first = read(&path)?;
        let again = Checkpoint::load(&path)?.encode();
        mismatches[2] += usize::from(first != again);
    }

    Ok(outcome(
        mismatches == [0, 0, 0],
        format!(
            "byte mismatches in 100 cases each: DSAF {}, DSAN {}, DSAC {}",
            mismatches[0], mismatches[1], mismatches[2]
        ),
    ))
}

fn timed(limit: Duration, f: impl FnOnce() -> dsae::Result<Outcome>) -> Outcome {
    let start = Instant::now();
    let mut o = f().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    let elapsed = start.elapsed();
    if elapsed > limit {
        o.pass = false;
    }
    o.detail = format!("{}; {:.1} s (limit {} s)", o.detail, elapsed.as_secs_f64(), limit.as_secs());
    o
}

fn main() {
    let mut results = Vec::new();
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("criterion {n}: {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push(o.pass);
    };

    report(1, "gradient fidelity", timed(Duration::from_secs(60), gradient_fidelity));
    report(2, "loss identities", timed(Duration::from_secs(5), loss_identities));
    report(3, "EER oracle", timed(Duration::from_secs(30), eer_matches_oracle));
    report(4, "pipeline invariants", timed(Duration::from_secs(120), pipeline_invariants));

    let dirs = (tempfile::tempdir(), tempfile::tempdir());
    let runs = match dirs {
        (Ok(a), Ok(b)) => (end_to_end(a.path(), 1), end_to_end(b.path(), 4)),
        _ => panic!("cannot create temporary directories"),
    };
    match &runs.0 {
        Ok(run) => report(5, "synthetic end-to-end", synthetic_end_to_end(run)),
        Err(e) => report(5, "synthetic end-to-end", outcome(false, format!("error: {e}"))),
    }
    let determinism = match &runs {
        (Ok(a), Ok(b)) => outcome(
            a.metrics == b.metrics,
            format!(
                "metric logs of {} and {} bytes are {} (second run on 4 threads)",
                a.metrics.len(),
                b.metrics.len(),
                if a.metrics == b.metrics { "identical" } else { "different" }
            ),
        ),
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("error: {e}")),
    };
    report(6, "determinism", determinism);
    report(7, "format round-trips", timed(Duration::from_secs(10), format_round_trips));

    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
