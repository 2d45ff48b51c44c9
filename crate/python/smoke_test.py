"""Smoke test for the pydsae extension module.

Build and install it first:

    pip install maturin
    pip install --no-build-isolation crates/python
    python python/smoke_test.py
"""

import math
import os
import tempfile

import pydsae


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL: {what}")
    print(f"ok: {what}")


def main():
    cfg = pydsae.Config.parse(
        "\n".join(
            [
                "seed = 5",
                "synth.train_speakers = 3",
                "synth.train_utterances = 4",
                "synth.test_speakers = 3",
                "synth.test_utterances = 2",
                "synth.test_min_s = 3",
                "synth.test_max_s = 4",
                "synth.target_trials = 3",
                "synth.nontarget_trials = 5",
                "train.q = 3",
                "train.p = 2",
                "train.max_batches = 5",
            ]
        )
    )
    check(cfg.get("model.d_r") == "2", "config defaults are filled in")
    reordered = pydsae.Config.parse("train.p = 2\ntrain.q = 3\n")
    check(reordered.model_digest() == cfg.model_digest(), "model digest ignores training keys")

    samples = [0.3 * math.sin(0.07 * i) for i in range(16000)]
    feats = pydsae.extract_features(samples)
    check(len(feats) == (16000 - 512) // 256 + 1 and len(feats[0]) == 40, "one second gives 61 frames of 40 mels")

    model = pydsae.Model.init(cfg, seed=1)
    normalized = [[(v + 10.0) / 5.0 for v in row] for row in feats]
    emb = model.embed(normalized)
    check(len(emb) == model.embed_dim, "embedding has d_e components")
    segs, attn = model.segments(normalized)
    check(all(abs(sum(col) - 1.0) < 1e-9 for col in zip(*attn)), "attention columns sum to one")
    check(abs(pydsae.cosine_score(emb, emb) - 1.0) < 1e-12, "self score is one")

    eer, threshold = pydsae.compute_eer([0.9, 0.8, 0.3, 0.6, 0.2, 0.1], [True, True, True, False, False, False])
    check(abs(eer - 1 / 3) < 1e-15 and abs(threshold - 0.45) < 1e-15, "EER fixture is 1/3 at 0.45")

    try:
        pydsae.compute_eer([0.1, 0.2], [True, True])
        check(False, "single-class EER is rejected")
    except pydsae.DsaeError:
        check(True, "single-class EER is rejected")

    with tempfile.TemporaryDirectory() as tmp:
        manifest, trials = pydsae.synth(cfg, os.path.join(tmp, "data"))
        features = os.path.join(tmp, "features")
        written, skipped = pydsae.extract(cfg, manifest, features)
        check(skipped == 0 and written > 0, "extract writes features")
        check(pydsae.extract(cfg, manifest, features) == (0, written), "extract is idempotent")
        ckpt_dir = os.path.join(tmp, "ckpt")
        steps = pydsae.train(cfg, manifest, features, ckpt_dir, os.path.join(ckpt_dir, "metrics.tsv"))
        check(steps == 5, "training runs the configured batches")
        checkpoint = os.path.join(ckpt_dir, "latest.dsac")
        eer, _, scores = pydsae.score(cfg, checkpoint, features, trials)
        check(len(scores) == 8 and 0.0 <= eer <= 1.0, "scoring covers every trial")

        trained = pydsae.Model.load(checkpoint, cfg)
        t, a, b, s = scores[0]
        ea = trained.embed(pydsae.read_features(features, a))
        eb = trained.embed(pydsae.read_features(features, b))
        # scores are computed from f32-rounded embeddings
        check(abs(pydsae.cosine_score(ea, eb) - s) < 1e-6, "model embeddings reproduce the score file")

        other = pydsae.Config.parse("model.hidden = 8")
        try:
            pydsae.Model.load(checkpoint, other)
            check(False, "mismatched configuration is refused")
        except pydsae.DsaeError:
            check(True, "mismatched configuration is refused")

    print("smoke test passed")


if __name__ == "__main__":
    main()
