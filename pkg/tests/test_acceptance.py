"""Acceptance suite: each test exercises one release criterion at its
stated tolerance and prints a single PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The desk-scale
end-to-end criteria (7, 8, 10) share one 2000+2000-utterance corpus and
one attention training run through module-scoped fixtures; expect roughly
half an hour of CPU for the full file.
"""

import hashlib
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import fd_gradient
from mckws.autodiff import GradTape, backward
from mckws.corpus import Batch
from mckws.datagen import (
    ArrayGeometry,
    CorpusSpec,
    MixSpec,
    build_corpus,
    make_multitarget,
    mix_at_snr,
    signal_power,
    synth_filler,
    synth_keyword,
    synth_music,
)
from mckws.decode import SmoothingConfig, detect, roc_sweep, smooth, wakeup_at_fa
from mckws.features import FrameConfig, frame_and_filterbank
from mckws.losses import (
    LossWeights,
    combine_multi,
    frame_labels,
    masked_kws_loss,
    masked_map_loss,
)
from mckws.model import AttentionParams, ModelConfig, ModelParams, attend, forward_batch
from mckws.training import (
    TrainConfig,
    adam_step,
    batch_loss,
    load_checkpoint,
    save_checkpoint,
    train,
)

FRAME_CFG = FrameConfig()
GEOMETRY = ArrayGeometry.default(6)

# desk-scale experiment knobs (criteria 6-8)
E2E_CORPUS = CorpusSpec(keywords=2000, fillers=2000, seed=11, noisy_frac=0.5,
                        jitter_db=2.0)
ATTENTION_EPOCHS = 8
FINETUNE_EPOCHS = 6
TRAIN_SEED = 0
SWEEP_THRESHOLDS = [round(t, 3) for t in np.linspace(0.05, 0.95, 19)]
MATCHED_FA_PER_HOUR = 2.0


def report(criterion: int, description: str, passed: bool, detail: str = ""):
    status = "PASS" if passed else "FAIL"
    print(f"\n[ACCEPTANCE {criterion}] {status}: {description}"
          + (f" ({detail})" if detail else ""))
    assert passed, f"criterion {criterion} failed: {description} {detail}"


# ----------------------------------------------------------------------
# 1. gradient fidelity on a shrunken model
# ----------------------------------------------------------------------

def test_criterion_1_gradient_fidelity():
    started = time.monotonic()
    config = ModelConfig(channels=2, n_mels=8, att_proj=8, hidden=8,
                         n_map_heads=3, dropout_keep=1.0)
    params = ModelParams(config, np.random.default_rng(42))
    rng = np.random.default_rng(7)
    energies = rng.uniform(0.0, 2.0, (1, 5, 2, 8))
    labels = rng.integers(0, 2, (1, 5)).astype(float)
    mask = np.ones((1, 5))
    targets = [rng.uniform(-0.5, 0.5, (1, 5, 8)) for _ in range(3)]
    weights = LossWeights(0.5, 0.2, 0.2, 0.1)

    def loss_value(p: ModelParams) -> float:
        post, maps = forward_batch(energies, p, "eval")
        kws = masked_kws_loss(post, labels, mask)
        map_losses = [masked_map_loss(m, t, mask) for m, t in zip(maps, targets)]
        return float(combine_multi(kws, *map_losses, weights).data)

    with GradTape() as tape:
        post, maps = forward_batch(energies, params, "train")
        kws = masked_kws_loss(post, labels, mask)
        map_losses = [masked_map_loss(m, t, mask) for m, t in zip(maps, targets)]
        loss = combine_multi(kws, *map_losses, weights)
    grads = backward(loss, tape)

    named = params.named_parameters()
    assert set(grads) == set(named)
    worst = (0.0, "")
    for name, tensor in named.items():
        original = tensor.data.copy()

        def f(v, tensor=tensor, original=original):
            tensor.data = v.reshape(original.shape) if original.shape else np.asarray(v)
            try:
                return loss_value(params)
            finally:
                tensor.data = original

        fd = fd_gradient(f, original.copy(), h=1e-5)
        bp = grads[name].data
        err = np.abs(bp - fd)
        bound = 1e-8 + 1e-4 * np.maximum(np.abs(bp), np.abs(fd))
        excess = float(np.max(err - bound))
        if excess > worst[0]:
            worst = (excess, name)
        assert np.all(err <= bound), \
            f"{name}: max abs err {err.max():.3e} exceeds 1e-4 relative"
    elapsed = time.monotonic() - started
    n_scalars = sum(t.data.size for t in named.values())
    report(1, "backprop matches central finite differences (1e-4 relative, "
              "all parameters)", elapsed < 10.0,
           f"{len(named)} tensors / {n_scalars} scalars, {elapsed:.1f}s < 10s")


# ----------------------------------------------------------------------
# 2. attention properties over 1,000 random inputs
# ----------------------------------------------------------------------

def test_criterion_2_attention_properties():
    rng = np.random.default_rng(2024)
    channels, bins = 6, 40
    for trial in range(1000):
        params = AttentionParams(bins, 16, rng)
        x = rng.uniform(-3, 3, (channels, bins))
        weights, fused = attend(x, params)

        assert abs(weights.data.sum() - 1.0) <= 1e-12
        assert np.all(fused.data >= x.min(axis=0) - 1e-12)
        assert np.all(fused.data <= x.max(axis=0) + 1e-12)

        # softmax shift invariance at the score level
        scores = np.array([
            params.v.data @ np.tanh(x[c] @ params.w.data + params.b.data)
            for c in range(channels)])
        shift = rng.uniform(-30, 30)
        e = np.exp((scores + shift) - (scores + shift).max())
        np.testing.assert_allclose(weights.data, e / e.sum(), atol=1e-12)

        # identical channels: uniform weights, fused passthrough
        u = rng.uniform(-3, 3, bins)
        w_eq, f_eq = attend(np.tile(u, (channels, 1)), params)
        np.testing.assert_allclose(w_eq.data, 1.0 / channels, atol=1e-12)
        np.testing.assert_allclose(f_eq.data, u, atol=1e-12)
    report(2, "attention weight/fusion properties over 1,000 random inputs",
           True, "sum-to-one, convexity, shift invariance, symmetry")


# ----------------------------------------------------------------------
# 3. loss composition with the published mixing weights
# ----------------------------------------------------------------------

def test_criterion_3_loss_composition():
    rng = np.random.default_rng(3)
    w = LossWeights(0.5, 0.2, 0.2, 0.1)
    for _ in range(200):
        losses = rng.uniform(0.0, 1.0, 4)
        expected = float(np.array(w.as_tuple()) @ losses)
        assert abs(combine_multi(*losses, w) - expected) <= 1e-15

    rejected = False
    try:
        LossWeights(0.5, 0.2, 0.2, 0.2)
    except ValueError:
        rejected = True
    report(3, "combine_multi exact for weights (0.5, 0.2, 0.2, 0.1); "
              "non-normalized weights rejected", rejected)


# ----------------------------------------------------------------------
# 4. SNR-exact mixing and the three-target construction
# ----------------------------------------------------------------------

def test_criterion_4_snr_mixing():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(400, 4000))
        signal = rng.normal(0, rng.uniform(0.01, 1.0), n)
        noise = rng.normal(0, rng.uniform(0.01, 1.0), n + int(rng.integers(0, 300)))
        snr = float(rng.uniform(-30.0, 30.0))
        mixed = mix_at_snr(signal, noise, MixSpec(snr), rng)
        achieved = 10.0 * np.log10(signal_power(signal) / signal_power(mixed - signal))
        worst = max(worst, abs(achieved - snr))
    assert worst < 0.01

    target_worst = 0.0
    for seed in (101, 102, 103):
        record = synth_keyword(seed, GEOMETRY)
        music = synth_music(seed, record.waveforms.shape[1] + 4000)
        noisy = make_multitarget(record, music, GEOMETRY)
        for c in range(GEOMETRY.channels):
            added = noisy.waveforms[c] - record.waveforms[c]
            achieved = 10 * np.log10(signal_power(record.waveforms[c])
                                     / signal_power(added))
            target_worst = max(target_worst, abs(achieved - (-10.0)))
        clean = noisy.targets["clean"]
        for name, snr in (("noise1", 5.0), ("noise2", 10.0)):
            added = noisy.targets[name] - clean
            achieved = 10 * np.log10(signal_power(clean) / signal_power(added))
            target_worst = max(target_worst, abs(achieved - snr))
    report(4, "mixing SNR within 0.01 dB over 1,000 triples; multi-target "
              "pipeline at -10/+5/+10 dB", worst < 0.01 and target_worst < 0.01,
           f"worst mix error {worst:.2e} dB, worst target error {target_worst:.2e} dB")


# ----------------------------------------------------------------------
# 5. smoothing and detection against independent oracles
# ----------------------------------------------------------------------

def test_criterion_5_smoothing_and_decoding():
    rng = np.random.default_rng(5)
    p = rng.uniform(0, 1, 400)
    for n in range(1, 51):
        brute = np.array([np.mean(p[max(0, t - n + 1):t + 1])
                          for t in range(p.size)])
        np.testing.assert_array_equal(smooth(p, n), brute)

    def automaton(seq, threshold, hangover):
        events, t = [], 0
        while t < len(seq):
            if seq[t] >= threshold:
                events.append(t)
                t += max(int(hangover), 1)
            else:
                t += 1
        return events

    for _ in range(100):
        seq = rng.uniform(0, 1, int(rng.integers(1, 500)))
        threshold = float(rng.uniform(0.05, 0.95))
        hangover = int(rng.choice([1, 5, 12, 60, 150]))
        cfg = SmoothingConfig(threshold=threshold, hangover=hangover)
        assert detect(seq, cfg) == automaton(seq, threshold, hangover)
    report(5, "smooth() exact vs brute-force mean for n in [1,50]; detect() "
              "matches hand-simulated hangover automaton on 100 sequences", True)


# ----------------------------------------------------------------------
# 6. single-batch overfit sanity
# ----------------------------------------------------------------------

def _synthetic_batch(n_keywords: int, n_fillers: int, seed0: int) -> Batch:
    utts = []
    for i in range(n_keywords):
        rec = synth_keyword(seed0 + i, GEOMETRY)
        fb = frame_and_filterbank(rec.waveforms, FRAME_CFG)
        utts.append((fb.values, frame_labels(fb.frames, rec.keyword_end_sample,
                                             FRAME_CFG.shift_samples)))
    for i in range(n_fillers):
        rec = synth_filler(seed0 + 100 + i, GEOMETRY, 1.0)
        fb = frame_and_filterbank(rec.waveforms, FRAME_CFG)
        utts.append((fb.values, frame_labels(fb.frames, None,
                                             FRAME_CFG.shift_samples)))
    t_max = max(e.shape[0] for e, _ in utts)
    b = len(utts)
    energies = np.zeros((b, t_max, 6, 40))
    labels = np.zeros((b, t_max))
    mask = np.zeros((b, t_max))
    for row, (e, y) in enumerate(utts):
        t = e.shape[0]
        energies[row, :t] = e
        labels[row, :t] = y
        mask[row, :t] = 1.0
    return Batch(ids=[str(i) for i in range(b)], energies=energies,
                 labels=labels, mask=mask, targets={})


def test_criterion_6_single_batch_overfit():
    started = time.monotonic()
    batch = _synthetic_batch(4, 4, 9000)
    params = ModelParams(ModelConfig(dropout_keep=1.0), np.random.default_rng(0))
    named = params.named_parameters()
    m = {k: np.zeros_like(t.data) for k, t in named.items()}
    v = {k: np.zeros_like(t.data) for k, t in named.items()}

    final_kws = math.inf
    for step in range(1, 201):
        with GradTape() as tape:
            total, components = batch_loss(batch, params, "attention",
                                           LossWeights(1.0), None, training=True)
        grads = backward(total, tape)
        adam_step(named, {k: g.data for k, g in grads.items()}, m, v, step,
                  lr=0.003)
        params.pcen.clamp_()
        final_kws = components["kws"]
    elapsed = time.monotonic() - started
    report(6, "8-utterance single batch overfits to kws_loss < 0.01 within "
              "200 steps", final_kws < 0.01 and elapsed < 120.0,
           f"kws_loss {final_kws:.2e}, {elapsed:.0f}s < 120s")


# ----------------------------------------------------------------------
# 7/8/10. desk-scale end-to-end pipeline (shared fixtures)
# ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    """2000+2000 corpus, attention training, clean-eval sweep; timed."""
    root = tmp_path_factory.mktemp("e2e")
    times = {}

    t0 = time.monotonic()
    paths = build_corpus(E2E_CORPUS, root / "corpus")
    times["corpus"] = time.monotonic() - t0

    t0 = time.monotonic()
    config = TrainConfig(mode="attention", epochs=ATTENTION_EPOCHS,
                         batch_size=64, learning_rate=0.001, seed=TRAIN_SEED)
    att_ckpt = root / "attention.ckpt"
    train(config, paths["train"], paths["valid"], checkpoint_path=att_ckpt,
          metrics_path=root / "attention_metrics.csv")
    times["train"] = time.monotonic() - t0

    t0 = time.monotonic()
    clean_curve = roc_sweep(att_ckpt, paths["eval"], paths["eval"],
                            SWEEP_THRESHOLDS, SmoothingConfig(), threads=2,
                            csv_path=root / "roc_attention_eval.csv")
    times["eval"] = time.monotonic() - t0
    return {"root": root, "paths": paths, "attention_ckpt": att_ckpt,
            "clean_curve": clean_curve, "times": times, "curves": [clean_curve]}


@pytest.fixture(scope="module")
def finetuned(e2e):
    """Transfer and transfer+multi-target fine-tunes on the noisy split."""
    root, paths = e2e["root"], e2e["paths"]
    checkpoints = {}
    for mode, name in (("transfer", "transfer"),
                       ("transfer_multi_map", "tran_multi_map")):
        ckpt = root / f"{name}.ckpt"
        config = TrainConfig(mode=mode, epochs=FINETUNE_EPOCHS, batch_size=64,
                             seed=TRAIN_SEED,
                             init_checkpoint=str(e2e["attention_ckpt"]))
        train(config, paths["train_noisy"], paths["valid_noisy"],
              checkpoint_path=ckpt)
        checkpoints[name] = ckpt
    return checkpoints


def test_criterion_7_desk_scale_end_to_end(e2e):
    point = wakeup_at_fa(e2e["clean_curve"], 1.0)
    times = e2e["times"]
    total = sum(times.values())
    wake = point.wakeup_rate if point else 0.0
    report(7, "attention reaches >= 90% wake-up at <= 1 FA/hour on the clean "
              "held-out split within the epoch and time budget",
           point is not None and wake >= 0.90 and total < 1800.0,
           f"wake {wake:.3f} at thr {point.threshold if point else 'n/a'}, "
           f"corpus {times['corpus']:.0f}s + train {times['train']:.0f}s "
           f"({ATTENTION_EPOCHS} epochs) + eval {times['eval']:.0f}s "
           f"= {total:.0f}s < 1800s")


def test_criterion_8_directional_noisy_ordering(e2e, finetuned):
    paths = e2e["paths"]
    wakes = {}
    for name, ckpt in (("attention", e2e["attention_ckpt"]),
                       ("transfer", finetuned["transfer"]),
                       ("tran_multi_map", finetuned["tran_multi_map"])):
        curve = roc_sweep(ckpt, paths["eval_hard"], paths["eval_hard"],
                          SWEEP_THRESHOLDS, SmoothingConfig(), threads=2,
                          csv_path=e2e["root"] / f"roc_{name}_eval_hard.csv")
        e2e["curves"].append(curve)
        point = wakeup_at_fa(curve, MATCHED_FA_PER_HOUR)
        wakes[name] = point.wakeup_rate if point else 0.0

    ordering = (wakes["tran_multi_map"] >= wakes["attention"]
                and wakes["transfer"] <= wakes["tran_multi_map"])
    report(8, "hard-noisy (-20 dB) ordering: transfer+multi-target >= "
              "attention, transfer-only does not beat transfer+multi-target",
           ordering,
           f"wake@<= {MATCHED_FA_PER_HOUR}/h: attention {wakes['attention']:.3f}, "
           f"transfer {wakes['transfer']:.3f}, "
           f"tran_multi_map {wakes['tran_multi_map']:.3f}")


def test_criterion_10_roc_monotonicity(e2e, finetuned):
    checked = 0
    for curve in e2e["curves"]:
        points = curve.points
        for prev, cur in zip(points, points[1:]):
            assert cur.threshold > prev.threshold
            assert cur.fa_per_hour <= prev.fa_per_hour + 1e-12
            assert cur.wakeup_rate <= prev.wakeup_rate + 1e-12
        checked += 1
    report(10, "fa_per_hour and wakeup_rate non-increasing along every "
               "threshold sweep", checked >= 4, f"{checked} sweeps checked")


# ----------------------------------------------------------------------
# 9. determinism and persistence
# ----------------------------------------------------------------------

def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_criterion_9_determinism_and_persistence(tmp_path):
    spec = CorpusSpec(keywords=8, fillers=8, seed=123, noisy_frac=0.5,
                      filler_duration_s=(1.0, 1.5))
    paths_a = build_corpus(spec, tmp_path / "corpus_a")
    build_corpus(spec, tmp_path / "corpus_b")
    corpora_equal = _tree_digest(tmp_path / "corpus_a") == \
        _tree_digest(tmp_path / "corpus_b")

    model_config = ModelConfig(channels=6, n_mels=40, att_proj=8, hidden=8,
                               n_map_heads=0, dropout_keep=0.9)
    config = TrainConfig(mode="attention", epochs=2, batch_size=4, seed=9)
    train(config, paths_a["train"], paths_a["valid"], model_config=model_config,
          checkpoint_path=tmp_path / "a.ckpt", metrics_path=tmp_path / "a.csv")
    train(config, paths_a["train"], paths_a["valid"], model_config=model_config,
          checkpoint_path=tmp_path / "b.ckpt", metrics_path=tmp_path / "b.csv")
    trajectories_equal = (tmp_path / "a.csv").read_bytes() == \
        (tmp_path / "b.csv").read_bytes()
    checkpoints_equal = (tmp_path / "a.ckpt").read_bytes() == \
        (tmp_path / "b.ckpt").read_bytes()

    roc_sweep(tmp_path / "a.ckpt", paths_a["eval"], paths_a["eval"],
              [0.1, 0.5, 0.9], csv_path=tmp_path / "roc_a.csv")
    roc_sweep(tmp_path / "b.ckpt", paths_a["eval"], paths_a["eval"],
              [0.1, 0.5, 0.9], csv_path=tmp_path / "roc_b.csv")
    rocs_equal = (tmp_path / "roc_a.csv").read_bytes() == \
        (tmp_path / "roc_b.csv").read_bytes()

    loaded = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(loaded, tmp_path / "a2.ckpt")
    roundtrip_exact = (tmp_path / "a.ckpt").read_bytes() == \
        (tmp_path / "a2.ckpt").read_bytes()

    report(9, "same seed gives byte-identical corpora, loss trajectories and "
              "ROC CSVs; checkpoint round-trip is bit-exact",
           corpora_equal and trajectories_equal and checkpoints_equal
           and rocs_equal and roundtrip_exact,
           f"corpora={corpora_equal} trajectories={trajectories_equal} "
           f"checkpoints={checkpoints_equal} rocs={rocs_equal} "
           f"roundtrip={roundtrip_exact}")
