"""Acceptance suite: one verdict line per criterion, printed in the terminal summary.

Criterion 7 trains the full desk-scale pipeline once per session (about ten
minutes on one core). Set ``ADRF_ACCEPTANCE_RUN`` to an existing
``adrf all`` output directory to score that run instead.
"""
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from adrf import datagen as G, imu, stages, vision
from adrf import tensor as T
from adrf.config import load_config
from adrf.gradcheck import check_gradients
from adrf.stats import distributions as D
from adrf.stats.distributions import BirnbaumSaunders, JohnsonSU, Normal
from adrf.stats.fitting import FAMILY_ORDER, ThresholdSet, fit_family, select_best_fit
from adrf.stats.special import norm_ppf
from adrf.tensor import Tensor

from test_tensor import _LSTM, _cases, _lstm_loss

TINY = Path(__file__).parent / "data" / "tiny.ini"
P_GRID = np.round(np.arange(0.01, 1.0, 0.01), 2)
DESK_SEED = 0


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    cfg = load_config(scale="desk")
    reuse = os.environ.get("ADRF_ACCEPTANCE_RUN")
    if reuse:
        out = Path(reuse)
    else:
        out = tmp_path_factory.mktemp("desk")
        stages.run_all(cfg, DESK_SEED, out)
    timings = json.loads((out / "timings.json").read_text())
    return cfg, out, timings


# ---------------------------------------------------------------- 1


def test_criterion_01_birnbaum_saunders_threshold(record):
    q = float(BirnbaumSaunders(2.053, 0.022, 0.019).quantile(0.95))
    ok = abs(q - 0.276) <= 0.002
    record(1, ok, f"BS(2.053, 0.022, 0.019) q0.95 = {q:.6f}, target 0.276 +/- 0.002")
    assert ok


# ---------------------------------------------------------------- 2


def _window_counts(n):
    x = np.zeros((n, 6))
    return len(G.make_windows(x, "reconstruction")), len(G.make_windows(x, "forecast"))


def _frames(n, sid, labels=None):
    f = np.zeros((n, 4, 4))
    f[:, 0, 0] = np.arange(n) / n
    return G.FrameStream(f, np.arange(n) * G.FRAME_PERIOD, labels, sid)


def _split_counts():
    normals = [_frames(n, f"normal-{i}") for i, n in enumerate([70, 70, 70, 70, 70, 73])]
    s = G.build_frame_dataset(normals, seed=0)
    abn = [_frames(52, f"abnormal-{i}", np.ones(52, bool)) for i in range(4)]
    t = G.build_frame_dataset(normals, abn, seed=0)
    return (len(s.train), len(s.threshold), len(s.test)), (int((~t.test_labels).sum()), int(t.test_labels.sum()),
                                                          len(t.test))


def test_criterion_02_count_identities(record):
    train_windows = _window_counts(551)
    threshold_windows = _window_counts(302)
    split, test_set = _split_counts()
    checks = {
        "551->549/548": train_windows == (549, 548),
        "302->299/298": threshold_windows == (299, 298),
        "810->610/100/100": sum(split) == 810 and split == (610, 100, 100),
        "100+196->296": test_set == (100, 196, 296),
    }
    failed = [k for k, v in checks.items() if not v]
    detail = ", ".join(f"{k} {'ok' if v else 'no'}" for k, v in checks.items())
    if failed == ["302->299/298"]:
        detail += (f"; 302 samples give {threshold_windows[0]}/{threshold_windows[1]} under the N-2/N-3 rule that "
                   "yields 549/548 from 551. 299/298 would need N-3/N-4, so the two quoted pairs cannot both "
                   "come from one windowing rule")
    record(2, not failed, detail)
    # the reproducible identities must hold; the 302 case is tracked by the strict xfail below
    assert all(v for k, v in checks.items() if k != "302->299/298")


@pytest.mark.xfail(strict=True, reason="299/298 from 302 samples contradicts 549/548 from 551 under one rule")
def test_criterion_02_threshold_stream_counts():
    assert _window_counts(302) == (299, 298)


# ---------------------------------------------------------------- 3


def test_criterion_03_gradient_suite(record):
    t0 = time.perf_counter()
    worst = {}
    for name, (fn, params) in _cases(np.random.default_rng(42)).items():
        if name == "lstm_cell":
            _lstm_loss(params[0])
            params = params + [_LSTM["w"], _LSTM["u"], _LSTM["b"]]
        worst[name] = check_gradients(fn, params)
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, size=(2, 3, 6))
    y = rng.uniform(-1, 1, size=(2, 6))
    ae, fc = imu.AutoencoderModel(seed=1), imu.ForecasterModel(seed=1)
    sample = dict(max_entries=24, rng=np.random.default_rng(0))
    worst["lstm-autoencoder"] = check_gradients(lambda: T.mse(ae(Tensor(x)), x), ae.parameters(), **sample)
    worst["lstm-forecaster"] = check_gradients(lambda: T.mse(fc(Tensor(x)), y), fc.parameters(), **sample)
    name = max(worst, key=worst.get)
    ok = worst[name] < 1e-4
    record(3, ok, f"{len(worst)} checks, max relative error {worst[name]:.2e} ({name}), "
                  f"{time.perf_counter() - t0:.1f}s")
    assert ok


# ---------------------------------------------------------------- 4


def test_criterion_04_calibration_by_construction(desk_run, record):
    _, out, timings = desk_run
    rows = stages.read_calibration(out)
    parts, ok = [], len(rows) == 5
    for r in rows:
        sigma = math.sqrt(0.05 * 0.95 / r["n"])
        good = abs(r["flag_rate"] - 0.05) <= 3 * sigma
        ok &= good
        parts.append(f"{r['key']} {r['flag_rate']:.4f} (n {r['n']}, band +/-{3 * sigma:.4f})")
    ok &= timings["calibrate"] < 60
    record(4, ok, "; ".join(parts) + f"; calibrate {timings['calibrate']:.1f}s")
    assert ok


# ---------------------------------------------------------------- 5

GENERATORS = {
    "birnbaum_saunders": BirnbaumSaunders(2.053, 0.022, 0.019),
    "johnson_su": JohnsonSU(0.89, 0.44, 0.16, 0.0024),
    "normal": Normal(0.05, 0.01),
}


def test_criterion_05_family_recovery(record):
    t0 = time.perf_counter()
    hits = {}
    for fam, dist in GENERATORS.items():
        picks = [select_best_fit(dist.sample(5000, np.random.default_rng(seed))).family for seed in range(10)]
        hits[fam] = sum(p == fam for p in picks)
    ok = all(h >= 9 for h in hits.values())
    record(5, ok, ", ".join(f"{k} {v}/10" for k, v in hits.items()) + f", {time.perf_counter() - t0:.1f}s")
    assert ok


# ---------------------------------------------------------------- 6


def test_criterion_06_quantile_cdf_consistency(desk_run, record):
    _, out, _ = desk_run
    d = Normal(0.0, 1.0)
    inv = max(abs(D.invert_cdf(lambda v: float(d.cdf(v)), float(p), -40.0, 40.0) - norm_ppf(p)) for p in P_GRID)
    models = dict(ThresholdSet.from_text((out / "thresholds.txt").read_text()).models)
    rng = np.random.default_rng(11)
    x = BirnbaumSaunders(1.0, 0.01, 0.02).sample(1500, rng)
    for fam in FAMILY_ORDER:
        models[f"fit-{fam}"] = fit_family(x, fam)
    worst = {k: float(np.max(np.abs(m.cdf(m.quantile(P_GRID)) - P_GRID))) for k, m in models.items()}
    name = max(worst, key=worst.get)
    ok = inv < 1e-8 and worst[name] < 1e-6 and "fit-normal_inverse_gaussian" in worst
    record(6, ok, f"inverter on Normal {inv:.1e}; {len(worst)} fitted models, worst {worst[name]:.1e} ({name})")
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_07_detection_benchmark(desk_run, record):
    cfg, out, timings = desk_run
    reports = stages.run_eval(cfg, DESK_SEED, out)
    final = reports["final"]
    f1 = {}
    for source in ("imu-autoencoder", "imu-forecaster"):
        det = final.detectors[source]
        f1[source] = det.macro(final.abnormal_ids(source))["f1"]
        f1[source + " pooled"] = det.pooled.f1
    recall = final.detectors["vision"].pooled.recall
    cal = {r["key"]: r for r in stages.read_calibration(out)}
    fpr = cal["vision.theta_v"]["flag_rate"]
    runtime = sum(timings.values())
    ok = (all(f1[s] is not None and f1[s] >= 0.90 for s in ("imu-autoencoder", "imu-forecaster"))
          and recall is not None and recall >= 0.85 and fpr <= 0.10 and runtime < 900)
    record(7, ok, "IMU F1 (mean over abnormal scenarios) " +
           ", ".join(f"{k} {v:.4f}" for k, v in f1.items()) +
           f"; vision recall {recall:.4f}, calibration FPR {fpr:.4f}; pipeline {runtime:.0f}s")
    assert ok


# ---------------------------------------------------------------- 8


def test_criterion_08_overfit_oracles(record):
    rng = np.random.default_rng(8)
    w = rng.uniform(-1, 1, size=(1, 3, 6))
    ae = imu.train_autoencoder(w, epochs=500, lr=0.01, batch=1, seed=0)
    ae_mse = float(imu.reconstruct_error(ae, w[0]).e.mean())
    x = rng.uniform(-1, 1, size=6)
    fc = imu.train_forecaster(np.tile(x, (1, 3, 1)), x[None], epochs=500, lr=0.01, batch=1, seed=0)
    fc_mse = float(imu.forecast_error(fc, np.tile(x, (3, 1)), x).e.mean())

    scene = G.generate_frame_scenario("normal", 32, seed=3)
    codec = vision.pretrain_codec(scene.frames, epochs=40, batch=8, augment=False, seed=0)
    frames = scene.frames[:24]
    seqs = np.repeat(frames[:, None], 4, axis=1)
    fv = vision.train_forecaster(seqs, codec, epochs=30, batch=8, seed=1)
    recon = np.mean((codec.roundtrip(frames) - frames) ** 2, axis=(1, 2))
    ratio = float(np.max(vision.sequence_errors(fv, seqs) / recon))
    ok = ae_mse < 1e-4 and fc_mse < 1e-4 and ratio <= 2.0
    record(8, ok, f"IMU single-window mse autoencoder {ae_mse:.1e}, forecaster {fc_mse:.1e}; "
                  f"constant-sequence error / codec round-trip error max {ratio:.3f}")
    assert ok


# ---------------------------------------------------------------- 9


def _tree(root: Path) -> dict:
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timings.json"}


def test_criterion_09_frozen_codec_and_determinism(tmp_path, record):
    cfg = load_config(TINY)
    a, b = tmp_path / "a", tmp_path / "b"
    stages.run_all(cfg, 7, a)
    stages.run_all(cfg, 7, b)
    ta, tb = _tree(a), _tree(b)
    differ = sorted(str(k) for k in ta.keys() | tb.keys() if ta.get(k) != tb.get(k))
    ckpts = sum(1 for k in ta if k.suffix == ".ckpt")

    from adrf.checkpoint import load_checkpoint
    codec = load_checkpoint(a / "models" / stages.MODEL_FILES["codec"]).model.state_dict()
    plain = load_checkpoint(a / "models" / stages.MODEL_FILES["vision-plain"]).model.state_dict()
    frozen = all(np.array_equal(codec[k], plain["codec." + k]) for k in codec)

    ok = not differ and ckpts == 6 and frozen
    record(9, ok, f"two seeded runs: {len(ta)} artifacts ({ckpts} checkpoints), "
                  f"{len(differ)} differ{' ' + str(differ[:3]) if differ else ''}; "
                  f"codec bit-identical inside trained forecaster: {frozen}")
    assert ok


# ---------------------------------------------------------------- 10


def test_criterion_10_cgan_stability(desk_run, record):
    cfg, out, _ = desk_run
    hist = np.genfromtxt(out / "models" / "vision-cgan.loss.csv", delimiter=",", names=True)
    cols = [c for c in hist.dtype.names if c != "epoch"]
    finite = all(np.all(np.isfinite(hist[c])) for c in cols)
    growth = max(float(np.max(hist[c]) / hist[c][0]) for c in cols)
    drift = stages.held_out_prediction_error(cfg, DESK_SEED, out)
    notes = json.loads((out / "report" / "annotations.json").read_text())
    change = notes.get("adversarial fine-tuning recall change")
    ok = (len(hist) == cfg["vision.cgan_epochs"] == 20 and finite and growth <= 10.0
          and drift["change"] <= 0.20 and change is not None)
    record(10, ok, f"{len(hist)} epochs, losses finite {finite}, max loss / first-epoch loss {growth:.2f}; "
                   f"held-out normal error {drift['before']:.6f} -> {drift['after']:.6f} "
                   f"({drift['change']:+.2%}, gate +20%); recall change annotation: {change}")
    assert ok
