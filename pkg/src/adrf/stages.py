"""Pipeline stages over an output directory.

Layout under ``out``::

    corpus/                 generated scenarios and manifest
    models/*.ckpt           checkpoints; models/*.loss.csv training curves
    thresholds.txt          the five calibrated thresholds
    calibration/            per-threshold fits and the calibration errors
    events/*.jsonl          flag events
    report/                 table, CSV, histograms, annotations
    timings.json            wall-clock seconds per stage (not deterministic)

Every stage derives its randomness from ``(seed, stage)`` so stages can be
re-run independently and reproduce the same bytes.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from adrf import checkpoint as ckpt
from adrf import datagen as dg
from adrf import imu, pipeline, vision
from adrf.config import Config
from adrf.stats.fitting import ThresholdSet, calibrate_thresholds

log = logging.getLogger(__name__)

STAGES = ("datagen", "train-imu", "train-vision", "calibrate", "infer", "eval", "report")
_STAGE_IDS = {name: i for i, name in enumerate(STAGES)}

MODEL_FILES = {
    "autoencoder": "imu-autoencoder.ckpt",
    "forecaster": "imu-forecaster.ckpt",
    "codec": "vision-codec.ckpt",
    "vision-plain": "vision-forecaster-prediction-only.ckpt",
    "vision": "vision-forecaster.ckpt",
    "discriminator": "vision-discriminator.ckpt",
}
PLAIN_THRESHOLDS = "thresholds-prediction-only.txt"


class StageError(RuntimeError):
    """A stage's inputs are missing; names the stage that produces them."""


def stage_seed(seed: int, stage: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), _STAGE_IDS[stage]])


def _record_time(out: Path, stage: str, seconds: float) -> None:
    path = out / "timings.json"
    data = json.loads(path.read_text()) if path.exists() else {}
    data[stage] = round(seconds, 3)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise StageError(f"{path} not found; run `{producer}` first")
    return path


def _csv_column(values, name: str) -> str:
    return name + "\n" + "".join(f"{float(v)!r}\n" for v in values)


def _history_csv(columns: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(columns)
    w.writerow(["epoch", *names])
    n = max(len(v) for v in columns.values())
    for i in range(n):
        w.writerow([i] + [repr(float(columns[c][i])) if i < len(columns[c]) else "" for c in names])
    return buf.getvalue()


# ---------------------------------------------------------------- corpus access


@dataclass
class Corpus:
    root: Path
    roles: dict

    @classmethod
    def open(cls, out: Path) -> "Corpus":
        root = out / "corpus"
        roles = dg.read_manifest(_require(root / "manifest.txt", "datagen"))
        return cls(root, roles)

    def ids(self, role: str) -> list[str]:
        try:
            return self.roles[role]
        except KeyError:
            raise StageError(f"manifest has no {role!r} role") from None

    def imu(self, role: str) -> list[dg.ImuStream]:
        return [dg.load_imu_scenario(self.root, s) for s in self.ids(role)]

    def frames(self, role: str, size: int) -> list[dg.FrameStream]:
        return [dg.load_frame_scenario(self.root, s, size) for s in self.ids(role)]


def codec_for_size(size: int) -> vision.CodecConfig:
    for cfg in (vision.DESK_CODEC, vision.PAPER_CODEC):
        if cfg.size == size:
            return cfg
    raise StageError(f"no codec architecture for {size}x{size} frames (use 32 or 128)")


def vision_split(corpus: Corpus, cfg: Config, seed: int) -> dg.DatasetSplit:
    size = cfg["corpus.frame_size"]
    return dg.build_frame_dataset(
        corpus.frames("vision-normal", size), corpus.frames("vision-abnormal", size),
        seed=stage_seed(seed, "train-vision").spawn(1)[0].generate_state(1)[0],
        n_threshold=cfg["vision.n_threshold"], n_test=cfg["vision.n_test"], mirror=cfg["vision.mirror"],
    )


def imu_labels(corpus: Corpus, streams) -> dict:
    """Envelope ground truth against the training and threshold normals."""
    refs = [s.x for s in corpus.imu("imu-train") + corpus.imu("imu-threshold")]
    return {s.scenario: dg.label_ground_truth(s.x, refs) for s in streams}


# ---------------------------------------------------------------- stages


def run_datagen(cfg: Config, seed: int, out: Path) -> Path:
    t0 = time.perf_counter()
    corpus_cfg = dg.CorpusConfig(**cfg.section("corpus"))
    scenarios = dg.generate_corpus(corpus_cfg, seed=seed)
    root = dg.write_corpus(out / "corpus", scenarios)
    (out / "config.ini").write_text(cfg.to_ini())
    _record_time(out, "datagen", time.perf_counter() - t0)
    return root


def _imu_windows(streams, scaler, mode):
    ws = [dg.make_windows(scaler.apply(s.x), mode, s.t) for s in streams]
    x = np.concatenate([w.inputs for w in ws])
    y = np.concatenate([w.targets for w in ws]) if mode == "forecast" else None
    return x, y


def run_train_imu(cfg: Config, seed: int, out: Path) -> dict:
    t0 = time.perf_counter()
    corpus = Corpus.open(out)
    train = corpus.imu("imu-train")
    scaler = dg.fit_scaler(np.concatenate([s.x for s in train]))
    ss_ae, ss_fc = stage_seed(seed, "train-imu").spawn(2)
    opts = dict(epochs=cfg["imu.epochs"], lr=cfg["imu.lr"], batch=cfg["imu.batch"])
    xr, _ = _imu_windows(train, scaler, "reconstruction")
    ae = imu.train_autoencoder(xr, seed=ss_ae, hidden=cfg["imu.autoencoder_hidden"], **opts)
    xf, yf = _imu_windows(train, scaler, "forecast")
    fc = imu.train_forecaster(xf, yf, seed=ss_fc, hidden=cfg["imu.forecaster_hidden"], **opts)
    models = out / "models"
    models.mkdir(parents=True, exist_ok=True)
    ckpt.save_checkpoint(ae, models / MODEL_FILES["autoencoder"], scaler, {"windows": int(xr.shape[0])})
    ckpt.save_checkpoint(fc, models / MODEL_FILES["forecaster"], scaler, {"windows": int(xf.shape[0])})
    (models / "imu-autoencoder.loss.csv").write_text(_history_csv({"loss": ae.history}))
    (models / "imu-forecaster.loss.csv").write_text(_history_csv({"loss": fc.history}))
    _record_time(out, "train-imu", time.perf_counter() - t0)
    return {"autoencoder": ae, "forecaster": fc, "scaler": scaler}


def _unique_frames(seqs: np.ndarray, ids) -> np.ndarray:
    frames = {}
    for seq, (sid, k) in zip(seqs, ids):
        for j in range(4):
            frames.setdefault((sid, k - 3 + j), seq[j])
    return np.stack([frames[key] for key in sorted(frames)])


def run_train_vision(cfg: Config, seed: int, out: Path) -> dict:
    t0 = time.perf_counter()
    corpus = Corpus.open(out)
    split = vision_split(corpus, cfg, seed)
    codec_cfg = codec_for_size(cfg["corpus.frame_size"])
    ss_codec, ss_fc, ss_disc, ss_gan = stage_seed(seed, "train-vision").spawn(5)[1:]
    codec = vision.pretrain_codec(
        _unique_frames(split.train, split.train_ids), codec_cfg, epochs=cfg["vision.codec_epochs"],
        lr=cfg["vision.codec_lr"], batch=cfg["vision.codec_batch"], augment=cfg["vision.augment"], seed=ss_codec)
    plain = vision.train_forecaster(split.train, codec, epochs=cfg["vision.forecaster_epochs"],
                                    lr=cfg["vision.forecaster_lr"], batch=cfg["vision.forecaster_batch"], seed=ss_fc)
    disc = vision.Discriminator(codec_cfg, hidden=cfg["vision.discriminator_hidden"], seed=ss_disc)
    gen, hist = vision.cgan_finetune(
        plain, disc, split.train, lam=cfg["vision.lambda"], epochs=cfg["vision.cgan_epochs"],
        lr=cfg["vision.cgan_lr"], d_lr=cfg["vision.discriminator_lr"], batch=cfg["vision.cgan_batch"], seed=ss_gan)
    models = out / "models"
    models.mkdir(parents=True, exist_ok=True)
    ckpt.save_checkpoint(codec, models / MODEL_FILES["codec"])
    ckpt.save_checkpoint(plain, models / MODEL_FILES["vision-plain"])
    ckpt.save_checkpoint(gen, models / MODEL_FILES["vision"])
    ckpt.save_checkpoint(disc, models / MODEL_FILES["discriminator"])
    (models / "vision-codec.loss.csv").write_text(_history_csv({"loss": codec.history}))
    (models / "vision-forecaster.loss.csv").write_text(_history_csv({"loss": plain.history}))
    (models / "vision-cgan.loss.csv").write_text(_history_csv({
        "generator": hist.generator, "prediction": hist.prediction,
        "adversarial": hist.adversarial, "discriminator": hist.discriminator}))
    _record_time(out, "train-vision", time.perf_counter() - t0)
    return {"codec": codec, "plain": plain, "vision": gen, "discriminator": disc, "history": hist, "split": split}


def load_models(out: Path) -> dict:
    models = out / "models"
    loaded = {}
    for key, name in MODEL_FILES.items():
        path = models / name
        if path.exists():
            loaded[key] = ckpt.load_checkpoint(path)
    return loaded


def _calibration_errors(cfg: Config, seed: int, out: Path) -> tuple[dict, dict]:
    """Errors on held-out normal data for the final and the prediction-only models."""
    corpus = Corpus.open(out)
    models = load_models(out)
    for key, producer in (("autoencoder", "train-imu"), ("forecaster", "train-imu"),
                          ("vision", "train-vision"), ("vision-plain", "train-vision")):
        if key not in models:
            raise StageError(f"missing {MODEL_FILES[key]}; run `{producer}` first")
    scaler = models["autoencoder"].scaler
    streams = {}
    for s in corpus.imu("imu-threshold"):
        r = imu.reconstruction_errors(models["autoencoder"].model, dg.make_windows(scaler.apply(s.x), "reconstruction", s.t))
        f = imu.forecast_errors(models["forecaster"].model, dg.make_windows(scaler.apply(s.x), "forecast", s.t))
        for k, v in (("autoencoder.theta_a", r.e_a), ("autoencoder.theta_l", r.e_l),
                     ("forecaster.theta_a", f.e_a), ("forecaster.theta_l", f.e_l)):
            streams.setdefault(k, []).append(v)
    streams = {k: np.concatenate(v) for k, v in streams.items()}
    split = vision_split(corpus, cfg, seed)
    streams["vision.theta_v"] = vision.sequence_errors(models["vision"].model, split.threshold)
    plain = {"vision.theta_v": vision.sequence_errors(models["vision-plain"].model, split.threshold)}
    return streams, plain


def calibration_rows(ts: ThresholdSet, streams: dict) -> list[dict]:
    rows = []
    for key in sorted(ts.thresholds):
        e = np.asarray(streams[key])
        m = ts.models[key]
        rows.append({"key": key, "family": m.family, "ks": m.ks, "n": int(e.size), "threshold": ts[key],
                     "flag_rate": float(np.mean(e > ts[key]))})
    return rows


def _calibration_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["key", "family", "ks", "n", "threshold", "flag_rate"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def read_calibration(out: Path) -> list[dict]:
    path = _require(out / "calibration" / "calibration.csv", "calibrate")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r.update(ks=float(r["ks"]), n=int(r["n"]), threshold=float(r["threshold"]), flag_rate=float(r["flag_rate"]))
    return rows


def run_calibrate(cfg: Config, seed: int, out: Path) -> ThresholdSet:
    t0 = time.perf_counter()
    streams, plain_streams = _calibration_errors(cfg, seed, out)
    opts = dict(p=cfg["calibration.confidence"], candidates=cfg["calibration.candidates"])
    ts = calibrate_thresholds(streams, **opts)
    plain = calibrate_thresholds(plain_streams, **opts)
    (out / "thresholds.txt").write_text(ts.to_text())
    (out / PLAIN_THRESHOLDS).write_text(plain.to_text())
    cal = out / "calibration"
    cal.mkdir(parents=True, exist_ok=True)
    (cal / "calibration.csv").write_text(_calibration_csv(calibration_rows(ts, streams)))
    (cal / "calibration-prediction-only.csv").write_text(_calibration_csv(calibration_rows(plain, plain_streams)))
    for key, e in streams.items():
        (cal / f"errors-{key}.csv").write_text(_csv_column(e, "error"))
    (cal / "errors-prediction-only-vision.theta_v.csv").write_text(_csv_column(plain_streams["vision.theta_v"], "error"))
    _record_time(out, "calibrate", time.perf_counter() - t0)
    return ts


def _held_out_normal_events(forecaster, ts: ThresholdSet, split: dg.DatasetSplit, abnormal_ids) -> list:
    """Events for the held-out normal test sequences (they are not whole streams)."""
    th = {"e_v": ts["vision.theta_v"]}
    abnormal_ids = set(abnormal_ids)
    keep = [i for i, (sid, _) in enumerate(split.test_ids) if sid not in abnormal_ids]
    errs = vision.sequence_errors(forecaster, split.test[keep])
    return [pipeline._decide(split.test_ids[i][0], split.test_ids[i][1], split.test_ids[i][1] * dg.FRAME_PERIOD,
                             pipeline.VISION_SOURCE, {"e_v": e}, th)
            for i, e in zip(keep, errs)]


def run_infer(cfg: Config, seed: int, out: Path) -> dict:
    t0 = time.perf_counter()
    corpus = Corpus.open(out)
    models = load_models(out)
    ts = ThresholdSet.from_text(_require(out / "thresholds.txt", "calibrate").read_text())
    plain_ts = ThresholdSet.from_text(_require(out / PLAIN_THRESHOLDS, "calibrate").read_text())
    size = cfg["corpus.frame_size"]
    imu_streams = corpus.imu("imu-test")
    frame_streams = corpus.frames("vision-abnormal", size)
    split = vision_split(corpus, cfg, seed)
    ev = out / "events"
    ev.mkdir(parents=True, exist_ok=True)
    result = {}
    for key, source in (("autoencoder", "imu-autoencoder"), ("forecaster", "imu-forecaster")):
        m = models[key]
        events = [e for s in imu_streams for e in pipeline.imu_events(m.model, source, ts, s, m.scaler)]
        pipeline.write_events(ev / f"{source}.jsonl", events)
        result[source] = events
    for key, name, thresholds in (("vision", "vision", ts), ("vision-plain", "vision-prediction-only", plain_ts)):
        fc = models[key].model
        events = _held_out_normal_events(fc, thresholds, split, corpus.ids("vision-abnormal"))
        events += [e for s in frame_streams for e in pipeline.vision_events(fc, thresholds, s)]
        pipeline.write_events(ev / f"{name}.jsonl", events)
        result[name] = events
    _record_time(out, "infer", time.perf_counter() - t0)
    return result


def _labels(cfg: Config, out: Path) -> dict:
    corpus = Corpus.open(out)
    size = cfg["corpus.frame_size"]
    vis = {}
    for s in corpus.frames("vision-normal", size):
        vis[s.scenario] = np.zeros(len(s), dtype=bool)
        vis[s.scenario + "-mirror"] = np.zeros(len(s), dtype=bool)
    for s in corpus.frames("vision-abnormal", size):
        vis[s.scenario] = np.asarray(s.labels, dtype=bool)
    return {"imu": imu_labels(corpus, corpus.imu("imu-test")), "vision": vis}


def run_eval(cfg: Config, seed: int, out: Path) -> dict:
    """Reports for the final detectors and for the prediction-only vision model."""
    t0 = time.perf_counter()
    ev = out / "events"
    labels = _labels(cfg, out)
    events = []
    for name in ("imu-autoencoder", "imu-forecaster", "vision"):
        events += pipeline.read_events(_require(ev / f"{name}.jsonl", "infer"))
    final = pipeline.evaluate(events, labels)
    plain = pipeline.evaluate(pipeline.read_events(_require(ev / "vision-prediction-only.jsonl", "infer")), labels)
    d = out / "eval"
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.csv").write_text(pipeline.report_csv(final))
    (d / "report-vision-prediction-only.csv").write_text(pipeline.report_csv(plain))
    _record_time(out, "eval", time.perf_counter() - t0)
    return {"final": final, "prediction-only": plain}


def _cgan_annotations(reports: dict) -> dict:
    final = reports["final"].detectors[pipeline.VISION_SOURCE].pooled
    plain = reports["prediction-only"].detectors[pipeline.VISION_SOURCE].pooled
    notes = {
        "vision recall, prediction loss only": pipeline._fmt(plain.recall),
        "vision recall, prediction + adversarial loss": pipeline._fmt(final.recall),
    }
    if plain.recall is not None and final.recall is not None:
        delta = final.recall - plain.recall
        direction = "increase" if delta > 0 else ("decrease" if delta < 0 else "no change")
        notes["adversarial fine-tuning recall change"] = f"{delta:+.4f} ({direction}; reference direction: increase)"
    return notes


def held_out_prediction_error(cfg: Config, seed: int, out: Path) -> dict:
    """Mean error on held-out normal test sequences before and after fine-tuning."""
    corpus = Corpus.open(out)
    split = vision_split(corpus, cfg, seed)
    normal = split.test[~split.test_labels]
    models = load_models(out)
    before = float(np.mean(vision.sequence_errors(models["vision-plain"].model, normal)))
    after = float(np.mean(vision.sequence_errors(models["vision"].model, normal)))
    return {"before": before, "after": after, "change": after / before - 1.0}


def run_report(cfg: Config, seed: int, out: Path) -> Path:
    t0 = time.perf_counter()
    reports = run_eval(cfg, seed, out)
    d = out / "report"
    d.mkdir(parents=True, exist_ok=True)
    final = reports["final"]
    final.annotations.update(_cgan_annotations(reports))
    drift = held_out_prediction_error(cfg, seed, out)
    final.annotations["held-out normal prediction error before/after fine-tuning"] = (
        f"{drift['before']:.6f} / {drift['after']:.6f} ({drift['change']:+.2%})")
    ts = ThresholdSet.from_text((out / "thresholds.txt").read_text())
    cal_rows = read_calibration(out)
    lines = ["Detection report", "================", "", pipeline.report_table(final), "Calibration",
             "-----------"]
    for r in cal_rows:
        lines.append(f"{r['key']:<22} {r['family']:<24} threshold {r['threshold']:.6g}  KS {r['ks']:.4f}  "
                     f"n {r['n']}  calibration flag rate {r['flag_rate']:.4f}")
    lines += ["", "Vision, prediction loss only", "----------------------------",
              pipeline.report_table(reports["prediction-only"])]
    (d / "report.txt").write_text("\n".join(lines))
    (d / "report.csv").write_text(pipeline.report_csv(final))
    (d / "report-vision-prediction-only.csv").write_text(pipeline.report_csv(reports["prediction-only"]))
    (d / "annotations.json").write_text(json.dumps(final.annotations, indent=1, sort_keys=True) + "\n")
    hist = d / "histograms"
    hist.mkdir(exist_ok=True)
    for key in ts.thresholds:
        errs = np.loadtxt(out / "calibration" / f"errors-{key}.csv", skiprows=1, ndmin=1)
        (hist / f"{key}.csv").write_text(pipeline.histogram_csv(errs, ts.models.get(key)))
    _record_time(out, "report", time.perf_counter() - t0)
    return d


RUNNERS = {
    "datagen": run_datagen,
    "train-imu": run_train_imu,
    "train-vision": run_train_vision,
    "calibrate": run_calibrate,
    "infer": run_infer,
    "eval": run_eval,
    "report": run_report,
}


def run_all(cfg: Config, seed: int, out: Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name in STAGES:
        if name == "eval":
            continue  # report runs eval itself
        log.info("stage %s", name)
        RUNNERS[name](cfg, seed, out)
    return out / "report"
