"""Streaming inference, flag events and evaluation reports."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from adrf import imu, vision
from adrf.datagen import FrameStream, ImuStream, ScalerParams, make_windows
from adrf.stats.fitting import ThresholdSet

IMU_SOURCES = ("imu-autoencoder", "imu-forecaster")
VISION_SOURCE = "vision"
SOURCES = IMU_SOURCES + (VISION_SOURCE,)

_PREFIX = {"imu-autoencoder": "autoencoder", "imu-forecaster": "forecaster", "vision": "vision"}
_CHANNELS = {"imu-autoencoder": ("e_a", "e_l"), "imu-forecaster": ("e_a", "e_l"), "vision": ("e_v",)}


class MissingCalibrationError(KeyError):
    def __str__(self):
        return str(self.args[0])


class LabelMismatchError(ValueError):
    pass


def threshold_key(source: str, channel: str) -> str:
    return f"{_PREFIX[source]}.theta_{channel[2:]}"


@dataclass
class FlagEvent:
    """One detector decision. ``flagged[c]`` is ``errors[c] > thresholds[c]``;
    warm-up and gap steps carry no errors and ``evaluable=False``."""

    scenario: str
    index: int
    t: float
    source: str
    errors: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    flagged: dict = field(default_factory=dict)
    evaluable: bool = True

    @property
    def abnormal(self) -> bool:
        return any(self.flagged.values())

    def consistent(self) -> bool:
        return all(self.flagged[c] == (self.errors[c] > self.thresholds[c]) for c in self.flagged)

    def to_json(self) -> str:
        return json.dumps({
            "scenario": self.scenario, "index": self.index, "t": self.t, "source": self.source,
            "evaluable": self.evaluable, "errors": self.errors, "thresholds": self.thresholds,
            "flagged": self.flagged,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "FlagEvent":
        d = json.loads(line)
        return cls(d["scenario"], int(d["index"]), float(d["t"]), d["source"], d["errors"],
                   d["thresholds"], d["flagged"], bool(d["evaluable"]))


def _decide(scenario, index, t, source, errors: dict, thresholds: dict) -> FlagEvent:
    flagged = {c: bool(errors[c] > thresholds[c]) for c in errors}
    return FlagEvent(scenario, int(index), float(t), source,
                     {c: float(v) for c, v in errors.items()},
                     {c: float(v) for c, v in thresholds.items()}, flagged)


def _thresholds_for(source: str, thresholds: ThresholdSet) -> dict:
    out = {}
    for c in _CHANNELS[source]:
        key = threshold_key(source, c)
        if key not in thresholds.thresholds:
            raise MissingCalibrationError(f"no calibrated threshold {key!r}; run calibrate first")
        out[c] = thresholds.thresholds[key]
    return out


def imu_events(model, source: str, thresholds: ThresholdSet, stream: ImuStream,
               scaler: ScalerParams) -> list[FlagEvent]:
    """One event per timestamp of ``stream`` for one IMU detector."""
    if source not in IMU_SOURCES:
        raise ValueError(f"unknown IMU detector {source!r}")
    th = _thresholds_for(source, thresholds)
    events = [FlagEvent(stream.scenario, k, float(t), source, evaluable=False) for k, t in enumerate(stream.t)]
    mode = "reconstruction" if source == "imu-autoencoder" else "forecast"
    span = 3 if mode == "reconstruction" else 4
    if len(stream) < span:
        return events
    w = make_windows(scaler.apply(stream.x), mode, stream.t)
    if len(w) == 0:
        return events
    series = imu.reconstruction_errors(model, w) if mode == "reconstruction" else imu.forecast_errors(model, w)
    for i, k in enumerate(series.index):
        errs = {"e_a": series.e_a[i], "e_l": series.e_l[i]}
        events[k] = _decide(stream.scenario, k, series.t_flag[i], source, errs, th)
    return events


def vision_events(forecaster, thresholds: ThresholdSet, stream: FrameStream, chunk: int = 64) -> list[FlagEvent]:
    """One event per frame; frame k is judged by predicting it from k-3..k-1."""
    th = _thresholds_for(VISION_SOURCE, thresholds)
    n = len(stream)
    events = [FlagEvent(stream.scenario, k, float(stream.t[k]), VISION_SOURCE, evaluable=False) for k in range(n)]
    if n < 4:
        return events
    idx = np.arange(3, n)
    seqs = stream.frames[idx[:, None] + np.arange(-3, 1)[None, :]]
    errs = vision.sequence_errors(forecaster, seqs, chunk=chunk)
    for k, e in zip(idx, errs):
        events[k] = _decide(stream.scenario, k, stream.t[k], VISION_SOURCE, {"e_v": e}, th)
    return events


def run_inference(thresholds: ThresholdSet, *, autoencoder=None, forecaster=None, scaler=None,
                  imu_streams: Sequence[ImuStream] = (), vision_forecaster=None,
                  frame_streams: Sequence[FrameStream] = ()) -> list[FlagEvent]:
    """Events for every stream, IMU and vision paths evaluated independently."""
    out: list[FlagEvent] = []
    if imu_streams:
        if scaler is None:
            raise ValueError("IMU inference needs the training scaler")
        for source, model in (("imu-autoencoder", autoencoder), ("imu-forecaster", forecaster)):
            if model is None:
                continue
            for s in imu_streams:
                out += imu_events(model, source, thresholds, s, scaler)
    if frame_streams and vision_forecaster is not None:
        for s in frame_streams:
            out += vision_events(vision_forecaster, thresholds, s)
    return out


def write_events(path, events: Iterable[FlagEvent]) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(e.to_json() + "\n")


def read_events(path) -> list[FlagEvent]:
    with open(path) as fh:
        return [FlagEvent.from_json(line) for line in fh if line.strip()]


# ---------------------------------------------------------------- metrics


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def add(self, pred, truth) -> "Confusion":
        pred = np.asarray(pred, dtype=bool)
        truth = np.asarray(truth, dtype=bool)
        self.tp += int(np.sum(pred & truth))
        self.fp += int(np.sum(pred & ~truth))
        self.tn += int(np.sum(~pred & ~truth))
        self.fn += int(np.sum(~pred & truth))
        return self

    def __iadd__(self, other: "Confusion"):
        self.tp += other.tp
        self.fp += other.fp
        self.tn += other.tn
        self.fn += other.fn
        return self

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    # Undefined ratios are None rather than 0.
    @property
    def precision(self) -> float | None:
        d = self.tp + self.fp
        return self.tp / d if d else None

    @property
    def recall(self) -> float | None:
        d = self.tp + self.fn
        return self.tp / d if d else None

    @property
    def f1(self) -> float | None:
        p, r = self.precision, self.recall
        if p is None or r is None or p + r == 0:
            return None
        return 2 * p * r / (p + r)

    @property
    def accuracy(self) -> float | None:
        return (self.tp + self.tn) / self.total if self.total else None

    def metrics(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1, "accuracy": self.accuracy}


def _mean_defined(values) -> float | None:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


@dataclass
class DetectorReport:
    source: str
    scenarios: dict = field(default_factory=dict)  # scenario -> Confusion

    @property
    def pooled(self) -> Confusion:
        total = Confusion()
        for c in self.scenarios.values():
            total += c
        return total

    def macro(self, ids: Sequence[str]) -> dict:
        """Per-scenario metrics averaged over ``ids``; undefined ones are skipped."""
        cs = [self.scenarios[i] for i in ids if i in self.scenarios]
        return {m: _mean_defined(getattr(c, m) for c in cs) for m in ("precision", "recall", "f1", "accuracy")}


@dataclass
class EvalReport:
    detectors: dict = field(default_factory=dict)  # source -> DetectorReport
    annotations: dict = field(default_factory=dict)

    def abnormal_ids(self, source: str) -> list[str]:
        return sorted(s for s in self.detectors[source].scenarios if s.startswith("abnormal"))


def evaluate(events: Iterable[FlagEvent], labels: Mapping[str, Mapping[str, np.ndarray]]) -> EvalReport:
    """Score evaluable events against ``labels[modality][scenario]``.

    ``modality`` is ``"imu"`` or ``"vision"``; a step counts as predicted
    abnormal when any of its error channels is flagged.
    """
    grouped: dict = {}
    for e in events:
        if e.evaluable:
            grouped.setdefault((e.source, e.scenario), []).append(e)
    report = EvalReport()
    for (source, sid), evs in sorted(grouped.items()):
        modality = "vision" if source == VISION_SOURCE else "imu"
        lab = labels.get(modality, {}).get(sid)
        if lab is None:
            raise LabelMismatchError(f"no {modality} labels for scenario {sid!r}")
        lab = np.asarray(lab, dtype=bool)
        idx = np.array([e.index for e in evs])
        if idx.max() >= lab.size or idx.min() < 0:
            raise LabelMismatchError(
                f"{source}/{sid}: event at step {int(idx.max())} but labels cover {lab.size} steps")
        pred = np.array([e.abnormal for e in evs])
        det = report.detectors.setdefault(source, DetectorReport(source))
        det.scenarios[sid] = Confusion().add(pred, lab[idx])
    return report


# ---------------------------------------------------------------- rendering

_METRICS = ("precision", "recall", "f1", "accuracy")


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


def report_rows(report: EvalReport) -> list[dict]:
    rows = []
    for source in sorted(report.detectors):
        det = report.detectors[source]
        for sid in sorted(det.scenarios):
            c = det.scenarios[sid]
            rows.append({"detector": source, "scenario": sid, "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn,
                         **c.metrics()})
        c = det.pooled
        rows.append({"detector": source, "scenario": "pooled", "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn,
                     **c.metrics()})
        ab = report.abnormal_ids(source)
        if ab:
            rows.append({"detector": source, "scenario": "macro-abnormal", "tp": None, "fp": None, "tn": None,
                         "fn": None, **det.macro(ab)})
    return rows


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    cols = ["detector", "scenario", "tp", "fp", "tn", "fn", *_METRICS]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for row in report_rows(report):
        w.writerow({k: ("" if row[k] is None else (repr(row[k]) if isinstance(row[k], float) else row[k]))
                    for k in cols})
    return buf.getvalue()


def report_table(report: EvalReport) -> str:
    head = f"{'detector':<16} {'scenario':<18} {'TP':>5} {'FP':>5} {'TN':>5} {'FN':>5}" + "".join(
        f" {m:>9}" for m in _METRICS)
    lines = [head, "-" * len(head)]
    for row in report_rows(report):
        counts = "".join(f" {'' if row[k] is None else row[k]:>5}" for k in ("tp", "fp", "tn", "fn"))
        lines.append(f"{row['detector']:<16} {row['scenario']:<18}{counts}" +
                     "".join(f" {_fmt(row[m]):>9}" for m in _METRICS))
    for key in sorted(report.annotations):
        lines.append(f"# {key}: {report.annotations[key]}")
    return "\n".join(lines) + "\n"


def histogram_csv(errors, model=None, bins: int = 40) -> str:
    """Error histogram (density) with the fitted pdf at the bin centres."""
    x = np.asarray(errors, dtype=np.float64)
    counts, edges = np.histogram(x, bins=bins)
    width = np.diff(edges)
    dens = counts / (x.size * width)
    centres = 0.5 * (edges[:-1] + edges[1:])
    pdf = model.dist.pdf(centres) if model is not None else np.full(centres.size, math.nan)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("bin_lo", "bin_hi", "count", "density", "fitted_pdf"))
    for row in zip(edges[:-1], edges[1:], counts, dens, pdf):
        w.writerow([repr(float(row[0])), repr(float(row[1])), int(row[2]), repr(float(row[3])), repr(float(row[4]))])
    return buf.getvalue()


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path
