"""Synthetic scenarios, ingestion formats, preprocessing and dataset splits.

The generators stand in for recorded drone data: normal IMU streams are sums
of slow sinusoids with sensor noise, normal camera streams are a panning
periodic texture with an object moving at constant velocity. Abnormal
scenarios inject events on top of the same base signals and label every
affected element.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

IMU_COLUMNS = ("a_x", "a_y", "a_z", "l_x", "l_y", "l_z")
#: Typical peak deviation of each channel (rad/s for a_*, m/s^2 for l_*).
IMU_AMPLITUDE = np.array([0.6, 0.6, 0.9, 2.0, 2.0, 1.5])
IMU_OFFSET = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 9.81])
NOISE_FRACTION = 0.05
IMU_PERIOD = 0.1
#: Event lengths in samples: spikes are instantaneous, steps and bursts are
#: sustained faults lasting seconds.
EVENT_DURATION = {"spike": (1, 3), "step": (30, 80), "burst": (20, 60)}
FRAME_PERIOD = 0.5


class SpecError(ValueError):
    """Invalid generator or anomaly settings."""


# ---------------------------------------------------------------- data types


@dataclass(frozen=True)
class ImuSample:
    t: float
    a_x: float
    a_y: float
    a_z: float
    l_x: float
    l_y: float
    l_z: float

    def vector(self) -> np.ndarray:
        return np.array([self.a_x, self.a_y, self.a_z, self.l_x, self.l_y, self.l_z])


@dataclass
class ImuStream:
    t: np.ndarray
    x: np.ndarray
    labels: np.ndarray | None = None
    scenario: str = ""

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1, 6)
        if self.t.shape[0] != self.x.shape[0]:
            raise ValueError("timestamps and samples differ in length")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=bool)

    def __len__(self):
        return self.t.size

    def samples(self) -> list[ImuSample]:
        return [ImuSample(float(t), *map(float, row)) for t, row in zip(self.t, self.x)]


@dataclass
class FrameStream:
    """Grayscale frames in [-1, 1]; ``labels[k]`` marks the sequence ending at frame k.

    ``events`` marks the frames where an injected anomaly happens.
    """

    frames: np.ndarray
    t: np.ndarray
    labels: np.ndarray | None = None
    scenario: str = ""
    events: np.ndarray | None = None

    def __len__(self):
        return self.frames.shape[0]

    def mirrored(self, suffix: str = "-mirror") -> "FrameStream":
        return FrameStream(self.frames[:, :, ::-1].copy(), self.t.copy(),
                           None if self.labels is None else self.labels.copy(),
                           self.scenario + suffix,
                           None if self.events is None else self.events.copy())


@dataclass
class Scenario:
    id: str
    kind: str
    imu: ImuStream | None = None
    frames: FrameStream | None = None


@dataclass(frozen=True)
class AnomalySpec:
    """What to inject into an abnormal scenario.

    Magnitudes are multiples of the channel amplitude (IMU) or pixel
    displacements (frames).
    """

    kinds: tuple = ("spike", "step", "burst")
    magnitude: tuple = (3.0, 8.0)
    density: float = 0.6
    displacement: tuple = (8.0, 14.0)
    occluder: tuple = (9, 14)
    event_rate: float = 0.2


# ---------------------------------------------------------------- IMU generation


def _base_imu(length: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    t = np.arange(length) * IMU_PERIOD
    x = np.empty((length, 6))
    for ch in range(6):
        k = int(rng.integers(2, 5))
        w = rng.dirichlet(np.full(k, 2.0))
        freqs = rng.uniform(0.02, 0.25, size=k)
        phases = rng.uniform(0, 2 * np.pi, size=k)
        sig = (w[:, None] * np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])).sum(0)
        x[:, ch] = IMU_OFFSET[ch] + IMU_AMPLITUDE[ch] * sig
    x += rng.normal(0.0, NOISE_FRACTION, size=x.shape) * IMU_AMPLITUDE
    return t, x


def generate_imu_scenario(kind: str, length: int, anomaly: AnomalySpec | None = None,
                          seed=None, scenario: str = "") -> ImuStream:
    """One IMU stream. Abnormal streams get spike/step/burst events until
    about ``anomaly.density`` of the timeline is affected."""
    if length < 10:
        raise SpecError("IMU scenarios need at least 10 samples")
    if kind not in ("normal", "abnormal"):
        raise SpecError(f"unknown scenario kind {kind!r}")
    anomaly = anomaly or AnomalySpec()
    if min(anomaly.magnitude) <= NOISE_FRACTION:
        raise SpecError("anomaly magnitude must exceed the sensor noise level")
    rng = np.random.default_rng(seed)
    t, x = _base_imu(length, rng)
    labels = np.zeros(length, dtype=bool)
    if kind == "abnormal":
        mean_dur = np.mean([sum(EVENT_DURATION[k]) / 2 for k in anomaly.kinds])
        k = int(rng.integers(5, 15))
        while k < length - 2:
            ev = anomaly.kinds[int(rng.integers(len(anomaly.kinds)))]
            lo, hi = EVENT_DURATION[ev]
            dur = min(int(rng.integers(lo, hi + 1)), length - k)
            n_ch = int(rng.integers(1, 4))
            chans = rng.choice(6, size=n_ch, replace=False)
            for ch in chans:
                mag = rng.uniform(*anomaly.magnitude) * IMU_AMPLITUDE[ch]
                sign = rng.choice([-1.0, 1.0])
                seg = slice(k, k + dur)
                if ev == "burst":
                    alt = np.where(np.arange(dur) % 2 == 0, 1.0, -1.0)
                    x[seg, ch] += sign * mag * alt
                else:
                    x[seg, ch] += sign * mag
            labels[k : k + dur] = True
            gap = mean_dur * (1.0 - anomaly.density) / max(anomaly.density, 1e-3)
            k += dur + max(5, int(round(gap * rng.uniform(0.5, 1.5))))
    return ImuStream(t, x, labels, scenario)


# ---------------------------------------------------------------- frame generation


def world_texture(seed) -> list:
    """Background shared by all scenarios of a corpus: every flight happens in
    the same environment and differs only in trajectory."""
    return _texture_params(np.random.default_rng(seed))


def _texture_params(rng):
    waves = []
    for _ in range(3):
        kx, ky = int(rng.integers(-2, 3)), int(rng.integers(1, 3))
        waves.append((kx, ky, rng.uniform(0.1, 0.25), rng.uniform(0, 2 * np.pi)))
    return waves


def _render(size: int, waves, pan, obj_pos, obj_size, obj_val) -> np.ndarray:
    grid = np.arange(size, dtype=np.float64)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    img = np.zeros((size, size))
    for kx, ky, amp, ph in waves:
        img += amp * np.sin(2 * np.pi * (kx * (xx + pan[1]) + ky * (yy + pan[0])) / size + ph)
    # Area-weighted square on a torus so sub-pixel motion renders smoothly.
    cov = []
    for axis in (0, 1):
        start = obj_pos[axis] % size
        c = np.zeros(size)
        for shift in (-size, 0, size):
            lo, hi = start + shift, start + shift + obj_size
            c += np.clip(np.minimum(grid + 1, hi) - np.maximum(grid, lo), 0, 1)
        cov.append(c)
    mask = np.outer(cov[0], cov[1])
    return img * (1 - mask) + obj_val * mask


def generate_frame_scenario(kind: str, length: int, anomaly: AnomalySpec | None = None,
                            seed=None, size: int = 32, scenario: str = "",
                            anomaly_kind: str = "displacement", texture=None) -> FrameStream:
    """Frame stream of a panning periodic texture with a moving square.

    ``anomaly_kind`` is ``"displacement"`` (erratic ego-motion jumps) or
    ``"occlusion"`` (an occluder appears for a single frame). ``texture``
    fixes the background (see :func:`world_texture`); by default each
    scenario draws its own.
    """
    if length < 4:
        raise SpecError("frame scenarios need at least 4 frames")
    if kind not in ("normal", "abnormal"):
        raise SpecError(f"unknown scenario kind {kind!r}")
    anomaly = anomaly or AnomalySpec()
    scale = size / 32.0
    noise = 0.02
    if anomaly_kind == "occlusion" and max(anomaly.occluder) * scale >= size:
        raise SpecError("occluder larger than the frame")
    if anomaly_kind == "displacement" and min(anomaly.displacement) <= 1.0:
        raise SpecError("displacement anomaly is below the noise floor (must exceed 1 px)")
    if anomaly_kind not in ("displacement", "occlusion"):
        raise SpecError(f"unknown frame anomaly kind {anomaly_kind!r}")
    rng = np.random.default_rng(seed)
    waves = _texture_params(rng) if texture is None else texture
    # Headings turn slowly so every flight sweeps a range of velocities.
    speed = rng.uniform(0.5, 1.2) * scale
    ang, turn = rng.uniform(0, 2 * np.pi), rng.uniform(-0.08, 0.08)
    obj_speed = rng.uniform(0.3, 1.0) * scale
    obj_ang, obj_turn = rng.uniform(0, 2 * np.pi), rng.uniform(-0.08, 0.08)
    pan = rng.uniform(0, size, size=2)
    obj = rng.uniform(0, size, size=2)
    obj_size = 6.0 * scale
    obj_val = float(rng.choice([-0.9, 0.9]))
    frames = np.empty((length, size, size))
    events = np.zeros(length, dtype=bool)
    for k in range(length):
        event = kind == "abnormal" and k >= 3 and rng.random() < anomaly.event_rate
        if event and anomaly_kind == "displacement":
            d = rng.uniform(*anomaly.displacement) * scale
            a = rng.uniform(0, 2 * np.pi)
            pan = pan + d * np.array([np.sin(a), np.cos(a)])
            obj = obj + rng.uniform(*anomaly.displacement, size=2) * scale * rng.choice([-1, 1], size=2)
        img = _render(size, waves, pan, obj, obj_size, obj_val)
        if event and anomaly_kind == "occlusion":
            h, w = (int(round(v * scale)) for v in rng.integers(anomaly.occluder[0], anomaly.occluder[1] + 1, size=2))
            r0, c0 = int(rng.integers(0, size - h + 1)), int(rng.integers(0, size - w + 1))
            img[r0 : r0 + h, c0 : c0 + w] = float(rng.choice([-0.95, 0.95]))
        frames[k] = np.clip(img + rng.normal(0, noise, size=img.shape), -1, 1)
        events[k] = event
        pan = pan + speed * np.array([np.sin(ang), np.cos(ang)])
        obj = obj + obj_speed * np.array([np.sin(obj_ang), np.cos(obj_ang)])
        ang += turn
        obj_ang += obj_turn
    labels = sequence_labels(events, anomaly_kind)
    return FrameStream(frames, np.arange(length) * FRAME_PERIOD, labels, scenario, events)


def sequence_labels(events, anomaly_kind: str = "displacement") -> np.ndarray:
    """Label of the 4-frame sequence ending at each frame.

    A sequence is abnormal when it contains an unpredictable transition: a
    jump into any of its last three frames, or an occluder in any frame.
    """
    events = np.asarray(events, dtype=bool)
    reach = 3 if anomaly_kind == "displacement" else 4
    labels = np.zeros(events.size, dtype=bool)
    for k in range(3, events.size):
        labels[k] = events[k - reach + 1 : k + 1].any()
    return labels


# ---------------------------------------------------------------- scaling


@dataclass(frozen=True)
class ScalerParams:
    min: np.ndarray
    max: np.ndarray

    def apply(self, x) -> np.ndarray:
        return apply_scaler(self, x)

    def invert(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (x + 1.0) * 0.5 * (self.max - self.min) + self.min


def fit_scaler(samples) -> ScalerParams:
    """Per-feature min/max so that training data maps onto [-1, 1]."""
    x = np.asarray(samples, dtype=np.float64)
    x = x.reshape(-1, x.shape[-1])
    lo, hi = x.min(axis=0), x.max(axis=0)
    flat = np.nonzero(hi <= lo)[0]
    if flat.size:
        raise ValueError(f"feature(s) {flat.tolist()} are constant; cannot scale")
    return ScalerParams(lo, hi)


def apply_scaler(params: ScalerParams, x) -> np.ndarray:
    """Affine map to [-1, 1] on the training range; values outside are kept."""
    x = np.asarray(x, dtype=np.float64)
    return 2.0 * (x - params.min) / (params.max - params.min) - 1.0


# ---------------------------------------------------------------- windows


@dataclass
class Windows:
    """Sliding windows of 3 samples; ``targets`` holds the 4th sample in
    forecast mode. ``index`` is the stream position each window's error is
    attributed to, ``t_flag`` its timestamp."""

    inputs: np.ndarray
    targets: np.ndarray | None
    index: np.ndarray
    t_flag: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]


def make_windows(x, mode: str = "reconstruction", t=None, max_gap: float = 1.5) -> Windows:
    """Reconstruction: N-2 windows flagged at their last sample.
    Forecast: N-3 windows flagged at their target sample.

    With timestamps ``t``, windows spanning a gap larger than ``max_gap``
    nominal periods are dropped.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if mode not in ("reconstruction", "forecast"):
        raise ValueError(f"unknown window mode {mode!r}")
    span = 3 if mode == "reconstruction" else 4
    if n < span:
        raise ValueError(f"{mode} windows need at least {span} samples, got {n}")
    starts = np.arange(n - span + 1)
    idx = starts[:, None] + np.arange(3)[None, :]
    inputs = x[idx]
    targets = x[starts + 3] if mode == "forecast" else None
    flag_at = starts + span - 1
    times = np.asarray(t, dtype=np.float64) if t is not None else np.arange(n, dtype=np.float64)
    keep = np.ones(starts.size, dtype=bool)
    if t is not None and n > 1:
        diffs = np.diff(times)
        period = float(np.median(diffs))
        bad = diffs > max_gap * period
        if bad.any():
            gap_cum = np.concatenate([[0], np.cumsum(bad)])
            keep = gap_cum[starts + span - 1] == gap_cum[starts]
    return Windows(inputs[keep], None if targets is None else targets[keep], flag_at[keep], times[flag_at[keep]])


# ---------------------------------------------------------------- frame datasets


@dataclass
class DatasetSplit:
    """Four-frame sequences; ``*_ids`` are ``(scenario, end_frame)`` pairs."""

    train: np.ndarray
    threshold: np.ndarray
    test: np.ndarray
    test_labels: np.ndarray
    train_ids: list = field(default_factory=list)
    threshold_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)


def frame_sequences(stream: FrameStream) -> tuple[np.ndarray, list, np.ndarray]:
    n = len(stream)
    if n < 4:
        return np.zeros((0, 4) + stream.frames.shape[1:]), [], np.zeros(0, dtype=bool)
    idx = np.arange(n - 3)[:, None] + np.arange(4)[None, :]
    labels = stream.labels[3:] if stream.labels is not None else np.zeros(n - 3, dtype=bool)
    ids = [(stream.scenario, int(k)) for k in range(3, n)]
    return stream.frames[idx], ids, np.asarray(labels, dtype=bool)


def build_frame_dataset(normal: Sequence[FrameStream], abnormal: Sequence[FrameStream] = (),
                        seed=0, n_threshold: int = 100, n_test: int = 100,
                        mirror: bool = True) -> DatasetSplit:
    """Pool normal 4-frame sequences (plus horizontal mirrors), draw disjoint
    threshold/test subsets by a seeded shuffle and train on the rest.
    Abnormal-scenario sequences are appended to the test set only."""
    if not normal:
        raise ValueError("at least one normal scenario is required")
    streams = list(normal)
    if mirror:
        streams += [s.mirrored() for s in normal]
    seqs, ids = [], []
    for s in streams:
        q, i, _ = frame_sequences(s)
        if len(i):
            seqs.append(q)
            ids += i
    pool = np.concatenate(seqs)
    if pool.shape[0] < n_threshold + n_test:
        raise ValueError(
            f"pool of {pool.shape[0]} sequences is smaller than the {n_threshold}+{n_test} requested"
        )
    order = np.random.default_rng(seed).permutation(pool.shape[0])
    th, te, tr = order[:n_threshold], order[n_threshold : n_threshold + n_test], order[n_threshold + n_test :]
    test = [pool[te]]
    test_labels = [np.zeros(te.size, dtype=bool)]
    test_ids = [ids[i] for i in te]
    for s in abnormal:
        q, i, lab = frame_sequences(s)
        if len(i):
            test.append(q)
            test_labels.append(lab)
            test_ids += i
    return DatasetSplit(
        train=pool[tr], threshold=pool[th], test=np.concatenate(test), test_labels=np.concatenate(test_labels),
        train_ids=[ids[i] for i in tr], threshold_ids=[ids[i] for i in th], test_ids=test_ids,
    )


# ---------------------------------------------------------------- ground truth


def label_ground_truth(x, references: Iterable) -> np.ndarray:
    """A sample is abnormal iff any channel leaves the [min, max] envelope of
    the normal reference streams."""
    refs = [np.asarray(r, dtype=np.float64).reshape(-1, 6) for r in references]
    refs = [r for r in refs if r.size]
    if not refs:
        raise ValueError("ground-truth labelling needs a non-empty normal reference")
    ref = np.concatenate(refs)
    lo, hi = ref.min(axis=0), ref.max(axis=0)
    x = np.asarray(x, dtype=np.float64).reshape(-1, 6)
    return np.any((x < lo) | (x > hi), axis=1)


# ---------------------------------------------------------------- image utilities


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma of an (H, W, 3) array."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if (h, w) == (size, size):
        return img.copy()
    ys = (np.arange(size) + 0.5) * h / size - 0.5
    xs = (np.arange(size) + 0.5) * w / size - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")


def hflip(frames: np.ndarray) -> np.ndarray:
    return frames[..., ::-1]


def augment_frame(img: np.ndarray, rng: np.random.Generator, rotation: float = 10.0,
                  shift: float = 0.1, zoom: tuple = (0.9, 1.1)) -> np.ndarray:
    """Random horizontal flip, rotation, shift and zoom with reflection fill."""
    if rng.random() < 0.5:
        img = img[:, ::-1]
    h, w = img.shape
    theta = math.radians(rng.uniform(-rotation, rotation))
    z = rng.uniform(*zoom)
    ty, tx = rng.uniform(-shift, shift) * h, rng.uniform(-shift, shift) * w
    c, s = math.cos(theta) / z, math.sin(theta) / z
    mat = np.array([[c, -s], [s, c]])
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = center - mat @ (center + np.array([ty, tx]))
    out = ndimage.affine_transform(img, mat, offset=offset, order=1, mode="reflect")
    return np.clip(out, -1.0, 1.0)


# ---------------------------------------------------------------- file formats


@dataclass
class RecordError:
    line: int
    message: str


def write_imu_csv(path, stream: ImuStream) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t",) + IMU_COLUMNS)
        for t, row in zip(stream.t, stream.x):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def _finish_imu(rows, errors, scenario):
    if not rows:
        return ImuStream(np.zeros(0), np.zeros((0, 6)), None, scenario), errors
    arr = np.array(rows)
    return ImuStream(arr[:, 0], arr[:, 1:], None, scenario), errors


def read_imu_csv(path, scenario: str | None = None) -> tuple[ImuStream, list[RecordError]]:
    """Parse an IMU CSV; malformed records are skipped and reported by line."""
    path = Path(path)
    rows, errors = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ("t",) + IMU_COLUMNS:
            raise ValueError(f"{path}: header must be {','.join(('t',) + IMU_COLUMNS)}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                if len(rec) != 7:
                    raise ValueError(f"expected 7 fields, got {len(rec)}")
                vals = [float(v) for v in rec]
                if not all(math.isfinite(v) for v in vals):
                    raise ValueError("non-finite value")
            except ValueError as exc:
                errors.append(RecordError(lineno, str(exc)))
                log.warning("%s:%d: skipping malformed record (%s)", path, lineno, exc)
                continue
            rows.append(vals)
    return _finish_imu(rows, errors, scenario or path.stem)


def write_imu_jsonl(path, stream: ImuStream) -> None:
    with open(path, "w") as fh:
        for t, row in zip(stream.t, stream.x):
            rec = {"t": float(t), **{k: float(v) for k, v in zip(IMU_COLUMNS, row)}}
            fh.write(json.dumps(rec) + "\n")


def read_imu_jsonl(path, scenario: str | None = None) -> tuple[ImuStream, list[RecordError]]:
    path = Path(path)
    rows, errors = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                vals = [float(rec[k]) for k in ("t",) + IMU_COLUMNS]
                if not all(math.isfinite(v) for v in vals):
                    raise ValueError("non-finite value")
            except (ValueError, KeyError, TypeError) as exc:
                errors.append(RecordError(lineno, f"{type(exc).__name__}: {exc}"))
                log.warning("%s:%d: skipping malformed record (%s)", path, lineno, exc)
                continue
            rows.append(vals)
    return _finish_imu(rows, errors, scenario or path.stem)


def read_imu(path, scenario: str | None = None):
    path = Path(path)
    if path.suffix == ".jsonl":
        return read_imu_jsonl(path, scenario)
    return read_imu_csv(path, scenario)


def write_labels(path, keys, labels, key_name: str = "t") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow((key_name, "label"))
        for k, lab in zip(keys, labels):
            w.writerow([repr(float(k)) if key_name == "t" else int(k), int(bool(lab))])


def read_labels(path) -> tuple[np.ndarray, np.ndarray]:
    keys, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for rec in reader:
            if rec:
                keys.append(float(rec[0]))
                labels.append(bool(int(rec[1])))
    return np.array(keys), np.array(labels, dtype=bool)


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(frame) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 127.5 - 1.0


def write_pgm(path, frame: np.ndarray) -> None:
    img = to_uint8(frame)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _pnm_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read P2/P5 (gray) or P6 (colour, converted to luma); returns values in [0, maxval]
    rescaled to [-1, 1]."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P2", b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported image format {magic!r}")
    (_, w, h, maxval), pos = _pnm_tokens(data, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if magic == b"P2":
        vals = np.array(data[pos:].split()[: w * h], dtype=np.float64).reshape(h, w)
    else:
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        chans = 3 if magic == b"P6" else 1
        vals = np.frombuffer(data, dtype=dtype, count=w * h * chans, offset=pos).astype(np.float64)
        vals = vals.reshape(h, w, 3) if chans == 3 else vals.reshape(h, w)
        if chans == 3:
            vals = to_grayscale(vals)
    return vals / maxval * 2.0 - 1.0


def read_raw_frames(path) -> np.ndarray:
    """Little-endian float frames with a sidecar ``<path>.hdr`` text header::

        dtype f4
        shape 60 32 32
        range 0 1        # optional; raw value range mapped to [-1, 1]
    """
    path = Path(path)
    header = {}
    for line in Path(str(path) + ".hdr").read_text().splitlines():
        parts = line.split("#")[0].split()
        if parts:
            header[parts[0]] = parts[1:]
    dtype = {"f4": "<f4", "f8": "<f8"}[header["dtype"][0]]
    shape = tuple(int(v) for v in header["shape"])
    arr = np.fromfile(path, dtype=dtype)
    if arr.size != math.prod(shape):
        raise ValueError(f"{path}: expected {math.prod(shape)} values, found {arr.size}")
    arr = arr.astype(np.float64).reshape(shape)
    lo, hi = (float(v) for v in header.get("range", ["-1", "1"]))
    return (arr - lo) / (hi - lo) * 2.0 - 1.0


def write_raw_frames(path, frames: np.ndarray) -> None:
    path = Path(path)
    np.asarray(frames, dtype="<f4").tofile(path)
    Path(str(path) + ".hdr").write_text(f"dtype f4\nshape {' '.join(map(str, frames.shape))}\nrange -1 1\n")


def write_frame_dir(directory, stream: FrameStream) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(stream.frames):
        write_pgm(d / f"{k:06d}.pgm", frame)
    labels = stream.labels if stream.labels is not None else np.zeros(len(stream), dtype=bool)
    write_labels(d / "labels.csv", range(len(stream)), labels, key_name="frame")


def read_frame_dir(directory, size: int | None = None) -> FrameStream:
    """Load a scenario directory of numbered PGM/PPM files (or ``frames.raw``)."""
    d = Path(directory)
    raw = d / "frames.raw"
    if raw.exists():
        frames = read_raw_frames(raw)
    else:
        files = sorted(p for p in d.iterdir() if p.suffix in (".pgm", ".ppm", ".pnm"))
        if not files:
            raise ValueError(f"{d}: no frames found")
        frames = np.stack([read_pnm(p) for p in files])
    if size is not None and frames.shape[1:] != (size, size):
        frames = np.stack([resize_bilinear(f, size) for f in frames])
    labels = None
    lab_path = d / "labels.csv"
    if lab_path.exists():
        _, labels = read_labels(lab_path)
    return FrameStream(np.clip(frames, -1, 1), np.arange(frames.shape[0]) * FRAME_PERIOD, labels, d.name)


# ---------------------------------------------------------------- corpus


@dataclass(frozen=True)
class CorpusConfig:
    n_normal: int = 6
    n_abnormal: int = 6
    imu_length: int = 600
    frame_length: int = 60
    frame_size: int = 32


def generate_corpus(config: CorpusConfig, seed: int = 0, anomaly: AnomalySpec | None = None) -> list[Scenario]:
    """normal-0..n and abnormal-0..n scenarios, each with an IMU and a frame stream.

    Abnormal frame scenarios alternate between displacement and occlusion events.
    """
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(2 * (config.n_normal + config.n_abnormal) + 1)
    texture = world_texture(children[-1])
    out = []
    j = 0
    for kind, count in (("normal", config.n_normal), ("abnormal", config.n_abnormal)):
        for i in range(count):
            sid = f"{kind}-{i}"
            imu = generate_imu_scenario(kind, config.imu_length, anomaly, children[j], sid)
            fr = generate_frame_scenario(
                kind, config.frame_length, anomaly, children[j + 1], config.frame_size, sid,
                anomaly_kind="displacement" if i % 2 == 0 else "occlusion", texture=texture,
            )
            out.append(Scenario(sid, kind, imu, fr))
            j += 2
    return out


DEFAULT_ROLES = {
    "imu-train": ["normal-1", "normal-2", "normal-3", "normal-4"],
    "imu-threshold": ["normal-0"],
    "imu-test": ["normal-5"],
}


def default_manifest(scenarios: Sequence[Scenario]) -> dict[str, list[str]]:
    normals = [s.id for s in scenarios if s.kind == "normal"]
    abnormals = [s.id for s in scenarios if s.kind == "abnormal"]
    if len(normals) >= 6:
        roles = {k: list(v) for k, v in DEFAULT_ROLES.items()}
    else:
        if len(normals) < 3:
            raise ValueError("need at least 3 normal scenarios for train/threshold/test roles")
        roles = {"imu-threshold": normals[:1], "imu-test": normals[-1:], "imu-train": normals[1:-1]}
    roles["imu-test"] = roles["imu-test"] + abnormals
    roles["vision-normal"] = normals
    roles["vision-abnormal"] = abnormals
    return roles


def write_manifest(path, roles: dict[str, list[str]]) -> None:
    lines = [f"{role}: {' '.join(ids)}" for role, ids in roles.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, list[str]]:
    roles = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#")[0].strip()
        if not line:
            continue
        role, sep, ids = line.partition(":")
        if not sep:
            raise ValueError(f"{path}: malformed manifest line {line!r}")
        roles[role.strip()] = ids.split()
    all_ids = [i for r in ("imu-train", "imu-threshold", "imu-test") for i in roles.get(r, [])]
    if len(all_ids) != len(set(all_ids)):
        raise ValueError(f"{path}: IMU roles must be disjoint")
    return roles


def write_corpus(directory, scenarios: Sequence[Scenario], roles=None) -> Path:
    d = Path(directory)
    (d / "imu").mkdir(parents=True, exist_ok=True)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    for s in scenarios:
        if s.imu is not None:
            write_imu_csv(d / "imu" / f"{s.id}.csv", s.imu)
            labels = s.imu.labels if s.imu.labels is not None else np.zeros(len(s.imu), dtype=bool)
            write_labels(d / "imu" / f"{s.id}.labels.csv", s.imu.t, labels)
        if s.frames is not None:
            write_frame_dir(d / "frames" / s.id, s.frames)
    write_manifest(d / "manifest.txt", roles or default_manifest(scenarios))
    return d


def load_imu_scenario(data_dir, sid: str) -> ImuStream:
    d = Path(data_dir) / "imu"
    path = d / f"{sid}.csv"
    if not path.exists():
        path = d / f"{sid}.jsonl"
    stream, _ = read_imu(path, sid)
    lab = d / f"{sid}.labels.csv"
    if lab.exists():
        t, labels = read_labels(lab)
        lookup = dict(zip(np.round(t, 9), labels))
        stream.labels = np.array([lookup.get(round(float(v), 9), False) for v in stream.t])
    return stream


def load_frame_scenario(data_dir, sid: str, size: int | None = None) -> FrameStream:
    return read_frame_dir(Path(data_dir) / "frames" / sid, size)
