"""Binary model checkpoints.

Layout (little-endian)::

    b"ADRF" | u32 version | str kind | str config-json | u32 n_tensors
    n_tensors x ( str name | u32 rank | rank x u64 dims | f64 payload )

where ``str`` is a u32 byte length followed by UTF-8. Scaler parameters, when
present, travel as the tensors ``scaler.min`` and ``scaler.max``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from adrf import imu, vision
from adrf.datagen import ScalerParams

MAGIC = b"ADRF"
VERSION = 1
_SCALER = ("scaler.min", "scaler.max")


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    def __init__(self, message: str, tensor: str | None = None):
        super().__init__(message)
        self.tensor = tensor


class UnknownKindError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: object
    kind: str
    scaler: ScalerParams | None = None
    config: dict = field(default_factory=dict)


def _codec_cfg_dict(cfg: vision.CodecConfig) -> dict:
    return {"size": cfg.size, "channels": list(cfg.channels), "strides": list(cfg.strides)}


def model_config(model) -> dict:
    """Constructor arguments needed to rebuild ``model`` before loading weights."""
    if isinstance(model, imu.AutoencoderModel):
        return {"hidden": list(model.hidden)}
    if isinstance(model, imu.ForecasterModel):
        return {"hidden": model.hidden}
    if isinstance(model, (vision.ConvCodec, vision.CnnLstmForecaster)):
        return {"codec": _codec_cfg_dict(model.cfg)}
    if isinstance(model, vision.Discriminator):
        return {"codec": _codec_cfg_dict(model.cfg), "hidden": model.lstm.hidden}
    raise UnknownKindError(f"cannot checkpoint objects of type {type(model).__name__}")


def _build(kind: str, cfg: dict):
    codec_cfg = None
    if "codec" in cfg:
        c = cfg["codec"]
        codec_cfg = vision.CodecConfig(int(c["size"]), tuple(c["channels"]), tuple(c["strides"]))
    if kind == imu.AutoencoderModel.kind:
        return imu.AutoencoderModel(hidden=tuple(cfg["hidden"]))
    if kind == imu.ForecasterModel.kind:
        return imu.ForecasterModel(hidden=int(cfg["hidden"]))
    if kind == vision.ConvCodec.kind:
        return vision.ConvCodec(codec_cfg)
    if kind == vision.CnnLstmForecaster.kind:
        return vision.CnnLstmForecaster(vision.ConvCodec(codec_cfg))
    if kind == vision.Discriminator.kind:
        return vision.Discriminator(codec_cfg, hidden=int(cfg["hidden"]))
    raise UnknownKindError(f"unknown model kind {kind!r}")


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _tensor_bytes(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = _pack_str(name) + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def dumps(model, scaler: ScalerParams | None = None, extra: dict | None = None) -> bytes:
    cfg = {"model": model_config(model), "extra": extra or {}}
    tensors = list(model.state_dict().items())
    if scaler is not None:
        tensors += [(_SCALER[0], np.asarray(scaler.min)), (_SCALER[1], np.asarray(scaler.max))]
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(model.kind),
             _pack_str(json.dumps(cfg, sort_keys=True)), struct.pack("<I", len(tensors))]
    parts += [_tensor_bytes(n, a) for n, a in tensors]
    return b"".join(parts)


def save_checkpoint(model, path, scaler: ScalerParams | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(dumps(model, scaler, extra))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str, tensor: str | None = None) -> bytes:
        if self.pos + n > len(self.buf):
            where = f" in tensor {tensor!r}" if tensor else ""
            raise TruncatedCheckpointError(
                f"checkpoint ends after {len(self.buf)} bytes while reading {what}{where}", tensor)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what, tensor=None) -> int:
        return struct.unpack("<I", self.take(4, what, tensor))[0]

    def string(self, what, tensor=None) -> str:
        return self.take(self.u32(what, tensor), what, tensor).decode("utf-8")


def loads(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = buf[:4]
    if len(buf) >= 4 and magic != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {magic!r}, expected {MAGIC!r}")
    r.take(4, "magic")
    version = r.u32("format version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {VERSION}")
    kind = r.string("model kind")
    cfg = json.loads(r.string("config"))
    state = {}
    for _ in range(r.u32("tensor count")):
        name = r.string("tensor name")
        rank = r.u32("rank", name)
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, "dims", name))
        count = int(np.prod(dims)) if rank else 1
        data = r.take(8 * count, "payload", name)
        state[name] = np.frombuffer(data, dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the last tensor")
    scaler = None
    if _SCALER[0] in state:
        scaler = ScalerParams(state.pop(_SCALER[0]), state.pop(_SCALER[1]))
    model = _build(kind, cfg.get("model", {}))
    model.load_state_dict(state)
    unexpected = set(state) - {n for n, _ in model.named_parameters()}
    if unexpected:
        raise CheckpointError(f"checkpoint holds unknown tensors: {sorted(unexpected)}")
    if hasattr(model, "fitted"):
        model.fitted = True
    return Checkpoint(model, kind, scaler, cfg.get("extra", {}))


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
