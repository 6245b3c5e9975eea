import struct

import numpy as np
import pytest

from adrf import imu, vision
from adrf.checkpoint import (MAGIC, BadMagicError, CheckpointError, TruncatedCheckpointError, UnknownKindError,
                             VersionMismatchError, dumps, load_checkpoint, loads, save_checkpoint)
from adrf.datagen import ScalerParams

SMALL = vision.CodecConfig(size=16, channels=(8, 16, 16), strides=(2, 1, 2))


def _models():
    codec = vision.ConvCodec(SMALL, seed=3)
    return [imu.AutoencoderModel(seed=1, hidden=(8, 4)), imu.ForecasterModel(seed=2, hidden=5), codec,
            vision.CnnLstmForecaster(codec, seed=4), vision.Discriminator(SMALL, hidden=6, seed=5)]


@pytest.mark.parametrize("model", _models(), ids=lambda m: type(m).__name__)
def test_round_trip_is_bit_exact(model, tmp_path):
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    ck = load_checkpoint(path)
    assert ck.kind == model.kind and type(ck.model) is type(model)
    before, after = model.state_dict(), ck.model.state_dict()
    assert before.keys() == after.keys()
    for k in before:
        assert np.array_equal(before[k], after[k]), k


def test_dumps_is_deterministic():
    m = imu.ForecasterModel(seed=2, hidden=5)
    assert dumps(m) == dumps(m)
    assert dumps(m).startswith(MAGIC)


def test_scaler_and_extra_travel_with_model():
    sc = ScalerParams(np.arange(6.0), np.arange(6.0) + 2.5)
    ck = loads(dumps(imu.ForecasterModel(hidden=5), sc, {"epochs": 3}))
    assert np.array_equal(ck.scaler.min, sc.min) and np.array_equal(ck.scaler.max, sc.max)
    assert ck.config["epochs"] == 3
    assert "scaler.min" not in ck.model.state_dict()


def test_bad_magic():
    buf = dumps(imu.ForecasterModel(hidden=5))
    with pytest.raises(BadMagicError):
        loads(b"XXXX" + buf[4:])


def test_version_mismatch():
    buf = dumps(imu.ForecasterModel(hidden=5))
    with pytest.raises(VersionMismatchError, match="version 7"):
        loads(buf[:4] + struct.pack("<I", 7) + buf[8:])


def test_truncation_names_the_tensor():
    buf = dumps(imu.ForecasterModel(hidden=5))
    with pytest.raises(TruncatedCheckpointError) as info:
        loads(buf[:-3])
    assert info.value.tensor is not None and info.value.tensor in str(info.value)


@pytest.mark.parametrize("cut", [0, 2, 6, 11])
def test_truncated_header(cut):
    buf = dumps(imu.ForecasterModel(hidden=5))
    with pytest.raises(CheckpointError):
        loads(buf[:cut])


def test_trailing_bytes_rejected():
    with pytest.raises(CheckpointError, match="trailing"):
        loads(dumps(imu.ForecasterModel(hidden=5)) + b"\0")


def test_unknown_kind():
    buf = dumps(imu.ForecasterModel(hidden=5))
    kind = imu.ForecasterModel.kind.encode()
    fake = b"z" * len(kind)
    with pytest.raises(UnknownKindError):
        loads(buf.replace(kind, fake, 1))
    with pytest.raises(UnknownKindError):
        dumps(object())
