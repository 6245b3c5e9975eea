import numpy as np
import pytest

from adrf import datagen
from adrf import vision as V
from adrf.stats.fitting import select_best_fit
from adrf.tensor import ShapeError

SMALL = V.CodecConfig(size=16, channels=(8, 16, 16), strides=(2, 1, 2))


# ---------------------------------------------------------------- shapes


def test_paper_codec_latent():
    assert V.PAPER_CODEC.latent_shape == (64, 4, 4)
    assert V.PAPER_CODEC.latent_length == 1024
    assert len(V.PAPER_CODEC.channels) == 9
    V.codec_specs(V.PAPER_CODEC)


def test_desk_codec_latent():
    assert V.DESK_CODEC.latent_shape == (32, 4, 4)
    specs = V.codec_specs(V.DESK_CODEC)
    assert specs[0].in_shape == (1, 32, 32) and specs[-1].out_shape == (1, 32, 32)


def test_bad_codec_rejected():
    with pytest.raises(ShapeError):
        V.codec_specs(V.CodecConfig(size=32, channels=(8, 8), strides=(2, 2)))


@pytest.mark.parametrize("cfg", [V.DESK_CODEC, SMALL])
def test_codec_roundtrip_shape(rng, cfg):
    codec = V.ConvCodec(cfg, seed=0)
    x = rng.uniform(-1, 1, size=(2, cfg.size, cfg.size))
    assert codec.encode(x).shape == (2,) + cfg.latent_shape
    assert codec.roundtrip(x).shape == x.shape


def test_codec_rejects_wrong_size():
    with pytest.raises(ShapeError):
        V.ConvCodec(SMALL, seed=0).encode(np.zeros((1, 32, 32)))


def test_forecaster_output_dims(rng):
    fc = V.CnnLstmForecaster(V.ConvCodec(SMALL, seed=0), seed=0)
    fc.fitted = True
    frame, latent = V.predict_frame(fc, rng.uniform(-1, 1, size=(3, 16, 16)))
    assert frame.shape == (16, 16) and latent.shape == SMALL.latent_shape
    assert np.all(np.abs(frame) <= 1)
    with pytest.raises(ShapeError):
        V.predict_frame(fc, np.zeros((3, 32, 32)))


def test_zero_network_predicts_tanh_bias():
    fc = V.CnnLstmForecaster(V.ConvCodec(SMALL, seed=0), seed=0)
    for p in fc.parameters():
        p.data[...] = 0.0
    fc.codec.decoder.layers[-1].bias.data[...] = 0.3
    frame, _ = V.predict_frame(fc, np.zeros((3, 16, 16)))
    np.testing.assert_allclose(frame, np.tanh(0.3), rtol=1e-15)


def test_discriminator_output_in_unit_interval(rng):
    disc = V.Discriminator(SMALL, seed=0)
    p = disc(rng.uniform(-1, 1, size=(5, 4, 16, 16))).data
    assert p.shape == (5,)
    assert np.all((p > 0) & (p < 1))
    with pytest.raises(ShapeError):
        disc(np.zeros((1, 3, 16, 16)))


def test_frame_error():
    x = np.linspace(-1, 1, 16).reshape(4, 4)
    assert V.frame_error(x, x) == 0.0
    assert V.frame_error(-np.ones((4, 4)), np.ones((4, 4))) == 4.0
    with pytest.raises(ShapeError):
        V.frame_error(np.zeros((4, 4)), np.zeros((3, 3)))


def test_hflip_involution(rng):
    f = rng.uniform(-1, 1, size=(3, 8, 8))
    np.testing.assert_array_equal(datagen.hflip(datagen.hflip(f)), f)


def test_augment_stays_in_range(rng):
    f = rng.uniform(-1, 1, size=(16, 16))
    out = datagen.augment_frame(f, rng)
    assert out.shape == f.shape and out.min() >= -1 and out.max() <= 1


def test_codec_pretraining_rejects_empty():
    with pytest.raises(ValueError):
        V.pretrain_codec(np.zeros((0, 16, 16)), cfg=SMALL, epochs=1)


# ---------------------------------------------------------------- trained oracles


@pytest.fixture(scope="module")
def scene():
    s = datagen.generate_frame_scenario("normal", 48, seed=3)
    codec = V.pretrain_codec(s.frames, epochs=40, batch=8, augment=False, seed=0)
    seqs, _, _ = datagen.frame_sequences(s)
    before = codec.state_dict()
    fc = V.train_forecaster(seqs, codec, epochs=40, batch=8, seed=0)
    return s, codec, seqs, fc, before


def test_codec_training_decreases(scene):
    _, codec, _, _, _ = scene
    assert codec.history[-1] < codec.history[0]


def test_zero_frame_reconstruction(scene):
    _, codec, _, _, _ = scene
    assert np.abs(codec.roundtrip(np.zeros((1, 32, 32)))).mean() < 0.05


def test_codec_frozen_during_forecaster_training(scene):
    _, codec, _, _, before = scene
    after = codec.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_constant_sequence_matches_codec_roundtrip(scene):
    s, codec, _, _, _ = scene
    frames = s.frames[:24]
    seqs = np.repeat(frames[:, None], 4, axis=1)
    fc = V.train_forecaster(seqs, codec, epochs=30, batch=8, seed=1)
    recon = np.mean((codec.roundtrip(frames) - frames) ** 2, axis=(1, 2))
    err = V.sequence_errors(fc, seqs)
    assert np.all(err <= 2 * recon)


def test_sudden_occlusion_exceeds_threshold(scene):
    s, _, seqs, fc, _ = scene
    theta = float(select_best_fit(V.sequence_errors(fc, seqs), ["normal", "gamma"]).quantile(0.95))
    for k in (10, 25, 40):
        f = s.frames.copy()
        f[k, 8:20, 10:22] = 0.95
        q = np.stack([f[j - 3 : j + 1] for j in range(k - 3, k + 1)])
        err = V.sequence_errors(fc, q)
        assert err[-1] > theta
        assert np.all(err[:-1] < theta)


def test_lambda_infinity_reduces_to_plain_training(scene):
    _, codec, seqs, fc, _ = scene
    sub = seqs[:12]
    _, hist = V.cgan_finetune(fc, V.Discriminator(codec.cfg, seed=0), sub, lam=np.inf, epochs=2, batch=4, seed=7)
    _, plain = V.train_plain(fc, sub, epochs=2, batch=4, seed=7)
    np.testing.assert_allclose(hist.step_prediction, plain, rtol=0, atol=1e-9)


def test_finetune_real_branch_is_roundtripped(scene):
    _, codec, seqs, fc, _ = scene
    seen = []

    def hook(sb, real):
        np.testing.assert_array_equal(real[:, :3], sb[:, :3])
        if not seen:  # before the first generator update the codec is still the pretrained one
            np.testing.assert_allclose(real[:, 3], codec.roundtrip(sb[:, 3]), rtol=0, atol=1e-12)
        seen.append(len(sb))

    gen, hist = V.cgan_finetune(fc, V.Discriminator(codec.cfg, seed=0), seqs[:8], epochs=1, batch=4, seed=0,
                                real_hook=hook)
    assert seen == [4, 4]
    assert all(np.isfinite(hist.generator)) and all(np.isfinite(hist.discriminator))
    # the input forecaster is untouched; fine-tuning works on a copy
    assert gen is not fc


def test_mode_collapse_aborts(scene):
    _, codec, seqs, fc, _ = scene
    with pytest.raises(V.ModeCollapseError):
        V.cgan_finetune(fc, V.Discriminator(codec.cfg, seed=0), seqs[:4], epochs=3, batch=4, seed=0,
                        collapse_floor=100.0, collapse_patience=2)


def _square(pos, size=16, w=5):
    img = -np.ones((size, size))
    r, c = int(round(pos[0])), int(round(pos[1]))
    img[r : r + w, c : c + w] = 0.9
    return img


def _moving_square(rng):
    v = rng.choice([-2, -1, 1, 2], size=2)
    p0 = rng.integers(4, 7, size=2).astype(float)
    return np.stack([_square(p0 + k * v) for k in range(4)])


def test_moving_square_continues_motion():
    rng = np.random.default_rng(0)
    seqs = np.stack([_moving_square(rng) for _ in range(300)])
    codec = V.pretrain_codec(seqs.reshape(-1, 16, 16)[:600], cfg=SMALL, epochs=30, batch=16, augment=False, seed=0)
    fc = V.train_forecaster(seqs, codec, epochs=40, batch=16, lr=3e-3, seed=0)
    test = np.stack([_moving_square(np.random.default_rng(99 + i)) for i in range(20)])
    pred = fc(test[:, :3]).data
    ious = [((p > 0) & (t > 0)).sum() / max(((p > 0) | (t > 0)).sum(), 1) for p, t in zip(pred, test[:, 3])]
    assert np.mean(ious) > 0.5
