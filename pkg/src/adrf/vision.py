"""Next-frame prediction: convolutional codec, CNN-LSTM forecaster and the
conditional discriminator used for adversarial fine-tuning."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from adrf import tensor as T
from adrf.datagen import augment_frame
from adrf.layers import LSTM, Conv2D, Dense, LayerSpec, Module, validate_chain
from adrf.optim import Adam, StepDecay
from adrf.tensor import NumericError, ShapeError, Tape, Tensor
from adrf.training import DivergenceError, run_epochs, scaled_milestones

log = logging.getLogger(__name__)


class FrozenCodecError(RuntimeError):
    """Codec weights changed during a phase that must keep them frozen."""


class ModeCollapseError(RuntimeError):
    pass


def _rngs(seed, n):
    if isinstance(seed, np.random.Generator):
        return [np.random.default_rng(seed.integers(2**63)) for _ in range(n)]
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(n)]


@dataclass(frozen=True)
class CodecConfig:
    size: int = 32
    channels: tuple = (8, 16, 16, 32, 32, 32, 32)
    strides: tuple = (2, 1, 2, 1, 2, 1, 1)

    @property
    def latent_shape(self) -> tuple:
        side = self.size
        for s in self.strides:
            side = -(-side // s)
        return (self.channels[-1], side, side)

    @property
    def latent_length(self) -> int:
        c, h, w = self.latent_shape
        return c * h * w


DESK_CODEC = CodecConfig()
PAPER_CODEC = CodecConfig(
    size=128,
    channels=(8, 16, 16, 32, 32, 64, 64, 64, 64),
    strides=(2, 1, 2, 1, 2, 1, 2, 1, 2),
)


def codec_specs(cfg: CodecConfig) -> list[LayerSpec]:
    """Layer-by-layer shapes of encoder then decoder (CHW)."""
    if len(cfg.channels) != len(cfg.strides):
        raise ShapeError("codec needs one stride per encoder layer")
    specs, c, side = [], 1, cfg.size
    for i, (co, s) in enumerate(zip(cfg.channels, cfg.strides)):
        out = T.conv_output_size(side, 3, s, 1)
        act = "tanh" if i == len(cfg.channels) - 1 else "leaky_relu"
        specs.append(LayerSpec("conv", (c, side, side), (co, out, out), act, 3, s))
        c, side = co, out
    if side != 4:
        raise ShapeError(f"codec for {cfg.size}x{cfg.size} frames yields a {side}x{side} latent, expected 4x4")
    for i in reversed(range(len(cfg.channels))):
        co = cfg.channels[i - 1] if i > 0 else 1
        up = side * cfg.strides[i]
        if up != side:
            specs.append(LayerSpec("upsample", (c, side, side), (c, up, up)))
        act = "tanh" if i == 0 else "leaky_relu"
        specs.append(LayerSpec("conv", (c, up, up), (co, up, up), act, 3, 1))
        c, side = co, up
    if side != cfg.size:
        raise ShapeError(f"decoder ends at {side}x{side}, expected {cfg.size}")
    return specs


class ConvEncoder(Module):
    def __init__(self, cfg: CodecConfig, seed=None):
        rngs = _rngs(seed, len(cfg.channels))
        layers, c = [], 1
        for i, (co, s) in enumerate(zip(cfg.channels, cfg.strides)):
            act = "tanh" if i == len(cfg.channels) - 1 else "leaky_relu"
            layers.append(Conv2D(c, co, 3, s, act, seed=rngs[i]))
            c = co
        self.layers = layers

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class ConvDecoder(Module):
    def __init__(self, cfg: CodecConfig, seed=None):
        n = len(cfg.channels)
        rngs = _rngs(seed, n)
        layers, ups = [], []
        for j, i in enumerate(reversed(range(n))):
            co = cfg.channels[i - 1] if i > 0 else 1
            act = "tanh" if i == 0 else "leaky_relu"
            layers.append(Conv2D(cfg.channels[i], co, 3, 1, act, seed=rngs[j]))
            ups.append(cfg.strides[i])
        self.layers = layers
        self.upsample = tuple(ups)

    def __call__(self, z: Tensor) -> Tensor:
        for layer, f in zip(self.layers, self.upsample):
            if f > 1:
                z = T.upsample(z, f)
            z = layer(z)
        return z


class ConvCodec(Module):
    kind = "vision-codec"

    def __init__(self, cfg: CodecConfig = DESK_CODEC, seed=0):
        validate_chain(codec_specs(cfg))
        r = _rngs(seed, 2)
        self.cfg = cfg
        self.encoder = ConvEncoder(cfg, seed=r[0])
        self.decoder = ConvDecoder(cfg, seed=r[1])
        self.history: list[float] = []

    def _as_nchw(self, frames) -> Tensor:
        x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=np.float64))
        if x.data.ndim == 2:
            x = T.reshape(x, (1, 1) + x.shape)
        elif x.data.ndim == 3:
            x = T.reshape(x, (x.shape[0], 1) + x.shape[1:])
        if x.shape[1:] != (1, self.cfg.size, self.cfg.size):
            raise ShapeError(f"codec expects {self.cfg.size}x{self.cfg.size} frames, got {x.shape}")
        return x

    def encode(self, frames) -> Tensor:
        return self.encoder(self._as_nchw(frames))

    def decode(self, z: Tensor) -> Tensor:
        return self.decoder(z)

    def __call__(self, frames) -> Tensor:
        return self.decode(self.encode(frames))

    def roundtrip(self, frames) -> np.ndarray:
        """Decode(encode(frames)) as (N, H, W)."""
        out = self(frames).data
        return out[:, 0]


class CnnLstmForecaster(Module):
    """Encode 3 frames, run an LSTM (hidden = latent length) over the latents,
    decode its final state as the 4th frame."""

    kind = "vision-forecaster"

    def __init__(self, codec: ConvCodec, seed=0):
        self.codec = codec
        n = codec.cfg.latent_length
        self.lstm = LSTM(n, n, return_sequences=False, seed=_rngs(seed, 1)[0])
        self.fitted = False
        self.history: list[float] = []

    @property
    def cfg(self) -> CodecConfig:
        return self.codec.cfg

    def latents(self, frames3) -> Tensor:
        x = frames3 if isinstance(frames3, Tensor) else Tensor(np.asarray(frames3, dtype=np.float64))
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"forecaster expects (B, 3, H, W) inputs, got {x.shape}")
        B = x.shape[0]
        z = self.codec.encode(T.reshape(x, (B * 3, 1) + x.shape[2:]))
        return T.reshape(z, (B, 3, -1))

    def predict_latent(self, lat: Tensor) -> Tensor:
        h, _ = self.lstm(lat)
        return h

    def decode_latent(self, h: Tensor) -> Tensor:
        B = h.shape[0]
        img = self.codec.decode(T.reshape(h, (B,) + self.cfg.latent_shape))
        return T.reshape(img, (B, self.cfg.size, self.cfg.size))

    def __call__(self, frames3) -> Tensor:
        return self.decode_latent(self.predict_latent(self.latents(frames3)))


class Discriminator(Module):
    """Own convolutional encoder, an LSTM over the 4 encoded frames and a
    dense head giving the probability that the 4th frame is real."""

    kind = "vision-discriminator"

    def __init__(self, cfg: CodecConfig = DESK_CODEC, hidden: int = 64, seed=0):
        r = _rngs(seed, 3)
        self.cfg = cfg
        self.encoder = ConvEncoder(cfg, seed=r[0])
        self.lstm = LSTM(cfg.latent_length, hidden, return_sequences=False, seed=r[1])
        self.head = Dense(hidden, 1, seed=r[2])

    def logits(self, frames4: Tensor) -> Tensor:
        if frames4.data.ndim != 4 or frames4.shape[1] != 4:
            raise ShapeError(f"discriminator expects (B, 4, H, W), got {frames4.shape}")
        B = frames4.shape[0]
        z = self.encoder(T.reshape(frames4, (B * 4, 1) + frames4.shape[2:]))
        h, _ = self.lstm(T.reshape(z, (B, 4, -1)))
        return T.reshape(self.head(h), (B,))

    def __call__(self, frames4) -> Tensor:
        x = frames4 if isinstance(frames4, Tensor) else Tensor(np.asarray(frames4, dtype=np.float64))
        return T.sigmoid(self.logits(x))


# ---------------------------------------------------------------- training


def _prediction_loss(pred: Tensor, target) -> Tensor:
    return T.loss("mse+mae", pred, target)


def pretrain_codec(frames, cfg: CodecConfig = DESK_CODEC, epochs: int = 100, lr: float = 1e-3,
                   milestones=None, batch: int = 16, augment: bool = True, seed=0, on_epoch=None) -> ConvCodec:
    """Train encoder+decoder to reconstruct (augmented) single frames, mse+mae loss."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] == 0:
        raise ValueError("codec pretraining needs a non-empty (N, H, W) frame array")
    r_init, r_aug, r_order = _rngs(seed, 3)
    codec = ConvCodec(cfg, seed=r_init.integers(2**63))
    milestones = scaled_milestones(epochs) if milestones is None else tuple(milestones)
    current = {"x": frames}

    def refresh(epoch, _loss=None):
        if augment:
            current["x"] = np.stack([augment_frame(f, r_aug) for f in frames])

    refresh(0)

    def step(idx):
        xb = current["x"][idx]
        return _prediction_loss(T.reshape(codec(xb), xb.shape), xb)

    def on_epoch_end(epoch, loss):
        refresh(epoch + 1)
        if on_epoch is not None:
            on_epoch(epoch, loss)

    codec.history = run_epochs(codec.parameters(), frames.shape[0], step, epochs=epochs, lr=lr, batch=batch,
                               seed=r_order, schedule=StepDecay(milestones), name="vision-codec",
                               on_epoch=on_epoch_end)
    return codec


def _params_snapshot(module: Module) -> dict:
    return {k: v.copy() for k, v in module.state_dict().items()}


def _check_sequences(seqs, size: int) -> np.ndarray:
    seqs = np.asarray(seqs, dtype=np.float64)
    if seqs.ndim != 4 or seqs.shape[1] != 4 or seqs.shape[2:] != (size, size):
        raise ShapeError(f"expected (N, 4, {size}, {size}) sequences, got {seqs.shape}")
    if seqs.shape[0] == 0:
        raise ValueError("no sequences to train on")
    return seqs


def train_forecaster(sequences, codec: ConvCodec, epochs: int = 100, lr: float = 1e-3, milestones=None,
                     batch: int = 16, seed=0, on_epoch=None) -> CnnLstmForecaster:
    """Train only the latent LSTM; the codec stays frozen (verified afterwards)."""
    seqs = _check_sequences(sequences, codec.cfg.size)
    r_init, r_order = _rngs(seed, 2)
    model = CnnLstmForecaster(codec, seed=r_init.integers(2**63))
    before = _params_snapshot(codec)
    codec.set_trainable(False)
    lat = np.concatenate([
        model.latents(seqs[i : i + 64, :3]).data for i in range(0, seqs.shape[0], 64)
    ])
    targets = seqs[:, 3]
    milestones = scaled_milestones(epochs) if milestones is None else tuple(milestones)

    def step(idx):
        pred = model.decode_latent(model.predict_latent(Tensor(lat[idx])))
        return _prediction_loss(pred, targets[idx])

    try:
        model.history = run_epochs(model.lstm.parameters(), seqs.shape[0], step, epochs=epochs, lr=lr,
                                   batch=batch, seed=r_order, schedule=StepDecay(milestones),
                                   name="vision-forecaster", on_epoch=on_epoch)
    finally:
        codec.set_trainable(True)
    after = codec.state_dict()
    changed = [k for k in before if not np.array_equal(before[k], after[k])]
    if changed:
        raise FrozenCodecError(f"codec parameters changed during forecaster training: {changed}")
    model.fitted = True
    return model


@dataclass
class FinetuneHistory:
    generator: list = field(default_factory=list)
    prediction: list = field(default_factory=list)
    adversarial: list = field(default_factory=list)
    discriminator: list = field(default_factory=list)
    step_prediction: list = field(default_factory=list)


def real_branch(forecaster: CnnLstmForecaster, seqs: np.ndarray) -> np.ndarray:
    """The 4-frame real sample shown to the discriminator: inputs plus the
    codec round-trip of the true 4th frame, so real and generated frames
    carry the same reconstruction loss."""
    real4 = forecaster.codec.roundtrip(seqs[:, 3])
    return np.concatenate([seqs[:, :3], real4[:, None]], axis=1)


def cgan_finetune(forecaster: CnnLstmForecaster, discriminator: Discriminator, sequences, lam: float = 100.0,
                  epochs: int = 20, lr: float = 1e-4, d_lr: float = 1e-4, batch: int = 16, seed=0,
                  collapse_floor: float = 0.01, collapse_patience: int = 10, on_epoch=None,
                  real_hook=None, milestones=None) -> tuple[CnnLstmForecaster, FinetuneHistory]:
    """Alternate discriminator and generator updates on a copy of ``forecaster``.

    Generator loss is ``prediction + adversarial / lam``; ``lam = inf`` turns
    the adversarial term off and reduces this to unfrozen forecaster training.
    Both rates follow the same step decay as the earlier phases.
    """
    seqs = _check_sequences(sequences, forecaster.cfg.size)
    gen = copy.deepcopy(forecaster)
    gen.set_trainable(True)
    disc = discriminator
    r_order, = _rngs(seed, 1)
    schedule = StepDecay(scaled_milestones(epochs) if milestones is None else tuple(milestones))
    g_opt = Adam(gen.parameters(), lr=lr, schedule=schedule)
    d_opt = Adam(disc.parameters(), lr=d_lr, schedule=schedule)
    adv_weight = 0.0 if np.isinf(lam) else 1.0 / lam
    hist = FinetuneHistory()
    low_d = 0
    n = seqs.shape[0]
    for epoch in range(epochs):
        g_opt.set_epoch(epoch)
        d_opt.set_epoch(epoch)
        order = r_order.permutation(n)
        sums = np.zeros(4)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            sb = seqs[idx]
            try:
                # Discriminator step on real (round-tripped) vs generated 4th frames.
                fake4 = gen(sb[:, :3]).data
                real = real_branch(gen, sb)
                if real_hook is not None:
                    real_hook(sb, real)
                fake = np.concatenate([sb[:, :3], fake4[:, None]], axis=1)
                with Tape() as tape:
                    d_real = T.bce_with_logits(disc.logits(Tensor(real)), np.ones(idx.size))
                    d_fake = T.bce_with_logits(disc.logits(Tensor(fake)), np.zeros(idx.size))
                    d_loss = d_real + d_fake
                tape.backward(d_loss)
                d_opt.step()
                # Generator step: prediction loss plus fooling the discriminator.
                disc.set_trainable(False)
                try:
                    with Tape() as tape:
                        pred = gen(sb[:, :3])
                        p_loss = _prediction_loss(pred, sb[:, 3])
                        seq4 = T.concat([Tensor(sb[:, :3]), T.reshape(pred, (idx.size, 1) + pred.shape[1:])], axis=1)
                        adv = T.bce_with_logits(disc.logits(seq4), np.ones(idx.size))
                        g_loss = p_loss + adv * adv_weight
                    tape.backward(g_loss)
                finally:
                    disc.set_trainable(True)
                g_opt.step()
            except NumericError as exc:
                raise DivergenceError(f"adversarial fine-tuning diverged in epoch {epoch}: {exc}") from exc
            hist.step_prediction.append(p_loss.item())
            sums += np.array([g_loss.item(), p_loss.item(), adv.item(), d_loss.item()]) * idx.size
        g, p, a, d = sums / n
        if not np.isfinite(sums).all():
            raise DivergenceError(f"adversarial fine-tuning produced non-finite losses in epoch {epoch}")
        hist.generator.append(g)
        hist.prediction.append(p)
        hist.adversarial.append(a)
        hist.discriminator.append(d)
        log.debug("cgan epoch %d: G %.5f pred %.5f adv %.4f D %.4f", epoch, g, p, a, d)
        if on_epoch is not None:
            on_epoch(epoch, g)
        low_d = low_d + 1 if d < collapse_floor else 0
        if low_d >= collapse_patience:
            raise ModeCollapseError(
                f"discriminator loss stayed below {collapse_floor} for {collapse_patience} epochs "
                f"(last {d:.2e}, adversarial {a:.3f}); the generator is no longer informative"
            )
    gen.fitted = True
    return gen, hist


def train_plain(forecaster: CnnLstmForecaster, sequences, epochs: int = 20, lr: float = 1e-4, batch: int = 16,
                seed=0, milestones=None) -> tuple[CnnLstmForecaster, list]:
    """All-weights forecaster training with the prediction loss only; the
    reference that adversarial fine-tuning reduces to when ``lam = inf``."""
    seqs = _check_sequences(sequences, forecaster.cfg.size)
    gen = copy.deepcopy(forecaster)
    gen.set_trainable(True)
    r_order, = _rngs(seed, 1)
    schedule = StepDecay(scaled_milestones(epochs) if milestones is None else tuple(milestones))
    opt = Adam(gen.parameters(), lr=lr, schedule=schedule)
    losses = []
    n = seqs.shape[0]
    for epoch in range(epochs):
        opt.set_epoch(epoch)
        order = r_order.permutation(n)
        for start in range(0, n, batch):
            sb = seqs[order[start : start + batch]]
            with Tape() as tape:
                loss = _prediction_loss(gen(sb[:, :3]), sb[:, 3])
            tape.backward(loss)
            opt.step()
            losses.append(loss.item())
    return gen, losses


# ---------------------------------------------------------------- inference


def _require_fitted(model):
    if not getattr(model, "fitted", False):
        raise RuntimeError("vision forecaster has not been trained or loaded")


def predict_frame(forecaster: CnnLstmForecaster, frames3) -> tuple[np.ndarray, np.ndarray]:
    """Predicted 4th frame and its latent for one (3, H, W) input."""
    x = np.asarray(frames3, dtype=np.float64)
    size = forecaster.cfg.size
    if x.shape != (3, size, size):
        raise ShapeError(f"expected (3, {size}, {size}) frames, got {x.shape}")
    h = forecaster.predict_latent(forecaster.latents(x[None]))
    img = forecaster.decode_latent(h)
    return img.data[0], h.data[0].reshape(forecaster.cfg.latent_shape)


def frame_error(predicted, actual) -> float:
    p = np.asarray(predicted, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape:
        raise ShapeError(f"frame_error: {p.shape} vs {a.shape}")
    return float(np.mean((p - a) ** 2))


def sequence_errors(forecaster: CnnLstmForecaster, sequences, chunk: int = 64) -> np.ndarray:
    """Mean squared pixel error of the predicted 4th frame for every sequence."""
    _require_fitted(forecaster)
    seqs = np.asarray(sequences, dtype=np.float64)
    if seqs.shape[0] == 0:
        return np.zeros(0)
    seqs = _check_sequences(seqs, forecaster.cfg.size)
    out = []
    for i in range(0, seqs.shape[0], chunk):
        sb = seqs[i : i + chunk]
        pred = forecaster(sb[:, :3]).data
        out.append(np.mean((pred - sb[:, 3]) ** 2, axis=(1, 2)))
    return np.concatenate(out)
