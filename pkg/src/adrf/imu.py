"""IMU detectors: an LSTM autoencoder over 3-sample windows and an LSTM
forecaster predicting the 4th sample."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from adrf import tensor as T
from adrf.datagen import Windows
from adrf.layers import LSTM, Dense, LayerSpec, LSTMCell, Module, TimeDistributedDense, validate_chain
from adrf.tensor import ShapeError, Tensor
from adrf.training import run_epochs

N_FEATURES = 6
WINDOW = 3


class UntrainedModelError(RuntimeError):
    pass


def _seed_seq(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def _seeds(seed, n):
    return [np.random.default_rng(s) for s in _seed_seq(seed).spawn(n)]


def _check_windows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (WINDOW, N_FEATURES):
        raise ShapeError(f"expected windows of shape (n, {WINDOW}, {N_FEATURES}), got {x.shape}")
    return x


class AutoencoderModel(Module):
    kind = "imu-autoencoder"

    def __init__(self, seed=0, hidden=(128, 64)):
        h1, h2 = hidden
        r = _seeds(seed, 5)
        self.enc1 = LSTM(N_FEATURES, h1, return_sequences=True, seed=r[0])
        self.enc2 = LSTM(h1, h2, return_sequences=False, seed=r[1])
        self.dec1 = LSTM(h2, h2, return_sequences=True, seed=r[2])
        self.dec2 = LSTM(h2, h1, return_sequences=True, seed=r[3])
        self.head = TimeDistributedDense(h1, N_FEATURES, seed=r[4])
        self.hidden = tuple(hidden)
        self.fitted = False
        self.history: list[float] = []
        validate_chain([
            LayerSpec("lstm", (WINDOW, N_FEATURES), (WINDOW, h1)),
            LayerSpec("lstm-last", (WINDOW, h1), (h2,)),
            LayerSpec("repeat", (h2,), (WINDOW, h2)),
            LayerSpec("lstm", (WINDOW, h2), (WINDOW, h2)),
            LayerSpec("lstm", (WINDOW, h2), (WINDOW, h1)),
            LayerSpec("time-dense", (WINDOW, h1), (WINDOW, N_FEATURES)),
        ])

    def encode(self, x: Tensor) -> Tensor:
        seq, _ = self.enc1(x)
        z, _ = self.enc2(seq)
        return z

    def __call__(self, x: Tensor) -> Tensor:
        z = self.encode(x)
        seq, _ = self.dec1(T.repeat_vector(z, WINDOW))
        seq, _ = self.dec2(seq)
        return self.head(seq)

    def predict(self, windows) -> np.ndarray:
        x = _check_windows(windows)
        return self(Tensor(x)).data


class ForecasterModel(Module):
    """Encoder LSTM over 3 samples; a single decoder cell started from the
    encoder state and fed a zero vector; dense head to the 4th sample."""

    kind = "imu-forecaster"

    def __init__(self, seed=0, hidden=64):
        r = _seeds(seed, 3)
        self.encoder = LSTM(N_FEATURES, hidden, return_sequences=False, seed=r[0])
        self.decoder = LSTMCell(N_FEATURES, hidden, seed=r[1])
        self.head = Dense(hidden, N_FEATURES, seed=r[2])
        self.hidden = hidden
        self.fitted = False
        self.history: list[float] = []

    def __call__(self, x: Tensor) -> Tensor:
        _, (h, c) = self.encoder(x)
        zero = Tensor(np.zeros((x.shape[0], N_FEATURES)))
        h, _ = self.decoder(zero, h, c)
        return self.head(h)

    def predict(self, windows) -> np.ndarray:
        x = _check_windows(windows)
        return self(Tensor(x)).data


def _inputs(windows) -> np.ndarray:
    return windows.inputs if isinstance(windows, Windows) else np.asarray(windows, dtype=np.float64)


def train_autoencoder(windows, epochs: int = 500, lr: float = 0.01, batch: int = 1, seed=0,
                      hidden=(128, 64), on_epoch=None) -> AutoencoderModel:
    """Fit the autoencoder to reproduce its input windows (MSE)."""
    x = _check_windows(_inputs(windows)) if len(_inputs(windows)) else np.zeros((0, WINDOW, N_FEATURES))
    if x.shape[0] == 0:
        raise ValueError("autoencoder training needs at least one window")
    init_seed, order_seed = _seed_seq(seed).spawn(2)
    model = AutoencoderModel(seed=init_seed, hidden=hidden)

    def step(idx):
        xb = Tensor(x[idx])
        return T.mse(model(xb), xb.data)

    model.history = run_epochs(model.parameters(), x.shape[0], step, epochs=epochs, lr=lr, batch=batch,
                               seed=order_seed, name="imu-autoencoder", on_epoch=on_epoch)
    model.fitted = True
    return model


def train_forecaster(windows, targets=None, epochs: int = 500, lr: float = 0.01, batch: int = 1, seed=0,
                     hidden: int = 64, on_epoch=None) -> ForecasterModel:
    """Fit the forecaster to predict each window's 4th sample (MSE)."""
    if isinstance(windows, Windows):
        targets = windows.targets if targets is None else targets
    if targets is None:
        raise ValueError("forecaster training needs target samples")
    x = _inputs(windows)
    if len(x) == 0:
        raise ValueError("forecaster training needs at least one window")
    x = _check_windows(x)
    y = np.asarray(targets, dtype=np.float64).reshape(-1, N_FEATURES)
    if y.shape[0] != x.shape[0]:
        raise ShapeError(f"{x.shape[0]} windows but {y.shape[0]} targets")
    init_seed, order_seed = _seed_seq(seed).spawn(2)
    model = ForecasterModel(seed=init_seed, hidden=hidden)

    def step(idx):
        return T.mse(model(Tensor(x[idx])), y[idx])

    model.history = run_epochs(model.parameters(), x.shape[0], step, epochs=epochs, lr=lr, batch=batch,
                               seed=order_seed, name="imu-forecaster", on_epoch=on_epoch)
    model.fitted = True
    return model


# ---------------------------------------------------------------- errors


@dataclass(frozen=True)
class ImuError:
    e: np.ndarray
    t_flag: float

    @property
    def e_a(self) -> float:
        return float(np.mean(self.e[:3]))

    @property
    def e_l(self) -> float:
        return float(np.mean(self.e[3:]))


def split_errors(e) -> tuple[np.ndarray, np.ndarray]:
    """(e_a, e_l): means over the angular and the linear halves."""
    e = np.asarray(e, dtype=np.float64).reshape(-1, N_FEATURES)
    return e[:, :3].mean(axis=1), e[:, 3:].mean(axis=1)


@dataclass
class ErrorSeries:
    """Per-window error vectors of one stream."""

    e: np.ndarray
    t_flag: np.ndarray
    index: np.ndarray

    @property
    def e_a(self) -> np.ndarray:
        return split_errors(self.e)[0]

    @property
    def e_l(self) -> np.ndarray:
        return split_errors(self.e)[1]

    def __len__(self):
        return self.e.shape[0]

    def __getitem__(self, i) -> ImuError:
        return ImuError(self.e[i], float(self.t_flag[i]))


def _require_fitted(model):
    if not getattr(model, "fitted", False):
        raise UntrainedModelError(f"{type(model).__name__} has not been trained or loaded")


def _predict_chunks(model, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    return np.concatenate([model.predict(x[i : i + chunk]) for i in range(0, x.shape[0], chunk)])


def reconstruction_errors(model, windows: Windows) -> ErrorSeries:
    """e[d] = mean over the 3 timesteps of the squared reconstruction error."""
    _require_fitted(model)
    x = _check_windows(windows.inputs)
    out = _predict_chunks(model, x) if x.shape[0] else x
    return ErrorSeries(((out - x) ** 2).mean(axis=1), windows.t_flag, windows.index)


def forecast_errors(model, windows: Windows) -> ErrorSeries:
    """e[d] = squared error of the predicted 4th sample."""
    _require_fitted(model)
    if windows.targets is None:
        raise ValueError("forecast errors need windows with targets")
    x = _check_windows(windows.inputs)
    out = _predict_chunks(model, x) if x.shape[0] else np.zeros((0, N_FEATURES))
    return ErrorSeries((out - windows.targets) ** 2, windows.t_flag, windows.index)


def reconstruct_error(model, window, t_flag: float = 0.0) -> ImuError:
    _require_fitted(model)
    x = _check_windows(window)
    if x.shape[0] != 1:
        raise ShapeError("reconstruct_error takes a single window")
    out = model.predict(x)
    return ImuError(((out - x) ** 2).mean(axis=1)[0], float(t_flag))


def forecast_error(model, window, target, t_flag: float = 0.0) -> ImuError:
    _require_fitted(model)
    if target is None:
        raise ValueError("forecast_error needs the target sample")
    x = _check_windows(window)
    if x.shape[0] != 1:
        raise ShapeError("forecast_error takes a single window")
    y = np.asarray(target, dtype=np.float64).reshape(N_FEATURES)
    return ImuError(((model.predict(x)[0] - y) ** 2), float(t_flag))
