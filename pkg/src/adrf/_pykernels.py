"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``."""
import numpy as np


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def lstm_gates_forward(z, c_prev):
    B, H = c_prev.shape
    if z.shape != (B, 4 * H):
        raise ValueError("gate pre-activations must be (B, 4H) with c_prev (B, H)")
    act = np.empty_like(z)
    act[:, : 3 * H] = _sigmoid(z[:, : 3 * H])
    act[:, 3 * H :] = np.tanh(z[:, 3 * H :])
    i, f, o, g = act[:, :H], act[:, H : 2 * H], act[:, 2 * H : 3 * H], act[:, 3 * H :]
    c = f * c_prev + i * g
    tc = np.tanh(c)
    return o * tc, c, act, tc


def lstm_gates_backward(dh, dc, act, tanh_c, c_prev):
    H = dh.shape[1]
    i, f, o, g = act[:, :H], act[:, H : 2 * H], act[:, 2 * H : 3 * H], act[:, 3 * H :]
    dct = dc + dh * o * (1.0 - tanh_c * tanh_c)
    dz = np.empty_like(act)
    dz[:, :H] = dct * g * i * (1.0 - i)
    dz[:, H : 2 * H] = dct * c_prev * f * (1.0 - f)
    dz[:, 2 * H : 3 * H] = dh * tanh_c * o * (1.0 - o)
    dz[:, 3 * H :] = dct * i * (1.0 - g * g)
    return dz, dct * f


def _geometry(H, W, k, stride, pad):
    return (H + 2 * pad - k) // stride + 1, (W + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    B, C, H, W = x.shape
    Ho, Wo = _geometry(H, W, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((B, C, k, k, Ho, Wo))
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj] = xp[:, :, di : di + stride * Ho : stride, dj : dj + stride * Wo : stride]
    return cols.reshape(B, C * k * k, Ho * Wo)


def col2im(cols, C, H, W, k, stride, pad):
    B = cols.shape[0]
    Ho, Wo = _geometry(H, W, k, stride, pad)
    if cols.shape[1:] != (C * k * k, Ho * Wo):
        raise ValueError("column matrix does not match the requested image geometry")
    cols = cols.reshape(B, C, k, k, Ho, Wo)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    for di in range(k):
        for dj in range(k):
            xp[:, :, di : di + stride * Ho : stride, dj : dj + stride * Wo : stride] += cols[:, :, di, dj]
    return xp[:, :, pad : pad + H, pad : pad + W].copy()


def adam_update(m, v, g, upd, lr, beta1, beta2, eps, c1, c2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    np.divide(v, c2, out=upd)
    np.sqrt(upd, out=upd)
    upd += eps
    np.divide(m / c1, upd, out=upd)
    upd *= lr
    return bool(np.isfinite(upd).all())
