"""Kernel backend selection.

The compiled extension is used when it was built; set ``ADRF_PURE_PYTHON=1``
to force the numpy fallback (useful for benchmarking and debugging).
"""
import os

from adrf import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("ADRF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from adrf import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

lstm_gates_forward = _impl.lstm_gates_forward
lstm_gates_backward = _impl.lstm_gates_backward
im2col = _impl.im2col
col2im = _impl.col2im
adam_update = _impl.adam_update


def available_backends():
    """Return ``{name: module}`` for every kernel backend importable here."""
    found = {"python": _pykernels}
    try:
        from adrf import _ckernels

        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
