"""Backend selection for the loss/shaping kernels.

The compiled ``_speedups`` extension is used when it imports; otherwise the
pure-Python ``_purekernels`` module. Set ``FLCOMMBENCH_PURE=1`` to force the
fallback.
"""

import hashlib
import os

from . import _purekernels

MASK64 = _purekernels.MASK64


def _load():
    if os.environ.get("FLCOMMBENCH_PURE"):
        return _purekernels, "python"
    try:
        from . import _speedups
    except ImportError:
        return _purekernels, "python"
    return _speedups, "cython"


_impl, BACKEND = _load()

drop_mask = _impl.drop_mask
stream_segments = _impl.stream_segments
splitmix64 = _impl.splitmix64


def backend(name):
    """Return the kernel module called ``name`` ("python" or "cython")."""
    if name == "python":
        return _purekernels
    if name == "cython":
        from . import _speedups
        return _speedups
    raise ValueError(f"unknown kernel backend {name!r}; expected 'python' or 'cython'")


def mix64(x):
    """splitmix64 finaliser applied to ``x``."""
    return _purekernels.splitmix64(x & MASK64)[1]


def stream_key(*parts):
    """Stable 64-bit key for a tuple of labels (process independent)."""
    text = "\x1f".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "big")


def derive_state(seed, key):
    """Initial RNG state for stream ``key`` under ``seed``."""
    return mix64((seed & MASK64) ^ mix64(key))
