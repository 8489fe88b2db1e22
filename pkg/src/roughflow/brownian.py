"""Seeded m-dimensional Brownian increments on uniform grids.

Generation is counter-based (Philox keyed by seed and a stream tag, values
drawn by inverse CDF from raw 64-bit counters), so a path is a pure function
of (seed, m, T, h) no matter how many workers regenerate it. Refinement
inserts Brownian-bridge midpoints keyed by the dyadic address of the split
interval, and reversal re-indexes stored increments without resampling, so
the same randomness drives a path forward and backward.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtri

_REFINE_STREAM_BASE = 1 << 32

MAGIC = b"RFBP"
FORMAT_VERSION = 1


def _uniforms(seed: int, stream: int, count: int) -> np.ndarray:
    """count uniforms in (0, 1) from the Philox stream keyed by (seed, stream)."""
    bg = np.random.Philox(key=np.array([seed & (2**64 - 1), stream], dtype=np.uint64))
    raw = bg.random_raw(count).astype(np.uint64)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def _gaussians(seed: int, stream: int, count: int) -> np.ndarray:
    return ndtri(_uniforms(seed, stream, count))


@dataclass(frozen=True)
class BrownianPath:
    """Increments of an m-dimensional Brownian motion over [0, T] at step h.

    level counts refinements applied since sampling; reversed_ records
    whether increments are stored in time-reversed order (refinement keys
    midpoints by the forward-orientation dyadic address either way).
    Instances are immutable.
    """

    m: int
    T: float
    h: float
    increments: np.ndarray  # shape (steps, m)
    seed: int
    level: int = 0
    reversed_: bool = False
    refinable: bool = True

    @property
    def steps(self) -> int:
        return self.increments.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.h * np.arange(self.steps + 1)

    def cumulative(self) -> np.ndarray:
        """Path values at grid nodes, shape (steps + 1, m), starting at 0."""
        w = np.zeros((self.steps + 1, self.m))
        np.cumsum(self.increments, axis=0, out=w[1:])
        return w


def sample_path(seed: int, m: int, T: float, h: float) -> BrownianPath:
    """Sample i.i.d. N(0, h) increments on the uniform grid of step h over [0, T]."""
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    steps_f = T / h
    steps = int(round(steps_f))
    if steps < 1 or abs(steps_f - steps) > 1e-9 * max(1.0, steps):
        raise ValueError(f"T/h must be a positive integer, got T={T}, h={h}")
    z = _gaussians(seed, 0, steps * m).reshape(steps, m)
    return BrownianPath(m=m, T=float(T), h=float(h), increments=z * np.sqrt(h), seed=seed)


def refine(path: BrownianPath) -> BrownianPath:
    """Split every increment in two by conditionally correct midpoint insertion.

    Pairwise sums of the refined increments reproduce the coarse increments
    bit-for-bit up to one floating addition.
    """
    if not path.refinable:
        raise ValueError("path was truncated by reversal and lost its dyadic addressing")
    n = path.steps
    new_level = path.level + 1
    z = _gaussians(path.seed, _REFINE_STREAM_BASE + new_level, n * path.m).reshape(n, path.m)
    mid = z * np.sqrt(path.h / 4.0)
    if path.reversed_:
        # stored interval j is forward interval n-1-j; its second half comes first
        mid = -mid[::-1]
    half = path.increments / 2.0
    out = np.empty((2 * n, path.m))
    out[0::2] = half + mid
    out[1::2] = half - mid
    return replace(path, h=path.h / 2.0, increments=out, level=new_level)


def reverse(path: BrownianPath, T: float = None) -> BrownianPath:
    """Time-reverse the stored increments about T (default: the full span).

    The increment of the result over [t, t+h] equals the original increment
    over [T-t-h, T-t]; applying reverse twice returns the original array
    exactly. For T below the path span the increments are first restricted
    to [0, T]; the result then no longer supports refinement.
    """
    if T is None:
        T = path.T
    k_f = T / path.h
    k = int(round(k_f))
    if k < 1 or k > path.steps or abs(k_f - k) > 1e-9 * max(1.0, k):
        raise ValueError(f"reversal time {T} is not a grid node of the path")
    truncated = k != path.steps
    inc = path.increments[:k][::-1].copy()
    return replace(
        path,
        T=float(T),
        increments=inc,
        reversed_=not path.reversed_,
        refinable=path.refinable and not truncated,
    )


# ---------------------------------------------------------------------------
# Serialization

_HEADER = struct.Struct("<4sIIQdQ")


def save_path(path: BrownianPath, filename) -> None:
    """Write the binary cache: header then little-endian f64 row-major increments."""
    with open(filename, "wb") as fh:
        fh.write(
            _HEADER.pack(MAGIC, FORMAT_VERSION, path.m, path.steps, path.h, path.seed)
        )
        fh.write(np.ascontiguousarray(path.increments, dtype="<f8").tobytes())


def load_path(filename) -> BrownianPath:
    with open(filename, "rb") as fh:
        magic, version, m, steps, h, seed = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != MAGIC:
            raise ValueError(f"not a path cache file (magic {magic!r})")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported cache version {version}")
        data = np.frombuffer(fh.read(steps * m * 8), dtype="<f8").reshape(steps, m)
    return BrownianPath(
        m=m, T=h * steps, h=h, increments=data.astype(float), seed=seed, refinable=False
    )


def to_csv(path: BrownianPath, filename) -> None:
    header = "t_left," + ",".join(f"dw_{i + 1}" for i in range(path.m))
    t = path.times[:-1][:, None]
    np.savetxt(
        filename,
        np.hstack([t, path.increments]),
        delimiter=",",
        header=header,
        comments="",
    )
