"""Dense kernels and seeded randomness shared by every other module.

Matrices are plain 2-D ``float64`` numpy arrays (row-major, C order).
"""

from __future__ import annotations

import math

import numpy as np

from attnatlas.errors import ShapeError

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_TWO_POW_M53 = 2.0**-53


def as_matrix(values) -> np.ndarray:
    m = np.ascontiguousarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, with max subtraction."""
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, gain, bias, eps: float):
    """Normalise over the last axis, then apply ``gain * y + bias``.

    Uses the population variance. Works on a single vector or on the rows
    of a matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm length mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return gain * ((x - mu) / np.sqrt(var + eps)) + bias


def gelu(x):
    """tanh-approximation GELU; this form is the contract, not erf."""
    x = np.asarray(x, dtype=np.float64)
    out = 0.5 * x * (1.0 + np.tanh(_SQRT_2_OVER_PI * (x + 0.044715 * (x * x * x))))
    return out if out.ndim else float(out)


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    x2 = x * x
    t = np.tanh(_SQRT_2_OVER_PI * (x + 0.044715 * (x2 * x)))
    d_inner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner


class Rng:
    """Seeded generator with a platform-independent stream.

    Raw 64-bit words come from PCG64, whose output sequence numpy keeps
    stable. Every derived draw is defined here rather than through
    ``numpy.random.Generator`` methods, whose algorithms may change between
    numpy releases:

    * uniform in [0, 1): top 53 bits of a word times 2**-53
    * normal: Box-Muller on pairs of uniforms, cosine branch then sine branch
    * bounded integers: rejection sampling on raw words
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self._bits = np.random.PCG64(self.seed)

    def raw(self, n: int) -> np.ndarray:
        return np.asarray(self._bits.random_raw(n), dtype=np.uint64).reshape(n)

    def uniform(self, n: int) -> np.ndarray:
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53

    def random(self) -> float:
        return float(self.uniform(1)[0])

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]

    def integer(self, high: int) -> int:
        """Uniform integer in [0, high)."""
        if high <= 0:
            raise ValueError("high must be positive")
        high = int(high)
        limit = (2**64 // high) * high
        while True:
            word = int(self.raw(1)[0])
            if word < limit:
                return word % high

    def bernoulli(self, p: float) -> bool:
        return self.random() < p

    def shuffle(self, items: list) -> list:
        """Fisher-Yates shuffle, in place; returns ``items``."""
        for i in range(len(items) - 1, 0, -1):
            j = self.integer(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def sample_without_replacement(self, population: int, k: int) -> list[int]:
        if k > population:
            raise ValueError(f"cannot draw {k} items from a population of {population}")
        idx = list(range(population))
        # partial Fisher-Yates from the front
        for i in range(k):
            j = i + self.integer(population - i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx[:k]

    def choice(self, items):
        return items[self.integer(len(items))]

    def spawn(self, stream: int) -> "Rng":
        """Independent child generator derived from this seed and ``stream``."""
        return Rng((self.seed * 0x9E3779B97F4A7C15 + 0xD1B54A32D192ED03 * (stream + 1)) % 2**64)


def sample_normal(rng: Rng, mean: float, std: float, n: int) -> np.ndarray:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    return mean + std * rng.normal(n)
