"""Dense-array numerics shared by every learning module.

Matrices and vectors are plain float64 ``numpy.ndarray`` values. Parameter
and gradient bundles are ``dict[str, np.ndarray]`` keyed by parameter name,
so the optimizer, clipper and gradient checker work for any model.

Rng is the package's own deterministic generator so every training run and
test reproduces bit-for-bit on any platform:

  seeding   splitmix64 applied to the 64-bit seed yields the four words of
            internal state (constants 0x9E3779B97F4A7C15, 0xBF58476D1CE4E5B9,
            0x94D049BB133111EB; shifts 30/27/31).
  stream    xoshiro256** - output is rotl(s1*5, 7)*9; state update is the
            reference xor/shift/rotate sequence with shift 17 and rot 45.
  doubles   (next_u64 >> 11) * 2^-53, uniform on [0, 1).
  normals   Box-Muller on two uniform draws (the spare value is cached).
  shuffles  Fisher-Yates with rejection-sampled bounded integers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError

_MASK64 = (1 << 64) - 1

GradBundle = dict[str, np.ndarray]


def _splitmix64(x: int) -> tuple[int, int]:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """Deterministic xoshiro256** stream seeded via splitmix64."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        s = self.seed
        state = []
        for _ in range(4):
            s, word = _splitmix64(s)
            state.append(word)
        if not any(state):  # all-zero state would be a fixed point
            state[0] = 1
        self._s = state
        self._spare_normal: float | None = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def uniform(self, low: float, high: float, size=None):
        """Uniform draw(s) in [low, high); returns float or f64 array."""
        if size is None:
            return low + (high - low) * self.random()
        n = int(np.prod(size))
        out = np.empty(n)
        for i in range(n):
            out[i] = low + (high - low) * self.random()
        return out.reshape(size)

    def normal(self, mu: float = 0.0, sigma: float = 1.0, size=None):
        """Gaussian draw(s) via Box-Muller."""
        if size is None:
            return mu + sigma * self._next_normal()
        n = int(np.prod(size))
        out = np.empty(n)
        for i in range(n):
            out[i] = mu + sigma * self._next_normal()
        return out.reshape(size)

    def _next_normal(self) -> float:
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        u1 = 1.0 - self.random()  # (0, 1], keeps log finite
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare_normal = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise DataError("below() requires n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def as_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got array of shape {m.shape}")
    return m


def as_vector(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got array of shape {x.shape}")
    return x


def matvec(m, x) -> np.ndarray:
    """y = M x with shape checking."""
    m = as_matrix(m)
    x = as_vector(x)
    if m.shape[1] != x.shape[0]:
        raise ShapeError(
            f"matvec: matrix {m.shape} incompatible with vector ({x.shape[0]},)"
        )
    return m @ x


def check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise DataError(f"non-finite values in '{name}'")


@dataclass
class AdamState:
    """Adam accumulators for one parameter bundle.

    Defaults are the training settings used throughout this project:
    beta1=0.99, beta2=0.9999, lr=1e-3.
    """

    learning_rate: float = 1e-3
    beta1: float = 0.99
    beta2: float = 0.9999
    epsilon: float = 1e-8
    step: int = 0
    m: GradBundle = field(default_factory=dict)
    v: GradBundle = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise DataError(
                f"Adam betas must lie in (0, 1), got {self.beta1}, {self.beta2}"
            )

    @classmethod
    def for_params(cls, params: GradBundle, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
        return state


def adam_step(state: AdamState, params: GradBundle, grads: GradBundle) -> GradBundle:
    """One Adam update with bias correction; returns the new parameters.

    ``state`` is mutated (step count and moment accumulators); ``params``
    is left untouched.
    """
    if set(params) != set(grads):
        raise ShapeError(
            f"parameter/gradient keys differ: {sorted(params)} vs {sorted(grads)}"
        )
    if not state.m:
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(
                f"gradient for '{name}' has shape {g.shape}, parameter has {p.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise DataError(f"non-finite gradient for parameter '{name}'")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out: GradBundle = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        check_finite(new_p, name)
        out[name] = new_p
    return out


def global_norm(grads: GradBundle) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_gradients(grads: GradBundle, threshold: float) -> GradBundle:
    """Global-norm clipping: scale everything by threshold/norm when over."""
    if threshold <= 0:
        raise DataError(f"clip threshold must be positive, got {threshold}")
    norm = global_norm(grads)
    if norm <= threshold:
        return grads
    scale = threshold / norm
    return {k: g * scale for k, g in grads.items()}


def gradient_check(f, analytic: GradBundle, point: GradBundle, h: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f`` maps a parameter bundle to a scalar. The relative error per
    coordinate is |a - n| / max(1e-12, |a| + |n|).
    """
    if h <= 0:
        raise DataError(f"step size h must be positive, got {h}")
    worst = 0.0
    theta = {k: np.array(v, dtype=np.float64, copy=True) for k, v in point.items()}
    for name in sorted(theta):
        grad = analytic[name]
        arr = theta[name]
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f(theta))
            flat[i] = orig - h
            f_minus = float(f(theta))
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise DataError(f"objective returned non-finite value near '{name}'")
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(gflat[i])
            err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
            if err > worst:
                worst = err
    return worst
