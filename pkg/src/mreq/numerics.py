"""Small numeric kernel: rate-tagged feature maps, strided linear maps and losses.

Everything is float64 and gradients are written out by hand. The strided map is
the desk-scale stand-in for a convolutional down/upsampling stage.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, EmptyInputError, TrainingDivergenceError


def as_rate(value) -> Fraction:
    rate = Fraction(value)
    if rate <= 0:
        raise ConfigurationError(f"frame rate must be positive, got {value}")
    return rate


@dataclass
class FeatureMap:
    """A d x n latent sequence sampled at ``frame_rate`` frames per second."""

    data: np.ndarray
    frame_rate: Fraction

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ConfigurationError(f"FeatureMap data must be 2-d, got shape {self.data.shape}")
        self.frame_rate = as_rate(self.frame_rate)
        if not np.all(np.isfinite(self.data)):
            raise TrainingDivergenceError("non-finite entries in FeatureMap")

    @property
    def d(self) -> int:
        return self.data.shape[0]

    @property
    def n(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> Fraction:
        return Fraction(self.n) / self.frame_rate

    def with_data(self, data: np.ndarray) -> "FeatureMap":
        return FeatureMap(data, self.frame_rate)

    @classmethod
    def zeros(cls, d: int, n: int, frame_rate) -> "FeatureMap":
        return cls(np.zeros((d, n)), frame_rate)


def _check_same(a: FeatureMap, b: FeatureMap) -> None:
    if a.data.shape != b.data.shape or a.frame_rate != b.frame_rate:
        raise ConfigurationError(
            f"shape/rate mismatch: {a.data.shape}@{a.frame_rate} vs {b.data.shape}@{b.frame_rate}"
        )


@dataclass
class StridedLinearMap:
    """Windowed strided linear map.

    ``weights[t]`` (d_out x d_in) multiplies input frame ``j * stride + t`` when
    producing output frame ``j``.  The transposed application uses the same
    weights to spread each low-rate frame over ``window_len`` high-rate frames.
    """

    weights: np.ndarray
    stride: int
    bias: np.ndarray
    grad_weights: np.ndarray = field(init=False, repr=False)
    grad_bias: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 3:
            raise ConfigurationError("weights must have shape (window_len, d_out, d_in)")
        if int(self.stride) < 1:
            raise ConfigurationError(f"stride must be >= 1, got {self.stride}")
        self.stride = int(self.stride)
        if self.bias.shape != (self.d_out,):
            raise ConfigurationError(f"bias must have shape ({self.d_out},)")
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)

    @property
    def window_len(self) -> int:
        return self.weights.shape[0]

    @property
    def d_out(self) -> int:
        return self.weights.shape[1]

    @property
    def d_in(self) -> int:
        return self.weights.shape[2]

    @classmethod
    def init(cls, d_in: int, d_out: int, stride: int, rng: np.random.Generator,
             window_len: int | None = None, scale: float | None = None) -> "StridedLinearMap":
        window_len = 2 * stride if window_len is None else window_len
        if scale is None:
            scale = 1.0 / math.sqrt(window_len * d_in)
        weights = rng.normal(0.0, scale, size=(window_len, d_out, d_in))
        return cls(weights, stride, np.zeros(d_out))

    @classmethod
    def identity(cls, d: int) -> "StridedLinearMap":
        return cls(np.eye(d)[None], 1, np.zeros(d))

    def params(self) -> list[np.ndarray]:
        return [self.weights, self.bias]

    def grads(self) -> list[np.ndarray]:
        return [self.grad_weights, self.grad_bias]

    def zero_grad(self) -> None:
        self.grad_weights[...] = 0.0
        self.grad_bias[...] = 0.0

    def copy(self) -> "StridedLinearMap":
        return StridedLinearMap(self.weights.copy(), self.stride, self.bias.copy())


def _out_len(n: int, stride: int) -> int:
    return -(-n // stride)


def _padded(x: np.ndarray, m: StridedLinearMap, n_out: int) -> np.ndarray:
    length = max((n_out - 1) * m.stride + m.window_len, x.shape[1])
    out = np.zeros((x.shape[0], length))
    out[:, : x.shape[1]] = x
    return out


def strided_apply(m: StridedLinearMap, x: FeatureMap) -> FeatureMap:
    """Downsample ``x`` by ``m.stride``; output has ceil(n / stride) frames."""
    if x.d != m.d_in:
        raise ConfigurationError(f"input dim {x.d} does not match map d_in {m.d_in}")
    if x.n == 0:
        raise EmptyInputError("strided_apply on a zero-length input")
    s = m.stride
    n_out = _out_len(x.n, s)
    xp = _padded(x.data, m, n_out)
    out = np.empty((m.d_out, n_out))
    out[:] = m.bias[:, None]
    stop = (n_out - 1) * s + 1
    for t in range(m.window_len):
        out += m.weights[t] @ xp[:, t : t + stop : s]
    return FeatureMap(out, x.frame_rate / s)


def strided_backward(m: StridedLinearMap, x: FeatureMap, grad_out: np.ndarray) -> np.ndarray:
    """Accumulate parameter grads of ``strided_apply`` and return d(loss)/dx."""
    s = m.stride
    n_out = grad_out.shape[1]
    xp = _padded(x.data, m, n_out)
    gx = np.zeros_like(xp)
    stop = (n_out - 1) * s + 1
    for t in range(m.window_len):
        cols = xp[:, t : t + stop : s]
        m.grad_weights[t] += grad_out @ cols.T
        gx[:, t : t + stop : s] += m.weights[t].T @ grad_out
    m.grad_bias += grad_out.sum(axis=1)
    return gx[:, : x.n]


def transposed_apply(m: StridedLinearMap, x: FeatureMap) -> FeatureMap:
    """Upsample ``x`` by ``m.stride`` with the transposed weights (no bias).

    The output has exactly ``n * stride`` frames; contributions that fall past
    the end are dropped.
    """
    if x.d != m.d_out:
        raise ConfigurationError(f"input dim {x.d} does not match map d_out {m.d_out}")
    if x.n == 0:
        raise EmptyInputError("transposed_apply on a zero-length input")
    s = m.stride
    n_out = x.n * s
    full = np.zeros((m.d_in, max(n_out, (x.n - 1) * s + m.window_len)))
    stop = (x.n - 1) * s + 1
    for t in range(m.window_len):
        full[:, t : t + stop : s] += m.weights[t].T @ x.data
    return FeatureMap(full[:, :n_out], x.frame_rate * s)


def transposed_backward(m: StridedLinearMap, x: FeatureMap, grad_out: np.ndarray) -> np.ndarray:
    s = m.stride
    n_out = x.n * s
    full = np.zeros((m.d_in, max(n_out, (x.n - 1) * s + m.window_len)))
    full[:, : grad_out.shape[1]] = grad_out
    gx = np.zeros_like(x.data)
    stop = (x.n - 1) * s + 1
    for t in range(m.window_len):
        g = full[:, t : t + stop : s]
        gx += m.weights[t] @ g
        m.grad_weights[t] += x.data @ g.T
    return gx


def mae_loss(a: FeatureMap, b: FeatureMap) -> tuple[float, np.ndarray]:
    """Mean absolute error and its (sub)gradient w.r.t. ``a`` (0 at ties)."""
    _check_same(a, b)
    diff = a.data - b.data
    size = diff.size
    if size == 0:
        return 0.0, np.zeros_like(diff)
    return float(np.abs(diff).sum() / size), np.sign(diff) / size


def mse(a: np.ndarray, b: np.ndarray) -> float:
    diff = a - b
    return float(np.mean(diff * diff)) if diff.size else 0.0


@dataclass
class TrainState:
    learning_rate: float
    step_count: int = 0
    rng_seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning rate must be positive")
        self.rng = np.random.default_rng(self.rng_seed)


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> None:
    """In-place ``p -= lr * g``; gradients are cleared afterwards."""
    if len(params) != len(grads):
        raise ConfigurationError("params/grads length mismatch")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ConfigurationError(f"param/grad shape mismatch {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError("non-finite gradient")
    for p, g in zip(params, grads):
        p -= lr * g
        g[...] = 0.0


def finite_diff_check(
    f: Callable[[], tuple[float, Sequence[np.ndarray]]],
    params: Sequence[np.ndarray],
    eps: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients against central differences.

    ``f()`` evaluates the loss at the current contents of ``params`` and
    returns ``(value, grads)`` with grads aligned to ``params``. Entries of
    ``params`` are perturbed in place and restored. Returns the worst
    ``|analytic - numeric| / (|numeric| + eps)`` over the probed coordinates.
    """
    _, analytic = f()
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in analytic]
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for p, g in zip(params, analytic):
        coords = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            coords = rng.choice(p.size, size=max_coords, replace=False)
        flat = p.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi, _ = f()
            flat[i] = orig - eps
            lo, _ = f()
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            err = abs(g.reshape(-1)[i] - numeric) / (abs(numeric) + eps)
            worst = max(worst, err)
    return worst


def checksum(arrays: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
