"""Vector quantizers with EMA codebooks and plain residual VQ stacks."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigurationError, CorruptTokenError, InsufficientDataError
from .numerics import FeatureMap, as_rate

TOKEN_DTYPE = np.uint16
EMA_EPS = 1e-10


@dataclass
class TokenRow:
    ids: np.ndarray
    frame_rate: Fraction

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim != 1:
            raise CorruptTokenError("token row must be 1-d")
        if ids.size and (ids.min() < 0 or ids.max() > np.iinfo(TOKEN_DTYPE).max):
            raise CorruptTokenError("token id outside the 16-bit range")
        self.ids = ids.astype(TOKEN_DTYPE)
        self.frame_rate = as_rate(self.frame_rate)

    def __len__(self):
        return self.ids.shape[0]

    def __eq__(self, other):
        if not isinstance(other, TokenRow):
            return NotImplemented
        return self.frame_rate == other.frame_rate and np.array_equal(self.ids, other.ids)


@dataclass
class Codebook:
    vectors: np.ndarray
    decay: float = 0.99
    ema_cluster_size: np.ndarray = None
    ema_embed_sum: np.ndarray = None
    usage_count: np.ndarray = None
    window_steps: int = 0
    dead_threshold: int = 2
    dead_window: int = 100

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ConfigurationError("codebook vectors must be a non-empty V x d matrix")
        if not 0.0 <= self.decay < 1.0:
            raise ConfigurationError(f"decay must lie in [0, 1), got {self.decay}")
        V, d = self.vectors.shape
        if self.ema_cluster_size is None:
            self.ema_cluster_size = np.zeros(V)
        if self.ema_embed_sum is None:
            self.ema_embed_sum = np.zeros((V, d))
        if self.usage_count is None:
            self.usage_count = np.zeros(V, dtype=np.int64)
        self.ema_cluster_size = np.asarray(self.ema_cluster_size, dtype=np.float64)
        self.ema_embed_sum = np.asarray(self.ema_embed_sum, dtype=np.float64)
        self.usage_count = np.asarray(self.usage_count, dtype=np.int64)

    @property
    def V(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def random(cls, V: int, d: int, rng: np.random.Generator, scale: float = 1.0, **kw) -> "Codebook":
        return cls(rng.normal(0.0, scale, size=(V, d)), **kw)

    def copy(self) -> "Codebook":
        return Codebook(
            self.vectors.copy(), self.decay, self.ema_cluster_size.copy(),
            self.ema_embed_sum.copy(), self.usage_count.copy(), self.window_steps,
            self.dead_threshold, self.dead_window,
        )


def _check_dim(cb: Codebook, x: FeatureMap) -> None:
    if x.d != cb.d:
        raise ConfigurationError(f"input dim {x.d} does not match codebook dim {cb.d}")


def nearest_ids(vectors: np.ndarray, frames: np.ndarray) -> np.ndarray:
    """Index of the closest codeword for each column of ``frames`` (d x n)."""
    if frames.shape[1] == 0:
        return np.zeros(0, dtype=np.int64)
    # ||x||^2 is constant per frame and dropped; argmin keeps the first minimum.
    scores = (vectors * vectors).sum(axis=1)[None, :] - 2.0 * (frames.T @ vectors.T)
    return np.argmin(scores, axis=1)


def nearest(cb: Codebook, x: FeatureMap) -> TokenRow:
    _check_dim(cb, x)
    return TokenRow(nearest_ids(cb.vectors, x.data), x.frame_rate)


def dequantize(cb: Codebook, t: TokenRow) -> FeatureMap:
    ids = t.ids.astype(np.int64)
    if ids.size and ids.max() >= cb.V:
        raise CorruptTokenError(f"token id {int(ids.max())} >= vocabulary {cb.V}")
    return FeatureMap(cb.vectors[ids].T, t.frame_rate)


def quantize_st(cb: Codebook, x: FeatureMap) -> tuple[TokenRow, FeatureMap, float]:
    """Nearest-codeword quantization.

    The backward pass treats the quantizer as the identity (straight-through);
    the commitment loss is the mean squared distance to the chosen codewords.
    """
    tokens = nearest(cb, x)
    q = dequantize(cb, tokens)
    diff = x.data - q.data
    commit = float(np.mean(diff * diff)) if diff.size else 0.0
    return tokens, q, commit


def ema_update(cb: Codebook, x: FeatureMap, assignments: TokenRow,
               rng: np.random.Generator | None = None) -> Codebook:
    """One EMA step of the codebook statistics, in place.

    Rows that received no frames this step keep their vector. Codes used fewer
    than ``dead_threshold`` times over ``dead_window`` updates are re-seeded
    from random frames of ``x`` (requires ``rng``).
    """
    _check_dim(cb, x)
    ids = assignments.ids.astype(np.int64)
    counts = np.bincount(ids, minlength=cb.V).astype(np.float64)
    sums = np.zeros_like(cb.ema_embed_sum)
    np.add.at(sums, ids, x.data.T)
    g = cb.decay
    cb.ema_cluster_size = g * cb.ema_cluster_size + (1.0 - g) * counts
    cb.ema_embed_sum = g * cb.ema_embed_sum + (1.0 - g) * sums
    hit = counts > 0
    cb.vectors[hit] = cb.ema_embed_sum[hit] / np.maximum(cb.ema_cluster_size[hit], EMA_EPS)[:, None]
    cb.usage_count += counts.astype(np.int64)
    cb.window_steps += 1
    if rng is not None and cb.window_steps >= cb.dead_window:
        dead = np.flatnonzero(cb.usage_count < cb.dead_threshold)
        if dead.size and x.n:
            picks = rng.integers(0, x.n, size=dead.size)
            cb.vectors[dead] = x.data[:, picks].T
            cb.ema_cluster_size[dead] = 0.0
            cb.ema_embed_sum[dead] = 0.0
        cb.usage_count[:] = 0
        cb.window_steps = 0
    return cb


def kmeans_init(cb: Codebook, sample: FeatureMap, iters: int, rng: np.random.Generator) -> Codebook:
    """Lloyd's k-means seeded with V distinct random frames, in place.

    EMA statistics are reset so the first ``ema_update`` yields batch means.
    """
    _check_dim(cb, sample)
    if sample.n < cb.V:
        raise InsufficientDataError(f"k-means needs at least V={cb.V} frames, got {sample.n}")
    frames = sample.data
    centroids = frames[:, rng.choice(sample.n, size=cb.V, replace=False)].T.copy()
    for _ in range(iters):
        ids = nearest_ids(centroids, frames)
        counts = np.bincount(ids, minlength=cb.V)
        sums = np.zeros_like(centroids)
        np.add.at(sums, ids, frames.T)
        hit = counts > 0
        new = centroids.copy()
        new[hit] = sums[hit] / counts[hit, None]
        if np.array_equal(new, centroids):
            break
        centroids = new
    cb.vectors = centroids
    cb.ema_cluster_size = np.zeros(cb.V)
    cb.ema_embed_sum = np.zeros_like(centroids)
    cb.usage_count = np.zeros(cb.V, dtype=np.int64)
    cb.window_steps = 0
    return cb


@dataclass
class RvqStack:
    layers: list

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ConfigurationError("an RVQ stack needs at least one layer")
        dims = {cb.d for cb in self.layers}
        if len(dims) != 1:
            raise ConfigurationError(f"RVQ layers disagree on latent dim: {sorted(dims)}")

    @property
    def L(self) -> int:
        return len(self.layers)

    @property
    def d(self) -> int:
        return self.layers[0].d

    @classmethod
    def random(cls, L: int, V: int, d: int, rng: np.random.Generator, **kw) -> "RvqStack":
        return cls([Codebook.random(V, d, rng, **kw) for _ in range(L)])

    def copy(self) -> "RvqStack":
        return RvqStack([cb.copy() for cb in self.layers])

    def arrays(self) -> list[np.ndarray]:
        return [cb.vectors for cb in self.layers]


@dataclass
class RvqResult:
    tokens: list
    h: FeatureMap
    residual: FeatureMap
    # Inputs seen by each layer; needed for EMA updates and commitment grads.
    layer_inputs: list = field(default_factory=list, repr=False)


def rvq_encode(stack: RvqStack, x0: FeatureMap, n_layers: int | None = None) -> RvqResult:
    """Residual quantization: each layer quantizes what the previous ones left."""
    if x0.d != stack.d:
        raise ConfigurationError(f"input dim {x0.d} does not match stack dim {stack.d}")
    n_layers = stack.L if n_layers is None else n_layers
    residual = x0.data
    h = np.zeros_like(x0.data)
    tokens, inputs = [], []
    for cb in stack.layers[:n_layers]:
        ids = nearest_ids(cb.vectors, residual)
        q = cb.vectors[ids].T
        inputs.append(residual)
        tokens.append(TokenRow(ids, x0.frame_rate))
        h = h + q
        residual = residual - q
    return RvqResult(tokens, FeatureMap(h, x0.frame_rate), FeatureMap(residual, x0.frame_rate), inputs)


def rvq_decode(stack: RvqStack, tokens: list) -> FeatureMap:
    """Sum of per-layer embeddings; a prefix of the layers may be given."""
    if len(tokens) > stack.L:
        raise CorruptTokenError(f"{len(tokens)} token rows for a {stack.L}-layer stack")
    if not tokens:
        raise CorruptTokenError("no token rows to decode")
    n = len(tokens[0])
    h = np.zeros((stack.d, n))
    for cb, row in zip(stack.layers, tokens):
        if len(row) != n:
            raise CorruptTokenError("token rows of unequal length")
        h = h + dequantize(cb, row).data
    return FeatureMap(h, tokens[0].frame_rate)


class Freeze:
    """Records quantizer outcomes so a loss can be re-evaluated with codes held fixed.

    In replay mode each stack outputs ``x + (h0 - x0)`` with the recorded
    offset, a smooth surrogate whose exact gradient is the straight-through
    gradient. Used for finite-difference checks only.
    """

    def __init__(self):
        self.records: dict = {}
        self.replay = False

    def key(self, stack, tag):
        return (id(stack), tag)


@dataclass
class StOutput:
    tokens: list
    value: np.ndarray
    commit: float
    commit_grad: np.ndarray
    layer_inputs: list


def rvq_st(stack: RvqStack, x: np.ndarray, frame_rate, freeze: Freeze | None = None,
           tag=None, n_layers: int | None = None) -> StOutput:
    """Training-path RVQ on a raw d x n array.

    Returns the quantized value (straight-through: d value / d x = I), the
    summed per-layer commitment loss and its gradient w.r.t. ``x``.
    """
    L = stack.L if n_layers is None else n_layers
    size = x.size
    if freeze is not None and freeze.replay:
        rec_tokens, offset, codewords = freeze.records[freeze.key(stack, tag)]
        residual = x
        commit, cgrad, inputs = 0.0, np.zeros_like(x), []
        for q in codewords:
            diff = residual - q
            inputs.append(residual)
            commit += float(np.mean(diff * diff)) if size else 0.0
            cgrad += 2.0 * diff / max(size, 1)
            residual = residual - q
        return StOutput(rec_tokens, x + offset, commit, cgrad, inputs)
    residual = x
    value = np.zeros_like(x)
    tokens, inputs, codewords = [], [], []
    commit, cgrad = 0.0, np.zeros_like(x)
    for cb in stack.layers[:L]:
        ids = nearest_ids(cb.vectors, residual)
        q = cb.vectors[ids].T
        diff = residual - q
        inputs.append(residual)
        codewords.append(q)
        tokens.append(TokenRow(ids, frame_rate))
        commit += float(np.mean(diff * diff)) if size else 0.0
        cgrad += 2.0 * diff / max(size, 1)
        value = value + q
        residual = residual - q
    if freeze is not None:
        freeze.records[freeze.key(stack, tag)] = (tokens, value - x, codewords)
    return StOutput(tokens, value, commit, cgrad, inputs)


def ema_update_stack(stack: RvqStack, out: StOutput, frame_rate, rng=None) -> None:
    for cb, inp, row in zip(stack.layers, out.layer_inputs, out.tokens):
        ema_update(cb, FeatureMap(inp, frame_rate), row, rng)


def kmeans_init_stack(stack: RvqStack, sample: FeatureMap, iters: int, rng: np.random.Generator) -> FeatureMap:
    """Initialise each layer on the residual left by the ones before; returns the final residual."""
    residual = sample
    for cb in stack.layers:
        kmeans_init(cb, residual, iters, rng)
        q = cb.vectors[nearest_ids(cb.vectors, residual.data)].T
        residual = residual.with_data(residual.data - q)
    return residual
