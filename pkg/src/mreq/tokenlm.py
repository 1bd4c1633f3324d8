"""Hierarchical token generation: delayed AR over the lowest-rate grid, then
NAR refinement block by block through frozen MRVQ sub-modules.

Predictors are pluggable. ``CountPredictor`` is an add-one smoothed bigram
model; ``OraclePredictor`` replays known tokens and is used to check that the
pipeline routes every sub-module correctly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigurationError, CorruptTokenError
from .mrvq import MrvqModule, MrvqOutput, block_decode, mrvq_decode_from_b
from .numerics import FeatureMap, as_rate, strided_apply, transposed_apply
from .vq import TokenRow, dequantize, rvq_decode, rvq_encode

PROB_TOL = 1e-9


@dataclass
class TokenGrid:
    """Equal-length token rows of one block (shape rows x frames)."""

    rows: np.ndarray
    frame_rate: Fraction
    k: int = 1

    def __post_init__(self):
        rows = np.asarray(self.rows)
        if rows.ndim != 2:
            raise CorruptTokenError("token grid must be 2-d (rows x frames)")
        self.rows = rows.astype(np.int64)
        self.frame_rate = as_rate(self.frame_rate)

    @property
    def beta(self) -> int:
        return self.rows.shape[0]

    @property
    def n(self) -> int:
        return self.rows.shape[1]

    def token_rows(self) -> list:
        return [TokenRow(r, self.frame_rate) for r in self.rows]

    @classmethod
    def from_rows(cls, rows: list, k: int = 1) -> "TokenGrid":
        return cls(np.stack([r.ids for r in rows]), rows[0].frame_rate, k)

    def __eq__(self, other):
        if not isinstance(other, TokenGrid):
            return NotImplemented
        return (self.k == other.k and self.frame_rate == other.frame_rate
                and np.array_equal(self.rows, other.rows))


@dataclass
class DelayedGrid:
    rows: np.ndarray
    pad_id: int
    frame_rate: Fraction
    k: int = 1

    @property
    def beta(self) -> int:
        return self.rows.shape[0]


def apply_delay(g: TokenGrid, pad_id: int) -> DelayedGrid:
    """Shift row r right by r frames; the triangular margins hold ``pad_id``."""
    beta, n = g.rows.shape
    out = np.full((beta, n + beta - 1), pad_id, dtype=np.int64)
    for r in range(beta):
        out[r, r : r + n] = g.rows[r]
    return DelayedGrid(out, pad_id, g.frame_rate, g.k)


def remove_delay(dg: DelayedGrid) -> TokenGrid:
    beta, total = dg.rows.shape
    n = total - beta + 1
    if n < 0:
        raise CorruptTokenError("delayed grid shorter than its row count")
    rows = np.empty((beta, n), dtype=np.int64)
    for r in range(beta):
        body = dg.rows[r, r : r + n]
        margin = np.concatenate([dg.rows[r, :r], dg.rows[r, r + n :]])
        if np.any(margin != dg.pad_id):
            raise CorruptTokenError(f"row {r}: non-pad id inside the delay margin")
        if np.any(body == dg.pad_id):
            raise CorruptTokenError(f"row {r}: pad id outside the delay margin")
        rows[r] = body
    return TokenGrid(rows, dg.frame_rate, dg.k)


@dataclass
class Conditioning:
    symbols: tuple = ()
    prompt: TokenGrid | None = None
    alphabet: int = 32

    def __post_init__(self):
        self.symbols = tuple(int(s) for s in self.symbols)
        if any(not 0 <= s < self.alphabet for s in self.symbols):
            raise ConfigurationError(f"conditioning symbols must lie in [0, {self.alphabet})")

    @classmethod
    def from_text(cls, text: str, alphabet: int = 32, prompt: TokenGrid | None = None) -> "Conditioning":
        return cls(tuple(ord(ch) % alphabet for ch in text), prompt, alphabet)


class Predictor:
    """Next-token distributions over V real ids plus the pad id V."""

    V: int

    def ar_probs(self, cond: Conditioning, prefix: np.ndarray) -> np.ndarray:
        """Distribution for every row of the next delayed column; shape (rows, V + 1).

        ``prefix`` holds the delayed columns emitted so far, prompt included.
        """
        raise NotImplementedError

    def nar_probs(self, cond: Conditioning, accumulated: FeatureMap, prev_ids: np.ndarray,
                  layer: int) -> np.ndarray:
        """Per-frame distributions for pre-quantizer layer ``layer``; shape (frames, V + 1)."""
        raise NotImplementedError


def _one_hot(ids: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(ids), width))
    out[np.arange(len(ids)), ids] = 1.0
    return out


class OraclePredictor(Predictor):
    """Replays a known first-block grid and known pre-quantizer rows."""

    def __init__(self, V: int, ar_truth: TokenGrid, nar_truth: dict):
        self.V = V
        self.ar_truth = ar_truth
        self.nar_truth = {int(k): np.asarray(v, dtype=np.int64) for k, v in nar_truth.items()}

    @classmethod
    def from_forward(cls, m: MrvqModule, out: MrvqOutput) -> "OraclePredictor":
        """Ground truth taken from ``mrvq_forward``; NAR rows keyed by global layer id."""
        nar, alphas = {}, [b.config.alpha for b in m.blocks]
        for k in range(2, m.K + 1):
            for l, row in enumerate(out.codes[k - 1].a, start=1):
                nar[layer_id(k, l, alphas)] = row.ids
        return cls(m.V, TokenGrid.from_rows(out.codes[0].b, 1), nar)

    def ar_probs(self, cond, prefix):
        rows = self.ar_truth.rows
        if cond.prompt is not None and cond.prompt.n:
            rows = np.concatenate([cond.prompt.rows, rows], axis=1)
        delayed = apply_delay(TokenGrid(rows, self.ar_truth.frame_rate), self.V).rows
        t = prefix.shape[1]
        if t >= delayed.shape[1]:
            raise CorruptTokenError("oracle asked past the end of its ground truth")
        return _one_hot(delayed[:, t], self.V + 1)

    def nar_probs(self, cond, accumulated, prev_ids, layer):
        try:
            ids = self.nar_truth[layer]
        except KeyError:
            raise CorruptTokenError(f"oracle has no ground truth for layer {layer}") from None
        return _one_hot(ids, self.V + 1)


class CountPredictor(Predictor):
    """Add-one smoothed bigram model.

    AR: the context is the whole previous delayed column; each row's next id
    is counted against it. Unseen contexts fall back to per-row unigrams.
    NAR: per layer id, a bigram from the previous row's id at the same frame.
    """

    def __init__(self, V: int):
        self.V = V
        self.ar_counts: dict = {}
        self.ar_unigram: np.ndarray | None = None
        self.nar_counts: dict = {}

    def _start_context(self, cond: Conditioning, beta: int) -> tuple:
        last = cond.symbols[-1] if cond.symbols else -1
        return ("start", last, beta)

    def _context(self, cond: Conditioning, prefix: np.ndarray) -> tuple:
        if prefix.shape[1] == 0:
            return self._start_context(cond, prefix.shape[0])
        return tuple(int(v) for v in prefix[:, -1])

    def fit_ar(self, grids: list, conds: list | None = None) -> "CountPredictor":
        conds = [Conditioning()] * len(grids) if conds is None else conds
        for grid, cond in zip(grids, conds):
            rows = grid.rows
            if cond.prompt is not None and cond.prompt.n:
                rows = np.concatenate([cond.prompt.rows, rows], axis=1)
            delayed = apply_delay(TokenGrid(rows, grid.frame_rate), self.V).rows
            beta = delayed.shape[0]
            if self.ar_unigram is None:
                self.ar_unigram = np.zeros((beta, self.V))
            for t in range(delayed.shape[1]):
                ctx = self._context(cond, delayed[:, :t])
                table = self.ar_counts.setdefault(ctx, np.zeros((beta, self.V)))
                col = delayed[:, t]
                real = col < self.V
                table[np.flatnonzero(real), col[real]] += 1
                self.ar_unigram[np.flatnonzero(real), col[real]] += 1
        return self

    def fit_nar(self, m: MrvqModule, outputs: list) -> "CountPredictor":
        alphas = [b.config.alpha for b in m.blocks]
        for out in outputs:
            for k in range(2, m.K + 1):
                prev_rows = out.codes[k - 2].c
                prev = prev_rows[-1].ids.astype(np.int64)
                for l, row in enumerate(out.codes[k - 1].a, start=1):
                    ids = row.ids.astype(np.int64)
                    table = self.nar_counts.setdefault(layer_id(k, l, alphas), np.zeros((self.V, self.V)))
                    np.add.at(table, (prev, ids), 1)
                    prev = ids
        return self

    def _normalise(self, counts: np.ndarray) -> np.ndarray:
        probs = np.zeros((counts.shape[0], self.V + 1))
        smoothed = counts + 1.0
        probs[:, : self.V] = smoothed / smoothed.sum(axis=1, keepdims=True)
        return probs

    def ar_probs(self, cond, prefix):
        table = self.ar_counts.get(self._context(cond, prefix))
        if table is None:
            table = self.ar_unigram if self.ar_unigram is not None else np.zeros((prefix.shape[0], self.V))
        return self._normalise(table)

    def nar_probs(self, cond, accumulated, prev_ids, layer):
        table = self.nar_counts.get(layer)
        if table is None:
            table = np.zeros((self.V, self.V))
        return self._normalise(table[np.asarray(prev_ids, dtype=np.int64)])


def _check_probs(probs: np.ndarray, rows: int, V: int) -> None:
    if probs.shape != (rows, V + 1):
        raise CorruptTokenError(f"predictor returned shape {probs.shape}, expected {(rows, V + 1)}")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > PROB_TOL):
        raise CorruptTokenError("predictor output is not a probability distribution")


def _pick(probs: np.ndarray, greedy: bool, temperature: float, rng: np.random.Generator) -> np.ndarray:
    if greedy:
        return np.argmax(probs, axis=1)
    logits = np.log(np.maximum(probs, 1e-300)) / temperature
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits) * (probs > 0)
    p /= p.sum(axis=1, keepdims=True)
    u = rng.random(len(p))[:, None]
    return np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), p.shape[1] - 1)


@dataclass
class ArStats:
    steps: int = 0


def ar_generate(pred: Predictor, cond: Conditioning, frames: int, beta: int, frame_rate,
                greedy: bool = True, temperature: float = 1.0, seed: int = 0,
                stats: ArStats | None = None) -> TokenGrid:
    """Generate a first-block grid of ``frames`` frames, one delayed column per step."""
    V = pred.V
    rng = np.random.default_rng(seed)
    prompt = cond.prompt
    p = 0 if prompt is None else prompt.n
    if prompt is not None and p and prompt.beta != beta:
        raise ConfigurationError(f"prompt has {prompt.beta} rows, expected {beta}")
    total = p + frames
    known = np.full((beta, total), -1, dtype=np.int64)
    if p:
        known[:, :p] = prompt.rows
    delayed = apply_delay(TokenGrid(np.where(known < 0, 0, known), frame_rate), V).rows
    steps = total + beta - 1 if frames else 0
    for t in range(steps):
        cells = [(r, t - r) for r in range(beta)]
        if all(0 <= j < p or j < 0 or j >= total for _, j in cells):
            continue
        probs = pred.ar_probs(cond, delayed[:, :t])
        _check_probs(probs, beta, V)
        choice = _pick(probs, greedy, temperature, rng)
        if stats is not None:
            stats.steps += 1
        for r, j in cells:
            if p <= j < total:
                if choice[r] >= V:
                    raise CorruptTokenError(f"predictor emitted pad/invalid id {choice[r]} at row {r}, frame {j}")
                delayed[r, t] = choice[r]
    grid = remove_delay(DelayedGrid(delayed, V, as_rate(frame_rate)))
    return TokenGrid(grid.rows[:, p:], frame_rate, 1)


def layer_id(k_next: int, l: int, alphas) -> int:
    """Global pre-quantizer layer index: sum of alphas of earlier blocks plus ``l``."""
    if k_next < 1 or k_next > len(alphas):
        raise ConfigurationError(f"block {k_next} out of range 1..{len(alphas)}")
    if not 1 <= l <= alphas[k_next - 1]:
        raise ConfigurationError(f"layer {l} out of range 1..{alphas[k_next - 1]} for block {k_next}")
    return sum(alphas[: k_next - 1]) + l


@dataclass
class NarState:
    """Running sum of reconstructed block outputs (prompt feature kept alongside)."""

    accumulated: np.ndarray
    n0: int
    applications: int = 0
    c_rows: list = field(default_factory=list)
    a_rows: list = field(default_factory=list)


def nar_step(m: MrvqModule, pred: Predictor, cond: Conditioning, b_k: TokenGrid,
             state: NarState | None = None) -> tuple[TokenGrid, NarState]:
    """Refine block k's rows into block k+1's transmitted rows.

    1. c_k = PostQ(D_k(b_k)), added to the accumulated feature.
    2. alpha_{k+1} predictor passes give the pre-quantizer rows of block k+1,
       each conditioned on the accumulated feature so far.
    3. b_{k+1} = Quant(E_{k+1}(sum of those rows' embeddings)).
    All MRVQ parameters are only read.
    """
    k = b_k.k
    if not 1 <= k < m.K:
        raise ConfigurationError(f"nar_step needs 1 <= k < K={m.K}, got {k}")
    block, nxt = m.blocks[k - 1], m.blocks[k]
    if block.degenerate:
        raise ConfigurationError(f"block {k} has no sub-decoder/post-quantizer")
    n0 = b_k.n * block.config.stride if state is None else state.n0
    if state is None:
        state = NarState(np.zeros((m.d, n0)), n0)
    next_rate = nxt.config.frame_rate
    if b_k.n == 0 or n0 == 0:
        rows = nxt.config.alpha if nxt.degenerate else nxt.config.beta
        return TokenGrid(np.zeros((rows, 0), dtype=np.int64), next_rate, k + 1), state

    # step 1
    b_tilde = rvq_decode(block.quant, b_k.token_rows())
    u = FeatureMap(transposed_apply(block.sub_dec, b_tilde).data[:, :n0], m.s0)
    c_res = rvq_encode(block.postq, u)
    state.accumulated = state.accumulated + c_res.h.data
    state.c_rows = c_res.tokens

    # step 2
    alphas = [b.config.alpha for b in m.blocks]
    a_tilde = np.zeros((m.d, n0))
    prev = c_res.tokens[-1].ids.astype(np.int64)
    a_rows = []
    for l, cb in enumerate(nxt.preq.layers, start=1):
        feature = FeatureMap(state.accumulated + a_tilde, m.s0)
        probs = pred.nar_probs(cond, feature, prev, layer_id(k + 1, l, alphas))
        _check_probs(probs, n0, m.V)
        state.applications += 1
        ids = np.argmax(probs, axis=1)
        if np.any(ids >= cb.V):
            raise CorruptTokenError(f"predictor emitted invalid id for layer {l} of block {k + 1}")
        row = TokenRow(ids, m.s0)
        a_rows.append(row)
        a_tilde = a_tilde + dequantize(cb, row).data
        prev = ids
    state.a_rows = a_rows

    # step 3
    if nxt.degenerate:
        return TokenGrid.from_rows(a_rows, k + 1), state
    e = strided_apply(nxt.sub_enc, FeatureMap(a_tilde, m.s0))
    b_next = rvq_encode(nxt.quant, e).tokens
    return TokenGrid.from_rows(b_next, k + 1), state


@dataclass
class NarResult:
    grids: list
    h: FeatureMap
    applications: int


def nar_refine_all(m: MrvqModule, pred: Predictor, cond: Conditioning, b1: TokenGrid,
                   n0: int | None = None) -> NarResult:
    """Chain ``nar_step`` from block 1 to K and decode h from the transmitted rows."""
    grids = [b1]
    first = m.blocks[0]
    n0 = b1.n * first.config.stride if n0 is None else n0
    if m.K == 1:
        h = block_decode(first, b1.token_rows(), n0) if b1.n else FeatureMap.zeros(m.d, 0, m.s0)
        return NarResult(grids, h, 0)
    state = NarState(np.zeros((m.d, n0)), n0)
    g = b1
    for _ in range(1, m.K):
        g, state = nar_step(m, pred, cond, g, state)
        grids.append(g)
    if n0 == 0:
        return NarResult(grids, FeatureMap.zeros(m.d, 0, m.s0), state.applications)
    h = mrvq_decode_from_b(m, [gr.token_rows() for gr in grids], n0)
    return NarResult(grids, h, state.applications)


def ar_steps(frames: int, beta: int) -> int:
    """Predictor calls for ``frames`` frames of a ``beta``-row delayed grid."""
    return frames + beta - 1 if frames else 0
