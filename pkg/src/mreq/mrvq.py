"""Multi-resolution residual VQ: nested LRVQ blocks inside an outer residual loop.

Each block quantizes the outer residual with a pre-quantizer at the base rate,
re-expresses that reconstruction at a lower rate (sub-encoder + main
quantizer), maps it back up (sub-decoder) and quantizes it again
(post-quantizer). The terminal block keeps only its pre-quantizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigurationError, CorruptTokenError
from .numerics import FeatureMap, StridedLinearMap, strided_apply, transposed_apply, as_rate
from .vq import (
    Freeze, RvqStack, StOutput, kmeans_init_stack, rvq_decode, rvq_encode, rvq_st,
)


@dataclass(frozen=True)
class LrvqConfig:
    k: int
    alpha: int
    beta: int
    gamma: int
    stride: int
    frame_rate: Fraction

    def __post_init__(self):
        object.__setattr__(self, "frame_rate", as_rate(self.frame_rate))
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigurationError(f"block {self.k}: layer counts must be non-negative")
        if self.alpha < 1:
            raise ConfigurationError(f"block {self.k}: alpha must be >= 1")
        if self.stride < 1:
            raise ConfigurationError(f"block {self.k}: stride must be >= 1")
        if self.degenerate:
            if self.stride != 1:
                raise ConfigurationError(f"block {self.k}: a pre-quantizer-only block must have stride 1")
        elif self.beta < 1 or self.gamma < 1:
            raise ConfigurationError(f"block {self.k}: beta and gamma must both be >= 1 or both 0")

    @property
    def degenerate(self) -> bool:
        return self.beta == 0 and self.gamma == 0

    @property
    def base_rate(self) -> Fraction:
        return self.frame_rate * self.stride

    @property
    def triplet(self) -> str:
        return f"{self.alpha}-{self.beta}-{self.gamma}"


@dataclass(frozen=True)
class MrvqConfig:
    blocks: tuple
    s0: Fraction

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "s0", as_rate(self.s0))
        if not self.blocks:
            raise ConfigurationError("an MRVQ module needs at least one block")
        for i, b in enumerate(self.blocks, start=1):
            if b.k != i:
                raise ConfigurationError(f"block indices must run 1..K, got {b.k} at position {i}")
            if b.base_rate != self.s0:
                raise ConfigurationError(
                    f"block {b.k}: stride {b.stride} x rate {b.frame_rate} != base rate {self.s0}")

    @property
    def K(self) -> int:
        return len(self.blocks)

    @property
    def alphas(self) -> tuple:
        return tuple(b.alpha for b in self.blocks)

    @property
    def betas(self) -> tuple:
        return tuple(b.beta for b in self.blocks)

    @property
    def gammas(self) -> tuple:
        return tuple(b.gamma for b in self.blocks)

    def check_hierarchy(self) -> None:
        """Strict checks for a published-style hierarchy."""
        rates = [b.frame_rate for b in self.blocks]
        if any(r1 >= r2 for r1, r2 in zip(rates, rates[1:])):
            raise ConfigurationError(f"frame rates must be strictly increasing, got {rates}")
        if rates[-1] != self.s0:
            raise ConfigurationError("the last block must run at the base rate")
        if not self.blocks[-1].degenerate:
            raise ConfigurationError("the last block must be pre-quantizer only")
        if any(b.degenerate for b in self.blocks[:-1]):
            raise ConfigurationError("only the last block may be pre-quantizer only")

    def post_depths(self) -> list[int]:
        """Cumulative post-quantization depth after each block.

        A pre-quantizer-only block contributes its alpha layers.
        """
        out, total = [], 0
        for b in self.blocks:
            total += b.alpha if b.degenerate else b.gamma
            out.append(total)
        return out

    def transmitted_rows(self) -> list[tuple[Fraction, int]]:
        """(frame rate, row count) of the token rows sent over the wire."""
        return [(b.frame_rate, b.alpha if b.degenerate else b.beta) for b in self.blocks]


def _cfg(s0, rows) -> MrvqConfig:
    s0 = Fraction(s0)
    blocks = [
        LrvqConfig(k, a, b, c, stride, s0 / stride)
        for k, (a, b, c, stride) in enumerate(rows, start=1)
    ]
    return MrvqConfig(tuple(blocks), s0)


TABLES = {
    "default": [(1, 6, 1, 6), (2, 6, 2, 3), (2, 4, 2, 2), (3, 0, 0, 1)],
    "two-level": [(1, 6, 1, 6), (7, 0, 0, 1)],
    "three-level": [(1, 6, 1, 6), (2, 6, 2, 3), (5, 0, 0, 1)],
    # Triplets for the 4 Hz hierarchy are not published; chosen to keep 8 post layers.
    "with-4hz": [(1, 6, 1, 12), (1, 6, 1, 6), (2, 6, 2, 3), (2, 4, 2, 2), (2, 0, 0, 1)],
    "half-beta": [(1, 3, 1, 6), (2, 3, 2, 3), (2, 2, 2, 2), (3, 0, 0, 1)],
}


def config_from_table(name: str, s0=48) -> MrvqConfig:
    try:
        rows = TABLES[name]
    except KeyError:
        raise ConfigurationError(f"unknown hierarchy {name!r}; choose from {sorted(TABLES)}") from None
    cfg = _cfg(s0, rows)
    cfg.check_hierarchy()
    return cfg


def rvq_config(L: int, s0=48) -> MrvqConfig:
    """A plain L-layer RVQ expressed as a single pre-quantizer-only block."""
    return _cfg(s0, [(L, 0, 0, 1)])


@dataclass
class LrvqBlock:
    config: LrvqConfig
    preq: RvqStack
    sub_enc: StridedLinearMap | None = None
    quant: RvqStack | None = None
    sub_dec: StridedLinearMap | None = None
    postq: RvqStack | None = None

    def __post_init__(self):
        d = self.preq.d
        if self.preq.L != self.config.alpha:
            raise ConfigurationError(f"block {self.config.k}: PreQ has {self.preq.L} layers, alpha={self.config.alpha}")
        if self.config.degenerate:
            if any(p is not None for p in (self.sub_enc, self.quant, self.sub_dec, self.postq)):
                raise ConfigurationError(f"block {self.config.k}: pre-quantizer-only block carries extra modules")
            return
        if None in (self.sub_enc, self.quant, self.sub_dec, self.postq):
            raise ConfigurationError(f"block {self.config.k}: missing sub-module")
        if self.quant.L != self.config.beta or self.postq.L != self.config.gamma:
            raise ConfigurationError(f"block {self.config.k}: stack depths disagree with {self.config.triplet}")
        for m in (self.sub_enc, self.sub_dec):
            if m.stride != self.config.stride or m.d_in != d or m.d_out != d:
                raise ConfigurationError(f"block {self.config.k}: sub-encoder/decoder shape mismatch")
        if self.quant.d != d or self.postq.d != d:
            raise ConfigurationError(f"block {self.config.k}: stacks must share latent dim")

    @property
    def degenerate(self) -> bool:
        return self.config.degenerate

    @property
    def d(self) -> int:
        return self.preq.d

    def stacks(self) -> list[RvqStack]:
        return [s for s in (self.preq, self.quant, self.postq) if s is not None]

    def maps(self) -> list[StridedLinearMap]:
        return [m for m in (self.sub_enc, self.sub_dec) if m is not None]

    def copy(self) -> "LrvqBlock":
        cp = lambda o: None if o is None else o.copy()  # noqa: E731
        return LrvqBlock(self.config, self.preq.copy(), cp(self.sub_enc), cp(self.quant),
                         cp(self.sub_dec), cp(self.postq))


@dataclass
class MrvqModule:
    blocks: list
    s0: Fraction

    def __post_init__(self):
        self.s0 = as_rate(self.s0)
        if not self.blocks:
            raise ConfigurationError("an MRVQ module needs at least one block")
        if len({b.d for b in self.blocks}) != 1:
            raise ConfigurationError("all blocks must share the latent dim")
        for b in self.blocks:
            if b.config.base_rate != self.s0:
                raise ConfigurationError(f"block {b.config.k} does not run at base rate {self.s0}")

    @property
    def K(self) -> int:
        return len(self.blocks)

    @property
    def d(self) -> int:
        return self.blocks[0].d

    @property
    def V(self) -> int:
        return self.blocks[0].preq.layers[0].V

    @property
    def config(self) -> MrvqConfig:
        return MrvqConfig(tuple(b.config for b in self.blocks), self.s0)

    def maps(self) -> list[StridedLinearMap]:
        return [m for b in self.blocks for m in b.maps()]

    def stacks(self) -> list[RvqStack]:
        return [s for b in self.blocks for s in b.stacks()]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for b in self.blocks:
            for s in b.stacks():
                out.extend(s.arrays())
            for m in b.maps():
                out.extend(m.params())
        return out

    def copy(self) -> "MrvqModule":
        return MrvqModule([b.copy() for b in self.blocks], self.s0)


def build_mrvq(cfg: MrvqConfig, V: int, d: int, rng: np.random.Generator, **codebook_kw) -> MrvqModule:
    """Randomly initialised module for ``cfg``; call ``mrvq_kmeans_init`` before use."""
    blocks = []
    for c in cfg.blocks:
        preq = RvqStack.random(c.alpha, V, d, rng, **codebook_kw)
        if c.degenerate:
            blocks.append(LrvqBlock(c, preq))
            continue
        w = 2 * c.stride
        enc = StridedLinearMap.init(d, d, c.stride, rng, w)
        dec = StridedLinearMap.init(d, d, c.stride, rng, w, scale=1.0 / np.sqrt(2 * d))
        blocks.append(LrvqBlock(
            c, preq, enc, RvqStack.random(c.beta, V, d, rng, **codebook_kw),
            dec, RvqStack.random(c.gamma, V, d, rng, **codebook_kw),
        ))
    return MrvqModule(blocks, cfg.s0)


@dataclass
class LrvqCodes:
    k: int
    a: list
    b: list
    c: list


@dataclass
class LrvqTrace:
    """Every intermediate of one block pass, kept for the backward pass."""

    x: np.ndarray
    a: StOutput
    e: FeatureMap | None = None
    b: StOutput | None = None
    u: np.ndarray | None = None
    c: StOutput | None = None
    # HSR target: equal to a.value but treated as a constant by the backward pass
    a_target: np.ndarray | None = None

    @property
    def a_tilde(self) -> np.ndarray:
        return self.a.value

    @property
    def c_tilde(self) -> np.ndarray:
        return self.a.value if self.c is None else self.c.value


def lrvq_run(block: LrvqBlock, x: np.ndarray, s0: Fraction, freeze: Freeze | None = None) -> LrvqTrace:
    k = block.config.k
    tr = LrvqTrace(x, rvq_st(block.preq, x, s0, freeze, (k, "preq")))
    if block.degenerate:
        return tr
    tr.a_target = tr.a.value
    if freeze is not None:
        key = freeze.key(block.preq, (k, "hsr-target"))
        if freeze.replay:
            tr.a_target = freeze.records[key]
        else:
            freeze.records[key] = tr.a.value.copy()
    n = x.shape[1]
    tr.e = strided_apply(block.sub_enc, FeatureMap(tr.a.value, s0))
    tr.b = rvq_st(block.quant, tr.e.data, tr.e.frame_rate, freeze, (k, "quant"))
    up = transposed_apply(block.sub_dec, FeatureMap(tr.b.value, tr.e.frame_rate))
    tr.u = up.data[:, :n]
    tr.c = rvq_st(block.postq, tr.u, s0, freeze, (k, "postq"))
    return tr


def codes_of(block: LrvqBlock, tr: LrvqTrace) -> LrvqCodes:
    a = tr.a.tokens
    if block.degenerate:
        return LrvqCodes(block.config.k, a, a, a)
    return LrvqCodes(block.config.k, a, tr.b.tokens, tr.c.tokens)


def lrvq_forward(block: LrvqBlock, x: FeatureMap) -> tuple[LrvqCodes, FeatureMap]:
    if x.frame_rate != block.config.base_rate:
        raise ConfigurationError(f"block {block.config.k} expects {block.config.base_rate} Hz input, got {x.frame_rate}")
    if x.d != block.d:
        raise ConfigurationError(f"block {block.config.k} expects dim {block.d}, got {x.d}")
    tr = lrvq_run(block, x.data, x.frame_rate)
    return codes_of(block, tr), FeatureMap(tr.c_tilde, x.frame_rate)


@dataclass
class MrvqOutput:
    codes: list
    h: FeatureMap
    residual: FeatureMap
    partials: list
    traces: list = field(default_factory=list, repr=False)


def mrvq_run(m: MrvqModule, x0: np.ndarray, freeze: Freeze | None = None) -> MrvqOutput:
    x = x0
    h = np.zeros_like(x0)
    codes, partials, traces = [], [], []
    for block in m.blocks:
        tr = lrvq_run(block, x, m.s0, freeze)
        c_tilde = tr.c_tilde
        h = h + c_tilde
        x = x - c_tilde
        traces.append(tr)
        codes.append(codes_of(block, tr))
        partials.append(FeatureMap(h, m.s0))
    return MrvqOutput(codes, FeatureMap(h, m.s0), FeatureMap(x, m.s0), partials, traces)


def mrvq_forward(m: MrvqModule, x0: FeatureMap) -> MrvqOutput:
    """Outer residual loop; ``partials[s-1]`` is the running sum after block s."""
    if x0.frame_rate != m.s0:
        raise ConfigurationError(f"MRVQ expects {m.s0} Hz input, got {x0.frame_rate}")
    if x0.d != m.d:
        raise ConfigurationError(f"MRVQ expects dim {m.d}, got {x0.d}")
    return mrvq_run(m, x0.data)


def transmitted(codes: list) -> list:
    """The rows that go on the wire: b rows per block (a rows for a degenerate block)."""
    return [c.b for c in codes]


def block_decode(block: LrvqBlock, rows: list, n0: int) -> FeatureMap:
    """Reconstruction of one block from its transmitted rows."""
    s0 = block.config.base_rate
    if block.degenerate:
        if len(rows) != block.config.alpha:
            raise CorruptTokenError(f"block {block.config.k}: expected {block.config.alpha} rows, got {len(rows)}")
        return rvq_decode(block.preq, rows)
    if len(rows) != block.config.beta:
        raise CorruptTokenError(f"block {block.config.k}: expected {block.config.beta} rows, got {len(rows)}")
    b_tilde = rvq_decode(block.quant, rows)
    u = transposed_apply(block.sub_dec, b_tilde).data[:, :n0]
    return rvq_encode(block.postq, FeatureMap(u, s0)).h


def mrvq_decode_from_b(m: MrvqModule, b_rows: list, n0: int | None = None) -> FeatureMap:
    """Reconstruct h from the transmitted rows only."""
    if len(b_rows) != m.K:
        raise CorruptTokenError(f"expected token rows for {m.K} blocks, got {len(b_rows)}")
    if n0 is None:
        last = m.blocks[-1]
        n0 = len(b_rows[-1][0]) * last.config.stride
    h = np.zeros((m.d, n0))
    for block, rows in zip(m.blocks, b_rows):
        if not rows:
            raise CorruptTokenError(f"block {block.config.k}: no rows")
        expected = -(-n0 // block.config.stride)
        if any(len(r) != expected for r in rows):
            raise CorruptTokenError(f"block {block.config.k}: rows must hold {expected} frames")
        h = h + block_decode(block, rows, n0).data
    return FeatureMap(h, m.s0)


def mrvq_kmeans_init(m: MrvqModule, x0: FeatureMap, iters: int, rng: np.random.Generator) -> None:
    """Initialise every codebook on the data that actually reaches it."""
    x = x0
    for block in m.blocks:
        kmeans_init_stack(block.preq, x, iters, rng)
        a_tilde = rvq_encode(block.preq, x).h
        if block.degenerate:
            c_tilde = a_tilde
        else:
            e = strided_apply(block.sub_enc, a_tilde)
            kmeans_init_stack(block.quant, e, iters, rng)
            b_tilde = rvq_encode(block.quant, e).h
            u = FeatureMap(transposed_apply(block.sub_dec, b_tilde).data[:, : x.n], x.frame_rate)
            kmeans_init_stack(block.postq, u, iters, rng)
            c_tilde = rvq_encode(block.postq, u).h
        x = x.with_data(x.data - c_tilde.data)


def frames_at(n0: int, stride: int) -> int:
    return -(-n0 // stride)

