"""Bitrate, token budgets and codebook usage statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigurationError
from .mrvq import MrvqConfig


def bitrate(cfg: MrvqConfig, V: int) -> float:
    """Bits per second of the transmitted rows.

    Every non-terminal block sends its beta main-quantizer rows at its own
    rate; a pre-quantizer-only block sends its alpha rows at the base rate. A
    plain RVQ is the single-block case.
    """
    if V < 2:
        raise ConfigurationError("vocabulary must hold at least two codes")
    return bitrate_from_rows([(rate, rows, V) for rate, rows in cfg.transmitted_rows()])


def bitrate_from_rows(rows: list[tuple[Fraction, int, int]]) -> float:
    """Same as ``bitrate`` from (frame rate, row count, vocab) triples.

    Symbol rates are summed exactly per vocabulary before the single float
    multiply, so a one-vocabulary stream gives the identical float.
    """
    per_vocab: dict = {}
    for rate, count, vocab in rows:
        per_vocab[vocab] = per_vocab.get(vocab, Fraction(0)) + Fraction(rate) * count
    return float(sum(symbols * math.log2(vocab) for vocab, symbols in sorted(per_vocab.items())))


@dataclass
class TokenBudget:
    duration: Fraction
    ar_frames: int
    blocks: list = field(default_factory=list)  # (frame rate, rows, frames per row)

    @property
    def total_tokens(self) -> int:
        return sum(rows * frames for _, rows, frames in self.blocks)


def token_budget(duration_s, cfg: MrvqConfig) -> TokenBudget:
    """Frames per block for a clip of ``duration_s`` seconds; block 1 is the AR budget."""
    duration = Fraction(duration_s)
    if duration <= 0:
        raise ConfigurationError("duration must be positive")
    blocks = []
    for rate, rows in cfg.transmitted_rows():
        blocks.append((rate, rows, math.ceil(duration * rate)))
    return TokenBudget(duration, blocks[0][2], blocks)


def codebook_perplexity(usage) -> float:
    """exp(entropy) of the empirical code distribution, in [1, V]."""
    counts = np.asarray(usage, dtype=np.float64)
    if counts.size == 0 or counts.sum() <= 0:
        raise ConfigurationError("perplexity needs a non-empty usage histogram")
    p = counts[counts > 0] / counts.sum()
    return float(np.exp(-(p * np.log(p)).sum()))


def usage_histogram(ids, V: int) -> np.ndarray:
    return np.bincount(np.asarray(ids, dtype=np.int64), minlength=V)
