"""Flat ``key = value`` run configuration.

Block tables use indexed keys (``block.1.alpha = 1``). When any ``block.*``
key is present the named ``module`` table is ignored and the explicit table is
used instead. Unknown keys, duplicate keys and malformed values are rejected.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .distill import DistillPlan
from .errors import ConfigurationError
from .mrvq import TABLES, LrvqConfig, MrvqConfig, config_from_table, rvq_config
from .teacher import SyntheticSpec


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _pairs(text: str) -> tuple:
    out = []
    for item in text.split(","):
        s, t = item.split(":")
        out.append((int(s), int(t)))
    return tuple(out)


def _opt_float(text: str):
    return None if text.lower() == "none" else float(text)


# key -> (parser, default)
SCHEMA = {
    "module": (str, "default"),
    "vocab": (int, 1024),
    "dim": (int, 16),
    "base_rate": (Fraction, Fraction(48)),
    "sample_rate": (int, 2400),
    "enc.strides": (_ints, (10, 5)),
    "enc.hidden": (int, 8),
    "teacher_layers": (int, 8),
    "seed": (int, 0),
    "corpus.clips": (int, 64),
    "corpus.duration": (float, 1.0),
    "corpus.tones": (int, 3),
    "corpus.freq_min": (float, 20.0),
    "corpus.freq_max": (float, 300.0),
    "corpus.am_min": (float, 0.2),
    "corpus.am_max": (float, 2.0),
    "corpus.snap_hz": (_opt_float, 48.0),
    "corpus.seed": (int, 100),
    "teacher.steps": (int, 2000),
    "teacher.lr": (float, 0.5),
    "teacher.batch": (int, 8),
    "post.steps": (int, 2000),
    "post.lr": (float, 0.01),
    "post.batch": (int, 8),
    "post.from_scratch": (_bool, False),
    "fld.pairs": (_pairs, None),
    "fld.weights": (_floats, None),
    "hsr.weights": (_floats, None),
    "commit_weight": (float, 0.25),
    "ema.decay": (float, 0.99),
    "ema.dead_threshold": (int, 2),
    "ema.dead_window": (int, 100),
    "kmeans.iters": (int, 10),
    "quantizer_dropout": (_bool, False),
}

BLOCK_FIELDS = ("alpha", "beta", "gamma", "stride")
_BLOCK_KEY = re.compile(r"^block\.(\d+)\.(alpha|beta|gamma|stride)$")


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    blocks: dict = field(default_factory=dict)  # index -> {field: int}

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise KeyError(key)
        return self.values.get(key, SCHEMA[key][1])

    def mrvq(self) -> MrvqConfig:
        s0 = self["base_rate"]
        if self.blocks:
            idx = sorted(self.blocks)
            if idx != list(range(1, len(idx) + 1)):
                raise ConfigurationError(f"block indices must run 1..K without gaps, got {idx}")
            rows = []
            rate = s0
            for i in reversed(idx):
                b = self.blocks[i]
                missing = [f for f in BLOCK_FIELDS if f not in b and not (f == "stride" and i == idx[-1])]
                if missing:
                    raise ConfigurationError(f"block {i} missing {missing}")
                stride = b.get("stride", 1)
                rows.append((i, b["alpha"], b["beta"], b["gamma"], stride, rate / stride))
            rows.reverse()
            cfg = MrvqConfig(tuple(LrvqConfig(*r) for r in rows), s0)
        else:
            name = self["module"]
            if name.startswith("rvq-"):
                cfg = rvq_config(int(name[4:]), s0)
            elif name in TABLES:
                cfg = config_from_table(name, s0)
            else:
                raise ConfigurationError(f"unknown module table {name!r}; known: {sorted(TABLES)} or rvq-L")
        cfg.check_hierarchy()
        return cfg

    def corpus_spec(self) -> SyntheticSpec:
        return SyntheticSpec(num_tones=self["corpus.tones"], freq_min=self["corpus.freq_min"],
                             freq_max=self["corpus.freq_max"], am_min=self["corpus.am_min"],
                             am_max=self["corpus.am_max"], duration=self["corpus.duration"],
                             sample_rate=self["sample_rate"], seed=self["corpus.seed"],
                             snap_hz=self["corpus.snap_hz"])

    def codebook_kw(self) -> dict:
        return {"decay": self["ema.decay"], "dead_threshold": self["ema.dead_threshold"],
                "dead_window": self["ema.dead_window"]}

    def plan(self) -> DistillPlan:
        kw = dict(steps=self["post.steps"], lr=self["post.lr"], batch=self["post.batch"],
                  commit_weight=self["commit_weight"], kmeans_iters=self["kmeans.iters"],
                  from_scratch=self["post.from_scratch"], seed=self["seed"])
        if self["fld.weights"] is not None:
            kw["fld_weights"] = self["fld.weights"]
        if self["hsr.weights"] is not None:
            kw["hsr_weights"] = self["hsr.weights"]
        cfg = self.mrvq()
        if self["fld.pairs"] is not None:
            return DistillPlan(pairs=self["fld.pairs"], **kw)
        return DistillPlan.for_config(cfg, **kw)

    def dump(self) -> str:
        lines = [f"{k} = {_show(self[k])}" for k in SCHEMA if self[k] is not None]
        for i in sorted(self.blocks):
            for f in BLOCK_FIELDS:
                if f in self.blocks[i]:
                    lines.append(f"block.{i}.{f} = {self.blocks[i][f]}")
        return "\n".join(lines) + "\n"


def _show(v) -> str:
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join(f"{s}:{t}" for s, t in v)
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def parse_config(text: str, env: dict | None = None) -> RunConfig:
    """Parse a config document; ``MRQ_SEED`` in ``env`` overrides ``seed``."""
    env = os.environ if env is None else env
    cfg = RunConfig()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        m = _BLOCK_KEY.match(key)
        try:
            if m:
                cfg.blocks.setdefault(int(m.group(1)), {})[m.group(2)] = int(value)
            elif key in SCHEMA:
                cfg.values[key] = SCHEMA[key][0](value)
            else:
                raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigurationError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    if env.get("MRQ_SEED"):
        try:
            cfg.values["seed"] = int(env["MRQ_SEED"])
        except ValueError:
            raise ConfigurationError(f"MRQ_SEED must be an integer, got {env['MRQ_SEED']!r}") from None
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    for key in ("vocab", "dim", "sample_rate", "enc.hidden", "teacher_layers", "corpus.clips",
                "teacher.batch", "post.batch"):
        if cfg[key] < 1:
            raise ConfigurationError(f"{key} must be positive")
    if cfg["vocab"] > 65535:
        raise ConfigurationError("vocab must fit 16-bit token ids")
    if cfg["base_rate"] <= 0:
        raise ConfigurationError("base_rate must be positive")
    if not cfg["enc.strides"] or min(cfg["enc.strides"]) < 1:
        raise ConfigurationError("enc.strides must be positive integers")
    for key in ("teacher.steps", "post.steps", "kmeans.iters"):
        if cfg[key] < 0:
            raise ConfigurationError(f"{key} must be non-negative")
    stride = 1
    for s in cfg["enc.strides"]:
        stride *= s
    if Fraction(cfg["sample_rate"], stride) != cfg["base_rate"]:
        raise ConfigurationError(
            f"sample_rate / prod(enc.strides) = {Fraction(cfg['sample_rate'], stride)} != base_rate {cfg['base_rate']}")


def load_config(path, env: dict | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(), env)


def default_config() -> RunConfig:
    return parse_config("", env={})
