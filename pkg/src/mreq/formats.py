"""Binary file formats: model checkpoints, codebooks, token streams and raw clips.

All integers are little-endian; arrays are stored as little-endian float64 or
int64. Checkpoints and codebooks share one container layout:

    magic[4] | version u16 | header_len u32 | header (canonical JSON) | arrays

Token streams (``MRQT``):

    magic[4] | version u16 | K u16 | duration_frames u32
    K x (rate_num u32 | rate_den u32 | layer_count u16 | vocab u32)
    payload: per block, row-major u16 ids (layer_count x frames_k)
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .distill import StudentModel
from .errors import CorruptTokenError
from .metrics import bitrate_from_rows
from .mrvq import LrvqBlock, LrvqConfig, MrvqModule
from .numerics import StridedLinearMap
from .teacher import NacModel, Signal
from .vq import Codebook, RvqStack

CHECKPOINT_MAGIC = b"MRQM"
CODEBOOK_MAGIC = b"MRQB"
TOKENS_MAGIC = b"MRQT"
CLIP_MAGIC = b"MRQA"
VERSION = 1

_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def _read_exact(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CorruptTokenError("unexpected end of file")
    return data


def _check_magic(buf: io.BytesIO, magic: bytes) -> None:
    got = _read_exact(buf, 4)
    if got != magic:
        raise CorruptTokenError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<H", _read_exact(buf, 2))
    if version != VERSION:
        raise CorruptTokenError(f"unsupported version {version}")


def pack_container(magic: bytes, kind: str, meta: dict, arrays: list[tuple[str, np.ndarray]]) -> bytes:
    specs = []
    blobs = []
    for name, arr in arrays:
        code = "i8" if np.issubdtype(arr.dtype, np.integer) else "f8"
        a = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        specs.append([name, code, list(a.shape)])
        blobs.append(a.tobytes())
    header = json.dumps({"kind": kind, "meta": meta, "arrays": specs},
                        sort_keys=True, separators=(",", ":")).encode()
    return magic + struct.pack("<HI", VERSION, len(header)) + header + b"".join(blobs)


def unpack_container(data: bytes, magic: bytes) -> tuple[str, dict, dict]:
    buf = io.BytesIO(data)
    _check_magic(buf, magic)
    (hlen,) = struct.unpack("<I", _read_exact(buf, 4))
    try:
        header = json.loads(_read_exact(buf, hlen))
    except ValueError as exc:
        raise CorruptTokenError(f"unreadable header: {exc}") from None
    arrays = {}
    for name, code, shape in header["arrays"]:
        dt = _DTYPES[code]
        count = math.prod(shape)
        arrays[name] = np.frombuffer(_read_exact(buf, count * dt.itemsize), dtype=dt).reshape(shape).copy()
    if buf.read(1):
        raise CorruptTokenError("trailing bytes after container payload")
    return header["kind"], header["meta"], arrays


# -- codebooks -----------------------------------------------------------

def _codebook_meta(cb: Codebook) -> dict:
    return {"decay": cb.decay, "window_steps": cb.window_steps,
            "dead_threshold": cb.dead_threshold, "dead_window": cb.dead_window}


def _codebook_arrays(prefix: str, cb: Codebook) -> list:
    return [(f"{prefix}vectors", cb.vectors), (f"{prefix}ema_cluster_size", cb.ema_cluster_size),
            (f"{prefix}ema_embed_sum", cb.ema_embed_sum), (f"{prefix}usage_count", cb.usage_count)]


def _codebook_from(prefix: str, meta: dict, arrays: dict) -> Codebook:
    return Codebook(arrays[f"{prefix}vectors"], meta["decay"], arrays[f"{prefix}ema_cluster_size"],
                    arrays[f"{prefix}ema_embed_sum"], arrays[f"{prefix}usage_count"],
                    meta["window_steps"], meta["dead_threshold"], meta["dead_window"])


def codebook_to_bytes(cb: Codebook) -> bytes:
    return pack_container(CODEBOOK_MAGIC, "codebook", _codebook_meta(cb), _codebook_arrays("", cb))


def codebook_from_bytes(data: bytes) -> Codebook:
    kind, meta, arrays = unpack_container(data, CODEBOOK_MAGIC)
    if kind != "codebook":
        raise CorruptTokenError(f"expected a codebook file, got {kind!r}")
    return _codebook_from("", meta, arrays)


# -- checkpoints ---------------------------------------------------------

def _map_arrays(prefix: str, m: StridedLinearMap) -> list:
    return [(f"{prefix}weights", m.weights), (f"{prefix}bias", m.bias)]


def _map_from(prefix: str, stride: int, arrays: dict) -> StridedLinearMap:
    return StridedLinearMap(arrays[f"{prefix}weights"], stride, arrays[f"{prefix}bias"])


def _stack_parts(prefix: str, stack: RvqStack):
    meta, arrays = [], []
    for i, cb in enumerate(stack.layers):
        meta.append(_codebook_meta(cb))
        arrays += _codebook_arrays(f"{prefix}{i}.", cb)
    return meta, arrays


def _stack_from(prefix: str, meta: list, arrays: dict) -> RvqStack:
    return RvqStack([_codebook_from(f"{prefix}{i}.", m, arrays) for i, m in enumerate(meta)])


def _codec_parts(encoder, decoder):
    meta = {"enc_strides": [m.stride for m in encoder], "dec_strides": [m.stride for m in decoder]}
    arrays = []
    for i, m in enumerate(encoder):
        arrays += _map_arrays(f"enc.{i}.", m)
    for i, m in enumerate(decoder):
        arrays += _map_arrays(f"dec.{i}.", m)
    return meta, arrays


def _codec_from(meta: dict, arrays: dict):
    enc = [_map_from(f"enc.{i}.", s, arrays) for i, s in enumerate(meta["enc_strides"])]
    dec = [_map_from(f"dec.{i}.", s, arrays) for i, s in enumerate(meta["dec_strides"])]
    return enc, dec


def model_to_bytes(model) -> bytes:
    if isinstance(model, NacModel):
        meta, arrays = _codec_parts(model.encoder, model.decoder)
        meta["sample_rate"] = model.sample_rate
        meta["rvq"], more = _stack_parts("rvq.", model.rvq)
        return pack_container(CHECKPOINT_MAGIC, "teacher", meta, arrays + more)
    if isinstance(model, StudentModel):
        meta, arrays = _codec_parts(model.encoder, model.decoder)
        meta["sample_rate"] = model.sample_rate
        meta["s0"] = str(model.mrvq.s0)
        blocks = []
        for b in model.mrvq.blocks:
            c = b.config
            entry = {"k": c.k, "alpha": c.alpha, "beta": c.beta, "gamma": c.gamma,
                     "stride": c.stride, "rate": str(c.frame_rate)}
            entry["preq"], more = _stack_parts(f"b{c.k}.preq.", b.preq)
            arrays += more
            if not b.degenerate:
                entry["quant"], more = _stack_parts(f"b{c.k}.quant.", b.quant)
                arrays += more
                entry["postq"], more = _stack_parts(f"b{c.k}.postq.", b.postq)
                arrays += more
                arrays += _map_arrays(f"b{c.k}.sub_enc.", b.sub_enc)
                arrays += _map_arrays(f"b{c.k}.sub_dec.", b.sub_dec)
            blocks.append(entry)
        meta["blocks"] = blocks
        return pack_container(CHECKPOINT_MAGIC, "student", meta, arrays)
    raise TypeError(f"cannot serialise {type(model).__name__}")


def model_from_bytes(data: bytes):
    kind, meta, arrays = unpack_container(data, CHECKPOINT_MAGIC)
    try:
        enc, dec = _codec_from(meta, arrays)
        if kind == "teacher":
            return NacModel(enc, _stack_from("rvq.", meta["rvq"], arrays), dec, meta["sample_rate"])
        if kind == "student":
            blocks = []
            for e in meta["blocks"]:
                cfg = LrvqConfig(e["k"], e["alpha"], e["beta"], e["gamma"], e["stride"], Fraction(e["rate"]))
                k = cfg.k
                preq = _stack_from(f"b{k}.preq.", e["preq"], arrays)
                if cfg.degenerate:
                    blocks.append(LrvqBlock(cfg, preq))
                    continue
                blocks.append(LrvqBlock(
                    cfg, preq, _map_from(f"b{k}.sub_enc.", cfg.stride, arrays),
                    _stack_from(f"b{k}.quant.", e["quant"], arrays),
                    _map_from(f"b{k}.sub_dec.", cfg.stride, arrays),
                    _stack_from(f"b{k}.postq.", e["postq"], arrays)))
            return StudentModel(enc, dec, MrvqModule(blocks, Fraction(meta["s0"])), meta["sample_rate"])
    except KeyError as exc:
        raise CorruptTokenError(f"checkpoint missing entry {exc}") from None
    raise CorruptTokenError(f"unknown checkpoint kind {kind!r}")


# -- token streams -------------------------------------------------------

@dataclass
class TokenStreamBlock:
    frame_rate: Fraction
    vocab: int
    ids: np.ndarray  # layer_count x frames

    @property
    def layer_count(self) -> int:
        return self.ids.shape[0]


@dataclass
class TokenStream:
    duration_frames: int
    blocks: list

    def bitrate(self) -> float:
        return bitrate_from_rows([(b.frame_rate, b.layer_count, b.vocab) for b in self.blocks])

    def __eq__(self, other):
        if not isinstance(other, TokenStream):
            return NotImplemented
        return (self.duration_frames == other.duration_frames and len(self.blocks) == len(other.blocks)
                and all(a.frame_rate == b.frame_rate and a.vocab == b.vocab and np.array_equal(a.ids, b.ids)
                        for a, b in zip(self.blocks, other.blocks)))


def stream_frames(duration_frames: int, rate: Fraction, base_rate: Fraction) -> int:
    return -(-(duration_frames * rate.numerator * base_rate.denominator)
             // (rate.denominator * base_rate.numerator))


def tokens_to_bytes(ts: TokenStream) -> bytes:
    base = ts.blocks[-1].frame_rate
    out = [TOKENS_MAGIC, struct.pack("<HHI", VERSION, len(ts.blocks), ts.duration_frames)]
    for b in ts.blocks:
        out.append(struct.pack("<IIHI", b.frame_rate.numerator, b.frame_rate.denominator, b.layer_count, b.vocab))
    for b in ts.blocks:
        frames = stream_frames(ts.duration_frames, b.frame_rate, base)
        if b.ids.shape != (b.layer_count, frames):
            raise CorruptTokenError(f"block at {b.frame_rate} Hz holds {b.ids.shape}, expected {(b.layer_count, frames)}")
        if b.ids.size and (b.ids.min() < 0 or b.ids.max() >= b.vocab):
            raise CorruptTokenError("token id outside its vocabulary")
        out.append(np.ascontiguousarray(b.ids, dtype="<u2").tobytes())
    return b"".join(out)


def tokens_from_bytes(data: bytes) -> TokenStream:
    buf = io.BytesIO(data)
    _check_magic(buf, TOKENS_MAGIC)
    K, duration = struct.unpack("<HI", _read_exact(buf, 6))
    if K < 1:
        raise CorruptTokenError("token stream without blocks")
    heads = [struct.unpack("<IIHI", _read_exact(buf, 14)) for _ in range(K)]
    if any(den == 0 or num == 0 for num, den, _, _ in heads):
        raise CorruptTokenError("zero frame rate in token stream header")
    base = Fraction(heads[-1][0], heads[-1][1])
    blocks = []
    for num, den, count, vocab in heads:
        rate = Fraction(num, den)
        frames = stream_frames(duration, rate, base)
        raw = _read_exact(buf, count * frames * 2)
        ids = np.frombuffer(raw, dtype="<u2").astype(np.int64).reshape(count, frames)
        if ids.size and ids.max() >= vocab:
            raise CorruptTokenError("token id outside its vocabulary")
        blocks.append(TokenStreamBlock(rate, vocab, ids))
    if buf.read(1):
        raise CorruptTokenError("trailing bytes after token payload")
    return TokenStream(duration, blocks)


def header_bitrate(data: bytes) -> float:
    """Bitrate computed from the header alone."""
    buf = io.BytesIO(data)
    _check_magic(buf, TOKENS_MAGIC)
    K, _ = struct.unpack("<HI", _read_exact(buf, 6))
    rows = []
    for _ in range(K):
        num, den, count, vocab = struct.unpack("<IIHI", _read_exact(buf, 14))
        rows.append((Fraction(num, den), count, vocab))
    return bitrate_from_rows(rows)


# -- clips ---------------------------------------------------------------

def clip_to_bytes(sig: Signal) -> bytes:
    return (CLIP_MAGIC + struct.pack("<HIQ", VERSION, sig.sample_rate, len(sig.samples))
            + np.ascontiguousarray(sig.samples, dtype="<f8").tobytes())


def clip_from_bytes(data: bytes) -> Signal:
    buf = io.BytesIO(data)
    _check_magic(buf, CLIP_MAGIC)
    rate, n = struct.unpack("<IQ", _read_exact(buf, 12))
    samples = np.frombuffer(_read_exact(buf, 8 * n), dtype="<f8").copy()
    if buf.read(1):
        raise CorruptTokenError("trailing bytes after clip samples")
    if rate == 0:
        raise CorruptTokenError("zero sample rate")
    return Signal(samples, rate)


def write_bytes(path, data: bytes) -> None:
    Path(path).write_bytes(data)


def read_bytes(path) -> bytes:
    return Path(path).read_bytes()
