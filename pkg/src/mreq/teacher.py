"""Toy teacher codec: strided encoder to 48 Hz latents, 8-layer RVQ, transposed decoder."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigurationError, TrainingDivergenceError
from .numerics import (
    FeatureMap, StridedLinearMap, checksum, cosine_lr, mae_loss, sgd_step, strided_apply,
    strided_backward, transposed_apply, transposed_backward,
)
from .vq import Freeze, RvqStack, ema_update_stack, kmeans_init_stack, rvq_decode, rvq_encode, rvq_st

log = logging.getLogger(__name__)


@dataclass
class Signal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ConfigurationError("signal samples must be 1-d")
        if self.sample_rate <= 0:
            raise ConfigurationError("sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise TrainingDivergenceError("non-finite signal samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class SyntheticSpec:
    num_tones: int = 3
    freq_min: float = 20.0
    freq_max: float = 300.0
    am_min: float = 0.2
    am_max: float = 2.0
    duration: float = 1.0
    sample_rate: int = 2400
    seed: int = 0
    snap_hz: float | None = None


def synth_signal(spec: SyntheticSpec) -> Signal:
    """Sum of random sinusoids with slow AM envelopes, peak-normalised to [-1, 1]."""
    if spec.freq_max >= spec.sample_rate / 2:
        raise ConfigurationError(f"max frequency {spec.freq_max} Hz violates Nyquist for {spec.sample_rate} Hz")
    if spec.freq_min <= 0 or spec.freq_min > spec.freq_max:
        raise ConfigurationError("frequency range must satisfy 0 < min <= max")
    if spec.num_tones < 0 or spec.duration < 0:
        raise ConfigurationError("tone count and duration must be non-negative")
    rng = np.random.default_rng(spec.seed)
    n = int(round(spec.duration * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    x = np.zeros(n)
    for _ in range(spec.num_tones):
        f = rng.uniform(spec.freq_min, spec.freq_max)
        if spec.snap_hz:
            f = max(1, round(f / spec.snap_hz)) * spec.snap_hz
        am = rng.uniform(spec.am_min, spec.am_max)
        amp = rng.uniform(0.3, 1.0)
        depth = rng.uniform(0.0, 0.9)
        phase, am_phase = rng.uniform(0, 2 * np.pi, size=2)
        env = 1.0 + depth * np.sin(2 * np.pi * am * t + am_phase)
        x += amp * env * np.sin(2 * np.pi * f * t + phase)
    peak = np.max(np.abs(x)) if n else 0.0
    if peak > 0:
        x /= peak
    return Signal(x, spec.sample_rate)


def tone(freq: float, duration: float, sample_rate: int) -> Signal:
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    x = np.sin(2 * np.pi * freq * t)
    peak = np.max(np.abs(x)) if x.size else 0.0
    return Signal(x / peak if peak > 0 else x, sample_rate)


def make_corpus(clips: int, base: SyntheticSpec) -> list[Signal]:
    return [synth_signal(SyntheticSpec(**{**base.__dict__, "seed": base.seed + i})) for i in range(clips)]


@dataclass
class NacModel:
    """Encoder maps run forward in order; decoder maps run transposed in order."""

    encoder: list
    rvq: RvqStack
    decoder: list
    sample_rate: int

    def __post_init__(self):
        if not self.encoder or len(self.encoder) != len(self.decoder):
            raise ConfigurationError("encoder and decoder need the same, non-zero number of maps")
        if self.encoder[-1].d_out != self.rvq.d or self.decoder[0].d_out != self.rvq.d:
            raise ConfigurationError("encoder/decoder latent dim must match the RVQ")
        if self.encoder[0].d_in != 1 or self.decoder[-1].d_in != 1:
            raise ConfigurationError("the signal side of the codec must be 1-d")

    @property
    def total_stride(self) -> int:
        return math.prod(m.stride for m in self.encoder)

    @property
    def frame_rate(self) -> Fraction:
        return Fraction(self.sample_rate, self.total_stride)

    @property
    def d(self) -> int:
        return self.rvq.d

    @property
    def L(self) -> int:
        return self.rvq.L

    def maps(self) -> list[StridedLinearMap]:
        return list(self.encoder) + list(self.decoder)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for m in self.maps():
            out.extend(m.params())
        out.extend(self.rvq.arrays())
        return out

    def checksum(self) -> str:
        return checksum(self.arrays())

    def copy(self) -> "NacModel":
        return NacModel([m.copy() for m in self.encoder], self.rvq.copy(),
                        [m.copy() for m in self.decoder], self.sample_rate)


def build_nac(sample_rate: int = 2400, strides=(10, 5), hidden: int = 8, d: int = 16, L: int = 8,
              V: int = 64, rng: np.random.Generator | None = None, **codebook_kw) -> NacModel:
    rng = np.random.default_rng(0) if rng is None else rng
    dims = [1, *([hidden] * (len(strides) - 1)), d]
    enc = [StridedLinearMap.init(dims[i], dims[i + 1], s, rng) for i, s in enumerate(strides)]
    # Decoder maps mirror the encoder; each is applied transposed (d_out -> d_in).
    dec = [StridedLinearMap.init(dims[i], dims[i + 1], s, rng, scale=1.0 / math.sqrt(2 * dims[i + 1]))
           for i, s in reversed(list(enumerate(strides)))]
    return NacModel(enc, RvqStack.random(L, V, d, rng, **codebook_kw), dec, sample_rate)


def pad_signal(model: NacModel, sig: Signal) -> np.ndarray:
    R = model.total_stride
    n = -(-len(sig.samples) // R) * R
    out = np.zeros(n)
    out[: len(sig.samples)] = sig.samples
    return out


def _check_rate(model: NacModel, sig: Signal) -> None:
    if sig.sample_rate != model.sample_rate:
        raise ConfigurationError(f"signal at {sig.sample_rate} Hz, model expects {model.sample_rate} Hz")


@dataclass
class EncoderTrace:
    inputs: list
    out: FeatureMap


def run_encoder(maps: list, samples: np.ndarray, sample_rate) -> EncoderTrace:
    x = FeatureMap(samples[None, :], sample_rate)
    inputs = []
    for m in maps:
        inputs.append(x)
        x = strided_apply(m, x)
    return EncoderTrace(inputs, x)


def backward_encoder(maps: list, tr: EncoderTrace, grad: np.ndarray) -> None:
    for m, x in zip(reversed(maps), reversed(tr.inputs)):
        grad = strided_backward(m, x, grad)


def run_decoder(maps: list, h: FeatureMap) -> EncoderTrace:
    x = h
    inputs = []
    for m in maps:
        inputs.append(x)
        x = transposed_apply(m, x)
    return EncoderTrace(inputs, x)


def backward_decoder(maps: list, tr: EncoderTrace, grad: np.ndarray) -> np.ndarray:
    for m, x in zip(reversed(maps), reversed(tr.inputs)):
        grad = transposed_backward(m, x, grad)
    return grad


def encode(model: NacModel, sig: Signal) -> FeatureMap:
    """Latents at the model frame rate; the signal is zero-padded to the total stride."""
    _check_rate(model, sig)
    return run_encoder(model.encoder, pad_signal(model, sig), sig.sample_rate).out


def decode(model: NacModel, h: FeatureMap) -> Signal:
    y = run_decoder(model.decoder, h).out
    return Signal(y.data[0], model.sample_rate)


def snr_db(ref: np.ndarray, est: np.ndarray) -> float:
    """10 log10(|ref|^2 / |ref - est|^2); +inf when the error vanishes."""
    err = float(np.sum((ref - est) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(float(np.sum(ref ** 2)) / err) if np.any(ref) else -math.inf


def reconstruct(model: NacModel, sig: Signal, n_layers: int | None = None) -> tuple[Signal, float]:
    x0 = encode(model, sig)
    h = rvq_encode(model.rvq, x0, n_layers).h
    y = decode(model, h)
    ref = pad_signal(model, sig)
    if not np.any(ref):
        return y, math.inf
    return y, snr_db(ref, y.samples)


def teacher_prefixes(model: NacModel, sig_samples: np.ndarray) -> list[FeatureMap]:
    """Cumulative teacher embeddings h_t for t = 1..L."""
    x0 = run_encoder(model.encoder, sig_samples, model.sample_rate).out
    res = rvq_encode(model.rvq, x0)
    out = []
    for t in range(1, model.L + 1):
        out.append(rvq_decode(model.rvq, res.tokens[:t]))
    return out


def init_teacher(model: NacModel, corpus: list, iters: int, rng: np.random.Generator) -> None:
    """k-means initialise the RVQ on latents of the current encoder."""
    samples = np.concatenate([pad_signal(model, s) for s in corpus])
    x0 = run_encoder(model.encoder, samples, model.sample_rate).out
    kmeans_init_stack(model.rvq, x0, iters, rng)


@dataclass
class TeacherTrace:
    loss: list = field(default_factory=list)
    recon: list = field(default_factory=list)
    commit: list = field(default_factory=list)


def teacher_loss(model: NacModel, samples: np.ndarray, commit_weight: float = 0.25,
                 n_layers: int | None = None, freeze: Freeze | None = None):
    """Desk-scale codec loss and its gradients (accumulated into the maps).

    Returns (total, recon MAE, commitment sum, RVQ training-path output).
    """
    enc = run_encoder(model.encoder, samples, model.sample_rate)
    x0 = enc.out
    st = rvq_st(model.rvq, x0.data, x0.frame_rate, freeze, "rvq", n_layers)
    dec = run_decoder(model.decoder, FeatureMap(st.value, x0.frame_rate))
    recon, g_y = mae_loss(dec.out, FeatureMap(samples[None, :], model.sample_rate))
    g_h = backward_decoder(model.decoder, dec, g_y)
    backward_encoder(model.encoder, enc, g_h + commit_weight * st.commit_grad)
    return recon + commit_weight * st.commit, recon, st.commit, st, x0


def train_teacher(model: NacModel, corpus: list, steps: int, lr: float = 0.5, batch: int = 8,
                  seed: int = 0, commit_weight: float = 0.25, kmeans_iters: int = 10,
                  quantizer_dropout: bool = False, ema: bool = True) -> tuple[NacModel, TeacherTrace]:
    """SGD on the encoder/decoder with EMA codebooks; mutates and returns ``model``."""
    trace = TeacherTrace()
    if steps <= 0:
        return model, trace
    if not corpus:
        raise ConfigurationError("teacher training needs a non-empty corpus")
    for s in corpus:
        _check_rate(model, s)
    rng = np.random.default_rng(seed)
    init_teacher(model, corpus, kmeans_iters, rng)
    padded = [pad_signal(model, s) for s in corpus]
    params = [p for m in model.maps() for p in m.params()]
    grads = [g for m in model.maps() for g in m.grads()]
    for m in model.maps():
        m.zero_grad()
    for step in range(steps):
        pick = rng.choice(len(padded), size=min(batch, len(padded)), replace=False)
        samples = np.concatenate([padded[i] for i in pick])
        n_layers = int(rng.integers(1, model.L + 1)) if quantizer_dropout else None
        try:
            total, recon, commit, st, x0 = teacher_loss(model, samples, commit_weight, n_layers)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(f"teacher training diverged at step {step}: {exc}", trace) from exc
        if not math.isfinite(total):
            raise TrainingDivergenceError(f"teacher loss diverged at step {step}", trace)
        trace.loss.append(total)
        trace.recon.append(recon)
        trace.commit.append(commit)
        try:
            sgd_step(params, grads, cosine_lr(lr, step, steps))
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(f"teacher training diverged at step {step}", trace) from exc
        if ema:
            ema_update_stack(model.rvq, st, x0.frame_rate, rng)
        if step % 500 == 0:
            log.info("teacher step %d loss %.5f recon %.5f", step, total, recon)
    return model, trace
