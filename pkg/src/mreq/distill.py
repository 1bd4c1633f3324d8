"""Teacher-student post-training of an MRVQ-equipped codec.

The student starts from copies of the teacher encoder/decoder, swaps the RVQ
for an MRVQ module and minimises codec loss + feature-level distillation
(cumulative student embeddings vs. cumulative teacher embeddings) + hidden
state reconstruction (pre-quantizer output vs. sub-decoder output).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, TrainingDivergenceError
from .mrvq import (
    MrvqConfig, MrvqModule, MrvqOutput, build_mrvq, mrvq_forward, mrvq_kmeans_init, mrvq_run,
)
from .numerics import (
    FeatureMap, checksum, cosine_lr, mae_loss, sgd_step, strided_backward, transposed_backward,
)
from .teacher import (
    NacModel, Signal, backward_decoder, backward_encoder, build_nac, pad_signal, run_decoder, run_encoder,
    snr_db, teacher_prefixes,
)
from .vq import Freeze, ema_update_stack

log = logging.getLogger(__name__)

DEFAULT_PAIRS = ((1, 1), (2, 3), (3, 5), (4, 8))
DEFAULT_FLD = (8.0, 6.0, 4.0, 2.0)
DEFAULT_HSR = (8.0, 6.0, 4.0, 2.0)


@dataclass
class DistillPlan:
    pairs: tuple = DEFAULT_PAIRS
    fld_weights: tuple = DEFAULT_FLD
    hsr_weights: tuple = DEFAULT_HSR
    steps: int = 2000
    lr: float = 0.01
    batch: int = 8
    commit_weight: float = 0.25
    kmeans_iters: int = 10
    from_scratch: bool = False
    seed: int = 0

    def __post_init__(self):
        self.pairs = tuple(tuple(int(v) for v in p) for p in self.pairs)
        self.fld_weights = tuple(float(w) for w in self.fld_weights)
        self.hsr_weights = tuple(float(w) for w in self.hsr_weights)
        if len(self.fld_weights) != len(self.pairs):
            raise ConfigurationError("one FLD weight per student-teacher pair is required")

    @classmethod
    def for_config(cls, cfg: MrvqConfig, **kw) -> "DistillPlan":
        """Pairs every block with the teacher layer matching its cumulative post depth."""
        pairs = tuple((s, t) for s, t in enumerate(cfg.post_depths(), start=1))
        if "fld_weights" not in kw:
            kw["fld_weights"] = _taper(len(pairs))
        if "hsr_weights" not in kw:
            kw["hsr_weights"] = _taper(cfg.K)
        return cls(pairs=pairs, **kw)


def _taper(n: int) -> tuple:
    if n == len(DEFAULT_FLD):
        return DEFAULT_FLD
    return tuple(float(max(2 * (n - i), 1)) for i in range(n))


def validate_plan(plan: DistillPlan, cfg: MrvqConfig, teacher_layers: int) -> None:
    """Reject pairs whose cumulative student post depth differs from the teacher index."""
    depths = cfg.post_depths()
    for s, t in plan.pairs:
        if not 1 <= s <= cfg.K:
            raise ConfigurationError(f"student block {s} out of range 1..{cfg.K}")
        if not 1 <= t <= teacher_layers:
            raise ConfigurationError(f"teacher layer {t} out of range 1..{teacher_layers}")
        if depths[s - 1] != t:
            raise ConfigurationError(
                f"pair ({s},{t}) invalid: cumulative post-quantization depth at block {s} is {depths[s - 1]}")
    if len(plan.hsr_weights) != cfg.K:
        raise ConfigurationError(f"need {cfg.K} HSR weights, got {len(plan.hsr_weights)}")


@dataclass
class StudentModel:
    encoder: list
    decoder: list
    mrvq: MrvqModule
    sample_rate: int

    @property
    def total_stride(self) -> int:
        return math.prod(m.stride for m in self.encoder)

    @property
    def frame_rate(self):
        return self.mrvq.s0

    def maps(self) -> list:
        return list(self.encoder) + list(self.decoder) + self.mrvq.maps()

    def arrays(self) -> list:
        out = [p for m in list(self.encoder) + list(self.decoder) for p in m.params()]
        return out + self.mrvq.arrays()

    def checksum(self) -> str:
        return checksum(self.arrays())


def student_from_teacher(teacher: NacModel, cfg: MrvqConfig, V: int | None = None,
                         rng: np.random.Generator | None = None, from_scratch: bool = False,
                         **codebook_kw) -> StudentModel:
    rng = np.random.default_rng(0) if rng is None else rng
    V = teacher.rvq.layers[0].V if V is None else V
    if cfg.s0 != teacher.frame_rate:
        raise ConfigurationError(f"MRVQ base rate {cfg.s0} != teacher frame rate {teacher.frame_rate}")
    if from_scratch:
        hidden = teacher.encoder[0].d_out
        fresh = build_nac(teacher.sample_rate, [m.stride for m in teacher.encoder], hidden,
                          teacher.d, teacher.L, V, rng)
        enc, dec = fresh.encoder, fresh.decoder
    else:
        enc = [m.copy() for m in teacher.encoder]
        dec = [m.copy() for m in teacher.decoder]
    return StudentModel(enc, dec, build_mrvq(cfg, V, teacher.d, rng, **codebook_kw), teacher.sample_rate)


def fld_loss(partials: list, prefixes: list, plan: DistillPlan) -> tuple[float, list]:
    """Weighted MAE between student partial sums and teacher prefix sums.

    Returns the loss and one gradient array per student partial (teacher side
    is constant).
    """
    grads = [np.zeros_like(p.data) for p in partials]
    total = 0.0
    for (s, t), w in zip(plan.pairs, plan.fld_weights):
        if not 1 <= s <= len(partials) or not 1 <= t <= len(prefixes):
            raise ConfigurationError(f"pair ({s},{t}) out of range")
        value, g = mae_loss(partials[s - 1], prefixes[t - 1])
        total += w * value
        grads[s - 1] += w * g
    return total, grads


def hsr_loss(traces: list, weights) -> tuple[float, list]:
    """Weighted MAE between each block's pre-quantized embedding and its sub-decoder output.

    Returns the loss and per-block ``(grad wrt a_tilde, grad wrt u)`` pairs;
    pre-quantizer-only blocks contribute nothing.
    """
    total, grads = 0.0, []
    for tr, w in zip(traces, weights):
        if tr.u is None:
            grads.append((None, None))
            continue
        diff = tr.a_target - tr.u
        size = diff.size
        total += w * float(np.abs(diff).sum() / size)
        g = w * np.sign(diff) / size
        grads.append((np.zeros_like(g), -g))
    return total, grads


@dataclass
class LossParts:
    total: float
    nac: float
    recon: float
    commit: float
    fld: float
    hsr: float
    out: MrvqOutput = field(repr=False, default=None)


def _block_backward(block, tr, g_c, hsr_g, cw, s0) -> np.ndarray:
    if block.degenerate:
        return g_c + cw * tr.a.commit_grad
    g_a_hsr, g_u_hsr = hsr_g
    g_u = g_c + cw * tr.c.commit_grad + g_u_hsr
    g_b = transposed_backward(block.sub_dec, FeatureMap(tr.b.value, tr.e.frame_rate), g_u)
    g_e = g_b + cw * tr.b.commit_grad
    g_a = strided_backward(block.sub_enc, FeatureMap(tr.a.value, s0), g_e) + g_a_hsr
    return g_a + cw * tr.a.commit_grad


def total_loss(student: StudentModel, prefixes: list, samples: np.ndarray, plan: DistillPlan,
               freeze: Freeze | None = None) -> LossParts:
    """Codec + FLD + HSR loss; gradients are accumulated into the student maps.

    ``prefixes`` are the frozen teacher's cumulative embeddings for ``samples``.
    """
    cw = plan.commit_weight
    m = student.mrvq
    enc = run_encoder(student.encoder, samples, student.sample_rate)
    x0 = enc.out
    out = mrvq_run(m, x0.data, freeze)
    dec = run_decoder(student.decoder, out.h)
    recon, g_y = mae_loss(dec.out, FeatureMap(samples[None, :], student.sample_rate))
    commit = sum(tr.a.commit + (0.0 if tr.c is None else tr.b.commit + tr.c.commit) for tr in out.traces)
    fld, g_partials = fld_loss(out.partials, prefixes, plan)
    hsr, g_hsr = hsr_loss(out.traces, plan.hsr_weights)
    nac = recon + cw * commit
    total = nac + fld + hsr
    if not math.isfinite(total):
        raise TrainingDivergenceError("non-finite total loss")

    g_h = backward_decoder(student.decoder, dec, g_y)
    g_c = []
    acc = g_h.copy()
    for gp in reversed(g_partials):
        acc = acc + gp
        g_c.append(acc)
    g_c.reverse()
    g_x = np.zeros_like(x0.data)
    for k in reversed(range(m.K)):
        g_x = g_x + _block_backward(m.blocks[k], out.traces[k], g_c[k] - g_x, g_hsr[k], cw, m.s0)
    backward_encoder(student.encoder, enc, g_x)
    return LossParts(total, nac, recon, commit, fld, hsr, out)


@dataclass
class PostTrace:
    init: str = "copy"
    total: list = field(default_factory=list)
    nac: list = field(default_factory=list)
    fld: list = field(default_factory=list)
    hsr: list = field(default_factory=list)

    def rows(self):
        for i, vals in enumerate(zip(self.total, self.nac, self.fld, self.hsr)):
            yield (i, *vals)


def _ema_all(m: MrvqModule, out: MrvqOutput, rng) -> None:
    for block, tr in zip(m.blocks, out.traces):
        ema_update_stack(block.preq, tr.a, m.s0, rng)
        if tr.b is not None:
            ema_update_stack(block.quant, tr.b, tr.e.frame_rate, rng)
            ema_update_stack(block.postq, tr.c, m.s0, rng)


def post_train(teacher: NacModel, cfg: MrvqConfig, plan: DistillPlan, corpus: list,
               V: int | None = None, **codebook_kw) -> tuple[StudentModel, PostTrace]:
    """Distil ``teacher`` into an MRVQ student. The teacher is only read."""
    cfg.check_hierarchy()
    validate_plan(plan, cfg, teacher.L)
    if not corpus:
        raise ConfigurationError("post-training needs a non-empty corpus")
    rng = np.random.default_rng(plan.seed)
    student = student_from_teacher(teacher, cfg, V, rng, plan.from_scratch, **codebook_kw)
    trace = PostTrace(init="scratch" if plan.from_scratch else "copy")
    if plan.steps <= 0:
        return student, trace
    padded = [pad_signal(teacher, s) for s in corpus]
    x0 = run_encoder(student.encoder, np.concatenate(padded), student.sample_rate).out
    mrvq_kmeans_init(student.mrvq, x0, plan.kmeans_iters, rng)

    maps = student.maps()
    params = [p for mp in maps for p in mp.params()]
    grads = [g for mp in maps for g in mp.grads()]
    for mp in maps:
        mp.zero_grad()
    for step in range(plan.steps):
        pick = rng.choice(len(padded), size=min(plan.batch, len(padded)), replace=False)
        samples = np.concatenate([padded[i] for i in pick])
        prefixes = teacher_prefixes(teacher, samples)
        try:
            parts = total_loss(student, prefixes, samples, plan)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(f"post-training diverged at step {step}: {exc}", trace) from exc
        trace.total.append(parts.total)
        trace.nac.append(parts.nac)
        trace.fld.append(parts.fld)
        trace.hsr.append(parts.hsr)
        try:
            sgd_step(params, grads, cosine_lr(plan.lr, step, plan.steps))
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(f"post-training diverged at step {step}", trace) from exc
        _ema_all(student.mrvq, parts.out, rng)
        if step % 500 == 0:
            log.info("post-train step %d total %.4f fld %.4f hsr %.4f", step, parts.total, parts.fld, parts.hsr)
    return student, trace


def encode_student(student: StudentModel, samples: np.ndarray) -> FeatureMap:
    return run_encoder(student.encoder, samples, student.sample_rate).out


def student_forward(student: StudentModel, sig: Signal) -> MrvqOutput:
    if sig.sample_rate != student.sample_rate:
        raise ConfigurationError(f"signal at {sig.sample_rate} Hz, model expects {student.sample_rate} Hz")
    return mrvq_forward(student.mrvq, encode_student(student, pad_signal(student, sig)))


def student_decode(student: StudentModel, h: FeatureMap) -> Signal:
    return Signal(run_decoder(student.decoder, h).out.data[0], student.sample_rate)


def student_reconstruct(student: StudentModel, sig: Signal) -> tuple[Signal, float]:
    """Encode, quantize and decode ``sig``; SNR is taken against the padded input."""
    y = student_decode(student, student_forward(student, sig).h)
    ref = pad_signal(student, sig)
    if not np.any(ref):
        return y, math.inf
    return y, snr_db(ref, y.samples)
