"""``mreq`` command-line front end.

Exit codes: 0 success, 2 usage or configuration error, 3 unreadable or corrupt
data, 4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import formats
from .config import default_config, load_config
from .distill import StudentModel, post_train, student_decode, student_forward
from .errors import ConfigurationError, MreqError, TrainingDivergenceError
from .metrics import bitrate, codebook_perplexity, token_budget, usage_histogram
from .mrvq import mrvq_decode_from_b, transmitted
from .teacher import (
    NacModel, Signal, build_nac, decode, encode, make_corpus, pad_signal, snr_db, train_teacher,
)
from .tokenlm import Conditioning, CountPredictor, OraclePredictor, TokenGrid, ar_generate, nar_refine_all
from .vq import TokenRow, rvq_decode, rvq_encode

log = logging.getLogger("mreq")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


class UsageError(MreqError):
    pass


def _config(args):
    return load_config(args.config) if getattr(args, "config", None) else default_config()


def _corpus(args, cfg) -> list:
    if getattr(args, "corpus", None):
        return read_corpus(args.corpus)
    return make_corpus(cfg["corpus.clips"], cfg.corpus_spec())


def read_corpus(directory) -> list:
    paths = sorted(Path(directory).glob("*.mrqa"))
    if not paths:
        raise UsageError(f"no .mrqa clips in {directory}")
    return [formats.clip_from_bytes(p.read_bytes()) for p in paths]


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _load_model(path):
    return formats.model_from_bytes(Path(path).read_bytes())


# -- encoding to and from token streams ---------------------------------

def encode_clip(model, sig: Signal) -> formats.TokenStream:
    if isinstance(model, NacModel):
        x0 = encode(model, sig)
        res = rvq_encode(model.rvq, x0)
        ids = np.stack([t.ids for t in res.tokens]).astype(np.int64)
        return formats.TokenStream(x0.n, [formats.TokenStreamBlock(x0.frame_rate, model.rvq.layers[0].V, ids)])
    out = student_forward(model, sig)
    return stream_from_grids(model, [TokenGrid.from_rows(rows) for rows in transmitted(out.codes)],
                             out.h.n)


def stream_from_grids(model: StudentModel, grids: list, n0: int) -> formats.TokenStream:
    blocks = [formats.TokenStreamBlock(g.frame_rate, model.mrvq.V, g.rows) for g in grids]
    return formats.TokenStream(n0, blocks)


def _check_stream(ts: formats.TokenStream, layout: list, V: int) -> None:
    got = [(b.frame_rate, b.layer_count, b.vocab) for b in ts.blocks]
    want = [(rate, rows, V) for rate, rows in layout]
    if got != want:
        raise formats.CorruptTokenError(f"token stream layout {got} does not match the model {want}")


def decode_stream(model, ts: formats.TokenStream) -> Signal:
    if isinstance(model, NacModel):
        _check_stream(ts, [(model.frame_rate, model.L)], model.rvq.layers[0].V)
        b = ts.blocks[0]
        return decode(model, rvq_decode(model.rvq, [TokenRow(r, b.frame_rate) for r in b.ids]))
    _check_stream(ts, model.mrvq.config.transmitted_rows(), model.mrvq.V)
    rows = [[TokenRow(r, b.frame_rate) for r in b.ids] for b in ts.blocks]
    return student_decode(model, mrvq_decode_from_b(model.mrvq, rows, ts.duration_frames))


# -- subcommands ---------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _config(args)
    spec = cfg.corpus_spec()
    if args.seconds is not None:
        spec.duration = args.seconds
    if args.seed is not None:
        spec.seed = args.seed
    clips = make_corpus(args.clips or cfg["corpus.clips"], spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, sig in enumerate(clips):
        (out / f"clip_{i:04d}.mrqa").write_bytes(formats.clip_to_bytes(sig))
    print(len(clips))
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _config(args)
    rng = np.random.default_rng(cfg["seed"])
    model = build_nac(cfg["sample_rate"], cfg["enc.strides"], cfg["enc.hidden"], cfg["dim"],
                      cfg["teacher_layers"], cfg["vocab"], rng, **cfg.codebook_kw())
    corpus = _corpus(args, cfg)
    trace_path = args.trace or str(args.out) + ".loss.csv"
    try:
        _, trace = train_teacher(model, corpus, cfg["teacher.steps"], lr=cfg["teacher.lr"],
                                 batch=cfg["teacher.batch"], seed=cfg["seed"],
                                 commit_weight=cfg["commit_weight"], kmeans_iters=cfg["kmeans.iters"],
                                 quantizer_dropout=cfg["quantizer_dropout"])
    except TrainingDivergenceError as exc:
        if exc.trace is not None:
            _write_csv(trace_path, ["step", "loss", "recon", "commit"],
                       zip(range(len(exc.trace.loss)), exc.trace.loss, exc.trace.recon, exc.trace.commit))
        raise
    Path(args.out).write_bytes(formats.model_to_bytes(model))
    _write_csv(trace_path, ["step", "loss", "recon", "commit"],
               zip(range(len(trace.loss)), trace.loss, trace.recon, trace.commit))
    return 0


def _write_post_traces(stem: str, trace) -> list:
    paths = []
    for name in ("nac", "fld", "hsr"):
        path = f"{stem}.{name}.csv"
        _write_csv(path, ["step", name], enumerate(getattr(trace, name)))
        paths.append(path)
    return paths


def cmd_post_train(args) -> int:
    cfg = _config(args)
    teacher = _load_model(args.teacher)
    if not isinstance(teacher, NacModel):
        raise UsageError(f"{args.teacher} is not a teacher checkpoint")
    corpus = _corpus(args, cfg)
    stem = args.trace_prefix or str(args.out)
    try:
        student, trace = post_train(teacher, cfg.mrvq(), cfg.plan(), corpus, cfg["vocab"], **cfg.codebook_kw())
    except TrainingDivergenceError as exc:
        if exc.trace is not None:
            _write_post_traces(stem, exc.trace)
        raise
    Path(args.out).write_bytes(formats.model_to_bytes(student))
    _write_post_traces(stem, trace)
    return 0


def cmd_encode(args) -> int:
    model = _load_model(args.model)
    sig = formats.clip_from_bytes(Path(args.inp).read_bytes())
    Path(args.out).write_bytes(formats.tokens_to_bytes(encode_clip(model, sig)))
    return 0


def cmd_decode(args) -> int:
    model = _load_model(args.model)
    ts = formats.tokens_from_bytes(Path(args.inp).read_bytes())
    Path(args.out).write_bytes(formats.clip_to_bytes(decode_stream(model, ts)))
    return 0


def _parse_predictor(text: str):
    kind, _, arg = text.partition(":")
    if kind not in ("oracle", "count") or not arg:
        raise UsageError(f"--predictor must be oracle:CLIP or count:DIR, got {text!r}")
    return kind, arg


def cmd_gen(args) -> int:
    model = _load_model(args.model)
    if not isinstance(model, StudentModel):
        raise UsageError("gen needs a post-trained (multi-rate) checkpoint")
    m = model.mrvq
    kind, arg = _parse_predictor(args.predictor)
    cond = Conditioning.from_text(args.cond)
    first = m.blocks[0].config
    beta = first.alpha if first.degenerate else first.beta
    if kind == "oracle":
        out = student_forward(model, formats.clip_from_bytes(Path(arg).read_bytes()))
        n0 = out.h.n
        if args.seconds is not None and math.ceil(Fraction(str(args.seconds)) * m.s0) != n0:
            raise UsageError("--seconds disagrees with the oracle clip length")
        pred = OraclePredictor.from_forward(m, out)
    else:
        if args.seconds is None:
            raise UsageError("--seconds is required with a count predictor")
        n0 = math.ceil(Fraction(str(args.seconds)) * m.s0)
        outs = [student_forward(model, sig) for sig in read_corpus(arg)]
        pred = CountPredictor(m.V)
        pred.fit_ar([TokenGrid.from_rows(o.codes[0].b) for o in outs])
        pred.fit_nar(m, outs)
    frames = -(-n0 // first.stride)
    b1 = ar_generate(pred, cond, frames, beta, first.frame_rate, greedy=args.temperature == 0,
                     temperature=args.temperature or 1.0, seed=args.seed)
    res = nar_refine_all(m, pred, cond, b1, n0)
    Path(args.out).write_bytes(formats.tokens_to_bytes(stream_from_grids(model, res.grids, n0)))
    return 0


def _eval_clip(model, sig: Signal):
    ts = encode_clip(model, sig)
    y = decode_stream(model, ts)
    ref = pad_signal(model, sig)
    snr = math.inf if not np.any(ref) else snr_db(ref, y.samples)
    return snr, ts


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    clips = read_corpus(args.corpus)
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(lambda s: _eval_clip(model, s), clips))
    rows = []
    streams = [ts for _, ts in results]
    rows.append(("bitrate_bps", "", streams[0].bitrate()))
    for k, b in enumerate(streams[0].blocks, start=1):
        rows.append(("tokens_per_second", f"block{k}", float(b.frame_rate * b.layer_count)))
    snrs = [s for s, _ in results]
    for i, s in enumerate(snrs):
        rows.append(("snr_db", f"clip{i:04d}", s))
    rows.append(("snr_db", "mean", float(np.mean(snrs))))
    for k in range(len(streams[0].blocks)):
        vocab = streams[0].blocks[k].vocab
        for r in range(streams[0].blocks[k].layer_count):
            ids = np.concatenate([ts.blocks[k].ids[r] for ts in streams])
            rows.append(("codebook_perplexity", f"block{k + 1}.row{r + 1}",
                         codebook_perplexity(usage_histogram(ids, vocab))))
    for path in args.trace or []:
        with open(path, newline="") as fh:
            table = list(csv.reader(fh))
        for col, name in enumerate(table[0][1:], start=1):
            vals = [float(r[col]) for r in table[1:]]
            if vals:
                rows.append(("loss_first", f"{Path(path).name}:{name}", vals[0]))
                rows.append(("loss_last", f"{Path(path).name}:{name}", vals[-1]))
    _write_csv(args.report, ["metric", "key", "value"], rows)
    return 0


def cmd_bitrate(args) -> int:
    cfg = _config(args)
    bps = bitrate(cfg.mrvq(), cfg["vocab"])
    print(int(bps) if float(bps).is_integer() else bps)
    return 0


def cmd_budget(args) -> int:
    cfg = _config(args)
    budget = token_budget(Fraction(str(args.seconds)), cfg.mrvq())
    print(f"ar_frames {budget.ar_frames}")
    for k, (rate, rows, frames) in enumerate(budget.blocks, start=1):
        print(f"block{k} rate={rate} rows={rows} frames={frames}")
    print(f"total_tokens {budget.total_tokens}")
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("svg")
    matplotlib.rcParams["svg.hashsalt"] = "mreq"
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for path in args.trace:
        with open(path, newline="") as fh:
            table = list(csv.reader(fh))
        if not table or len(table[0]) < 2:
            raise formats.CorruptTokenError(f"{path}: expected a step column and at least one series")
        steps = [float(r[0]) for r in table[1:]]
        for col, name in enumerate(table[0][1:], start=1):
            ax.plot(steps, [float(r[col]) for r in table[1:]], label=f"{Path(path).stem}:{name}", lw=1)
    ax.set_xlabel(table[0][0])
    if args.log:
        ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(args.out, format="svg", metadata={"Date": None})
    plt.close(fig)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mreq", description="multi-rate residual VQ codec tools")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic clip corpus")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--clips", type=int)
    s.add_argument("--seconds", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-teacher", help="train the single-rate teacher codec")
    s.add_argument("--config")
    s.add_argument("--corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--trace")
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("post-train", help="distil a teacher into a multi-rate student")
    s.add_argument("--teacher", required=True)
    s.add_argument("--config")
    s.add_argument("--corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--trace-prefix")
    s.set_defaults(func=cmd_post_train)

    s = sub.add_parser("encode", help="clip -> token stream")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", help="token stream -> clip")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("gen", help="AR first block, then NAR refinement")
    s.add_argument("--model", required=True)
    s.add_argument("--predictor", required=True, help="oracle:CLIP or count:DIR")
    s.add_argument("--cond", default="")
    s.add_argument("--seconds", type=float)
    s.add_argument("--temperature", type=float, default=0.0, help="0 means greedy")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("eval", help="metrics report over a clip directory")
    s.add_argument("--model", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--trace", action="append")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bitrate", help="print bits per second for a config")
    s.add_argument("--config")
    s.set_defaults(func=cmd_bitrate)

    s = sub.add_parser("budget", help="print token counts for a duration")
    s.add_argument("--seconds", type=float, required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_budget)

    s = sub.add_parser("plot", help="static SVG line plot of loss-trace CSVs")
    s.add_argument("--trace", action="append", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log", action="store_true")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDivergenceError as exc:
        print(f"mreq: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ConfigurationError) as exc:
        print(f"mreq: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MreqError, OSError) as exc:
        print(f"mreq: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
