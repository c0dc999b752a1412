"""``seqground`` command line: generate, roundtrip, sweep, train, eval, render, gradcheck.

Outputs go to ``--out``, else the config's ``out_dir``, else ``$SEQGROUND_OUT``,
else ``./runs``. Exit status: 0 on success, 1 when a checked contract fails,
2 on bad input.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import tensor as T
from .codec import (SHUFFLE_KINDS, TASKS, CodecError, ShuffleMode, Vocabulary, build_mask_sequence,
                    dequantize, dequantize_points, quantize)
from .data import DataError, WordVocab, generate_dataset, load_polygon_annotations, split_dataset, write_annotations
from .geometry import convex_shape, mask_iou, random_blob, rasterize_polygon, reassemble, sample_contour
from .metrics import MetricsError, upper_bound_sweep
from .model import GroundingModel, ModelConfig, average_cross_attention
from .render import heatmap, overlay_points, raster_rgb, write_pgm, write_ppm
from .train import TrainingError, TrainState, evaluate, fit, pad_queries

log = logging.getLogger("seqground")

ENV_OUT = "SEQGROUND_OUT"
STRATEGIES = ("uniform", "center_based")


class CliError(Exception):
    """Bad input; reported and mapped to exit status 2."""


# --- shared plumbing ----------------------------------------------------------


def _run_config(args) -> config_mod.RunConfig:
    if args.config is None:
        cfg = config_mod.RunConfig()
    elif Path(args.config).exists():
        cfg = config_mod.load(args.config)
    else:
        cfg = config_mod.profile(args.config)
    model_kw = {}
    if args.bins is not None:
        model_kw["bins"] = args.bins
    if args.points is not None:
        model_kw["max_points"] = args.points
    if args.nucleus_p is not None:
        model_kw["nucleus_p"] = args.nucleus_p
    if model_kw:
        cfg.model = ModelConfig(**{**cfg.model.to_dict(), **model_kw})
    for flag, attr in (("task", "task"), ("seed", "seed"), ("strategy", "strategy"),
                       ("shuffle_mode", "shuffle_mode"), ("shuffle_pct", "shuffle_pct")):
        v = getattr(args, flag)
        if v is not None:
            setattr(cfg, attr, v)
    config_mod.RunConfig.__post_init__(cfg)
    return cfg


def _out_dir(args, cfg) -> Path:
    if args.out:
        out = Path(args.out)
    elif args.config is None and ENV_OUT in os.environ:
        out = Path(os.environ[ENV_OUT])
    else:
        out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _samples(cfg, task=None):
    """Train and validation samples for the configured source."""
    task = task or cfg.task
    if cfg.source == "synthetic":
        data = generate_dataset(cfg.train_samples + cfg.val_samples, cfg.seed, cfg.scene(), task)
        return data[:cfg.train_samples], data[cfg.train_samples:]
    stats = Counter()
    data = load_polygon_annotations(cfg.source, stats=stats)
    if stats["skipped"]:
        log.warning("%d annotation records skipped", stats["skipped"])
    if not data:
        raise CliError(f"no usable records in {cfg.source}")
    n = len(data)
    val_frac = min(cfg.val_samples, n) / n if cfg.val_samples else 0.0
    return split_dataset(data, (1.0 - val_frac, val_frac), cfg.seed)


def _word_vocab_size(cfg):
    return max(cfg.model.word_vocab, len(WordVocab.default()))


# --- commands -----------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args, cfg)
    samples = generate_dataset(args.samples, cfg.seed, cfg.scene(), cfg.task)
    WordVocab.default().save(out / "vocab.txt")
    write_annotations(out / "annotations.txt", samples, "vocab.txt")
    print(f"wrote {len(samples)} records to {out / 'annotations.txt'}")
    return 0


def _roundtrip_source(args, cfg):
    if args.annotations:
        stats = Counter()
        samples = load_polygon_annotations(args.annotations, stats=stats)
        if not samples:
            raise CliError(f"no usable records in {args.annotations}")
        return samples
    return generate_dataset(args.samples, cfg.seed, cfg.scene())


def cmd_roundtrip(args) -> int:
    cfg = _run_config(args)
    m, n = cfg.model.bins, cfg.model.max_points
    if n < 3:
        raise CliError(f"need at least 3 points, got {n}")
    samples = _roundtrip_source(args, cfg)
    vocab = Vocabulary(m)
    worst, bound = 0.0, 0.0
    ious = []
    for s in samples:
        for coord, extent in zip(s.gt_box, (s.width, s.height, s.width, s.height)):
            c = min(max(float(coord), 0.0), float(extent))
            worst_here = abs(dequantize(quantize(c, extent, m), extent, m) - c)
            worst = max(worst, worst_here / (extent / (2 * m)))
            bound = max(bound, extent / (2 * m))
        seq = build_mask_sequence(sample_contour(s.gt_mask, n, cfg.strategy), s.width, s.height, vocab)
        pts = dequantize_points(seq.target_tokens[:-1], s.width, s.height, m)
        ious.append(mask_iou(rasterize_polygon(pts, s.width, s.height), s.gt_mask))
    ious = np.asarray(ious)
    q = np.percentile(ious, [0, 25, 50, 75, 100])
    ok = worst <= 1.0 + 1e-9
    print(f"samples={len(samples)} bins={m} points={n} strategy={cfg.strategy}")
    print(f"box_error_over_bound={worst:.6f} (max bound {bound:.6f} px) {'PASS' if ok else 'FAIL'}")
    print("mask_miou={:.6f} min={:.4f} q25={:.4f} median={:.4f} q75={:.4f} max={:.4f}".format(ious.mean(), *q))
    return 0 if ok else 1


def _corpus(kind: str, count: int, size: int, seed: int):
    rng = np.random.default_rng(seed)
    make = random_blob if kind == "blob" else convex_shape
    return [make(size, size, rng) for _ in range(count)]


def cmd_sweep(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args, cfg)
    masks = _corpus(args.corpus, args.count, args.size, cfg.seed)
    if not masks:
        raise CliError("empty corpus")
    rows = []
    table = {}
    for strategy in args.strategies:
        for n, miou in upper_bound_sweep(masks, args.ns, strategy):
            rows.append((strategy, n, miou))
            table[strategy, n] = miou
    path = Path(args.csv) if args.csv else out / "sweep.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "n", "miou"])
    w.writerows((s, n, f"{v:.6f}") for s, n, v in rows)
    path.write_text(buf.getvalue(), encoding="utf-8")
    print(buf.getvalue(), end="")
    if set(STRATEGIES) <= set(args.strategies):
        dominant = all(table["uniform", n] >= table["center_based", n] for n in args.ns)
        print(f"uniform >= center_based at every n: {'yes' if dominant else 'no'}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args, cfg)
    config_mod.save(cfg, out / "run.cfg")
    cfg.model = ModelConfig(**{**cfg.model.to_dict(), "word_vocab": _word_vocab_size(cfg)})
    train, val = _samples(cfg)
    tcfg = cfg.train_config()
    if args.resume:
        state = TrainState.load(args.resume, tcfg)
        if state.task != cfg.task:
            raise CliError(f"checkpoint was trained for {state.task!r}, config says {cfg.task!r}")
        model = state.model
    else:
        model, state = GroundingModel(cfg.model, seed=cfg.seed), None
    try:
        state = fit(model, train, val, tcfg, out_dir=out, state=state, max_steps=args.max_steps)
    except TrainingError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    if val:
        rep = evaluate(state.ema.model(model) if state.ema else model, val, cfg.task)
        (out / "report.kv").write_text(rep.to_kv(), encoding="utf-8")
        print(rep.to_kv(), end="")
    print(f"checkpoint: {out / 'last.ckpt'}")
    return 0


def _load_checkpoint(path):
    try:
        state_model, info = GroundingModel.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from exc
    return state_model, info


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args, cfg)
    model, info = _load_checkpoint(args.checkpoint)
    task = info.get("task", cfg.task)
    if task != cfg.task:
        print(f"task mismatch: checkpoint {task!r}, config {cfg.task!r}", file=sys.stderr)
        return 1
    cfg.model = model.cfg
    train, val = _samples(cfg)
    samples = train if args.split == "train" else val
    if not samples:
        raise CliError(f"empty {args.split} split")
    rep = evaluate(model, samples, task, strategy="nucleus" if cfg.model.nucleus_p else "greedy",
                   p=cfg.model.nucleus_p, rng=np.random.default_rng(cfg.seed))
    path = Path(args.report) if args.report else out / "report.kv"
    path.write_text(rep.to_kv(), encoding="utf-8")
    path.with_suffix(".csv").write_text(rep.to_csv(), encoding="utf-8")
    print(rep.to_kv(), end="")
    return 0


def cmd_render(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args, cfg)
    if args.annotations:
        samples = load_polygon_annotations(args.annotations)
    else:
        samples = generate_dataset(args.index + args.count, cfg.seed, cfg.scene())
    chosen = samples[args.index:args.index + args.count]
    model = info = None
    if args.checkpoint:
        model, info = _load_checkpoint(args.checkpoint)
    written = 0
    for k, s in enumerate(chosen, start=args.index):
        try:
            stem = out / f"sample{k:04d}"
            write_ppm(f"{stem}_image.ppm", raster_rgb(s.raster))
            write_pgm(f"{stem}_mask.pgm", s.gt_mask)
            written += 2
            for strategy in args.strategies:
                pts = sample_contour(s.gt_mask, cfg.model.max_points, strategy)
                write_ppm(f"{stem}_{strategy}_points.ppm", overlay_points(s.gt_mask, pts))
                write_pgm(f"{stem}_{strategy}_reassembled.pgm", reassemble(s.gt_mask, cfg.model.max_points, strategy))
                written += 2
            if model is not None:
                written += _render_prediction(model, info.get("task", cfg.task), s, stem)
        except (ValueError, RuntimeError) as exc:
            log.error("sample %d: %s", k, exc)
    print(f"wrote {written} images to {out}")
    return 0


def _render_prediction(model, task, s, stem) -> int:
    from .codec import parse_sequence

    q, lengths = pad_queries([s.query_ids])
    dec = model.decode(s.raster[None].astype(T.DTYPE), q, lengths, task)
    parsed = parse_sequence(dec.tokens[0], task, s.width, s.height, model.vocab)
    n = 0
    if parsed.points is not None and len(parsed.points) >= 3:
        write_pgm(f"{stem}_predicted.pgm", rasterize_polygon(parsed.points, s.width, s.height))
        n += 1
    elif parsed.box is not None:
        b = parsed.box
        pts = [(b.x1, b.y1), (b.x2, b.y1), (b.x2, b.y2), (b.x1, b.y2)]
        write_pgm(f"{stem}_predicted.pgm", rasterize_polygon(pts, s.width, s.height))
        n += 1
    heat = average_cross_attention(dec.attention[0])
    for i, tok in enumerate(dec.tokens[0]):
        if tok >= model.vocab.bins:
            continue
        write_pgm(f"{stem}_attn{i:02d}.pgm", heatmap(heat[i], s.width))
        n += 1
    return n


def gradcheck_config() -> ModelConfig:
    """Smallest full model: hidden 8, a 2x2 grid, one block each, 16 bins, 5 decoder inputs."""
    return ModelConfig(hidden=8, enc_layers=1, dec_layers=1, heads=2, ffn_mult=2, bins=16, max_points=3,
                       word_vocab=len(WordVocab.default()), image_size=8, patch=4, label_smoothing=0.1)


def gradcheck_error(seed: int = 0, max_coords: int | None = None) -> float:
    from types import SimpleNamespace

    from .codec import build_box_sequence
    from .data import SceneConfig

    cfg = gradcheck_config()
    rng = np.random.default_rng(seed)
    model = GroundingModel(cfg, seed=seed, dtype=np.float64)
    samples = generate_dataset(2, seed, SceneConfig(size=8, min_shapes=1, max_shapes=1,
                                                   small_radius=(2.0, 2.5), large_radius=(2.5, 3.0)))
    seqs = [build_box_sequence(s.gt_box, s.width, s.height, cfg.vocab) for s in samples]
    q, lengths = pad_queries([s.query_ids for s in samples])
    rasters = np.stack([s.raster for s in samples]).astype(np.float64)
    rasters += rng.normal(0, 0.1, rasters.shape)  # break ties in the max-pool and relu kinks
    batch = SimpleNamespace(rasters=rasters, query_ids=q, query_lengths=lengths,
                            inputs=np.stack([x.input_tokens for x in seqs]),
                            targets=np.stack([x.target_classes(cfg.vocab) for x in seqs]),
                            weights=np.stack([x.token_weights for x in seqs]))
    names = list(model.params)

    def fn(tensors):
        return model.loss(batch, params=dict(zip(names, tensors)))

    return T.finite_diff_check(fn, model.parameters(), max_coords=max_coords,
                               rng=np.random.default_rng(seed))


def cmd_gradcheck(args) -> int:
    cfg = _run_config(args)
    err = gradcheck_error(cfg.seed, args.max_coords)
    ok = err < 1e-4
    print(f"max_relative_error={err:.3e} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


# --- argument parsing -----------------------------------------------------------


def _csv_ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file path or profile name (toy, paper)")
    common.add_argument("--seed", type=int)
    common.add_argument("--task", choices=TASKS)
    common.add_argument("--bins", type=int, help="coordinate bins M")
    common.add_argument("--points", type=int, help="contour points N")
    common.add_argument("--strategy", choices=STRATEGIES, help="contour sampling strategy")
    common.add_argument("--shuffle-mode", choices=SHUFFLE_KINDS)
    common.add_argument("--shuffle-pct", type=float)
    common.add_argument("--nucleus-p", type=float)
    common.add_argument("--out", help=f"output directory (default: ${ENV_OUT} or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="seqground", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic annotation file")
    p.add_argument("--samples", type=int, default=100)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("roundtrip", parents=[common], help="codec round-trip report")
    p.add_argument("--annotations", help="annotation file (default: synthetic scenes)")
    p.add_argument("--samples", type=int, default=200)
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("sweep", parents=[common], help="contour sampling upper-bound sweep")
    p.add_argument("--ns", type=_csv_ints, default=[4, 8, 12, 18, 24, 36])
    p.add_argument("--strategies", type=lambda t: t.split(","), default=list(STRATEGIES))
    p.add_argument("--corpus", choices=("blob", "convex"), default="blob")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--csv", help="CSV path (default: <out>/sweep.csv)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--resume", help="continue from a last.ckpt")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--report", help="key=value report path (default: <out>/report.kv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", parents=[common], help="write mask, sampling and attention images")
    p.add_argument("--annotations")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--strategies", type=lambda t: t.split(","), default=list(STRATEGIES))
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the toy model")
    p.add_argument("--max-coords", type=int, help="check at most this many coordinates per parameter")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, config_mod.ConfigError, CodecError, DataError, MetricsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
