"""Batch assembly, the teacher-forced training step, the fit loop and evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .codec import (ShuffleMode, build_box_sequence, build_mask_sequence, build_multitask_sequence,
                    parse_sequence, select_shuffled)
from .geometry import box_iou, mask_iou, rasterize_polygon, sample_contour
from .metrics import EvalReport
from .model import EMA, GroundingModel

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class Batch:
    task: str
    rasters: np.ndarray        # (B, S, S, ch)
    query_ids: np.ndarray      # (B, Tq) right-padded with 0
    query_lengths: np.ndarray  # (B,)
    inputs: np.ndarray         # (B, L) decoder inputs, starting with a task token
    targets: np.ndarray        # (B, L) predictor classes 0..M
    weights: np.ndarray        # (B, L)

    def __len__(self):
        return len(self.inputs)


def pad_queries(id_lists) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.asarray([len(q) for q in id_lists], dtype=np.int64)
    out = np.zeros((len(id_lists), max(1, int(lengths.max(initial=1)))), dtype=np.int64)
    for i, q in enumerate(id_lists):
        out[i, :len(q)] = q
    return out, lengths


def contour_points(samples, n: int, strategy: str = "uniform") -> list[np.ndarray]:
    """Ground-truth contour samples, computed once per sample and reused across epochs."""
    return [sample_contour(s.gt_mask, n, strategy) for s in samples]


def make_batch(samples, task: str, model_cfg, points=None, shuffle: ShuffleMode = ShuffleMode(),
               rng=None) -> Batch:
    if not samples:
        raise TrainingError("empty batch")
    vocab = model_cfg.vocab
    if task != "rec" and points is None:
        points = contour_points(samples, model_cfg.max_points)
    chosen = set()
    if task != "rec" and shuffle.kind != "none":
        chosen = set(select_shuffled(len(samples), shuffle.percentage, rng).tolist())
    seqs = []
    for i, s in enumerate(samples):
        mode = shuffle if i in chosen else ShuffleMode()
        if task == "rec":
            seqs.append(build_box_sequence(s.gt_box, s.width, s.height, vocab, model_cfg.token_weights))
        elif task == "res":
            seqs.append(build_mask_sequence(points[i], s.width, s.height, vocab, mode, rng))
        else:
            seqs.append(build_multitask_sequence(s.gt_box, points[i], s.width, s.height, vocab, mode, rng,
                                                 first_weight=model_cfg.token_weights[0]))
    if len({len(q) for q in seqs}) != 1:
        raise TrainingError("sequences in a batch must share one length")
    q, lengths = pad_queries([s.query_ids for s in samples])
    return Batch(
        task=task,
        rasters=np.stack([s.raster for s in samples]).astype(T.DTYPE),
        query_ids=q,
        query_lengths=lengths,
        inputs=np.stack([x.input_tokens for x in seqs]).astype(np.int64),
        targets=np.stack([x.target_classes(vocab) for x in seqs]).astype(np.int64),
        weights=np.stack([x.token_weights for x in seqs]),
    )


def training_step(model: GroundingModel, opt: T.Adam, batch: Batch, rng=None) -> float:
    """Teacher-forced loss, backward pass and one Adam update. Returns the loss."""
    with T.Graph() as g:
        loss = model.loss(batch, rng=rng)
    value = float(loss.item())
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at optimizer step {opt.step_count + 1} "
                            f"(task {batch.task}, batch of {len(batch)})")
    grads = T.backward(g, loss, opt.params)
    opt.step(grads)
    return value


@dataclass
class TrainConfig:
    task: str = "rec"
    epochs: int = 20
    batch_size: int = 32
    lr: float = 5e-4
    decay_epochs: tuple = ()
    decay_factor: float = 0.1
    ema_decay: float = 0.0
    strategy: str = "uniform"
    shuffle: ShuffleMode = field(default_factory=ShuffleMode)
    seed: int = 0
    eval_every: int = 0  # epochs between held-out evaluations; 0 evaluates only at the end
    hard_weight: float = 1.0  # sampling weight of samples with a same-colour distractor

    def __post_init__(self):
        if self.hard_weight <= 0:
            raise TrainingError(f"hard_weight must be positive, got {self.hard_weight}")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay_factor ** sum(1 for e in self.decay_epochs if epoch >= e)


def step_rng(seed: int, epoch: int, step: int):
    return np.random.default_rng([seed, epoch, step])


def epoch_order(seed: int, epoch: int, n: int, weights=None) -> np.ndarray:
    """Sample order for one epoch: a permutation, or a weighted draw with replacement."""
    rng = np.random.default_rng([seed, epoch, 2**31 - 1])
    if weights is None:
        return rng.permutation(n)
    p = np.asarray(weights, dtype=np.float64)
    return rng.choice(n, size=n, replace=True, p=p / p.sum())


def sampling_weights(samples, hard_weight: float):
    """Per-sample draw weights, or None for plain shuffling."""
    if hard_weight == 1.0:
        return None
    w = np.array([hard_weight if s.color_distractor else 1.0 for s in samples])
    return None if np.all(w == w[0]) else w


@dataclass
class TrainState:
    model: GroundingModel
    opt: T.Adam
    epoch: int = 0
    step: int = 0  # step within ``epoch``
    ema: EMA | None = None
    history: list = field(default_factory=list)
    best: float = -1.0
    task: str = "rec"

    def arrays(self) -> dict[str, np.ndarray]:
        out = self.model.state_arrays(task=self.task)
        out.update(self.opt.state_arrays())
        out["train/position"] = np.asarray([self.epoch, self.step], dtype=np.int64)
        if self.ema is not None:
            out.update({f"ema/{k}": v for k, v in self.ema.shadow.items()})
        return out

    def save(self, path) -> None:
        checkpoint.save(path, self.arrays())

    @classmethod
    def load(cls, path, tcfg: TrainConfig) -> "TrainState":
        arrays = checkpoint.load(path)
        model, info = GroundingModel.from_arrays(arrays)
        opt = T.Adam(model.parameters(), lr=tcfg.lr)
        if "adam/step" in arrays:
            opt.load_state_arrays(arrays)
        epoch, step = (int(v) for v in arrays.get("train/position", np.zeros(2, dtype=np.int64)))
        ema = None
        if tcfg.ema_decay:
            ema = EMA(model, tcfg.ema_decay)
            for k in ema.shadow:
                if f"ema/{k}" in arrays:
                    ema.shadow[k] = arrays[f"ema/{k}"].copy()
        return cls(model, opt, epoch, step, ema, task=info.get("task", tcfg.task))


def fit(model: GroundingModel, train, val, tcfg: TrainConfig, out_dir=None, state: TrainState | None = None,
        max_steps: int | None = None, time_budget: float | None = None) -> TrainState:
    """Train ``model`` on ``train`` with per-epoch held-out evaluation on ``val``.

    Writes ``metrics.tsv`` (step, epoch, loss, lr), ``last.ckpt`` and
    ``best.ckpt`` under ``out_dir`` when given. Batches and their randomness
    depend only on (seed, epoch, step), so resuming from ``last.ckpt``
    continues bit-for-bit.
    """
    if not train:
        raise TrainingError("empty training set")
    state = state or TrainState(model, T.Adam(model.parameters(), lr=tcfg.lr),
                                ema=EMA(model, tcfg.ema_decay) if tcfg.ema_decay else None, task=tcfg.task)
    model = state.model
    points = None if tcfg.task == "rec" else contour_points(train, model.cfg.max_points, tcfg.strategy)
    out = Path(out_dir) if out_dir is not None else None
    metrics_log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fresh = not (out / "metrics.tsv").exists() or (state.epoch == 0 and state.step == 0)
        metrics_log = open(out / "metrics.tsv", "w" if fresh else "a", encoding="utf-8")
        if fresh:
            metrics_log.write("step\tepoch\tloss\tlr\n")
    steps_per_epoch = max(1, len(train) // tcfg.batch_size)
    weights = sampling_weights(train, tcfg.hard_weight)
    started = time.monotonic()
    done = 0
    try:
        while state.epoch < tcfg.epochs:
            state.opt.lr = tcfg.lr_at(state.epoch)
            order = epoch_order(tcfg.seed, state.epoch, len(train), weights)
            while state.step < steps_per_epoch:
                idx = order[state.step * tcfg.batch_size:(state.step + 1) * tcfg.batch_size]
                rng = step_rng(tcfg.seed, state.epoch, state.step)
                batch = make_batch([train[i] for i in idx], tcfg.task, model.cfg,
                                   None if points is None else [points[i] for i in idx], tcfg.shuffle, rng)
                loss = training_step(model, state.opt, batch, rng if model.cfg.dropout else None)
                if state.ema is not None:
                    state.ema.update(model)
                state.history.append(loss)
                state.step += 1
                done += 1
                if metrics_log is not None:
                    metrics_log.write(f"{state.opt.step_count}\t{state.epoch}\t{loss:.6f}\t{state.opt.lr:.6g}\n")
                out_of_time = time_budget is not None and time.monotonic() - started > time_budget
                if (max_steps is not None and done >= max_steps) or out_of_time:
                    return state
            state.epoch += 1
            state.step = 0
            last = state.epoch == tcfg.epochs
            if val and (last or (tcfg.eval_every and state.epoch % tcfg.eval_every == 0)):
                rep = evaluate(state.ema.model(model) if state.ema else model, val, tcfg.task)
                score = rep.miou if tcfg.task != "rec" else rep.precision[0.5]
                log.info("epoch %d: %s", state.epoch, rep.to_dict())
                if out is not None and score > state.best:
                    state.best = score
                    state.save(out / "best.ckpt")
            if out is not None:
                state.save(out / "last.ckpt")
    finally:
        if metrics_log is not None:
            metrics_log.close()
    return state


# --- evaluation -------------------------------------------------------------


@dataclass
class Predictions:
    task: str
    tokens: list
    box_ious: np.ndarray | None
    mask_ious: np.ndarray | None
    degenerate: int


def predict(model: GroundingModel, samples, task: str, batch_size: int = 64, strategy: str = "greedy",
            p: float = 0.0, rng=None) -> Predictions:
    """Decode every sample and score it against its ground truth.

    Degenerate parses score IoU 0 and are counted.
    """
    vocab = model.vocab
    tokens, box_ious, mask_ious, degenerate = [], [], [], 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        q, lengths = pad_queries([s.query_ids for s in chunk])
        rasters = np.stack([s.raster for s in chunk]).astype(model.params["patch_w"].dtype)
        dec = model.decode(rasters, q, lengths, task, strategy, p, rng)
        for s, toks in zip(chunk, dec.tokens):
            tokens.append(toks)
            parsed = parse_sequence(toks, task, s.width, s.height, vocab)
            degenerate += int(parsed.degenerate)
            if task in ("rec", "multitask"):
                box_ious.append(box_iou(parsed.box, s.gt_box) if parsed.box is not None else 0.0)
            if task in ("res", "multitask"):
                ok = parsed.points is not None and len(parsed.points) >= 3
                mask_ious.append(mask_iou(rasterize_polygon(parsed.points, s.width, s.height), s.gt_mask)
                                 if ok else 0.0)
    return Predictions(task, tokens, np.asarray(box_ious) if box_ious else None,
                       np.asarray(mask_ious) if mask_ious else None, degenerate)


def evaluate(model: GroundingModel, samples, task: str, **kw) -> EvalReport:
    pred = predict(model, samples, task, **kw)
    if task == "rec":
        return EvalReport.from_ious(task, pred.box_ious, pred.degenerate)
    return EvalReport.from_ious(task, pred.mask_ious, pred.degenerate, box_ious=pred.box_ious)
