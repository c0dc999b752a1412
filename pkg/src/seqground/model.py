"""Encoder-decoder that reads a raster and a query and emits coordinate tokens.

Every trainable array lives in ``GroundingModel.params`` (an ordered
name -> Tensor dict), and every forward function takes the params dict
explicitly so the same code runs under gradient checking with float64 copies.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import checkpoint
from . import tensor as T
from .codec import DEFAULT_BOX_WEIGHTS, Vocabulary
from .tensor import Tensor

POOLING_MODES = ("max", "mean", "final_state")
LANGUAGE_MODES = ("gru", "embed")


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    hidden: int = 64
    enc_layers: int = 3
    dec_layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    bins: int = 64
    max_points: int = 12
    pooling: str = "max"
    language: str = "gru"
    word_vocab: int = 16
    max_query_len: int = 15
    image_size: int = 64
    channels: int = 4
    patch: int = 8
    token_weights: tuple = DEFAULT_BOX_WEIGHTS
    label_smoothing: float = 0.1
    nucleus_p: float = 0.0
    dropout: float = 0.0
    pe_temperature: float = 20.0  # sine-encoding wavelength base; small grids need a small base

    def __post_init__(self):
        self.token_weights = tuple(float(w) for w in self.token_weights)
        if self.hidden % self.heads:
            raise ModelError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.hidden % 4:
            raise ModelError("hidden must be a multiple of 4 (2-D sine encoding, two GRU directions)")
        if self.image_size % self.patch:
            raise ModelError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.pe_temperature <= 1.0:
            raise ModelError(f"pe_temperature must exceed 1, got {self.pe_temperature}")
        if self.pooling not in POOLING_MODES:
            raise ModelError(f"unknown pooling {self.pooling!r}")
        if self.language not in LANGUAGE_MODES:
            raise ModelError(f"unknown language encoder {self.language!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def memory_len(self) -> int:
        return self.grid * self.grid

    @property
    def max_seq_len(self) -> int:
        # multitask input: [REC] 4 box tokens [RES] 2N mask tokens
        return 6 + 2 * self.max_points

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.bins)

    @classmethod
    def paper(cls, **kw) -> "ModelConfig":
        base = dict(hidden=256, enc_layers=6, dec_layers=3, heads=8, bins=1000, max_points=18,
                    image_size=640, patch=32, max_query_len=15, pe_temperature=10000.0)
        base.update(kw)
        return cls(**base)

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["token_weights"] = list(self.token_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# --- parameter initialisation ---------------------------------------------


def _xavier(rng, fan_in, fan_out, gain=1.0):
    lim = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, (fan_in, fan_out))


def init_params(cfg: ModelConfig, rng, dtype=T.DTYPE) -> "OrderedDict[str, Tensor]":
    C, F = cfg.hidden, cfg.hidden * cfg.ffn_mult
    H = C // 2
    p: OrderedDict[str, np.ndarray] = OrderedDict()
    p["patch_w"] = _xavier(rng, cfg.patch * cfg.patch * cfg.channels, C)
    p["patch_b"] = np.zeros(C)
    p["word_emb"] = rng.normal(0, 1.0, (cfg.word_vocab, C))
    if cfg.language == "gru":
        for d in ("fwd", "bwd"):
            p[f"gru_{d}_wx"] = _xavier(rng, C, 3 * H)
            p[f"gru_{d}_bx"] = np.zeros(3 * H)
            p[f"gru_{d}_wh"] = _xavier(rng, H, 3 * H)
            p[f"gru_{d}_bh"] = np.zeros(3 * H)
    p["coord_emb"] = rng.normal(0, 0.5, (cfg.bins, C))
    p["special_emb"] = rng.normal(0, 0.5, (3, C))
    p["dec_pos"] = rng.normal(0, 0.1, (cfg.max_seq_len, C))

    def block(prefix, cross):
        p[f"{prefix}.ln1_g"], p[f"{prefix}.ln1_b"] = np.ones(C), np.zeros(C)
        p[f"{prefix}.qkv_w"], p[f"{prefix}.qkv_b"] = _xavier(rng, C, 3 * C), np.zeros(3 * C)
        p[f"{prefix}.out_w"], p[f"{prefix}.out_b"] = _xavier(rng, C, C), np.zeros(C)
        if cross:
            p[f"{prefix}.lnx_g"], p[f"{prefix}.lnx_b"] = np.ones(C), np.zeros(C)
            p[f"{prefix}.xq_w"], p[f"{prefix}.xq_b"] = _xavier(rng, C, C), np.zeros(C)
            p[f"{prefix}.xkv_w"], p[f"{prefix}.xkv_b"] = _xavier(rng, C, 2 * C), np.zeros(2 * C)
            p[f"{prefix}.xout_w"], p[f"{prefix}.xout_b"] = _xavier(rng, C, C), np.zeros(C)
        p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"] = np.ones(C), np.zeros(C)
        p[f"{prefix}.ffn1_w"], p[f"{prefix}.ffn1_b"] = _xavier(rng, C, F), np.zeros(F)
        p[f"{prefix}.ffn2_w"], p[f"{prefix}.ffn2_b"] = _xavier(rng, F, C), np.zeros(C)

    for i in range(cfg.enc_layers):
        block(f"enc{i}", cross=False)
    p["enc_ln_g"], p["enc_ln_b"] = np.ones(C), np.zeros(C)
    for i in range(cfg.dec_layers):
        block(f"dec{i}", cross=True)
    p["dec_ln_g"], p["dec_ln_b"] = np.ones(C), np.zeros(C)
    p["pred1_w"], p["pred1_b"] = _xavier(rng, C, C), np.zeros(C)
    # small last layer: near-uniform class probabilities at initialisation
    p["pred2_w"], p["pred2_b"] = 0.1 * _xavier(rng, C, cfg.bins + 1), np.zeros(cfg.bins + 1)
    return OrderedDict((k, Tensor(v.astype(dtype), requires_grad=True, name=k)) for k, v in p.items())


# --- fixed encodings --------------------------------------------------------


def sine_encoding_2d(rows: int, cols: int, dim: int, dtype=T.DTYPE, temperature: float = 10000.0) -> np.ndarray:
    """Row sinusoids in the first ``dim/2`` channels, column sinusoids in the rest.

    Frequencies run from 1 down to ``1 / temperature``. With 10000 on an 8x8
    grid most channels are nearly constant, hence the configurable base.
    """
    half = dim // 2
    freqs = 1.0 / (temperature ** (np.arange(0, half, 2) / half))

    def enc(n):
        pos = np.arange(n)[:, None] * freqs[None, :]
        out = np.zeros((n, half))
        out[:, 0::2] = np.sin(pos)
        out[:, 1::2] = np.cos(pos)
        return out

    r, c = enc(rows), enc(cols)
    pe = np.concatenate([np.repeat(r, cols, axis=0), np.tile(c, (rows, 1))], axis=1)
    return pe.astype(dtype)


def causal_mask(n: int, dtype=T.DTYPE) -> np.ndarray:
    return np.triu(np.full((n, n), T.MASK_VALUE, dtype=dtype), k=1)


# --- encoders ---------------------------------------------------------------


def patchify(rasters: np.ndarray, patch: int) -> np.ndarray:
    """(B, S, S, ch) rasters -> (B, (S/patch)^2, patch*patch*ch), row-major over the grid."""
    b, h, w, ch = rasters.shape
    if h % patch or w % patch:
        raise ModelError(f"raster {h}x{w} not divisible by patch {patch}")
    x = rasters.reshape(b, h // patch, patch, w // patch, patch, ch)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * ch)


def encode_visual(params, cfg: ModelConfig, rasters: np.ndarray) -> Tensor:
    dtype = params["patch_w"].dtype
    return T.linear(Tensor(patchify(rasters, cfg.patch).astype(dtype)), params["patch_w"], params["patch_b"])


def _const(arr, dtype):
    return Tensor(np.ascontiguousarray(arr, dtype=dtype))


def gru_scan(params, direction: str, xs: Tensor, mask: np.ndarray, reverse: bool):
    """Run one GRU direction over ``xs`` (B, T, C).

    Padded steps (``mask == 0``) carry the previous state through. Returns the
    per-step states (B, T, H) and the final state (B, H).
    """
    wx, bx = params[f"gru_{direction}_wx"], params[f"gru_{direction}_bx"]
    wh, bh = params[f"gru_{direction}_wh"], params[f"gru_{direction}_bh"]
    b, steps, _ = xs.shape
    hdim = wh.shape[0]
    dtype = wh.dtype
    gx = T.linear(xs, wx, bx)
    h = _const(np.zeros((b, hdim)), dtype)
    states = [None] * steps
    for t in (reversed(range(steps)) if reverse else range(steps)):
        xt = T.getitem(gx, (slice(None), t))
        ht = T.linear(h, wh, bh)
        r = T.sigmoid(T.add(T.getitem(xt, (slice(None), slice(0, hdim))),
                            T.getitem(ht, (slice(None), slice(0, hdim)))))
        z = T.sigmoid(T.add(T.getitem(xt, (slice(None), slice(hdim, 2 * hdim))),
                            T.getitem(ht, (slice(None), slice(hdim, 2 * hdim)))))
        n = T.tanh(T.add(T.getitem(xt, (slice(None), slice(2 * hdim, None))),
                         T.mul(r, T.getitem(ht, (slice(None), slice(2 * hdim, None))))))
        h_new = T.add(n, T.mul(z, T.sub(h, n)))
        m = mask[:, t]
        if m.all():
            h = h_new
        else:
            keep = _const(np.repeat(m[:, None], hdim, axis=1), dtype)
            h = T.add(h, T.mul(keep, T.sub(h_new, h)))
        states[t] = h
    return T.stack(states, axis=1), h


def encode_language(params, cfg: ModelConfig, ids: np.ndarray, lengths: np.ndarray):
    """Word features (B, T, C) and the final language state (B, C).

    ``ids`` is (B, T), right-padded; ``lengths`` holds each query's real length.
    """
    ids = np.asarray(ids, dtype=np.int64)
    lengths = np.asarray(lengths)
    if ids.ndim != 2 or ids.shape[1] == 0 or np.any(lengths < 1):
        raise ModelError("empty query")
    if np.any(lengths > cfg.max_query_len):
        raise ModelError(f"query longer than {cfg.max_query_len} tokens")
    x = T.embedding(params["word_emb"], ids)
    mask = (np.arange(ids.shape[1])[None, :] < lengths[:, None]).astype(np.float64)
    b = ids.shape[0]
    if cfg.language == "embed":
        last = T.getitem(x, (np.arange(b), lengths - 1))
        return x, last
    fwd, fwd_last = gru_scan(params, "fwd", x, mask, reverse=False)
    bwd, bwd_first = gru_scan(params, "bwd", x, mask, reverse=True)
    return T.concat([fwd, bwd], axis=-1), T.concat([fwd_last, bwd_first], axis=-1)


def pool_language(words: Tensor, final: Tensor, lengths: np.ndarray, mode: str) -> Tensor:
    b, steps, c = words.shape
    valid = np.arange(steps)[None, :, None] < np.asarray(lengths)[:, None, None]
    valid = np.broadcast_to(valid, (b, steps, c))
    if mode == "max":
        pad = np.where(valid, 0.0, T.MASK_VALUE)
        return T.max_over_axis(T.add(words, _const(pad, words.dtype)), axis=1)
    if mode == "mean":
        w = valid / np.asarray(lengths, dtype=np.float64)[:, None, None]
        return T.sum_over_axis(T.mul(words, _const(w, words.dtype)), axis=1)
    if mode == "final_state":
        return final
    raise ModelError(f"unknown pooling {mode!r}")


def fuse(visual: Tensor, lang: Tensor) -> Tensor:
    """tanh(F_v) * tanh(f_l), the language vector shared by every grid cell."""
    return T.mul(T.tanh(visual), T.expand(T.tanh(lang), visual.shape[1], axis=1))


# --- transformer ------------------------------------------------------------


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if not rate or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return T.mul(x, _const(keep, x.dtype))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, c = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * d))


def self_attention(params, prefix, x: Tensor, heads: int, mask=None):
    b, n, c = x.shape
    qkv = T.linear(x, params[f"{prefix}.qkv_w"], params[f"{prefix}.qkv_b"])
    qkv = T.transpose(T.reshape(qkv, (b, n, 3, heads, c // heads)), (2, 0, 3, 1, 4))
    q, k, v = (T.getitem(qkv, i) for i in range(3))
    out, weights = T.scaled_dot_attention(q, k, v, mask)
    return T.linear(_merge_heads(out), params[f"{prefix}.out_w"], params[f"{prefix}.out_b"]), weights


def memory_kv(params, prefix, memory: Tensor, heads: int):
    b, s, c = memory.shape
    kv = T.linear(memory, params[f"{prefix}.xkv_w"], params[f"{prefix}.xkv_b"])
    kv = T.transpose(T.reshape(kv, (b, s, 2, heads, c // heads)), (2, 0, 3, 1, 4))
    return T.getitem(kv, 0), T.getitem(kv, 1)


def cross_attention(params, prefix, x: Tensor, kv, heads: int):
    q = _split_heads(T.linear(x, params[f"{prefix}.xq_w"], params[f"{prefix}.xq_b"]), heads)
    out, weights = T.scaled_dot_attention(q, kv[0], kv[1])
    return T.linear(_merge_heads(out), params[f"{prefix}.xout_w"], params[f"{prefix}.xout_b"]), weights


def _ffn(params, prefix, x: Tensor) -> Tensor:
    h = T.relu(T.linear(x, params[f"{prefix}.ffn1_w"], params[f"{prefix}.ffn1_b"]))
    return T.linear(h, params[f"{prefix}.ffn2_w"], params[f"{prefix}.ffn2_b"])


def _ln(params, name, x):
    return T.layer_norm(x, params[f"{name}_g"], params[f"{name}_b"])


def encoder_forward(params, cfg: ModelConfig, fused: Tensor, rng=None) -> Tensor:
    """Add the 2-D sine encoding once, then run the pre-norm encoder stack."""
    b, n, c = fused.shape
    pe = sine_encoding_2d(cfg.grid, cfg.grid, c, fused.dtype, cfg.pe_temperature)
    if pe.shape[0] != n:
        raise ModelError(f"memory has {n} positions, config grid gives {pe.shape[0]}")
    x = T.add(fused, _const(np.broadcast_to(pe, fused.shape), fused.dtype))
    for i in range(cfg.enc_layers):
        p = f"enc{i}"
        a, _ = self_attention(params, p, _ln(params, f"{p}.ln1", x), cfg.heads)
        x = T.add(x, _dropout(a, cfg.dropout, rng))
        x = T.add(x, _dropout(_ffn(params, p, _ln(params, f"{p}.ln2", x)), cfg.dropout, rng))
    return _ln(params, "enc_ln", x)


def embed_tokens(params, tokens: np.ndarray) -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    b, n = tokens.shape
    table = T.concat([params["coord_emb"], params["special_emb"]], axis=0)
    pos = T.expand(T.getitem(params["dec_pos"], slice(0, n)), b, axis=0)
    return T.add(T.embedding(table, tokens), pos)


def decoder_forward(params, cfg: ModelConfig, memory: Tensor, tokens: np.ndarray, kv=None, rng=None):
    """Logits (B, L, M+1) for decoder inputs ``tokens`` (B, L).

    Returns the logits and the cross-attention weights, one (B, heads, L, H*W)
    array per decoder layer. ``kv`` optionally carries per-layer memory
    key/value projections computed once per decode.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape[1] > cfg.max_seq_len:
        raise ModelError(f"sequence of {tokens.shape[1]} exceeds max {cfg.max_seq_len}")
    if not np.all(tokens[:, 0] >= cfg.bins + 1):
        raise ModelError("decoder input must start with a task token")
    x = embed_tokens(params, tokens)
    mask = causal_mask(tokens.shape[1], x.dtype)
    maps = []
    for i in range(cfg.dec_layers):
        p = f"dec{i}"
        a, _ = self_attention(params, p, _ln(params, f"{p}.ln1", x), cfg.heads, mask)
        x = T.add(x, _dropout(a, cfg.dropout, rng))
        layer_kv = kv[i] if kv is not None else memory_kv(params, p, memory, cfg.heads)
        a, w = cross_attention(params, p, _ln(params, f"{p}.lnx", x), layer_kv, cfg.heads)
        maps.append(w)
        x = T.add(x, _dropout(a, cfg.dropout, rng))
        x = T.add(x, _dropout(_ffn(params, p, _ln(params, f"{p}.ln2", x)), cfg.dropout, rng))
    x = _ln(params, "dec_ln", x)
    h = T.relu(T.linear(x, params["pred1_w"], params["pred1_b"]))
    logits = T.linear(h, params["pred2_w"], params["pred2_b"])
    if logits.shape[-1] != cfg.bins + 1:
        raise ModelError("predictor must score exactly M+1 classes")
    return logits, maps


# --- decoding ---------------------------------------------------------------


def nucleus_sample(probs: np.ndarray, p: float, rng=None) -> int:
    """Draw from the smallest probability-sorted prefix whose mass reaches ``p``.

    ``p = 0`` keeps only the top token, i.e. argmax (first index on ties).
    """
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, kind="stable")
    ranked = probs[order]
    k = min(int(np.searchsorted(np.cumsum(ranked), p, side="left")) + 1, len(probs))
    if k == 1:
        return int(order[0])
    kept = ranked[:k] / ranked[:k].sum()
    return int(order[rng.choice(k, p=kept)])


@dataclass
class AttentionMap:
    """Cross-attention of one decoded sequence: (layers, heads, steps, H*W)."""

    weights: np.ndarray
    grid: tuple[int, int]


@dataclass
class Decoded:
    tokens: list[list[int]]
    attention: list[AttentionMap]


def average_cross_attention(amap: AttentionMap) -> np.ndarray:
    """Per generated token, the layer/head mean reshaped to the grid and scaled to max 1."""
    mean = amap.weights.mean(axis=(0, 1))
    heat = mean.reshape(mean.shape[0], *amap.grid)
    peak = heat.reshape(heat.shape[0], -1).max(axis=1)
    return heat / np.where(peak > 0, peak, 1.0)[:, None, None]


def _softmax_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def decode(params, cfg: ModelConfig, memory: Tensor, task: str, strategy: str = "greedy",
           p: float = 0.0, rng=None, max_points: int | None = None) -> Decoded:
    """Autoregressive generation for a batch of encoded inputs.

    REC: exactly 4 coordinate tokens (EOS masked). RES: until EOS or
    ``2 * max_points`` coordinates. Multitask: 4 box tokens, a forced RES
    marker, then RES rules.
    """
    if task not in ("rec", "res", "multitask"):
        raise ModelError(f"unknown task {task!r}")
    if strategy == "greedy":
        p = 0.0
    elif strategy != "nucleus":
        raise ModelError(f"unknown decoding strategy {strategy!r}")
    vocab = cfg.vocab
    n_pts = max_points or cfg.max_points
    b = memory.shape[0]
    kv = [memory_kv(params, f"dec{i}", memory, cfg.heads) for i in range(cfg.dec_layers)]
    inputs = np.full((b, 1), vocab.task_token(task), dtype=np.int64)
    outputs: list[list[int]] = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    box_steps = 0 if task == "res" else 4
    cap = box_steps + (0 if task == "rec" else 1 + 2 * n_pts)
    maps = None
    step = 0
    while step < cap and not done.all():
        if task == "multitask" and step == box_steps:
            # the RES marker after the box is part of the layout, not a prediction
            for i in range(b):
                outputs[i].append(vocab.task_res)
            inputs = np.concatenate([inputs, np.full((b, 1), vocab.task_res)], axis=1)
            step += 1
            continue
        logits, maps = decoder_forward(params, cfg, memory, inputs, kv=kv)
        last = logits.data[:, -1, :].astype(np.float64)
        if step < box_steps:
            last[:, vocab.eos] = -np.inf
        elif step == cap - 1 and task != "rec":
            last[:, :vocab.bins] = -np.inf  # out of room: close the sequence
        probs = _softmax_np(last)
        nxt = np.empty(b, dtype=np.int64)
        for i in range(b):
            nxt[i] = vocab.eos if done[i] else nucleus_sample(probs[i], p, rng)
            if not done[i]:
                outputs[i].append(int(nxt[i]))
            if nxt[i] == vocab.eos:
                done[i] = True
        inputs = np.concatenate([inputs, nxt[:, None]], axis=1)
        step += 1
    if maps is None:
        maps = decoder_forward(params, cfg, memory, inputs[:, :-1] if inputs.shape[1] > 1 else inputs, kv=kv)[1]
    stacked = np.stack(maps, axis=1)  # (B, layers, heads, L, S)
    grid = (cfg.grid, cfg.grid)
    attention = [AttentionMap(stacked[i, :, :, :len(outputs[i])], grid) for i in range(b)]
    return Decoded(outputs, attention)


# --- the model object -------------------------------------------------------


class GroundingModel:
    def __init__(self, cfg: ModelConfig, params=None, seed: int = 0, dtype=T.DTYPE):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, np.random.default_rng(seed), dtype)

    @property
    def vocab(self) -> Vocabulary:
        return self.cfg.vocab

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def astype(self, dtype) -> "GroundingModel":
        params = OrderedDict((k, Tensor(v.data.astype(dtype), requires_grad=True, name=k))
                             for k, v in self.params.items())
        return GroundingModel(self.cfg, params)

    def with_params(self, tensors) -> dict:
        """Params dict built from a list in ``parameters()`` order."""
        return OrderedDict(zip(self.params.keys(), tensors))

    def encode(self, rasters, query_ids, query_lengths, params=None, rng=None) -> Tensor:
        params = params or self.params
        visual = encode_visual(params, self.cfg, np.asarray(rasters))
        words, final = encode_language(params, self.cfg, query_ids, query_lengths)
        lang = pool_language(words, final, query_lengths, self.cfg.pooling)
        return encoder_forward(params, self.cfg, fuse(visual, lang), rng)

    def logits(self, batch, params=None, rng=None):
        params = params or self.params
        memory = self.encode(batch.rasters, batch.query_ids, batch.query_lengths, params, rng)
        return decoder_forward(params, self.cfg, memory, batch.inputs, rng=rng)

    def loss(self, batch, params=None, rng=None) -> Tensor:
        """Weighted, label-smoothed cross-entropy normalised by the total token weight."""
        logits, _ = self.logits(batch, params, rng)
        total = T.weighted_smoothed_ce(logits, batch.targets, batch.weights, self.cfg.label_smoothing)
        return T.scale(total, 1.0 / float(np.sum(batch.weights)))

    def decode(self, rasters, query_ids, query_lengths, task, strategy="greedy", p=0.0, rng=None,
               max_points=None) -> Decoded:
        memory = self.encode(rasters, query_ids, query_lengths)
        return decode(self.params, self.cfg, memory, task, strategy, p, rng, max_points)

    # checkpoints

    def state_arrays(self, **meta) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        info = {"config": self.cfg.to_dict(), **meta}
        out["meta/json"] = np.frombuffer(json.dumps(info, sort_keys=True).encode(), dtype=np.uint8)
        return out

    def save(self, path, extra: dict[str, np.ndarray] | None = None, **meta) -> None:
        arrays = self.state_arrays(**meta)
        arrays.update(extra or {})
        checkpoint.save(path, arrays)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> tuple["GroundingModel", dict]:
        info = json.loads(arrays["meta/json"].tobytes().decode())
        cfg = ModelConfig.from_dict(info["config"])
        model = cls(cfg)
        for k in model.params:
            if k not in arrays:
                raise checkpoint.CheckpointError(f"checkpoint lacks parameter {k!r}")
            if arrays[k].shape != model.params[k].shape:
                raise checkpoint.CheckpointError(f"shape mismatch for {k!r}")
            model.params[k] = Tensor(arrays[k].copy(), requires_grad=True, name=k)
        return model, info

    @classmethod
    def load(cls, path) -> tuple["GroundingModel", dict]:
        return cls.from_arrays(checkpoint.load(path))


class EMA:
    """Exponential moving average of parameters, used only for evaluation."""

    def __init__(self, model: GroundingModel, decay: float = 0.999):
        self.decay = decay
        self.shadow = OrderedDict((k, v.data.copy()) for k, v in model.params.items())

    def update(self, model: GroundingModel) -> None:
        for k, v in model.params.items():
            s = self.shadow[k]
            s *= self.decay
            s += (1 - self.decay) * v.data

    def model(self, model: GroundingModel) -> GroundingModel:
        params = OrderedDict((k, Tensor(v.copy(), requires_grad=True, name=k)) for k, v in self.shadow.items())
        return GroundingModel(model.cfg, params)
