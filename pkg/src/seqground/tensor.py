"""Dense tensors with reverse-mode automatic differentiation.

Operations are recorded on the innermost active :class:`Graph`. Outside of a
graph every op is a plain numpy computation, which is what inference uses.

    >>> with Graph() as g:
    ...     x = Tensor([1.0, 2.0], requires_grad=True)
    ...     loss = sum_all(mul(x, x))
    >>> backward(g, loss, [x])[x]
    array([2., 4.])
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float32
MASK_VALUE = -1e9

_ACTIVE: list["Graph"] = []


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, (np.ndarray, np.floating)) and dtype is None and data.dtype in (np.float32, np.float64):
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=dtype or DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    """One recorded primitive application."""

    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Graph:
    """Tape of primitive applications, in creation (topological) order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def active_graph() -> Graph | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, inputs: tuple, vjp) -> Tensor:
    graph = active_graph()
    if graph is None or not any(t.requires_grad for t in inputs):
        return Tensor(out)
    result = Tensor(out, requires_grad=True)
    graph.nodes.append(Node(op, inputs, result, vjp))
    return result


def _shape_fail(op, *tensors, why=""):
    if tensors and isinstance(tensors[-1], str):
        *tensors, why = tensors
    shapes = ", ".join(str(t.shape) for t in tensors)
    raise ShapeError(f"{op}: incompatible shapes {shapes}" + (f" ({why})" if why else ""))


def _sum_to(g: np.ndarray, shape) -> np.ndarray:
    # reduces a gradient of a bias-added tensor back onto the bias shape
    if g.shape == shape:
        return g
    return g.reshape(-1, *shape).sum(axis=0)


def _is_bias(a: Tensor, b: Tensor) -> bool:
    return b.data.ndim == 1 and a.data.ndim >= 1 and b.shape[0] == a.shape[-1]


# --- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and not _is_bias(a, b):
        _shape_fail("add", a, b, "only bias-add over the last axis broadcasts")
    out = a.data + b.data

    def vjp(g):
        return g, _sum_to(g, b.shape)

    return _record("add", out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and not _is_bias(a, b):
        _shape_fail("sub", a, b)
    out = a.data - b.data

    def vjp(g):
        return g, -_sum_to(g, b.shape)

    return _record("sub", out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and not _is_bias(a, b):
        _shape_fail("mul", a, b)
    out = a.data * b.data

    def vjp(g):
        return g * b.data, _sum_to(g * a.data, b.shape)

    return _record("mul", out, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    out = a.data * a.data.dtype.type(c)

    def vjp(g):
        return (g * g.dtype.type(c),)

    return _record("scale", out, (a,), vjp)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1 - out * out),)

    return _record("tanh", out, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 0.5 * (1 + np.tanh(0.5 * a.data))

    def vjp(g):
        return (g * out * (1 - out),)

    return _record("sigmoid", out, (a,), vjp)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0)

    def vjp(g):
        return (g * (a.data > 0),)

    return _record("relu", out, (a,), vjp)


# --- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a`` is (..., n, k); ``b`` is (k, m) or (..., k, m) with the same leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        _shape_fail("matmul", a, b)
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        _shape_fail("matmul", a, b, "leading dims differ")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.data.ndim == 2:
            k, m = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _record("matmul", out, (a, b), vjp)


def linear(x, w, b=None) -> Tensor:
    x, w = _as_tensor(x), _as_tensor(w)
    if x.shape[-1] != w.shape[0] or w.data.ndim != 2:
        _shape_fail("linear", x, w)
    out = x.data @ w.data
    if b is None:
        inputs = (x, w)
    else:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            _shape_fail("linear", x, w, b)
        out = out + b.data
        inputs = (x, w, b)
    k, m = w.shape

    def vjp(g):
        g2 = g.reshape(-1, m)
        gx = g @ w.data.T
        gw = x.data.reshape(-1, k).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record("linear", out, inputs, vjp)


# --- normalisations ---------------------------------------------------------


def softmax(a) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax", out, (a,), vjp)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    out = _log_softmax(a.data)

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", out, (a,), vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        _shape_fail("layer_norm", x, gamma, beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, _sum_to(g * xhat, (c,)), _sum_to(g, (c,))

    return _record("layer_norm", out, (x, gamma, beta), vjp)


# --- indexing and reshaping -------------------------------------------------


def embedding(table, ids) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        _shape_fail("embedding", table)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table {table.shape}")
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record("embedding_gather", out, (table,), vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _record("reshape", out, (a,), vjp)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _record("transpose", out, (a,), vjp)


def getitem(a, key) -> Tensor:
    a = _as_tensor(a)
    out = a.data[key]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return _record("getitem", out, (a,), vjp)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        _shape_fail("concat", *tensors)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, tensors, vjp)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if len({t.shape for t in tensors}) != 1:
        _shape_fail("stack", *tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record("stack", out, tensors, vjp)


def expand(a, n: int, axis: int) -> Tensor:
    """Insert ``axis`` and repeat ``a`` ``n`` times along it."""
    a = _as_tensor(a)
    out = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)

    def vjp(g):
        return (g.sum(axis=axis),)

    return _record("expand", out, (a,), vjp)


# --- reductions -------------------------------------------------------------


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.sum())

    def vjp(g):
        return (np.full_like(a.data, g),)

    return _record("sum", out, (a,), vjp)


def sum_over_axis(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record("sum_over_axis", out, (a,), vjp)


def mean_over_axis(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    n = a.shape[axis]
    out = a.data.mean(axis=axis)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy(),)

    return _record("mean_over_axis", out, (a,), vjp)


def max_over_axis(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _record("max_over_axis", out, (a,), vjp)


# --- attention --------------------------------------------------------------


def scaled_dot_attention(q, k, v, mask=None):
    """Softmax(q k^T / sqrt(d) + mask) v.

    ``q`` is (..., Lq, d), ``k`` and ``v`` are (..., Lk, d). ``mask`` is a
    constant additive array broadcastable to (..., Lq, Lk). Returns the output
    tensor and the attention weights as a plain array.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if (q.shape[:-2] != k.shape[:-2] or k.shape != v.shape[:-1] + (k.shape[-1],)
            or q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]):
        _shape_fail("scaled_dot_attention", q, k, v)
    s = q.dtype.type(1.0 / np.sqrt(q.shape[-1]))
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * s
    if mask is not None:
        scores = scores + mask
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    out = w @ v.data

    def vjp(g):
        gv = np.swapaxes(w, -1, -2) @ g
        gw = g @ np.swapaxes(v.data, -1, -2)
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * s
        return gs @ k.data, np.swapaxes(gs, -1, -2) @ q.data, gv

    return _record("scaled_dot_attention", out, (q, k, v), vjp), w


# --- loss -------------------------------------------------------------------


def weighted_smoothed_ce(logits, targets, weights, smoothing: float = 0.0) -> Tensor:
    """Sum over positions of ``w_i * CE(smoothed one-hot(target_i), softmax(logits_i))``.

    The smoothed target puts ``1 - smoothing`` on the target class and
    ``smoothing / (V - 1)`` on every other class.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=logits.dtype)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1] or weights.shape != targets.shape:
        raise ShapeError(
            f"weighted_smoothed_ce: logits {logits.shape}, targets {targets.shape}, weights {weights.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError(f"weighted_smoothed_ce: target id out of range for {v} classes")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    q = np.full(logits.shape, smoothing / (v - 1), dtype=logits.dtype)
    np.put_along_axis(q, targets[..., None], 1.0 - smoothing, axis=-1)
    logp = _log_softmax(logits.data)
    out = np.asarray(-(weights * (q * logp).sum(axis=-1)).sum())

    def vjp(g):
        # sum(q) == 1, so d/dlogits = w * (p - q)
        return (g * weights[..., None] * (np.exp(logp) - q),)

    return _record("weighted_smoothed_ce", out, (logits,), vjp)


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "embedding_gather": embedding,
    "linear": linear,
    "scaled_dot_attention": scaled_dot_attention,
    "concat": concat,
    "stack": stack,
    "expand": expand,
    "reshape": reshape,
    "transpose": transpose,
    "getitem": getitem,
    "max_over_axis": max_over_axis,
    "mean_over_axis": mean_over_axis,
    "sum_over_axis": sum_over_axis,
    "sum": sum_all,
}


def primitive_forward(op_kind: str, *inputs, **kwargs):
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# --- reverse pass -----------------------------------------------------------


def backward(graph: Graph, loss: Tensor, wrt=None) -> dict:
    """Propagate d(loss)/d(.) through ``graph``.

    Returns a dict mapping each tensor in ``wrt`` to its gradient array; tensors
    that do not influence ``loss`` get exact zeros. With ``wrt=None`` every leaf
    tensor that requires grad and received a gradient is returned.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    produced = set()
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if not t.requires_grad or gi is None:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
            leaves.setdefault(key, t)
        produced.add(id(node.output))
    if wrt is None:
        return {t: grads[k] for k, t in leaves.items() if k in grads and k not in produced}
    return {t: grads.get(id(t), np.zeros_like(t.data)) for t in wrt}


# --- optimisation -----------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a fixed list of parameter tensors."""

    def __init__(self, params, lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict) -> None:
        adam_step(self.params, grads, self)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam/step": np.asarray([self.step_count], dtype=np.int64)}
        for i, p in enumerate(self.params):
            out[f"adam/m/{p.name or i}"] = self.m[i]
            out[f"adam/v/{p.name or i}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrays["adam/step"][0])
        for i, p in enumerate(self.params):
            self.m[i] = arrays[f"adam/m/{p.name or i}"].copy()
            self.v[i] = arrays[f"adam/v/{p.name or i}"].copy()


def adam_step(params, grads: dict, state: Adam) -> None:
    """One in-place Adam update of ``params``; ``grads`` maps tensor -> array."""
    state.step_count += 1
    b1, b2 = state.betas
    c1 = 1 - b1 ** state.step_count
    c2 = 1 - b2 ** state.step_count
    for i, p in enumerate(params):
        g = grads.get(p)
        if g is None:
            continue
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"adam_step: param {p.shape} grad {g.shape} moment {state.m[i].shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m[i]
        v = state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# --- gradient checking ------------------------------------------------------


def finite_diff_check(model_fn, params, epsilon: float = 1e-5, floor: float = 1e-5,
                      max_coords: int | None = None, rng=None) -> float:
    """Max relative error between ``backward`` and central differences.

    ``model_fn(params)`` must return a scalar Tensor. The check runs on float64
    copies of ``params``. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``; the floor keeps central-difference
    roundoff on exactly-zero gradients (about ``ulp(loss) / epsilon``) from
    reading as a large relative error. ``max_coords`` optionally subsamples
    the coordinates of each parameter.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    params64 = [Tensor(p.data.astype(np.float64), requires_grad=True, name=p.name) for p in params]
    with Graph() as g:
        loss = model_fn(params64)
    analytic = backward(g, loss, params64)

    worst = 0.0
    for p in params64:
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        ga = analytic[p].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(model_fn(params64).data)
            flat[i] = orig - epsilon
            down = float(model_fn(params64).data)
            flat[i] = orig
            num = (up - down) / (2 * epsilon)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor)
            worst = max(worst, err)
    return worst
