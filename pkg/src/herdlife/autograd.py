"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (if any). Outside a
tape nothing is recorded, which is how inference runs.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> grads = tape.backward(loss)
    >>> grads[w].tolist()
    [[2.0, 4.0]]
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise ValueError(f"zero extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; every operator routes through a recorded op
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


class _Node:
    __slots__ = ("out", "parents", "backward", "index")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward, index: int):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.index = index


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so every node's parents are
    already on the tape. A tape can be swept backward exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node | None] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward) -> None:
        node = _Node(out, parents, backward, len(self.nodes))
        out._node = node
        out.requires_grad = True
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Sweep the tape in reverse from ``loss``; return gradients of leaves.

        Leaf gradients are also accumulated into ``Tensor.grad``.
        """
        if self.consumed:
            raise RuntimeError("backward already called on this tape; rebuild it with a new forward pass")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        node = loss._node
        if node is None or node.index >= len(self.nodes) or self.nodes[node.index] is not node:
            raise ValueError("loss was not recorded on this tape")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for n in reversed(self.nodes[: node.index + 1]):
            g = grads.pop(id(n.out), None)
            if g is None:
                continue
            for parent, pg in zip(n.parents, n.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if parent._node is None:
                    leaves[key] = parent

        out: dict[Tensor, np.ndarray] = {}
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            out[leaf] = g
        self._release(node)
        return out

    def _release(self, keep: _Node) -> None:
        # outputs and nodes point at each other, so without this the graph and its
        # activations wait for the cyclic collector; the loss node stays findable
        # so a second backward reports the consumed tape
        for i, n in enumerate(self.nodes):
            n.backward = None
            n.parents = ()
            if n is not keep:
                n.out._node = None
                self.nodes[i] = None


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Backward over the tape that recorded ``loss``."""
    if loss._node is None:
        raise ValueError("loss is not on any tape")
    for tape in _ACTIVE:
        if loss._node.index < len(tape.nodes) and tape.nodes[loss._node.index] is loss._node:
            return tape.backward(loss)
    raise ValueError("the tape that recorded this loss is no longer active; use Tape.backward")


def no_tape() -> bool:
    return not _ACTIVE


# ---------------------------------------------------------------------------
# op plumbing


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"{op}: non-finite values in output")
    return arr


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(_finite(data, op))
    if _ACTIVE and any(p.requires_grad for p in parents):
        _ACTIVE[-1].record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def exp(a) -> Tensor:
    a = _t(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _t(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = _t(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = _t(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(out, (a,), back, "gelu")


# ---------------------------------------------------------------------------
# reductions and shape


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _t(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), back, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _t(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = _t(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _t(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with optional leading batch extents (numpy semantics)."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), back, "matmul")


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` with ``b`` broadcast over leading axes."""
    x, w, b = _t(x), _t(w), _t(b)
    if b.shape != (w.shape[-1],):
        raise ValueError(f"bias shape {b.shape} does not match output width {w.shape[-1]}")
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# normalisation


def masked_softmax(x, mask) -> Tensor:
    """Softmax over the last axis; positions with mask 0 get exactly zero weight."""
    x = _t(x)
    m = np.broadcast_to(np.asarray(mask.data if isinstance(mask, Tensor) else mask) != 0, x.shape)
    if not m.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has every position masked")
    z = np.where(m, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), back, "masked_softmax")


def softmax(x) -> Tensor:
    x = _t(x)
    return masked_softmax(x, np.ones(x.shape[-1]))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: gamma/beta must have shape ({d},)")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), back, "layer_norm")


def masked_mean(x, mask) -> Tensor:
    """Mean of ``x`` (B, L, D) over valid positions of ``mask`` (B, L)."""
    x = _t(x)
    m = np.asarray(mask, dtype=np.float64)
    counts = m.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise ValueError("masked_mean: a sample has no valid positions")
    w = (m / counts)[:, :, None]
    return _make((x.data * w).sum(axis=1), (x,), lambda g: (g[:, None, :] * w,), "masked_mean")


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred, target) -> Tensor:
    pred, target = _t(pred), _t(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    if pred.data.size == 0:
        raise ValueError("mse_loss: empty batch")
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def cross_entropy_loss(logits, class_index, mask=None) -> Tensor:
    """Mean negative log-softmax of the true class over (optionally masked) rows."""
    logits = _t(logits)
    idx = np.asarray(class_index, dtype=np.int64)
    n, k = logits.shape
    if idx.shape != (n,) or n == 0:
        raise ValueError("cross_entropy_loss: need one class index per row and a non-empty batch")
    if (idx < 0).any() or (idx >= k).any():
        raise ValueError(f"cross_entropy_loss: class index outside [0, {k})")
    w = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64)
    if w.sum() <= 0:
        raise ValueError("cross_entropy_loss: empty batch after masking")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -(w * logp[rows, idx]).sum() / w.sum()

    def back(g):
        p = np.exp(logp)
        p[rows, idx] -= 1.0
        return (g * p * (w / w.sum())[:, None],)

    return _make(np.asarray(loss), (logits,), back, "cross_entropy")


# ---------------------------------------------------------------------------
# utilities


def randn(shape: Sequence[int], seed: int, scale: float = 1.0, requires_grad: bool = False) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ValueError(f"randn: shape must be non-empty with positive extents, got {shape}")
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad)


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0:
        return _t(x)
    keep = (rng.random(_t(x).shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


def grad_check(fn: Callable[..., Tensor], point, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``point`` is an array (or a sequence of arrays); ``fn`` receives one
    Tensor per array and returns a scalar Tensor. Relative error per
    coordinate uses ``max(|a|, |b|, 1e-6 * max(1, |f|))`` as denominator.
    """
    if h <= 0:
        raise ValueError("grad_check: step h must be positive")
    if isinstance(point, (list, tuple)) and point and all(isinstance(p, np.ndarray) for p in point):
        arrays = [np.array(p, dtype=np.float64) for p in point]
    else:
        arrays = [np.array(point, dtype=np.float64)]

    params = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*params)
    if loss.data.size != 1:
        raise ValueError("grad_check: function must be scalar-valued")
    grads = tape.backward(loss)

    worst = 0.0
    for p, a in zip(params, arrays):
        analytic = grads.get(p, np.zeros_like(a))
        numeric = _central_diff(fn, arrays, a, h)
        worst = max(worst, _max_rel(analytic, numeric, loss.item()))
    return worst


def _central_diff(fn, arrays, target: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros_like(target)
    flat = target.reshape(-1)
    res = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(*[Tensor(a) for a in arrays]).item()
        flat[i] = orig - h
        fm = fn(*[Tensor(a) for a in arrays]).item()
        flat[i] = orig
        res[i] = (fp - fm) / (2 * h)
    return out


# central differences carry roundoff of order eps * |f| / h, so gradients that
# are exactly zero (e.g. a key bias under softmax) need a floor; scaling it by
# |f| keeps the check invariant to rescaling the function
REL_FLOOR = 1e-6


def _max_rel(a: np.ndarray, b: np.ndarray, f_scale: float = 1.0) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR * max(1.0, abs(f_scale)))
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0


def param_grad_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
                     max_coords: int | None = None, seed: int = 0) -> float:
    """Gradient check over existing parameter tensors, perturbed in place.

    ``max_coords`` samples that many coordinates per tensor (all when None).
    """
    if h <= 0:
        raise ValueError("grad_check: step h must be positive")
    params = list(params)
    for p in params:
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = grads.get(p, np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, max_coords, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * h)
        worst = max(worst, _max_rel(analytic[idx], numeric, loss.item()))
    return worst
