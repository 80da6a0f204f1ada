"""Dense float64 tensors plus reverse-mode autodiff on a per-step tape.

A `Graph` records every op applied to tensors attached to it; `backward`
walks the tape once in reverse append order (which is reverse topological
order, since inputs always precede outputs) and returns gradients for the
parameter leaves reachable from the loss. Graphs are built fresh for each
training step and discarded after backward.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    pass


class Tensor:
    """Immutable dense float64 array; optionally a node on a Graph.

    Values are never mutated after construction, so tensors are safe to
    share across threads and to keep in parameter stores.
    """

    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim > 0 and min(arr.shape) < 1:
            raise ValueError(f"tensor extents must be positive, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        arr.setflags(write=False)
        self.data = arr
        self.graph = None
        self.node_id = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, graph: "Graph | None" = None, node_id: int | None = None):
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64, order="C")  # keeps 0-d scalars 0-d
        if not arr.flags.c_contiguous or arr.base is not None:
            arr = arr.copy()
        arr.setflags(write=False)
        t.data = arr
        t.graph = graph
        t.node_id = node_id
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={self.data!r})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "inputs", "param_id", "requires_grad", "backward_fn")

    def __init__(self, op, inputs, param_id, requires_grad, backward_fn):
        self.op = op
        self.inputs = inputs  # node ids of the inputs, all < this node's id
        self.param_id = param_id
        self.requires_grad = requires_grad
        self.backward_fn = backward_fn


class Graph:
    """Append-only tape of op records for one forward/backward cycle."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self):
        return len(self._nodes)

    def _append(self, node: _Node) -> int:
        self._nodes.append(node)
        return len(self._nodes) - 1

    def param(self, param_id: str, t: Tensor) -> Tensor:
        """Attach a trainable parameter leaf; its gradient appears in the GradMap."""
        nid = self._append(_Node("leaf", (), param_id, True, None))
        return Tensor._wrap(t.data, self, nid)

    def constant(self, t: Tensor) -> Tensor:
        """Attach a non-trainable leaf (inputs, targets); no gradient is kept."""
        nid = self._append(_Node("const", (), None, False, None))
        return Tensor._wrap(t.data, self, nid)


def _attach(inputs: Sequence[Tensor]) -> Graph | None:
    graphs = {t.graph for t in inputs if isinstance(t, Tensor) and t.graph is not None}
    if len(graphs) > 1:
        raise ValueError("inputs belong to different graphs")
    return graphs.pop() if graphs else None


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray,
            backward_fn: Callable | None) -> Tensor:
    """Register one op on the inputs' graph; eager (untaped) if all detached."""
    graph = _attach(inputs)
    if graph is None:
        return Tensor._wrap(out)
    ids = []
    requires = False
    for t in inputs:
        if t.graph is None:
            t = graph.constant(t)
        ids.append(t.node_id)
        requires = requires or graph._nodes[t.node_id].requires_grad
    nid = graph._append(_Node(op, tuple(ids), None, requires, backward_fn))
    return Tensor._wrap(out, graph, nid)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _reduce_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy trailing-axes broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# ops

def add(a, b) -> Tensor:
    """Elementwise a + b; b may broadcast into a over trailing axes (bias)."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatchError(f"add: incompatible shapes {a.shape} and {b.shape}") from None
    if out.shape != a.shape:
        raise ShapeMismatchError(
            f"add: second operand {b.shape} must broadcast into first {a.shape}")
    b_shape = b.shape

    def backward_fn(g, needs):
        da = g if needs[0] else None
        db = _reduce_to_shape(g, b_shape) if needs[1] else None
        return da, db

    return _record("add", (a, b), out, backward_fn)


def mul(a, b) -> Tensor:
    """Elementwise product of same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mul: shapes differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def backward_fn(g, needs):
        return (g * bd if needs[0] else None, g * ad if needs[1] else None)

    return _record("mul", (a, b), ad * bd, backward_fn)


def scale(x, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    x = _as_tensor(x)
    c = float(c)

    def backward_fn(g, needs):
        return (c * g if needs[0] else None,)

    return _record("scale", (x,), c * x.data, backward_fn)


def matmul(a, b) -> Tensor:
    """2-D matrix product; backward dA = dC @ B^T, dB = A^T @ dC."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward_fn(g, needs):
        da = g @ bd.T if needs[0] else None
        db = ad.T @ g if needs[1] else None
        return da, db

    return _record("matmul", (a, b), ad @ bd, backward_fn)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    B, C, Hp, Wp = xp.shape
    ho = (Hp - kh) // stride + 1
    wo = (Wp - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp, (B, ho, wo, C, kh, kw), (s0, s2 * stride, s3 * stride, s1, s2, s3))
    return np.ascontiguousarray(patches).reshape(B * ho * wo, C * kh * kw), ho, wo


def conv2d(x, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    `x` is (C,H,W) or (B,C,H,W); `kernels` is (F,C,kh,kw). Output spatial
    extent is floor((H + 2*padding - kh)/stride) + 1 and must be positive.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    if kernels.data.ndim != 4:
        raise ShapeMismatchError(f"conv2d: kernels must be 4-D (F,C,kh,kw), got {kernels.shape}")
    batched = x.data.ndim == 4
    if not batched and x.data.ndim != 3:
        raise ShapeMismatchError(f"conv2d: input must be (C,H,W) or (B,C,H,W), got {x.shape}")
    xd = x.data if batched else x.data[None]
    B, C, H, W = xd.shape
    F, Ck, kh, kw = kernels.shape
    if Ck != C:
        raise ShapeMismatchError(
            f"conv2d: input channels {C} do not match kernel channels {Ck} "
            f"(input {x.shape}, kernels {kernels.shape})")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ShapeMismatchError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{H + 2 * padding}x{W + 2 * padding}")
    ho = (H + 2 * padding - kh) // stride + 1
    wo = (W + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeMismatchError(f"conv2d: degenerate output extent {ho}x{wo}")

    if padding:
        xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
        xp[:, :, padding:padding + H, padding:padding + W] = xd
    else:
        xp = xd
    cols, _, _ = _im2col(xp, kh, kw, stride)
    wmat = kernels.data.reshape(F, C * kh * kw)
    out = (cols @ wmat.T).reshape(B, ho, wo, F).transpose(0, 3, 1, 2)

    hp, wp = H + 2 * padding, W + 2 * padding

    def backward_fn(g, needs):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * ho * wo, F) if batched else \
            g[None].transpose(0, 2, 3, 1).reshape(ho * wo, F)
        dk = (gmat.T @ cols).reshape(F, C, kh, kw) if needs[1] else None
        dx = None
        if needs[0]:
            dcols = (gmat @ wmat).reshape(B, ho, wo, C, kh, kw)
            dxp = np.zeros((B, C, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + H, padding:padding + W]
            if not batched:
                dx = dx[0]
        return dx, dk

    return _record("conv2d", (x, kernels), out if batched else out[0], backward_fn)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data

    def backward_fn(g, needs):
        return (g * (xd > 0) if needs[0] else None,)

    return _record("relu", (x,), np.maximum(xd, 0.0), backward_fn)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    e = np.exp(-np.abs(x.data))  # stable for large |x|
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward_fn(g, needs):
        return (g * s * (1.0 - s) if needs[0] else None,)

    return _record("sigmoid", (x,), s, backward_fn)


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax over one axis (default last), stabilized by max subtraction."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g, needs):
        if not needs[0]:
            return (None,)
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (x,), s, backward_fn)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "softmax": softmax}


def apply_activation(x, kind: str) -> Tensor:
    """Apply relu, sigmoid, or softmax-over-last-axis."""
    x = _as_tensor(x)
    if kind not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    if np.isnan(x.data).any():
        raise ValueError("activation input contains NaN")
    return _ACTIVATIONS[kind](x)


def global_avg_pool(x) -> Tensor:
    """Mean over the two trailing spatial axes: (...,C,H,W) -> (...,C)."""
    x = _as_tensor(x)
    if x.data.ndim not in (3, 4):
        raise ShapeMismatchError(f"global_avg_pool: need (C,H,W) or (B,C,H,W), got {x.shape}")
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1))

    def backward_fn(g, needs):
        if not needs[0]:
            return (None,)
        return (np.broadcast_to(g[..., None, None] / (h * w), x.shape).copy(),)

    return _record("global_avg_pool", (x,), out, backward_fn)


def upsample_nearest(x, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of the two trailing axes by an integer factor."""
    x = _as_tensor(x)
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if x.data.ndim not in (3, 4):
        raise ShapeMismatchError(f"upsample_nearest: need (C,H,W) or (B,C,H,W), got {x.shape}")
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)
    h, w = x.shape[-2:]

    def backward_fn(g, needs):
        if not needs[0]:
            return (None,)
        gv = g.reshape(g.shape[:-2] + (h, factor, w, factor))
        return (gv.sum(axis=(-3, -1)),)

    return _record("upsample_nearest", (x,), out, backward_fn)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeMismatchError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape

    def backward_fn(g, needs):
        return (g.reshape(old).copy() if needs[0] else None,)

    return _record("reshape", (x,), x.data.reshape(shape), backward_fn)


def tensor_sum(x) -> Tensor:
    """Full reduction to a scalar."""
    x = _as_tensor(x)
    shp = x.shape

    def backward_fn(g, needs):
        return (np.full(shp, float(g)) if needs[0] else None,)

    return _record("sum", (x,), np.asarray(x.data.sum()), backward_fn)


def _check_labels(labels: np.ndarray, k: int, expect_shape: tuple[int, ...]):
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.shape != expect_shape:
        raise ShapeMismatchError(f"labels shape {labels.shape}, expected {expect_shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels.min() if labels.min() < 0 else labels.max()
        raise ValueError(f"label {bad} out of range for {k} classes")
    return labels


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-softmax-probability of the target class.

    Accepts (B,K) logits with (B,) labels, (K,H,W) with (H,W), or
    (B,K,H,W) with (B,H,W). Computed through log-sum-exp, never through
    an explicit softmax.
    """
    logits = _as_tensor(logits)
    ld = logits.data
    if ld.ndim == 2:
        xd, squeeze = ld[:, :, None, None], True
    elif ld.ndim == 3:
        xd, squeeze = ld[None], True
    elif ld.ndim == 4:
        xd, squeeze = ld, False
    else:
        raise ShapeMismatchError(f"cross_entropy: unsupported logits shape {logits.shape}")
    B, K, H, W = xd.shape
    lab_shape = {2: (ld.shape[0],), 3: ld.shape[1:], 4: (B, H, W)}[ld.ndim]
    labels = _check_labels(labels, K, lab_shape).reshape(B, H, W)

    m = xd.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(xd - m).sum(axis=1, keepdims=True))  # (B,1,H,W)
    bi, hi, wi = np.ogrid[:B, :H, :W]
    picked = xd[bi, labels, hi, wi]
    n = B * H * W
    loss = (lse[:, 0] - picked).sum() / n

    def backward_fn(g, needs):
        if not needs[0]:
            return (None,)
        p = np.exp(xd - lse)
        p[bi, labels, hi, wi] -= 1.0
        d = p * (float(g) / n)
        if squeeze:
            d = d[:, :, 0, 0] if ld.ndim == 2 else d[0]
        return (d,)

    return _record("cross_entropy", (logits,), np.asarray(loss), backward_fn)


def binary_cross_entropy(logits, targets) -> Tensor:
    """Mean sigmoid binary cross-entropy from logits, numerically stable."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ShapeMismatchError(
            f"binary_cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0.0 or targets.max() > 1.0):
        raise ValueError("binary targets must lie in [0, 1]")
    z = logits.data
    n = max(z.size, 1)
    loss = (np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))).sum() / n

    def backward_fn(g, needs):
        if not needs[0]:
            return (None,)
        e = np.exp(-np.abs(z))
        s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return ((s - targets) * (float(g) / n),)

    return _record("binary_cross_entropy", (logits,), np.asarray(loss), backward_fn)


# ---------------------------------------------------------------------------
# reverse pass

def backward(loss: Tensor) -> dict[str, Tensor]:
    """Reverse-mode gradients of a scalar loss for every reachable parameter leaf.

    Returns a GradMap {param_id: gradient tensor}; parameters with no path
    to the loss are absent. Deterministic: the tape fixes the visit and
    accumulation order.
    """
    if loss.graph is None:
        raise ValueError("loss is not attached to a graph")
    if loss.data.shape != ():
        raise ValueError(f"loss must be a scalar, got shape {loss.data.shape}")
    nodes = loss.graph._nodes
    grads: list[np.ndarray | None] = [None] * (loss.node_id + 1)
    grads[loss.node_id] = np.asarray(1.0)

    for nid in range(loss.node_id, -1, -1):
        g = grads[nid]
        node = nodes[nid]
        if g is None or node.backward_fn is None:
            continue
        needs = tuple(nodes[i].requires_grad for i in node.inputs)
        in_grads = node.backward_fn(g, needs)
        for iid, ig in zip(node.inputs, in_grads):
            if ig is None:
                continue
            grads[iid] = np.array(ig) if grads[iid] is None else grads[iid] + ig
        grads[nid] = None  # free as we go

    out: dict[str, Tensor] = {}
    for nid in range(loss.node_id + 1):
        node = nodes[nid]
        if node.param_id is not None and grads[nid] is not None:
            if node.param_id in out:
                out[node.param_id] = Tensor._wrap(out[node.param_id].data + grads[nid])
            else:
                out[node.param_id] = Tensor._wrap(grads[nid])
    return out


def finite_diff_grad(f, p: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient oracle: (f(p + h e_i) - f(p - h e_i)) / 2h."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = p.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        bump = np.zeros_like(base).reshape(-1)
        bump[i] = h
        bump = bump.reshape(base.shape)
        fp = f(Tensor._wrap(base + bump))
        fm = f(Tensor._wrap(base - bump))
        fp = fp.item() if isinstance(fp, Tensor) else float(fp)
        fm = fm.item() if isinstance(fm, Tensor) else float(fm)
        flat[i] = (fp - fm) / (2.0 * h)
    return Tensor._wrap(grad)
