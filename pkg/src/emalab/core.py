"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

The model is a step-scoped tape: while a :class:`Tape` is active (used as a
context manager), every primitive applied to a tensor that requires grad
records one node. :func:`op_backward` then walks the tape in reverse and
returns a :class:`GradMap` holding the gradient of a scalar loss with
respect to every recorded node, leaves and intermediates alike.
Intermediate gradients are kept on purpose: telemetry reads the gradient
at each stage output without a second backward pass.

With no active tape, primitives are pure functions (evaluation mode).

Primitives validate shapes and reject non-finite inputs/outputs at the op
boundary, naming the offending primitive.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

# Numerical floors. l2 normalization clamps row norms at EPS_NORM; batch
# norm variance is regularized by BN_EPS. Running statistics use
# BN_MOMENTUM (only observable in eval-mode forwards).
EPS_NORM = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _as_f64(data) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    return arr


class Tensor:
    """A dense float64 array that may participate in a recorded computation.

    ``node`` identifies this tensor on the tape it was recorded on (``None``
    when the tensor never touched a tape). Values are treated as immutable
    while a tape referencing them is alive; the optimizer mutates parameter
    buffers only after the step's backward pass has consumed the tape.
    """

    __slots__ = ("data", "requires_grad", "node", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = _as_f64(data)
        if any(int(s) <= 0 for s in arr.shape):
            raise DimensionError(f"tensor dims must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: Optional[int] = None
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def detach(self) -> "Tensor":
        """Value-sharing copy with gradient flow terminated (see op_detach)."""
        return op_detach(self)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    """One recorded primitive application.

    ``input_ids`` aligns with the primitive's inputs; ``None`` marks a
    constant input that receives no gradient.
    """

    kind: str
    input_ids: tuple
    ctx: dict


class Tape:
    """Step-scoped record of primitive applications in topological order."""

    _local = threading.local()

    def __init__(self):
        self.nodes: list[Node] = []

    # -- active-tape bookkeeping ------------------------------------------

    @classmethod
    def current(cls) -> Optional["Tape"]:
        stack = getattr(cls._local, "stack", None)
        return stack[-1] if stack else None

    def __enter__(self) -> "Tape":
        stack = getattr(Tape._local, "stack", None)
        if stack is None:
            stack = []
            Tape._local.stack = stack
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._local.stack.pop()
        return False

    # -- node management ---------------------------------------------------

    def register(self, t: Tensor) -> int:
        """Return the node id of ``t`` on this tape, adding a leaf if absent."""
        if t._tape is self and t.node is not None:
            return t.node
        nid = len(self.nodes)
        self.nodes.append(Node("leaf", (), {"shape": t.shape}))
        t.node = nid
        t._tape = self
        return nid

    def __len__(self) -> int:
        return len(self.nodes)


class GradMap:
    """Mapping node-id -> gradient tensor produced by one backward pass.

    An absent entry means there is no gradient path from the loss to that
    node, which is how stop-gradient assertions are expressed.
    """

    def __init__(self, tape: Tape, grads: dict):
        self.tape = tape
        self._grads = grads

    def get(self, t: Tensor) -> Optional[Tensor]:
        """Gradient of the loss w.r.t. ``t``, or None if no path exists."""
        if t._tape is not self.tape or t.node is None:
            return None
        g = self._grads.get(t.node)
        return None if g is None else Tensor(g)

    def by_node(self, node_id: int) -> Optional[Tensor]:
        g = self._grads.get(node_id)
        return None if g is None else Tensor(g)

    def __contains__(self, t: Tensor) -> bool:
        return self.get(t) is not None

    def __len__(self) -> int:
        return len(self._grads)


# ---------------------------------------------------------------------------
# Primitive forward/backward implementations.
#
# A forward takes (datas, attrs) and returns (out_data, ctx); the matching
# backward takes (g, ctx, needs) and returns one gradient per input (None
# when needs[i] is False).
# ---------------------------------------------------------------------------


def _require_2d(kind: str, name: str, a: np.ndarray) -> None:
    if a.ndim != 2:
        raise DimensionError(f"{kind}: {name} must be 2-d, got shape {a.shape}")


def _fw_matmul(datas, attrs):
    a, b = datas
    _require_2d("matmul", "lhs", a)
    _require_2d("matmul", "rhs", b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    return a @ b, {"a": a, "b": b}


def _bw_matmul(g, ctx, needs):
    ga = g @ ctx["b"].T if needs[0] else None
    gb = ctx["a"].T @ g if needs[1] else None
    return [ga, gb]


def _fw_add_bias(datas, attrs):
    x, b = datas
    _require_2d("add_bias", "input", x)
    if b.ndim != 1 or b.shape[0] != x.shape[1]:
        raise DimensionError(f"add_bias: bias shape {b.shape} does not match input {x.shape}")
    return x + b, {}


def _bw_add_bias(g, ctx, needs):
    gx = g if needs[0] else None
    gb = g.sum(axis=0) if needs[1] else None
    return [gx, gb]


def _fw_add(datas, attrs):
    a, b = datas
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes differ, {a.shape} vs {b.shape}")
    return a + b, {}


def _bw_add(g, ctx, needs):
    return [g if needs[0] else None, g if needs[1] else None]


def _fw_relu(datas, attrs):
    (x,) = datas
    return np.maximum(x, 0.0), {"mask": x > 0.0}


def _bw_relu(g, ctx, needs):
    return [g * ctx["mask"] if needs[0] else None]


def _fw_batch_norm(datas, attrs):
    x, gamma, beta = datas
    _require_2d("batch_norm", "input", x)
    n = x.shape[1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"batch_norm: affine shapes {gamma.shape}/{beta.shape} do not match width {n}")
    eps = attrs.get("eps", BN_EPS)
    training = bool(attrs["training"])
    if training:
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv
        if attrs.get("update_stats", True):
            mom = attrs.get("momentum", BN_MOMENTUM)
            rm, rv = attrs["running_mean"], attrs["running_var"]
            rm[...] = mom * rm + (1.0 - mom) * mu
            rv[...] = mom * rv + (1.0 - mom) * var
    else:
        rm, rv = attrs["running_mean"], attrs["running_var"]
        inv = 1.0 / np.sqrt(rv + eps)
        xhat = (x - rm) * inv
    out = gamma * xhat + beta
    return out, {"xhat": xhat, "inv": inv, "gamma": gamma, "m": x.shape[0], "training": training}


def _bw_batch_norm(g, ctx, needs):
    xhat, inv, gamma, m = ctx["xhat"], ctx["inv"], ctx["gamma"], ctx["m"]
    ggamma = (g * xhat).sum(axis=0) if needs[1] else None
    gbeta = g.sum(axis=0) if needs[2] else None
    gx = None
    if needs[0]:
        if ctx["training"]:
            dxhat = g * gamma
            gx = (inv / m) * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            gx = g * gamma * inv
    return [gx, ggamma, gbeta]


def _rows_view(x: np.ndarray) -> np.ndarray:
    # 1-d vectors are treated as a single row.
    return x[None, :] if x.ndim == 1 else x


def _fw_l2_normalize(datas, attrs):
    (x,) = datas
    if x.ndim not in (1, 2):
        raise DimensionError(f"l2_normalize: expected 1-d or 2-d input, got shape {x.shape}")
    eps = attrs.get("eps", EPS_NORM)
    rows = _rows_view(x)
    norms = np.sqrt((rows * rows).sum(axis=1))
    denom = np.maximum(norms, eps)
    y = rows / denom[:, None]
    out = y[0] if x.ndim == 1 else y
    return out, {"y": y, "denom": denom, "clamped": norms < eps, "eps": eps, "ndim": x.ndim}


def _bw_l2_normalize(g, ctx, needs):
    if not needs[0]:
        return [None]
    y, denom, clamped, eps = ctx["y"], ctx["denom"], ctx["clamped"], ctx["eps"]
    grows = _rows_view(g)
    proj = (grows * y).sum(axis=1, keepdims=True)
    gx = (grows - y * proj) / denom[:, None]
    if clamped.any():
        # Clamped rows use the constant denominator eps, so the Jacobian
        # degenerates to I/eps.
        gx = np.where(clamped[:, None], grows / eps, gx)
    return [gx[0] if ctx["ndim"] == 1 else gx]


def _fw_softmax(datas, attrs):
    (x,) = datas
    if x.ndim not in (1, 2):
        raise DimensionError(f"softmax: expected 1-d or 2-d input, got shape {x.shape}")
    rows = _rows_view(x)
    shifted = rows - rows.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = y[0] if x.ndim == 1 else y
    return out, {"y": y, "ndim": x.ndim}


def _bw_softmax(g, ctx, needs):
    if not needs[0]:
        return [None]
    y = ctx["y"]
    grows = _rows_view(g)
    inner = (grows * y).sum(axis=1, keepdims=True)
    gx = y * (grows - inner)
    return [gx[0] if ctx["ndim"] == 1 else gx]


def _fw_concat_rows(datas, attrs):
    a, b = datas
    _require_2d("concat_rows", "lhs", a)
    _require_2d("concat_rows", "rhs", b)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"concat_rows: column counts differ, {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=0), {"m1": a.shape[0]}


def _bw_concat_rows(g, ctx, needs):
    m1 = ctx["m1"]
    return [g[:m1] if needs[0] else None, g[m1:] if needs[1] else None]


def _fw_scale(datas, attrs):
    (x,) = datas
    factor = float(attrs["factor"])
    if not np.isfinite(factor):
        raise NumericError("scale: non-finite factor")
    return factor * x, {"factor": factor}


def _bw_scale(g, ctx, needs):
    return [ctx["factor"] * g if needs[0] else None]


def _sorted_mean(values: np.ndarray) -> float:
    # Order-independent reduction: summing in sorted order makes the result
    # invariant to row permutations (view swaps), bit for bit.
    return float(np.sort(values).sum() / values.shape[0])


def _fw_neg_cosine_rowwise(datas, attrs):
    p, z = datas
    _require_2d("neg_cosine_rowwise", "anchors", p)
    _require_2d("neg_cosine_rowwise", "targets", z)
    if p.shape != z.shape:
        raise DimensionError(f"neg_cosine_rowwise: shapes differ, {p.shape} vs {z.shape}")
    eps = attrs.get("eps", EPS_NORM)
    pn = np.sqrt((p * p).sum(axis=1))
    zn = np.sqrt((z * z).sum(axis=1))
    pd = np.maximum(pn, eps)
    zd = np.maximum(zn, eps)
    ph = p / pd[:, None]
    zh = z / zd[:, None]
    cos = (ph * zh).sum(axis=1)
    loss = np.asarray(-_sorted_mean(cos))
    ctx = {
        "ph": ph, "zh": zh, "pd": pd, "zd": zd, "cos": cos,
        "p_clamped": pn < eps, "z_clamped": zn < eps, "eps": eps, "m": p.shape[0],
    }
    return loss, ctx


def _bw_neg_cosine_rowwise(g, ctx, needs):
    ph, zh, cos, m, eps = ctx["ph"], ctx["zh"], ctx["cos"], ctx["m"], ctx["eps"]
    coeff = -float(np.asarray(g).reshape(-1)[0]) / m
    gp = gz = None
    if needs[0]:
        gp = coeff * (zh - ph * cos[:, None]) / ctx["pd"][:, None]
        if ctx["p_clamped"].any():
            gp = np.where(ctx["p_clamped"][:, None], coeff * zh / eps, gp)
    if needs[1]:
        gz = coeff * (ph - zh * cos[:, None]) / ctx["zd"][:, None]
        if ctx["z_clamped"].any():
            gz = np.where(ctx["z_clamped"][:, None], coeff * ph / eps, gz)
    return [gp, gz]


def _fw_soft_cross_entropy(datas, attrs):
    x, t = datas
    _require_2d("soft_cross_entropy", "logits", x)
    _require_2d("soft_cross_entropy", "targets", t)
    if x.shape != t.shape:
        raise DimensionError(f"soft_cross_entropy: shapes differ, {x.shape} vs {t.shape}")
    mx = x.max(axis=1, keepdims=True)
    lse = mx + np.log(np.exp(x - mx).sum(axis=1, keepdims=True))
    logp = x - lse
    ce = -(t * logp).sum(axis=1)
    loss = np.asarray(_sorted_mean(ce))
    return loss, {"softmax": np.exp(logp), "t": t, "logp": logp, "m": x.shape[0]}


def _bw_soft_cross_entropy(g, ctx, needs):
    m = ctx["m"]
    coeff = float(np.asarray(g).reshape(-1)[0]) / m
    gx = gt = None
    if needs[0]:
        trow = ctx["t"].sum(axis=1, keepdims=True)
        gx = coeff * (trow * ctx["softmax"] - ctx["t"])
    if needs[1]:
        gt = coeff * (-ctx["logp"])
    return [gx, gt]


_PRIMITIVES: dict[str, tuple[Callable, Optional[Callable]]] = {
    "matmul": (_fw_matmul, _bw_matmul),
    "add_bias": (_fw_add_bias, _bw_add_bias),
    "add": (_fw_add, _bw_add),
    "relu": (_fw_relu, _bw_relu),
    "batch_norm": (_fw_batch_norm, _bw_batch_norm),
    "l2_normalize": (_fw_l2_normalize, _bw_l2_normalize),
    "softmax": (_fw_softmax, _bw_softmax),
    "concat_rows": (_fw_concat_rows, _bw_concat_rows),
    "scale": (_fw_scale, _bw_scale),
    "detach_mark": (None, None),  # handled inline in op_forward
    "neg_cosine_rowwise": (_fw_neg_cosine_rowwise, _bw_neg_cosine_rowwise),
    "soft_cross_entropy": (_fw_soft_cross_entropy, _bw_soft_cross_entropy),
}


def _check_finite(kind: str, role: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite {role} in primitive '{kind}'")


def op_forward(kind: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Apply one primitive, recording a tape node when gradients are needed."""
    if kind not in _PRIMITIVES:
        raise ContractError(f"unknown primitive kind '{kind}'")
    attrs = attrs or {}
    for t in inputs:
        if not isinstance(t, Tensor):
            raise ContractError(f"{kind}: inputs must be Tensors, got {type(t).__name__}")
        _check_finite(kind, "input", t.data)

    if kind == "detach_mark":
        (t,) = inputs
        return Tensor(t.data)

    fw, _ = _PRIMITIVES[kind]
    out_data, ctx = fw([t.data for t in inputs], attrs)
    _check_finite(kind, "output", out_data)

    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        input_ids = tuple(tape.register(t) if t.requires_grad else None for t in inputs)
        out = Tensor(out_data, requires_grad=True)
        out.node = len(tape.nodes)
        out._tape = tape
        tape.nodes.append(Node(kind, input_ids, ctx))
        return out
    return Tensor(out_data)


def op_detach(t: Tensor) -> Tensor:
    """Share values, terminate gradient flow."""
    return op_forward("detach_mark", [t])


def op_backward(tape: Tape, loss: Tensor) -> GradMap:
    """Reverse-mode gradients of a scalar loss over one tape.

    Every node reachable from the loss gets an entry, including
    intermediates. Constant inputs and anything behind a detach_mark are
    absent by construction.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if loss._tape is not tape or loss.node is None:
        raise ContractError("loss does not belong to this tape")

    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for nid in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[nid]
        if node.kind == "leaf" or nid not in grads:
            continue
        _, bw = _PRIMITIVES[node.kind]
        needs = [iid is not None for iid in node.input_ids]
        input_grads = bw(grads[nid], node.ctx, needs)
        for iid, ig in zip(node.input_ids, input_grads):
            if iid is None or ig is None:
                continue
            prev = grads.get(iid)
            grads[iid] = ig if prev is None else prev + ig
    return GradMap(tape, grads)


def op_grad_check(chain: Callable[[Tensor], Tensor], input_tensor: Tensor, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``chain`` maps one tensor to a scalar tensor and must be deterministic
    and side-effect free; it is re-evaluated 2*size times for the numeric
    side.
    """
    if h <= 0:
        raise ContractError("step size h must be positive")
    base = input_tensor.data.copy()

    with Tape() as tape:
        t = Tensor(base, requires_grad=True)
        loss = chain(t)
        if loss.size != 1:
            raise ContractError("grad-check chain must produce a scalar")
        gm = op_backward(tape, loss)
    g = gm.get(t)
    analytic = np.zeros_like(base) if g is None else g.data

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        for sign, slot in ((+h, 0), (-h, 1)):
            pert = base.copy()
            pert.reshape(-1)[i] += sign
            val = chain(Tensor(pert)).item()
            if slot == 0:
                fplus = val
            else:
                fminus = val
        flat[i] = (fplus - fminus) / (2.0 * h)

    denom = np.maximum(np.abs(analytic), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# Convenience wrappers used by the rest of the library.
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return op_forward("matmul", [a, b])


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    return op_forward("add_bias", [x, b])


def add(a: Tensor, b: Tensor) -> Tensor:
    return op_forward("add", [a, b])


def relu(x: Tensor) -> Tensor:
    return op_forward("relu", [x])


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    *,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    update_stats: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    attrs = {
        "running_mean": running_mean,
        "running_var": running_var,
        "training": training,
        "update_stats": update_stats,
        "momentum": momentum,
        "eps": eps,
    }
    return op_forward("batch_norm", [x, gamma, beta], attrs)


def l2_normalize(x: Tensor, eps: float = EPS_NORM) -> Tensor:
    return op_forward("l2_normalize", [x], {"eps": eps})


def softmax(x: Tensor) -> Tensor:
    return op_forward("softmax", [x])


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    return op_forward("concat_rows", [a, b])


def scale(x: Tensor, factor: float) -> Tensor:
    return op_forward("scale", [x], {"factor": factor})


def neg_cosine_rowwise(p: Tensor, z: Tensor, eps: float = EPS_NORM) -> Tensor:
    return op_forward("neg_cosine_rowwise", [p, z], {"eps": eps})


def soft_cross_entropy(logits: Tensor, targets: Tensor) -> Tensor:
    return op_forward("soft_cross_entropy", [logits, targets])
