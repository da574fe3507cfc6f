"""Dense tensors with reverse-mode automatic differentiation.

Tensors are plain ``numpy.ndarray`` values in double precision, row-major.
Differentiable computations are recorded on a :class:`Tape`: every value
(leaf or intermediate) gets a monotonically increasing integer id, and each
non-leaf node stores its parent ids plus a closure that maps the upstream
gradient to per-parent gradients. :func:`backward` replays the nodes in
strict reverse registration order, accumulating gradients additively over
fan-out, and returns a gradient for every registered id.

Beyond the usual arithmetic this module provides the two operators the rest
of the system is built around:

* :func:`gradient_reversal`: identity in the forward pass; multiplies the
  upstream gradient by ``-lam`` in the backward pass, which turns gradient
  descent on the downstream loss into adversarial ascent for everything
  upstream of the layer.
* :func:`kron_rows`: the row-wise Kronecker product fusing a feature row
  with a class-distribution row into a single joint-representation row.
"""

from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np

from .errors import ContractError, ShapeError

Tensor = np.ndarray

# Epsilon used by log_eps callers throughout the package; keeps logarithms
# of saturated probabilities finite.
LOG_EPS = 1e-12

_kron_invocations = 0


def kron_call_count() -> int:
    """Number of kron_rows forward calls since the last reset."""
    return _kron_invocations


def reset_kron_call_count() -> None:
    global _kron_invocations
    _kron_invocations = 0


def tensor(data, shape: Sequence[int] | None = None) -> Tensor:
    """Build a float64 row-major tensor and validate it is finite.

    ``data`` may be a scalar, a (nested) sequence, or an ndarray; ``shape``
    optionally reshapes a flat payload.
    """
    arr = np.array(data, dtype=np.float64, order="C")
    if shape is not None:
        arr = arr.reshape(tuple(shape))
    if not np.all(np.isfinite(arr)):
        raise ContractError("tensor data must be finite")
    return arr


def zeros(shape: Sequence[int]) -> Tensor:
    return np.zeros(tuple(shape), dtype=np.float64)


def one_hot(indices: Sequence[int], num_classes: int) -> Tensor:
    """One-hot rows, one per index, exact 0.0/1.0 entries."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= num_classes):
        raise ContractError(
            f"one_hot index out of range for {num_classes} classes"
        )
    out = np.zeros((idx.size, num_classes), dtype=np.float64)
    out[np.arange(idx.size), idx] = 1.0
    return out


BackwardRule = Callable[[np.ndarray], tuple]


class Var:
    """Handle to a value registered on a tape."""

    __slots__ = ("tape", "vid")

    def __init__(self, tape: "Tape", vid: int):
        self.tape = tape
        self.vid = vid

    @property
    def value(self) -> Tensor:
        return self.tape.values[self.vid]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tape.values[self.vid].shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Var(vid={self.vid}, shape={self.shape})"


class Tape:
    """Reverse-mode differentiation record.

    ``values[i]`` holds the tensor for id ``i``; ``nodes`` holds, for each
    non-leaf id, the tuple ``(vid, parent_vids, backward_rule)``. Parents
    always precede their node in registration order, so the record is
    topologically sorted by construction. A tape and its tensors belong to
    a single thread for the duration of a forward/backward pass.
    """

    __slots__ = ("values", "nodes")

    def __init__(self):
        self.values: list[Tensor] = []
        self.nodes: list[tuple[int, tuple[int, ...], BackwardRule]] = []

    def variable(self, value) -> Var:
        """Register a leaf value (parameter, input, or constant)."""
        arr = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ContractError("variable value must be finite")
        self.values.append(arr)
        return Var(self, len(self.values) - 1)

    def register(self, value: Tensor, parents: tuple[int, ...],
                 rule: BackwardRule) -> Var:
        """Register an operation result with its backward rule."""
        self.values.append(value)
        vid = len(self.values) - 1
        self.nodes.append((vid, parents, rule))
        return Var(self, vid)


def _check_same_tape(*vars_: Var) -> Tape:
    t = vars_[0].tape
    for v in vars_[1:]:
        if v.tape is not t:
            raise ContractError("operands live on different tapes")
    return t


def backward(tape: Tape, loss: Var) -> dict[int, Tensor]:
    """Gradient of a scalar loss w.r.t. every id registered on the tape.

    The seed gradient at the loss is 1; fan-out accumulates additively.
    Ids the loss does not depend on get zero gradients.
    """
    loss_value = tape.values[loss.vid]
    if loss_value.size != 1 or loss_value.ndim > 1:
        raise ContractError(
            f"backward requires a scalar loss, got shape {loss_value.shape}"
        )
    grads: list[np.ndarray | None] = [None] * len(tape.values)
    grads[loss.vid] = np.ones_like(loss_value)
    for vid, parents, rule in reversed(tape.nodes):
        g = grads[vid]
        if g is None:
            continue
        parent_grads = rule(g)
        for pid, pg in zip(parents, parent_grads):
            if pg is None:
                continue
            if grads[pid] is None:
                grads[pid] = pg
            else:
                grads[pid] = grads[pid] + pg
    out: dict[int, Tensor] = {}
    for vid, val in enumerate(tape.values):
        g = grads[vid]
        out[vid] = np.zeros_like(val) if g is None else np.asarray(g)
    return out


# ---------------------------------------------------------------------------
# Operations


def matmul(a: Var, b: Var) -> Var:
    tape = _check_same_tape(a, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(
            f"matmul shapes incompatible: {av.shape} x {bv.shape}"
        )

    def rule(g, av=av, bv=bv):
        return g @ bv.T, av.T @ g

    return tape.register(av @ bv, (a.vid, b.vid), rule)


def relu(x: Var) -> Var:
    xv = x.value
    # Gradient passes where the input is strictly positive.
    mask = xv > 0.0

    def rule(g, mask=mask):
        return (g * mask,)

    return x.tape.register(np.maximum(xv, 0.0), (x.vid,), rule)


def softmax_rows(z: Var) -> Var:
    zv = z.value
    if zv.ndim != 2 or zv.shape[1] < 1:
        raise ShapeError(f"softmax_rows needs a 2-d input, got {zv.shape}")
    shifted = zv - zv.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def rule(g, s=s):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return z.tape.register(s, (z.vid,), rule)


def sigmoid(x: Var) -> Var:
    xv = x.value
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    out[~pos] = ex / (1.0 + ex)

    def rule(g, out=out):
        return (g * out * (1.0 - out),)

    return x.tape.register(out, (x.vid,), rule)


def gradient_reversal(x: Var, lam: float) -> Var:
    """Identity forward; backward replaces the upstream gradient g by -lam*g.

    ``lam`` is a per-call coefficient, not a stored weight, so a schedule
    can vary it every step without rebuilding anything.
    """
    if lam < 0:
        raise ContractError(f"gradient_reversal needs lam >= 0, got {lam}")
    neg = -float(lam)

    def rule(g, neg=neg):
        return (neg * g,)

    # Forward output shares storage with the input: bitwise identical.
    return x.tape.register(x.value, (x.vid,), rule)


def kron_rows(f: Var, y: Var) -> Var:
    """Row-wise Kronecker product: out[i, a*c + b] = f[i, a] * y[i, b].

    Feature-major ordering: each feature entry contributes a contiguous
    block of c entries. Gradients flow to both operands.
    """
    global _kron_invocations
    fv, yv = f.value, y.value
    if fv.ndim != 2 or yv.ndim != 2 or fv.shape[0] != yv.shape[0]:
        raise ShapeError(
            f"kron_rows row counts disagree: {fv.shape} vs {yv.shape}"
        )
    _kron_invocations += 1
    n, m = fv.shape
    c = yv.shape[1]
    out = (fv[:, :, None] * yv[:, None, :]).reshape(n, m * c)

    def rule(g, fv=fv, yv=yv, n=n, m=m, c=c):
        g3 = g.reshape(n, m, c)
        gf = (g3 * yv[:, None, :]).sum(axis=2)
        gy = (g3 * fv[:, :, None]).sum(axis=1)
        return gf, gy

    return f.tape.register(out, (f.vid, y.vid), rule)


def log_eps(x: Var, eps: float = LOG_EPS) -> Var:
    """Elementwise ln(max(x, eps)) for nonnegative x.

    The gradient is 1/x where x >= eps and 0 below, so saturated entries
    neither explode nor propagate.
    """
    if eps <= 0:
        raise ContractError(f"log_eps needs eps > 0, got {eps}")
    xv = x.value
    clamped = np.maximum(xv, eps)

    def rule(g, xv=xv, clamped=clamped, eps=eps):
        return (np.where(xv >= eps, g / clamped, 0.0),)

    return x.tape.register(np.log(clamped), (x.vid,), rule)


def add(a: Var, b: Var) -> Var:
    tape = _check_same_tape(a, b)
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise ShapeError(f"add shapes disagree: {av.shape} vs {bv.shape}")

    def rule(g):
        return g, g

    return tape.register(av + bv, (a.vid, b.vid), rule)


def subtract(a: Var, b: Var) -> Var:
    tape = _check_same_tape(a, b)
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise ShapeError(f"subtract shapes disagree: {av.shape} vs {bv.shape}")

    def rule(g):
        return g, -g

    return tape.register(av - bv, (a.vid, b.vid), rule)


def multiply(a: Var, b: Var) -> Var:
    tape = _check_same_tape(a, b)
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise ShapeError(f"multiply shapes disagree: {av.shape} vs {bv.shape}")

    def rule(g, av=av, bv=bv):
        return g * bv, g * av

    return tape.register(av * bv, (a.vid, b.vid), rule)


def scalar_mul(x: Var, s: float) -> Var:
    s = float(s)

    def rule(g, s=s):
        return (s * g,)

    return x.tape.register(s * x.value, (x.vid,), rule)


def add_bias(x: Var, bias: Var) -> Var:
    """Broadcast-add a bias row to every row of a 2-d tensor."""
    tape = _check_same_tape(x, bias)
    xv, bv = x.value, bias.value
    if xv.ndim != 2 or bv.ndim != 1 or xv.shape[1] != bv.shape[0]:
        raise ShapeError(
            f"add_bias shapes incompatible: {xv.shape} + {bv.shape}"
        )

    def rule(g):
        return g, g.sum(axis=0)

    return tape.register(xv + bv, (x.vid, bias.vid), rule)


def mean_rows(x: Var) -> Var:
    """Mean over the row index: [n, c] -> [c]."""
    xv = x.value
    if xv.ndim != 2:
        raise ShapeError(f"mean_rows needs a 2-d input, got {xv.shape}")
    n = xv.shape[0]

    def rule(g, n=n, shape=xv.shape):
        return (np.broadcast_to(g / n, shape).copy(),)

    return x.tape.register(xv.mean(axis=0), (x.vid,), rule)


def sum_all(x: Var) -> Var:
    xv = x.value

    def rule(g, shape=xv.shape):
        return (np.full(shape, float(g)),)

    return x.tape.register(np.asarray(xv.sum()), (x.vid,), rule)


def clamp(x: Var, lo: float, hi: float) -> Var:
    """Elementwise clip; gradient passes only inside [lo, hi]."""
    xv = x.value
    mask = (xv >= lo) & (xv <= hi)

    def rule(g, mask=mask):
        return (g * mask,)

    return x.tape.register(np.clip(xv, lo, hi), (x.vid,), rule)


def stop_gradient(x: Var) -> Var:
    """Identity forward with no backward flow."""

    def rule(g):
        return ()

    return x.tape.register(x.value, (), rule)
