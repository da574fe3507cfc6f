"""The adaptation network and its losses.

Pieces: a feature extractor (linear stack with inner ReLUs), a shared
bottleneck projecting features to class-logit width, a target classifier
that is plain softmax over those logits, a source classifier that adds a
learned residual perturbation to the logits before softmax, and a domain
classifier fed the row-wise Kronecker fusion of features and class
probabilities through a gradient-reversal layer.

Parameter groups: the extractor plus bottleneck form the feature
parameters; the residual block and the domain classifier are separate
groups (they sit on opposite sides of the reversal layer during
training).
"""

import math

import numpy as np

from dart import autodiff as ad
from dart.autodiff import Tape, Tensor, Var
from dart.errors import ContractError, DataFormatError, ShapeError
from dart.rng import Prng

CHECKPOINT_HEADER = "DARTCKPT1"

# sigmoid saturates to exactly 1.0 in float64 for inputs > ~37; clamp keeps
# the domain output inside the open interval the BCE loss requires
DOMAIN_PROB_EPS = 1e-12


class LinearLayer:
    """Dense layer: weights [in x out] plus bias [out]."""

    def __init__(self, weights: Tensor, bias: Tensor):
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weights.ndim != 2 or bias.ndim != 1 or bias.shape[0] != weights.shape[1]:
            raise ShapeError(
                f"inconsistent layer shapes: weights {weights.shape}, bias {bias.shape}"
            )
        self.weights = weights
        self.bias = bias

    @property
    def in_width(self) -> int:
        return self.weights.shape[0]

    @property
    def out_width(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def uniform_init(cls, fan_in: int, fan_out: int, rng: Prng) -> "LinearLayer":
        # Glorot-style bound; bias starts at zero
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = np.empty((fan_in, fan_out))
        for i in range(fan_in):
            for j in range(fan_out):
                w[i, j] = rng.uniform_range(-limit, limit)
        return cls(w, np.zeros(fan_out))

    @classmethod
    def zero_init(cls, fan_in: int, fan_out: int) -> "LinearLayer":
        return cls(np.zeros((fan_in, fan_out)), np.zeros(fan_out))


class DartModel:
    """Full network with named parameter access.

    ``domain_on_joint`` selects the domain classifier input: the Kronecker
    fusion of features and class probabilities (joint alignment) or the
    raw features (marginal alignment, the ``dart_c`` ablation wiring).
    ``use_residual=False`` removes the perturbation branch so the source
    and target classifiers coincide (the ``dart_s`` ablation wiring).
    """

    def __init__(
        self,
        input_dim: int,
        hidden: tuple[int, ...],
        feature_dim: int,
        class_count: int,
        residual_hidden: int | None = None,
        domain_hidden: int = 64,
        domain_on_joint: bool = True,
        use_residual: bool = True,
        rng: Prng | None = None,
    ):
        if input_dim < 1 or feature_dim < 1 or class_count < 2:
            raise ContractError(
                "need input_dim >= 1, feature_dim >= 1, class_count >= 2"
            )
        self.input_dim = input_dim
        self.hidden = tuple(int(h) for h in hidden)
        self.feature_dim = feature_dim
        self.class_count = class_count
        self.residual_hidden = (
            class_count if residual_hidden is None else int(residual_hidden)
        )
        self.domain_hidden = domain_hidden
        self.domain_on_joint = domain_on_joint
        self.use_residual = use_residual

        def init(fan_in, fan_out):
            if rng is None:
                return LinearLayer.zero_init(fan_in, fan_out)
            return LinearLayer.uniform_init(fan_in, fan_out, rng)

        widths = [input_dim, *self.hidden, feature_dim]
        self.extractor = [
            init(widths[i], widths[i + 1]) for i in range(len(widths) - 1)
        ]
        self.bottleneck = init(feature_dim, class_count)
        self.residual_fc1 = init(class_count, self.residual_hidden)
        # zero-init keeps the perturbation at exactly zero, so the source
        # and target classifiers start bitwise identical
        self.residual_fc2 = LinearLayer.zero_init(self.residual_hidden, class_count)
        d_in = feature_dim * class_count if domain_on_joint else feature_dim
        self.domain_fc1 = init(d_in, domain_hidden)
        self.domain_fc2 = init(domain_hidden, 1)

    # -- parameter access ---------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        """Named parameters in a stable order; arrays are live references."""
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.extractor):
            out[f"extractor.{i}.weight"] = layer.weights
            out[f"extractor.{i}.bias"] = layer.bias
        out["bottleneck.weight"] = self.bottleneck.weights
        out["bottleneck.bias"] = self.bottleneck.bias
        out["residual.fc1.weight"] = self.residual_fc1.weights
        out["residual.fc1.bias"] = self.residual_fc1.bias
        out["residual.fc2.weight"] = self.residual_fc2.weights
        out["residual.fc2.bias"] = self.residual_fc2.bias
        out["domain.fc1.weight"] = self.domain_fc1.weights
        out["domain.fc1.bias"] = self.domain_fc1.bias
        out["domain.fc2.weight"] = self.domain_fc2.weights
        out["domain.fc2.bias"] = self.domain_fc2.bias
        return out

    def feature_param_names(self) -> list[str]:
        # bottleneck counts as a feature parameter: it sits before the
        # classifier split and below the reversal layer
        names = []
        for i in range(len(self.extractor)):
            names += [f"extractor.{i}.weight", f"extractor.{i}.bias"]
        names += ["bottleneck.weight", "bottleneck.bias"]
        return names

    def residual_param_names(self) -> list[str]:
        return [
            "residual.fc1.weight",
            "residual.fc1.bias",
            "residual.fc2.weight",
            "residual.fc2.bias",
        ]

    def domain_param_names(self) -> list[str]:
        return [
            "domain.fc1.weight",
            "domain.fc1.bias",
            "domain.fc2.weight",
            "domain.fc2.bias",
        ]

    def set_parameter(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        current = self.parameters().get(name)
        if current is None:
            raise ContractError(f"unknown parameter {name!r}")
        if current.shape != arr.shape:
            raise ShapeError(
                f"parameter {name!r} has shape {current.shape}, got {arr.shape}"
            )
        current[...] = arr

    def clone(self) -> "DartModel":
        other = DartModel(
            self.input_dim,
            self.hidden,
            self.feature_dim,
            self.class_count,
            self.residual_hidden,
            self.domain_hidden,
            self.domain_on_joint,
            self.use_residual,
            rng=None,
        )
        for name, arr in self.parameters().items():
            other.set_parameter(name, arr)
        return other


class BoundModel:
    """Model parameters registered on a tape, with graph builders."""

    def __init__(self, model: DartModel, tape: Tape):
        self.model = model
        self.tape = tape
        self.params: dict[str, Var] = {
            name: tape.variable(arr) for name, arr in model.parameters().items()
        }

    def _linear(self, x: Var, prefix: str) -> Var:
        w = self.params[f"{prefix}.weight"]
        b = self.params[f"{prefix}.bias"]
        return ad.add_bias(ad.matmul(x, w), b)

    def features(self, x: Var) -> Var:
        h = x
        last = len(self.model.extractor) - 1
        for i in range(len(self.model.extractor)):
            h = self._linear(h, f"extractor.{i}")
            if i != last:
                h = ad.relu(h)
        return h

    def logits(self, f: Var) -> Var:
        return self._linear(f, "bottleneck")

    def target_probs(self, z: Var) -> Var:
        return ad.softmax_rows(z)

    def source_probs(self, z: Var) -> Var:
        if not self.model.use_residual:
            return ad.softmax_rows(z)
        h = ad.relu(self._linear(z, "residual.fc1"))
        delta = self._linear(h, "residual.fc2")
        return ad.softmax_rows(ad.add(z, delta))

    def domain_prob(self, joint: Var, lam: float) -> Var:
        h = ad.gradient_reversal(joint, lam)
        h = ad.relu(self._linear(h, "domain.fc1"))
        d = ad.sigmoid(self._linear(h, "domain.fc2"))
        return ad.clamp(d, DOMAIN_PROB_EPS, 1.0 - DOMAIN_PROB_EPS)


def bind(model: DartModel, tape: Tape) -> BoundModel:
    return BoundModel(model, tape)


# ---------------------------------------------------------------------------
# Losses (graph form; scalars come back as 0-d Vars)


def _check_probability_rows(y: Tensor, what: str) -> None:
    if np.any(y < 0.0) or np.any(y.sum(axis=1) > 1.0 + 1e-9):
        raise ContractError(f"{what} rows must be probability vectors")


def is_one_hot(y: Tensor) -> bool:
    if y.ndim != 2:
        return False
    ones = y == 1.0
    return bool(
        np.all((y == 0.0) | ones) and np.all(ones.sum(axis=1) == 1)
    )


def classification_loss(y_pred: Var, y_true: Tensor) -> Var:
    """Minibatch mean cross-entropy against exact one-hot labels."""
    y_true = np.asarray(y_true, dtype=np.float64)
    if not is_one_hot(y_true):
        raise ContractError("labels must be exact one-hot rows")
    if y_pred.shape != y_true.shape:
        raise ShapeError(
            f"predictions {y_pred.shape} vs labels {y_true.shape}"
        )
    n = y_true.shape[0]
    mask = y_pred.tape.variable(y_true)
    picked = ad.multiply(ad.log_eps(y_pred), mask)
    return ad.scalar_mul(ad.sum_all(picked), -1.0 / n)


def entropy_loss(y_pred: Var) -> Var:
    """Minibatch mean Shannon entropy of predicted class distributions."""
    n = y_pred.shape[0]
    plogp = ad.multiply(y_pred, ad.log_eps(y_pred))
    return ad.scalar_mul(ad.sum_all(plogp), -1.0 / n)


def domain_loss(d_src: Var, d_tgt: Var) -> Var:
    """Binary cross-entropy with source labeled 1 and target labeled 0."""
    for v, side in ((d_src, "source"), (d_tgt, "target")):
        vals = v.value
        if np.any(vals <= 0.0) or np.any(vals >= 1.0):
            raise ContractError(
                f"domain probabilities for {side} must lie strictly in (0, 1)"
            )
    ns = d_src.value.shape[0]
    nt = d_tgt.value.shape[0]
    src_term = ad.scalar_mul(ad.sum_all(ad.log_eps(d_src)), -1.0 / ns)
    ones = d_tgt.tape.variable(np.ones_like(d_tgt.value))
    tgt_term = ad.scalar_mul(
        ad.sum_all(ad.log_eps(ad.subtract(ones, d_tgt))), -1.0 / nt
    )
    return ad.add(src_term, tgt_term)


def total_loss(ly: Var, lh: Var, ld: Var, alpha: float, beta: float) -> Var:
    # association matches the plain expression ly + alpha*lh + beta*ld
    return ad.add(ad.add(ly, ad.scalar_mul(lh, alpha)), ad.scalar_mul(ld, beta))


# ---------------------------------------------------------------------------
# Shared training graph (used by the train step and the gradient checker)


class TrainingGraph:
    """Holds the loss Vars of one forward pass."""

    __slots__ = (
        "bound", "ly", "lh", "ld", "total",
        "source_probs", "target_probs", "d_src", "d_tgt",
    )

    def __init__(self, bound, ly, lh, ld, total,
                 source_probs, target_probs, d_src, d_tgt):
        self.bound = bound
        self.ly = ly
        self.lh = lh
        self.ld = ld
        self.total = total
        self.source_probs = source_probs
        self.target_probs = target_probs
        self.d_src = d_src
        self.d_tgt = d_tgt


def build_training_graph(
    model: DartModel,
    tape: Tape,
    xs: Tensor,
    ys: Tensor,
    xt: Tensor,
    lam: float,
    alpha: float,
    beta: float,
    stop_pseudo_label_grad: bool = False,
    harden_pseudo_labels: bool = False,
) -> TrainingGraph:
    """One full forward pass over a source/target minibatch pair.

    The source-side fusion pairs features with the true one-hot labels;
    the target side pairs features with the predicted class distribution
    (the pseudo-label), which stays differentiable unless
    ``stop_pseudo_label_grad`` cuts it or ``harden_pseudo_labels``
    replaces it with its one-hot argmax (hardening is non-differentiable,
    so it implies the cut).
    """
    bm = bind(model, tape)
    xs_v = tape.variable(xs)
    xt_v = tape.variable(xt)

    fs = bm.features(xs_v)
    ft = bm.features(xt_v)
    zs = bm.logits(fs)
    zt = bm.logits(ft)
    ys_pred = bm.source_probs(zs)
    yt_pred = bm.target_probs(zt)

    if model.domain_on_joint:
        ys_v = tape.variable(np.asarray(ys, dtype=np.float64))
        fused_src = ad.kron_rows(fs, ys_v)
        y_for_fusion = yt_pred
        if harden_pseudo_labels:
            hard = ad.one_hot(np.argmax(yt_pred.value, axis=1), model.class_count)
            y_for_fusion = tape.variable(hard)
        elif stop_pseudo_label_grad:
            y_for_fusion = ad.stop_gradient(yt_pred)
        fused_tgt = ad.kron_rows(ft, y_for_fusion)
    else:
        # marginal alignment: the fusion is never built
        fused_src = fs
        fused_tgt = ft

    d_src = bm.domain_prob(fused_src, lam)
    d_tgt = bm.domain_prob(fused_tgt, lam)

    ly = classification_loss(ys_pred, ys)
    lh = entropy_loss(yt_pred)
    ld = domain_loss(d_src, d_tgt)
    total = total_loss(ly, lh, ld, alpha, beta)
    return TrainingGraph(bm, ly, lh, ld, total,
                         ys_pred, yt_pred, d_src, d_tgt)


# ---------------------------------------------------------------------------
# Evaluation-mode forwards (fresh throwaway tape, numpy in/out)


def forward_features(model: DartModel, x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(
            f"input has shape {x.shape}, extractor expects width {model.input_dim}"
        )
    tape = Tape()
    return bind(model, tape).features(tape.variable(x)).value


def forward_target_probs(model: DartModel, f: Tensor) -> Tensor:
    tape = Tape()
    bm = bind(model, tape)
    return bm.target_probs(bm.logits(tape.variable(f))).value


def forward_source_probs(model: DartModel, f: Tensor) -> Tensor:
    tape = Tape()
    bm = bind(model, tape)
    return bm.source_probs(bm.logits(tape.variable(f))).value


def forward_domain(
    model: DartModel, f: Tensor, y: Tensor | None, lam: float
) -> Tensor:
    """Domain probability per row; ``y`` is ignored (may be None) when the
    model routes the domain classifier on features only."""
    tape = Tape()
    bm = bind(model, tape)
    f_v = tape.variable(f)
    if model.domain_on_joint:
        if y is None:
            raise ContractError("joint domain classifier needs class probabilities")
        y = np.asarray(y, dtype=np.float64)
        _check_probability_rows(y, "class-probability")
        joint = ad.kron_rows(f_v, tape.variable(y))
    else:
        joint = f_v
    return bm.domain_prob(joint, lam).value


# ---------------------------------------------------------------------------
# Checkpoints: versioned structured text, floats via repr for exact
# round-trip, so identical runs write identical bytes


def save_checkpoint(model: DartModel, path) -> None:
    lines = [CHECKPOINT_HEADER]
    lines.append(f"meta input_dim {model.input_dim}")
    lines.append(f"meta hidden {','.join(map(str, model.hidden)) or '-'}")
    lines.append(f"meta feature_dim {model.feature_dim}")
    lines.append(f"meta class_count {model.class_count}")
    lines.append(f"meta residual_hidden {model.residual_hidden}")
    lines.append(f"meta domain_hidden {model.domain_hidden}")
    lines.append(f"meta domain_on_joint {int(model.domain_on_joint)}")
    lines.append(f"meta use_residual {int(model.use_residual)}")
    for name, arr in model.parameters().items():
        dims = " ".join(str(s) for s in arr.shape)
        lines.append(f"param {name} {dims}")
        rows = arr.reshape(arr.shape[0], -1) if arr.ndim == 2 else arr.reshape(1, -1)
        for row in rows:
            lines.append(" ".join(repr(float(v)) for v in row))
    lines.append("end")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> DartModel:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise DataFormatError(
            f"not a checkpoint: expected header {CHECKPOINT_HEADER!r}"
        )
    meta: dict[str, str] = {}
    pos = 1
    while pos < len(lines) and lines[pos].startswith("meta "):
        _, key, value = lines[pos].split(" ", 2)
        meta[key] = value
        pos += 1
    try:
        hidden_str = meta["hidden"]
        hidden = () if hidden_str == "-" else tuple(
            int(h) for h in hidden_str.split(",")
        )
        model = DartModel(
            input_dim=int(meta["input_dim"]),
            hidden=hidden,
            feature_dim=int(meta["feature_dim"]),
            class_count=int(meta["class_count"]),
            residual_hidden=int(meta["residual_hidden"]),
            domain_hidden=int(meta["domain_hidden"]),
            domain_on_joint=bool(int(meta["domain_on_joint"])),
            use_residual=bool(int(meta["use_residual"])),
            rng=None,
        )
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"bad checkpoint metadata: {exc}") from exc

    params = model.parameters()
    while pos < len(lines) and lines[pos] != "end":
        parts = lines[pos].split()
        if parts[0] != "param":
            raise DataFormatError(f"unexpected checkpoint line: {lines[pos]!r}")
        name = parts[1]
        shape = tuple(int(s) for s in parts[2:])
        if name not in params:
            raise DataFormatError(f"unknown parameter {name!r} in checkpoint")
        if params[name].shape != shape:
            raise DataFormatError(
                f"parameter {name!r}: checkpoint shape {shape}, "
                f"model shape {params[name].shape}"
            )
        pos += 1
        n_rows = shape[0] if len(shape) == 2 else 1
        row_len = shape[1] if len(shape) == 2 else shape[0]
        rows = []
        for _ in range(n_rows):
            if pos >= len(lines):
                raise DataFormatError("truncated checkpoint: missing parameter rows")
            vals = [float(v) for v in lines[pos].split()]
            if len(vals) != row_len:
                raise DataFormatError(
                    f"parameter {name!r}: expected {row_len} values per row, "
                    f"got {len(vals)}"
                )
            rows.append(vals)
            pos += 1
        arr = np.asarray(rows, dtype=np.float64).reshape(shape)
        model.set_parameter(name, arr)
    if pos >= len(lines) or lines[pos] != "end":
        raise DataFormatError("truncated checkpoint: missing end marker")
    return model
