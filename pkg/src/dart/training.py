"""Optimization loop: paired minibatch sampling, schedules, SGD updates.

The loop trains three parameter groups at once. The feature side
(extractor plus bottleneck) receives the classification and entropy
gradients directly and the domain gradient through the reversal layer;
the residual block learns only from the source classification loss; the
domain classifier learns plain discrimination. All of it is one backward
pass over a single tape per step.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from dart import autodiff as ad
from dart import model as dm
from dart.autodiff import Tape, Tensor
from dart.errors import ConfigError, ContractError, NumericError
from dart.rng import STREAM_SAMPLING, Prng, derive_seed

VARIANTS = ("full", "dart_c", "dart_s", "source_only")

METRICS_COLUMNS = ("step", "eta", "lambda", "loss_y", "loss_h", "loss_d",
                   "loss_total")


@dataclass
class TrainConfig:
    """Hyperparameters and architecture widths for one training run."""

    alpha: float = 0.6
    beta: float = 1.0
    eta0: float = 0.01
    gamma_lr: float = 0.92
    lr_decay_interval: int = 3000
    lambda0: float = 1.0
    gamma_lambda: float = 2.5
    total_steps: int = 3000
    batch_size: int = 32
    seed: int = 1
    input_dim: int = 2
    hidden: tuple[int, ...] = (16,)
    feature_dim: int = 8
    class_count: int = 3
    residual_hidden: int | None = None
    domain_hidden: int = 64
    stop_pseudo_label_grad: bool = False
    harden_pseudo_labels: bool = False
    momentum: float = 0.0
    variant: str = "full"
    log_every: int = 50

    def validate(self) -> None:
        for name in ("alpha", "beta", "eta0", "lambda0"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 < self.gamma_lr <= 1.0:
            raise ConfigError(f"gamma_lr must be in (0, 1], got {self.gamma_lr}")
        if self.gamma_lambda < 0:
            raise ConfigError(f"gamma_lambda must be >= 0, got {self.gamma_lambda}")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_decay_interval < 1:
            raise ConfigError(
                f"lr_decay_interval must be >= 1, got {self.lr_decay_interval}"
            )
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"variant must be one of {', '.join(VARIANTS)}, got {self.variant!r}"
            )
        if self.log_every < 1:
            raise ConfigError(f"log_every must be >= 1, got {self.log_every}")
        if self.seed < 0 or self.seed > (1 << 64) - 1:
            raise ConfigError("seed must fit in 64 unsigned bits")

    def effective(self) -> "TrainConfig":
        """Variant-adjusted copy: source-only training zeroes both
        adaptation weights; the wiring flags live on the model."""
        cfg = TrainConfig(**vars(self))
        if cfg.variant == "source_only":
            cfg.alpha = 0.0
            cfg.beta = 0.0
        return cfg


def build_model(cfg: TrainConfig, rng: Prng) -> dm.DartModel:
    return dm.DartModel(
        input_dim=cfg.input_dim,
        hidden=cfg.hidden,
        feature_dim=cfg.feature_dim,
        class_count=cfg.class_count,
        residual_hidden=cfg.residual_hidden,
        domain_hidden=cfg.domain_hidden,
        domain_on_joint=cfg.variant != "dart_c",
        use_residual=cfg.variant != "dart_s",
        rng=rng,
    )


# ---------------------------------------------------------------------------
# Schedules


def lr_schedule(p: int, eta0: float, gamma_lr: float, interval: int = 3000) -> float:
    """Stepwise decay: eta0 * gamma_lr^(p // interval)."""
    if p < 0:
        raise ContractError(f"step index must be >= 0, got {p}")
    return eta0 * gamma_lr ** (p // interval)


def lambda_schedule(q: float, lambda0: float, gamma_lambda: float) -> float:
    """Sigmoid ramp from 0 to ~lambda0 as training progress q goes 0 to 1."""
    if not 0.0 <= q <= 1.0:
        raise ContractError(f"progress q must lie in [0, 1], got {q}")
    return lambda0 * (2.0 / (1.0 + math.exp(-gamma_lambda * q)) - 1.0)


# ---------------------------------------------------------------------------
# Minibatch sampling


class EpochSampler:
    """Without-replacement index batches, reshuffled each epoch.

    A tail shorter than the batch size is dropped; the next epoch starts
    with a fresh permutation.
    """

    def __init__(self, count: int, batch_size: int, rng: Prng):
        if batch_size > count:
            raise ConfigError(
                f"batch_size {batch_size} exceeds dataset size {count}"
            )
        self.count = count
        self.batch_size = batch_size
        self.rng = rng
        self._order: list[int] = []
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(self.count)
            self._pos = 0
        out = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return np.asarray(out, dtype=np.intp)


@dataclass
class Batch:
    """One paired minibatch. Target labels never appear here."""

    xs: Tensor
    ys: Tensor
    xt: Tensor


class PairedSampler:
    """Draws equal-size source/target batches; the two domains run on
    independent derived streams so their epochs advance independently."""

    def __init__(self, source, target, batch_size: int, seed: int):
        root = derive_seed(seed, STREAM_SAMPLING)
        self.source = source
        self.target = target
        self.src = EpochSampler(source.samples.shape[0], batch_size,
                                Prng(derive_seed(root, 0)))
        self.tgt = EpochSampler(target.samples.shape[0], batch_size,
                                Prng(derive_seed(root, 1)))

    def next_batch(self) -> Batch:
        si = self.src.next_indices()
        ti = self.tgt.next_indices()
        return Batch(
            xs=self.source.samples[si],
            ys=self.source.labels[si],
            xt=self.target.samples[ti],
        )


# ---------------------------------------------------------------------------
# SGD


@dataclass
class SgdState:
    """Step counter plus optional momentum buffers."""

    p: int = 0
    velocity: dict[str, Tensor] = field(default_factory=dict)


@dataclass
class StepMetrics:
    step: int
    eta: float
    lam: float
    loss_y: float
    loss_h: float
    loss_d: float
    loss_total: float


def train_step(
    model: dm.DartModel, batch: Batch, cfg: TrainConfig, state: SgdState,
    total_steps: int | None = None,
) -> StepMetrics:
    """One forward/backward/update cycle; increments the step counter."""
    horizon = cfg.total_steps if total_steps is None else total_steps
    p = state.p
    q = min(p / horizon, 1.0) if horizon > 0 else 1.0
    lam = lambda_schedule(q, cfg.lambda0, cfg.gamma_lambda)
    eta = lr_schedule(p, cfg.eta0, cfg.gamma_lr, cfg.lr_decay_interval)

    tape = Tape()
    graph = dm.build_training_graph(
        model, tape, batch.xs, batch.ys, batch.xt, lam,
        cfg.alpha, cfg.beta,
        stop_pseudo_label_grad=cfg.stop_pseudo_label_grad,
        harden_pseudo_labels=cfg.harden_pseudo_labels,
    )
    values = {
        "loss_y": float(graph.ly.value),
        "loss_h": float(graph.lh.value),
        "loss_d": float(graph.ld.value),
        "loss_total": float(graph.total.value),
    }
    for term, v in values.items():
        if not math.isfinite(v):
            raise NumericError(f"non-finite {term} at step {p}: {v}")

    grads = ad.backward(tape, graph.total)
    params = model.parameters()
    for name, var in graph.bound.params.items():
        g = grads[var.vid]
        if cfg.momentum > 0.0:
            v = state.velocity.get(name)
            if v is None:
                v = np.zeros_like(g)
            v = cfg.momentum * v + g
            state.velocity[name] = v
            params[name] -= eta * v
        else:
            # vanilla rule, kept exact for the finite-difference oracle
            params[name] -= eta * g

    state.p += 1
    return StepMetrics(step=p, eta=eta, lam=lam, **values)


@dataclass
class TrainReport:
    model: dm.DartModel
    state: SgdState
    history: list[StepMetrics]


def format_metrics_row(m: StepMetrics) -> str:
    return ",".join([
        str(m.step), repr(m.eta), repr(m.lam), repr(m.loss_y),
        repr(m.loss_h), repr(m.loss_d), repr(m.loss_total),
    ])


def train_loop(
    model: dm.DartModel, source, target, cfg: TrainConfig,
    metrics_path=None,
) -> TrainReport:
    """Runs cfg.total_steps steps; logs every cfg.log_every steps plus the
    final step. With a metrics path, rows go to a CSV with a header."""
    cfg.validate()
    if source.samples.shape[1] != model.input_dim:
        raise ContractError(
            f"source width {source.samples.shape[1]} does not match "
            f"model input width {model.input_dim}"
        )
    state = SgdState()
    history: list[StepMetrics] = []
    if cfg.total_steps == 0:
        if metrics_path is not None:
            with open(metrics_path, "w", encoding="ascii") as fh:
                fh.write(",".join(METRICS_COLUMNS) + "\n")
        return TrainReport(model, state, history)

    sampler = PairedSampler(source, target, cfg.batch_size, cfg.seed)
    fh = open(metrics_path, "w", encoding="ascii") if metrics_path else None
    try:
        if fh:
            fh.write(",".join(METRICS_COLUMNS) + "\n")
        for p in range(cfg.total_steps):
            metrics = train_step(model, sampler.next_batch(), cfg, state)
            if p % cfg.log_every == 0 or p == cfg.total_steps - 1:
                history.append(metrics)
                if fh:
                    fh.write(format_metrics_row(metrics) + "\n")
    finally:
        if fh:
            fh.close()
    return TrainReport(model, state, history)
