"""Accuracy, proxy A-distance, and the ablation harness.

The ablations isolate the two mechanisms: ``dart_c`` keeps adversarial
training but feeds the domain classifier features only (marginal
alignment, no fusion); ``dart_s`` keeps the fusion but removes the
residual perturbation; ``source_only`` turns off both adaptation losses.
All variants share the seed-derived data, initialization, and sampling
streams so comparisons are paired.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from dart import autodiff as ad
from dart import data as dd
from dart import model as dm
from dart import training as tr
from dart.autodiff import Tape, Tensor
from dart.errors import ContractError
from dart.rng import STREAM_DATA, STREAM_INIT, STREAM_PROBE, Prng, derive_seed

RESULTS_COLUMNS = ("variant", "seed", "src_acc", "tgt_acc", "a_distance")

# Probe protocol: fixed so A-distance numbers are comparable across runs.
PROBE_STEPS = 2000
PROBE_ETA = 0.01
PROBE_HIDDEN = 64


@dataclass
class EvalReport:
    variant: str
    seed: int
    target_accuracy: float
    source_accuracy: float
    a_distance: float
    per_class_accuracy: list[float]
    config_echo: dict


@dataclass
class Task:
    """A source/target dataset pair ready for training."""

    source: dd.Dataset
    target: dd.Dataset
    name: str = "task"


def make_blobs_task(
    seed: int,
    classes: int = 3,
    per_class: int = 100,
    dim: int = 2,
    spread: float = 1.1,
    rotation: float = math.pi / 5,
    translation: tuple[float, ...] = (1.5, -1.0),
    scale: float = 1.0,
    label_noise: float = 0.0,
    normalization: str = "source",
) -> Task:
    """Shifted Gaussian blobs; the data stream is derived from the seed so
    every variant trained at this seed sees identical datasets."""
    rng = Prng(derive_seed(seed, STREAM_DATA))
    source = dd.gen_blobs(classes, per_class, dim, spread, rng)
    spec = dd.ShiftSpec(rotation, tuple(translation), scale, label_noise)
    target = dd.apply_shift(source, spec, rng)
    source, target = dd.normalize_pair(source, target, mode=normalization)
    return Task(source=source, target=target, name=f"blobs-c{classes}-s{seed}")


# ---------------------------------------------------------------------------
# Accuracy


def predict_classes(model: dm.DartModel, samples: Tensor,
                    use_source_classifier: bool = False) -> np.ndarray:
    f = dm.forward_features(model, samples)
    if use_source_classifier:
        probs = dm.forward_source_probs(model, f)
    else:
        probs = dm.forward_target_probs(model, f)
    # argmax takes the first maximum, i.e. ties break to the lowest index
    return np.argmax(probs, axis=1)


def accuracy(model: dm.DartModel, ds: dd.Dataset,
             use_source_classifier: bool = False) -> float:
    truth = dd.true_label_indices(ds)
    pred = predict_classes(model, ds.samples, use_source_classifier)
    return float(np.mean(pred == truth))


def per_class_accuracy(model: dm.DartModel, ds: dd.Dataset,
                       use_source_classifier: bool = False) -> list[float]:
    truth = dd.true_label_indices(ds)
    pred = predict_classes(model, ds.samples, use_source_classifier)
    out = []
    for j in range(ds.class_count):
        mask = truth == j
        if not np.any(mask):
            out.append(float("nan"))
        else:
            out.append(float(np.mean(pred[mask] == truth[mask])))
    return out


# ---------------------------------------------------------------------------
# Proxy A-distance


class _Probe:
    """Binary domain discriminator matching the DomainClassifier shape."""

    def __init__(self, in_width: int, hidden: int, rng: Prng):
        self.fc1 = dm.LinearLayer.uniform_init(in_width, hidden, rng)
        self.fc2 = dm.LinearLayer.uniform_init(hidden, 1, rng)

    def params(self):
        return [self.fc1.weights, self.fc1.bias,
                self.fc2.weights, self.fc2.bias]

    def graph(self, tape: Tape, x: Tensor):
        vars_ = [tape.variable(p) for p in self.params()]
        h = ad.relu(ad.add_bias(ad.matmul(tape.variable(x), vars_[0]), vars_[1]))
        d = ad.sigmoid(ad.add_bias(ad.matmul(h, vars_[2]), vars_[3]))
        return vars_, ad.clamp(d, dm.DOMAIN_PROB_EPS, 1.0 - dm.DOMAIN_PROB_EPS)

    def predict(self, x: Tensor) -> np.ndarray:
        tape = Tape()
        _, d = self.graph(tape, x)
        return d.value[:, 0]


def a_distance(
    features_src: Tensor,
    features_tgt: Tensor,
    rng: Prng,
    steps: int = PROBE_STEPS,
    eta: float = PROBE_ETA,
    hidden: int = PROBE_HIDDEN,
) -> float:
    """2*(1 - 2*eps) where eps is the held-out error of a freshly trained
    domain probe. The test error is left unclamped below chance, so small
    negative values are possible on indistinguishable domains."""
    features_src = np.asarray(features_src, dtype=np.float64)
    features_tgt = np.asarray(features_tgt, dtype=np.float64)
    if features_src.shape[0] < 10 or features_tgt.shape[0] < 10:
        raise ContractError("a_distance needs at least 10 samples per domain")

    def split(x):
        perm = np.asarray(rng.permutation(x.shape[0]), dtype=np.intp)
        half = x.shape[0] // 2
        return x[perm[:half]], x[perm[half:]]

    src_train, src_test = split(features_src)
    tgt_train, tgt_test = split(features_tgt)

    probe = _Probe(features_src.shape[1], hidden, rng)
    for _ in range(steps):
        tape = Tape()
        vars_s, d_src = probe.graph(tape, src_train)
        # reuse the same parameter vars for the target half
        h = ad.relu(ad.add_bias(
            ad.matmul(tape.variable(tgt_train), vars_s[0]), vars_s[1]))
        d_tgt = ad.sigmoid(ad.add_bias(ad.matmul(h, vars_s[2]), vars_s[3]))
        d_tgt = ad.clamp(d_tgt, dm.DOMAIN_PROB_EPS, 1.0 - dm.DOMAIN_PROB_EPS)
        loss = dm.domain_loss(d_src, d_tgt)
        grads = ad.backward(tape, loss)
        for arr, var in zip(probe.params(), vars_s):
            arr -= eta * grads[var.vid]

    # threshold 0.5: at or above counts as a source prediction
    src_correct = probe.predict(src_test) >= 0.5
    tgt_correct = probe.predict(tgt_test) < 0.5
    errors = np.concatenate([~src_correct, ~tgt_correct])
    eps = float(np.mean(errors))
    return 2.0 * (1.0 - 2.0 * eps)


# ---------------------------------------------------------------------------
# Ablation harness


def run_ablation(variant: str, task: Task, cfg: tr.TrainConfig) -> EvalReport:
    if variant not in tr.VARIANTS:
        raise ContractError(
            f"variant must be one of {', '.join(tr.VARIANTS)}, got {variant!r}"
        )
    run_cfg = replace(cfg, variant=variant).effective()
    run_cfg.validate()

    kron_before = ad.kron_call_count()
    model = tr.build_model(run_cfg, Prng(derive_seed(run_cfg.seed, STREAM_INIT)))
    tr.train_loop(model, task.source, task.target, run_cfg)
    if variant == "dart_c" and ad.kron_call_count() != kron_before:
        raise ContractError(
            "fusion operation was invoked during marginal-alignment training"
        )

    src_acc = accuracy(model, task.source, use_source_classifier=True)
    tgt_acc = accuracy(model, task.target, use_source_classifier=False)
    per_class = per_class_accuracy(model, task.target)

    fs = dm.forward_features(model, task.source.samples)
    ft = dm.forward_features(model, task.target.samples)
    da = a_distance(fs, ft, Prng(derive_seed(run_cfg.seed, STREAM_PROBE)))

    echo = {
        "alpha": run_cfg.alpha,
        "beta": run_cfg.beta,
        "eta0": run_cfg.eta0,
        "gamma_lr": run_cfg.gamma_lr,
        "lambda0": run_cfg.lambda0,
        "gamma_lambda": run_cfg.gamma_lambda,
        "total_steps": run_cfg.total_steps,
        "batch_size": run_cfg.batch_size,
        "probe_steps": PROBE_STEPS,
        "probe_eta": PROBE_ETA,
        "probe_hidden": PROBE_HIDDEN,
        "task": task.name,
    }
    return EvalReport(
        variant=variant,
        seed=run_cfg.seed,
        target_accuracy=tgt_acc,
        source_accuracy=src_acc,
        a_distance=da,
        per_class_accuracy=per_class,
        config_echo=echo,
    )


def evaluate_model(model: dm.DartModel, task: Task, seed: int,
                   variant: str = "full") -> EvalReport:
    """Evaluation of an already-trained model (used by the eval command)."""
    src_acc = accuracy(model, task.source, use_source_classifier=True)
    tgt_acc = accuracy(model, task.target, use_source_classifier=False)
    per_class = per_class_accuracy(model, task.target)
    fs = dm.forward_features(model, task.source.samples)
    ft = dm.forward_features(model, task.target.samples)
    da = a_distance(fs, ft, Prng(derive_seed(seed, STREAM_PROBE)))
    echo = {
        "probe_steps": PROBE_STEPS,
        "probe_eta": PROBE_ETA,
        "probe_hidden": PROBE_HIDDEN,
        "task": task.name,
    }
    return EvalReport(variant, seed, tgt_acc, src_acc, da, per_class, echo)


# ---------------------------------------------------------------------------
# Serialization


def serialize_report(report: EvalReport) -> str:
    lines = [
        f"variant={report.variant}",
        f"seed={report.seed}",
        f"target_accuracy={report.target_accuracy!r}",
        f"source_accuracy={report.source_accuracy!r}",
        f"a_distance={report.a_distance!r}",
        "per_class_accuracy=" + ",".join(
            repr(v) for v in report.per_class_accuracy
        ),
    ]
    for key in sorted(report.config_echo):
        lines.append(f"config.{key}={report.config_echo[key]}")
    return "\n".join(lines) + "\n"


def append_results_csv(path, reports) -> None:
    """Appends rows, writing the header if the file is new or empty."""
    try:
        with open(path, "r", encoding="ascii") as fh:
            has_header = fh.readline().strip() == ",".join(RESULTS_COLUMNS)
    except FileNotFoundError:
        has_header = False
    with open(path, "a", encoding="ascii") as fh:
        if not has_header:
            fh.write(",".join(RESULTS_COLUMNS) + "\n")
        for r in reports:
            fh.write(
                f"{r.variant},{r.seed},{r.source_accuracy!r},"
                f"{r.target_accuracy!r},{r.a_distance!r}\n"
            )
