"""Finite-difference verification of every parameter gradient.

The reversal layer is invisible to central differences: its forward pass
is the identity, so numerically differentiating the recorded objective
reproduces the *unreversed* derivative. The check therefore compares
against two expressions assembled from one (ly, lh, ld) sweep:

  feature parameters:            d/dw [ ly + alpha*lh - lam*beta*ld ]
  residual and domain parameters: d/dw [ ly + alpha*lh +     beta*ld ]

which is precisely what the backward pass produces (the domain loss
reaches feature parameters only through the reversal layer; it reaches
the residual block not at all, and the domain classifier sits above the
reversal point).
"""

from dataclasses import dataclass

import numpy as np

from dart import autodiff as ad
from dart import model as dm
from dart.autodiff import Tape
from dart.rng import STREAM_DATA, STREAM_INIT, Prng, derive_seed

# Instance pinned for the oracle run: small enough to sweep every
# parameter, large enough that every operation participates.
TINY_INPUT_DIM = 4
TINY_FEATURE_DIM = 3
TINY_CLASS_COUNT = 3
TINY_BATCH = 2
TINY_DOMAIN_HIDDEN = 4
TINY_LAMBDA = 0.7
DEFAULT_SEED = 11
DEFAULT_STEP = 1e-6
DEFAULT_TOLERANCE = 1e-4
# Entries below the floor are compared absolutely at tolerance*floor;
# keeps central-difference cancellation noise out of the ratio.
REL_ERR_FLOOR = 1e-4


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst_param: str
    checked: int
    tolerance: float
    passed: bool


def build_tiny_instance(seed: int = DEFAULT_SEED):
    """Model and minibatch with every parameter randomized non-zero.

    Randomization replaces the usual zero-initialized residual output
    layer: at zero init that layer blocks gradient flow to the residual
    input layer and the check would compare zeros against zeros.
    """
    init_rng = Prng(derive_seed(seed, STREAM_INIT))
    model = dm.DartModel(
        input_dim=TINY_INPUT_DIM,
        hidden=(),
        feature_dim=TINY_FEATURE_DIM,
        class_count=TINY_CLASS_COUNT,
        domain_hidden=TINY_DOMAIN_HIDDEN,
        rng=init_rng,
    )
    for name, arr in model.parameters().items():
        fresh = np.array(
            [init_rng.uniform_range(-0.9, 0.9) for _ in range(arr.size)]
        ).reshape(arr.shape)
        model.set_parameter(name, fresh)

    data_rng = Prng(derive_seed(seed, STREAM_DATA))
    xs = np.array(
        [[data_rng.uniform_range(-2, 2) for _ in range(TINY_INPUT_DIM)]
         for _ in range(TINY_BATCH)]
    )
    xt = np.array(
        [[data_rng.uniform_range(-2, 2) for _ in range(TINY_INPUT_DIM)]
         for _ in range(TINY_BATCH)]
    )
    ys = ad.one_hot(
        [data_rng.randint(TINY_CLASS_COUNT) for _ in range(TINY_BATCH)],
        TINY_CLASS_COUNT,
    )
    return model, xs, ys, xt


def run_gradcheck(
    seed: int = DEFAULT_SEED,
    h: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
    alpha: float = 0.6,
    beta: float = 1.0,
    lam: float = TINY_LAMBDA,
) -> GradcheckReport:
    model, xs, ys, xt = build_tiny_instance(seed)

    tape = Tape()
    graph = dm.build_training_graph(model, tape, xs, ys, xt, lam, alpha, beta)
    grads = ad.backward(tape, graph.total)
    analytic = {
        name: grads[var.vid] for name, var in graph.bound.params.items()
    }

    def losses_now():
        t = Tape()
        g = dm.build_training_graph(model, t, xs, ys, xt, lam, alpha, beta)
        return float(g.ly.value), float(g.lh.value), float(g.ld.value)

    params = model.parameters()
    feature_names = set(model.feature_param_names())
    worst = 0.0
    worst_param = ""
    checked = 0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        a = analytic[name].reshape(-1)
        sign = -lam * beta if name in feature_names else beta
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            ly_p, lh_p, ld_p = losses_now()
            flat[idx] = orig - h
            ly_m, lh_m, ld_m = losses_now()
            flat[idx] = orig
            fd = (
                (ly_p - ly_m) + alpha * (lh_p - lh_m) + sign * (ld_p - ld_m)
            ) / (2.0 * h)
            err = abs(a[idx] - fd) / max(abs(a[idx]), abs(fd), REL_ERR_FLOOR)
            checked += 1
            if err > worst:
                worst = err
                worst_param = f"{name}[{idx}]"
    return GradcheckReport(
        max_rel_err=worst,
        worst_param=worst_param,
        checked=checked,
        tolerance=tolerance,
        passed=worst < tolerance,
    )
