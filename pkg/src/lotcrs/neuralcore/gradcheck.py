"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .model import PARAM_NAMES, ModelParams

LOSS_KINDS = ("quadratic", "dmp", "cca", "rec_ce", "soft_kl", "joint_rec", "gen_nll")

LossFn = Callable[[ModelParams], tuple[float, dict[str, np.ndarray]]]


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_coords: int
    worst: tuple[str, int]


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def check_gradient(
    loss_fn: LossFn,
    params: ModelParams,
    epsilon: float = 1e-5,
    n_coords: int = 200,
    seed: int = 0,
    names: tuple[str, ...] | None = None,
) -> GradCheckReport:
    """Compare ``loss_fn``'s analytic gradient with central differences on sampled coordinates."""
    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise FloatingPointError("loss is not finite")
    names = names or tuple(n for n in PARAM_NAMES if n in grads)
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=min(n_coords, total), replace=False)
    bounds = np.cumsum(sizes)
    work = params.copy()
    worst, worst_at = 0.0, ("", -1)
    for f in np.sort(flat):
        t = int(np.searchsorted(bounds, f, side="right"))
        name = names[t]
        idx = int(f - (bounds[t - 1] if t else 0))
        arr = work.tensors[name].reshape(-1)
        orig = arr[idx]
        arr[idx] = orig + epsilon
        lp, _ = loss_fn(work)
        arr[idx] = orig - epsilon
        lm, _ = loss_fn(work)
        arr[idx] = orig
        numeric = (lp - lm) / (2 * epsilon)
        err = relative_error(float(grads[name].reshape(-1)[idx]), numeric)
        if err > worst:
            worst, worst_at = err, (name, idx)
    return GradCheckReport(worst, len(flat), worst_at)


def grad_check(loss_kind: str, params: ModelParams, batch, epsilon: float = 1e-5, n_coords: int = 200, seed: int = 0) -> float:
    """Maximum relative gradient error of the named objective on ``batch``.

    ``batch`` is whatever the objective consumes; see
    :func:`lotcrs.gradcheck_closures.loss_closure`.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")
    from ..gradcheck_closures import loss_closure

    fn = loss_closure(loss_kind, batch)
    return check_gradient(fn, params, epsilon, n_coords, seed).max_rel_error
