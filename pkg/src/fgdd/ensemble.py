"""Ensembling over parameter draws (k_P) and dataset draws (k_D).

Averaging ``k_P * k_D`` base learners, where parameter draws are shared
along the data axis and datasets (with their label noise) along the
parameter axis, rescales each variance term by the number of independent
copies of its sources.  The bias is unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .decomposition import Decomposition

__all__ = [
    "EnsembleSpec",
    "scale_decomposition",
    "ensemble_test_error",
    "optimal_ratio",
    "BudgetSplit",
    "best_budget_split",
]


@dataclass(frozen=True)
class EnsembleSpec:
    """Ensemble sizes; either may be ``math.inf`` for the limiting ensemble."""

    k_p: float = 1
    k_d: float = 1

    def __post_init__(self):
        for name in ("k_p", "k_d"):
            v = getattr(self, name)
            if not (v >= 1 and (v == math.inf or float(v).is_integer())):
                raise ValueError(f"{name} must be an integer >= 1 or inf, got {v!r}")

    @property
    def members(self) -> float:
        return self.k_p * self.k_d


def _div(value: float, k: float) -> float:
    if k == math.inf:
        return 0.0
    return value / k


def scale_decomposition(d: Decomposition, spec: EnsembleSpec) -> Decomposition:
    """Decomposition of the ensemble-averaged predictor.

    Terms driven by ``P`` alone shrink by ``k_p``, those driven by the data
    alone by ``k_d``, and interaction terms involving both by ``k_p * k_d``.
    An infinite ensemble removes the divergent interaction terms.
    """
    kpd = spec.k_p * spec.k_d
    diverged = d.diverged and kpd != math.inf
    if d.diverged and not diverged:
        V_PX = V_PXeps = 0.0
    else:
        V_PX, V_PXeps = _div(d.V_PX, kpd), _div(d.V_PXeps, kpd)
    return replace(
        d,
        V_P=_div(d.V_P, spec.k_p),
        V_X=_div(d.V_X, spec.k_d),
        V_eps=_div(d.V_eps, spec.k_d),
        V_Xeps=_div(d.V_Xeps, spec.k_d),
        V_Peps=_div(d.V_Peps, kpd),
        V_PX=V_PX,
        V_PXeps=V_PXeps,
        diverged=diverged,
    )


def ensemble_test_error(d: Decomposition, spec: EnsembleSpec) -> float:
    return (
        d.B
        + _div(d.V_P, spec.k_p)
        + _div(d.V_X + d.V_eps + d.V_Xeps, spec.k_d)
        + _div(d.V_PX + d.V_Peps + d.V_PXeps, spec.k_p * spec.k_d)
    )


def optimal_ratio(d: Decomposition, tol: float = 1e-14) -> float:
    """Best ``k_d / k_p`` for a fixed budget ``k_p * k_d``.

    Minimising ``V_P/k_p + (V_X + V_eps + V_Xeps) k_p / K`` over ``k_p``
    gives ``k_d / k_p = (V_X + V_eps + V_Xeps) / V_P``.
    """
    if d.V_P <= tol:
        raise ValueError(
            f"V_P = {d.V_P!r} is not positive; the whole budget should go to bagging"
        )
    return (d.V_X + d.V_eps + d.V_Xeps) / d.V_P


@dataclass(frozen=True)
class BudgetSplit:
    budget: int
    k_p: int
    k_d: int
    test_error: float
    continuous_k_p: float
    continuous_k_d: float
    continuous_test_error: float


def best_budget_split(d: Decomposition, budget: int) -> BudgetSplit:
    """Best divisor pair ``k_p * k_d = budget`` next to the continuous optimum."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    pairs = [(p, budget // p) for p in range(1, budget + 1) if budget % p == 0]
    errors = [ensemble_test_error(d, EnsembleSpec(p, q)) for p, q in pairs]
    i = min(range(len(pairs)), key=errors.__getitem__)

    a = d.V_X + d.V_eps + d.V_Xeps
    if d.V_P > 0 and a > 0:
        kp = math.sqrt(budget * d.V_P / a)
    else:
        kp = float(budget) if d.V_P > 0 else 1.0
    kd = budget / kp
    cont = (
        d.B
        + d.V_P / kp
        + a / kd
        + (d.V_PX + d.V_Peps + d.V_PXeps) / budget
    )
    return BudgetSplit(budget, pairs[i][0], pairs[i][1], errors[i], kp, kd, cont)
