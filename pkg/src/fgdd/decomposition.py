"""Closed-form bias-variance decomposition of the asymptotic test error.

The prediction variance splits symmetrically over the three sources of
randomness: the random parameters ``P``, the training inputs ``X`` and the
label noise ``eps``.  Every term is a rational function of the four
scale-free ratios stored on :class:`~fgdd.tau.TauSolution`, which keeps the
ridgeless limit finite even when ``tau1`` itself diverges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterable, Optional, Sequence

import numpy as np

from .moments import GaussianMoments
from .tau import THRESHOLD_ATOL, ModelShape, TauSolution, solve_tau, zero_mode_mass

__all__ = [
    "TERM_NAMES",
    "Decomposition",
    "RecombinedViews",
    "TrainingLoss",
    "ThresholdReport",
    "ThresholdDiagnosticsError",
    "decompose",
    "decompose_rf",
    "decompose_ntk",
    "recombine",
    "training_loss",
    "threshold_diagnostics",
]

TERM_NAMES = ("B", "V_P", "V_X", "V_eps", "V_PX", "V_Peps", "V_Xeps", "V_PXeps")
VARIANCE_NAMES = TERM_NAMES[1:]


@dataclass(frozen=True)
class Decomposition:
    """Bias and the seven symmetric variance terms.

    At the ridgeless interpolation threshold ``diverged`` is set and the two
    divergent terms (``V_PX``, ``V_PXeps``) are NaN, as are the totals.
    """

    B: float
    V_P: float
    V_X: float
    V_eps: float
    V_PX: float
    V_Peps: float
    V_Xeps: float
    V_PXeps: float
    diverged: bool = False

    @property
    def total_variance(self) -> float:
        return math.fsum(getattr(self, n) for n in VARIANCE_NAMES)

    @property
    def E_test(self) -> float:
        return self.B + self.total_variance

    def terms(self) -> dict[str, float]:
        return {n: getattr(self, n) for n in TERM_NAMES}


@dataclass(frozen=True)
class RecombinedViews:
    B_sc: float
    V_sc: float
    V_D_cond: float
    V_D_comp: float
    V_P_cond: float
    V_P_comp: float
    V_P_bi: float
    V_D_bi: float
    V_PD: float
    dascoli_bias: float
    dascoli_init: float
    dascoli_samp: float
    dascoli_noise: float

    def view_totals(self) -> dict[str, float]:
        """Each view's parts summed; all equal the test error."""
        return {
            "semi_classical": self.B_sc + self.V_sc,
            "condition_on_data": self.dascoli_bias + self.V_D_cond + self.V_D_comp,
            "condition_on_parameters": self.dascoli_bias + self.V_P_cond + self.V_P_comp,
            "bivariate": self.dascoli_bias + self.V_P_bi + self.V_D_bi + self.V_PD,
            "dascoli": self.dascoli_bias
            + self.dascoli_init
            + self.dascoli_samp
            + self.dascoli_noise,
        }

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class TrainingLoss:
    T1: float
    T2: float
    E_train: float


def _t2_over_gamma_tau1_sq(shape: ModelShape, m: GaussianMoments, tau: TauSolution) -> float:
    """T2 / (gamma tau1)^2 with the gamma^2 factor cancelled."""
    s = shape.s2
    if s == 0.0:
        return 0.0
    inv_t1 = 1.0 / tau.tau1 if tau.finite else 0.0
    return s * (
        inv_t1
        + (s * (m.eta_prime - m.zeta) + shape.gamma) * tau.dtau1_rel
        + s * m.zeta * tau.dtau2_rel
    )


def _t2(shape: ModelShape, m: GaussianMoments, tau: TauSolution) -> float:
    s, g = shape.s2, shape.gamma
    if s == 0.0 or g == 0.0:
        return 0.0
    return s * g * g * (
        tau.tau1 + (s * (m.eta_prime - m.zeta) + g) * tau.dtau1 + s * m.zeta * tau.dtau2
    )


def decompose(
    shape: ModelShape, moments: GaussianMoments, tau: Optional[TauSolution] = None
) -> Decomposition:
    """Decomposition for the general model (RF when ``sigma_w2 = 0``)."""
    if tau is None:
        tau = solve_tau(shape, moments)
    phi = shape.phi
    nu = shape.nu
    se2 = shape.sigma_eps**2

    rt = tau.ratio
    B = rt * rt
    gap = (1.0 - rt) ** 2
    vx_over_b = phi * gap / (1.0 - phi * gap)

    t2_corr = 0.0
    if nu and shape.s2 and shape.gamma:
        t2_corr = _t2(shape, moments, tau) / tau.dtau1
    V_P = tau.dratio - B - t2_corr
    V_X = B * vx_over_b
    V_Xeps = se2 * vx_over_b

    diverged = shape.is_rf and shape.gamma == 0.0 and shape.at_threshold
    if diverged:
        V_PX = V_PXeps = math.nan
    else:
        V_PX = -tau.dtau2_rel - B - V_P - V_X
        if nu:
            V_PX += _t2_over_gamma_tau1_sq(shape, moments, tau)
        V_PXeps = se2 * (-tau.dtau1_rel - 1.0) - V_Xeps

    return Decomposition(
        B=B,
        V_P=V_P,
        V_X=V_X,
        V_eps=0.0,
        V_PX=V_PX,
        V_Peps=0.0,
        V_Xeps=V_Xeps,
        V_PXeps=V_PXeps,
        diverged=diverged,
    )


def decompose_rf(
    shape: ModelShape, moments: GaussianMoments, tau: Optional[TauSolution] = None
) -> Decomposition:
    if not shape.is_rf:
        raise ValueError("the RF model requires sigma_w2 = 0")
    return decompose(shape, moments, tau)


def decompose_ntk(
    shape: ModelShape, moments: GaussianMoments, tau: Optional[TauSolution] = None
) -> Decomposition:
    return decompose(shape, moments, tau)


def recombine(d: Decomposition) -> RecombinedViews:
    """Coarser views obtained by grouping the symmetric terms."""
    V_D_cond = d.V_X + d.V_eps + d.V_Xeps
    return RecombinedViews(
        B_sc=d.B + d.V_P + d.V_X + d.V_PX,
        V_sc=d.V_eps + d.V_Peps + d.V_Xeps + d.V_PXeps,
        V_D_cond=V_D_cond,
        V_D_comp=d.V_P + d.V_PX + d.V_Peps + d.V_PXeps,
        V_P_cond=d.V_P,
        V_P_comp=d.V_X + d.V_eps + d.V_PX + d.V_Peps + d.V_Xeps + d.V_PXeps,
        V_P_bi=d.V_P,
        V_D_bi=V_D_cond,
        V_PD=d.total_variance - d.V_P - V_D_cond,
        dascoli_bias=d.B,
        dascoli_init=d.V_P + d.V_PX,
        dascoli_samp=d.V_X,
        dascoli_noise=d.V_PXeps + d.V_Xeps + d.V_Peps + d.V_eps,
    )


def training_loss(
    shape: ModelShape, moments: GaussianMoments, tau: Optional[TauSolution] = None
) -> TrainingLoss:
    """Asymptotic training loss ``T1 + nu T2``.

    Without ridge the ``gamma^2`` prefactors vanish unless the kernel has a
    zero mode of mass ``u0`` (fewer features than samples): then
    ``gamma tau1 -> u0`` and ``T1 -> u0 (sigma_eps^2 + tau2/tau1)``.
    """
    if tau is None:
        tau = solve_tau(shape, moments)
    if shape.gamma == 0.0:
        if tau.finite:
            return TrainingLoss(0.0, 0.0, 0.0)
        u0 = zero_mode_mass(shape.phi, shape.psi, moments)
        T1 = u0 * (shape.sigma_eps**2 + tau.ratio)
        return TrainingLoss(T1, 0.0, T1)
    g = shape.gamma
    T1 = -g * g * (shape.sigma_eps**2 * tau.dtau1 + tau.dtau2)
    T2 = _t2(shape, moments, tau)
    return TrainingLoss(T1, T2, T1 + shape.nu * T2)


@dataclass(frozen=True)
class ThresholdReport:
    """Outcome of the ridgeless threshold checks along a width sweep.

    ``psis``/``decompositions`` hold the sweep in order of increasing width;
    ``probes`` maps each near-threshold probe ``psi`` to its decomposition.
    """

    psis: np.ndarray
    decompositions: tuple
    failures: tuple = ()
    probes: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures


class ThresholdDiagnosticsError(AssertionError):
    def __init__(self, failures: Sequence[str]):
        super().__init__("; ".join(failures))
        self.failures = tuple(failures)


def threshold_diagnostics(
    moments: GaussianMoments,
    phi: float,
    psis: Iterable[float],
    sigma_eps: float = 0.0,
    *,
    bias_tol: float = 1e-10,
    bounded_factor: float = 10.0,
    window: float = 1e-3,
    divergence_floor: float = 1e3,
    scaled_k: Sequence[int] = (3, 4, 5, 6),
    scaled_factor: float = 2.0,
    strict: bool = True,
) -> ThresholdReport:
    """Check the qualitative ridgeless RF behaviour around ``psi = phi``.

    The sweep is augmented with probes ``psi = phi (1 +- 10^-k)`` for ``k``
    in ``scaled_k``. Checks:

    * the bias never increases with the width ``n1/m = phi/psi``;
    * inside the window ``|1 - psi/phi| < window``, ``V_PX`` and ``V_PXeps``
      exceed ``divergence_floor`` somewhere, while ``B, V_P, V_X, V_Xeps``
      stay below ``bounded_factor`` times their mid-sweep value;
    * ``|phi - psi| V_PX`` and ``|phi - psi| V_PXeps`` vary by less than
      ``scaled_factor`` over the probes on each side.

    With a linear activation ``psi = phi`` is not an interpolation threshold
    (the features have rank ``n0`` whatever the width), so the divergence and
    scaling checks are skipped. Points at the exact threshold are dropped.
    """

    def at(p: float) -> Decomposition:
        return decompose(ModelShape(phi, p, 0.0, 0.0, sigma_eps), moments)

    psis = np.asarray(sorted(psis, reverse=True), dtype=float)  # increasing width
    psis = psis[np.abs(psis - phi) >= THRESHOLD_ATOL]
    decs = [at(p) for p in psis]
    probes = {phi * (1.0 + s * 10.0 ** (-k)): None for s in (1.0, -1.0) for k in scaled_k}
    for p in probes:
        probes[p] = at(p)
    failures: list[str] = []

    grid = dict(zip(psis, decs))
    grid.update(probes)
    order = sorted(grid, reverse=True)
    B = np.array([grid[p].B for p in order])
    for i in np.nonzero(np.diff(B) > bias_tol)[0]:
        failures.append(f"B increases by {B[i + 1] - B[i]:.3g} at psi={order[i + 1]!r}")

    near = [p for p in order if abs(1.0 - p / phi) < window]
    if decs:
        mid = decs[len(decs) // 2]
        for name in ("B", "V_P", "V_X", "V_Xeps"):
            cap = bounded_factor * getattr(mid, name) + 1e-12
            for p in near:
                if getattr(grid[p], name) > cap:
                    failures.append(f"{name} unbounded at psi={p!r}")

    if not moments.is_linear:
        for name in ("V_PX", "V_PXeps") if sigma_eps else ("V_PX",):
            if not any(getattr(grid[p], name) > divergence_floor for p in near):
                failures.append(f"{name} stays below {divergence_floor:g} within {window:g} of threshold")
            for sign, side in ((1.0, "above"), (-1.0, "below")):
                side_probes = [p for p in probes if (p - phi) * sign > 0]
                vals = np.array([abs(phi - p) * getattr(probes[p], name) for p in side_probes])
                if not (np.all(vals > 0) and vals.max() < scaled_factor * vals.min()):
                    failures.append(f"(phi-psi) {name} not bounded {side} threshold: {vals}")

    report = ThresholdReport(psis, tuple(decs), tuple(failures), probes)
    if strict and failures:
        raise ThresholdDiagnosticsError(failures)
    return report
