"""Self-consistent equations for the limiting resolvent traces.

For a kernel ``K`` with ridge ``gamma`` the theory is expressed through

    tau1 = lim tr(K^-1) / m,    tau2 = lim tr((X^T X / n0) K^-1) / m,

which solve a pair of coupled polynomial equations.  The general (NTK)
system reduces to the random-feature (RF) one when ``sigma_w2 = 0``.

The polynomials are written ``f1(tau1, tau2; z) = 0`` and
``f2(tau1, tau2; z) = 0`` with ``z`` the (possibly complex) ridge.  Real
solutions are reached from ``z = gamma + iT`` (large ``T``) by continuation
in the imaginary part, which tracks the Stieltjes-transform branch.  With
``Im z > 0`` that branch has ``Im tau < 0``.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .moments import GaussianMoments

__all__ = [
    "ModelShape",
    "TauSolution",
    "SolverError",
    "DegenerateBranchError",
    "DegenerateDerivativeError",
    "solve_tau",
    "solve_tau_rf",
    "solve_tau_ntk",
    "tau_derivatives",
    "ridgeless_ttau2",
    "ridgeless_quartic_residual",
    "scaled_residuals",
    "zero_mode_mass",
]

RESIDUAL_TOL = 1e-10
NEWTON_MAX_ITER = 50
PATH_MIN_STEP = 1e-6
MAX_PATH_STEPS = 2000
THRESHOLD_ATOL = 1e-8


class SolverError(RuntimeError):
    """The self-consistent system could not be solved reliably."""

    def __init__(self, message: str, last_residual: float = math.nan):
        super().__init__(message)
        self.last_residual = last_residual


class DegenerateBranchError(SolverError):
    """Ridgeless configuration without a well-defined limit."""


class DegenerateDerivativeError(SolverError):
    """The closed-form derivative denominator vanishes."""


@dataclass(frozen=True)
class ModelShape:
    """Proportional-asymptotics shape and regularisation.

    ``phi = n0/m`` and ``psi = n0/n1``.  ``sigma_w2`` is the standard
    deviation of the second-layer weights; zero selects the RF model.
    ``nu`` is 1 for the raw NTK predictor and 0 when it is centered.
    """

    phi: float
    psi: float
    gamma: float = 0.0
    sigma_w2: float = 0.0
    sigma_eps: float = 0.0
    nu: int = 1

    def __post_init__(self):
        for name in ("phi", "psi"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and positive, got {v!r}")
        for name in ("gamma", "sigma_w2", "sigma_eps"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v!r}")
        if self.nu not in (0, 1):
            raise ValueError(f"nu must be 0 or 1, got {self.nu!r}")

    @classmethod
    def from_sizes(cls, n0: int, m: int, n1: int, **kwargs) -> "ModelShape":
        return cls(phi=n0 / m, psi=n0 / n1, **kwargs)

    @property
    def s2(self) -> float:
        """Second-layer weight variance."""
        return self.sigma_w2**2

    @property
    def is_rf(self) -> bool:
        return self.sigma_w2 == 0.0

    @property
    def at_threshold(self) -> bool:
        return abs(self.phi - self.psi) < THRESHOLD_ATOL

    def with_(self, **changes) -> "ModelShape":
        return replace(self, **changes)


@dataclass(frozen=True)
class TauSolution:
    """Solution of the self-consistent system at a real ridge.

    In the ridgeless RF regime below the interpolation threshold ``tau1``
    and ``tau2`` are infinite.  Everything downstream depends on tau only
    through four scale-free ratios, which stay finite and are stored
    explicitly:

    ``ratio``        tau2 / tau1
    ``dratio``       tau2' / tau1'
    ``dtau1_rel``    tau1' / tau1^2
    ``dtau2_rel``    tau2' / tau1^2
    """

    tau1: float
    tau2: float
    dtau1: float
    dtau2: float
    ttau1: float
    ttau2: float
    residual_max: float
    method: str
    gamma: float
    ratio: float
    dratio: float
    dtau1_rel: float
    dtau2_rel: float

    @property
    def finite(self) -> bool:
        return math.isfinite(self.tau1) and math.isfinite(self.tau2)


class _Coef(NamedTuple):
    phi: float
    psi: float
    eta: float
    zeta: float
    etap: float
    s: float


def _coef(shape: ModelShape, moments: GaussianMoments) -> _Coef:
    return _Coef(
        shape.phi, shape.psi, moments.eta, moments.zeta, moments.eta_prime, shape.s2
    )


def _system(t1, t2, z, c: _Coef):
    """Residuals and Jacobian of the two polynomials."""
    phi, psi, eta, a, etap, s = c
    t12 = t1 * t2
    t1s = t1 * t1
    d21 = t2 - t1
    zt1 = z * t1 - 1.0
    ase = a * s * (etap - eta)

    f1 = (
        phi * (a * t12 + phi * d21)
        + a * t12 * psi * zt1
        + a * t12 * s * (a * d21 * psi + t1 * psi * etap + phi)
    )
    f2 = ase * t1s * t2 + a * t12 * zt1 - d21 * phi * (a * d21 + eta * t1)

    j11 = (
        phi * a * t2
        - phi * phi
        + a * psi * t2 * (2.0 * z * t1 - 1.0)
        + a * s * (a * psi * t2 * (t2 - 2.0 * t1) + 2.0 * psi * etap * t12 + phi * t2)
    )
    j12 = (
        phi * a * t1
        + phi * phi
        + a * psi * t1 * zt1
        + a * s * (a * psi * t1 * (2.0 * t2 - t1) + psi * etap * t1s + phi * t1)
    )
    j21 = (
        2.0 * ase * t12
        + a * t2 * (2.0 * z * t1 - 1.0)
        + 2.0 * phi * a * d21
        - phi * eta * (t2 - 2.0 * t1)
    )
    j22 = ase * t1s + a * t1 * zt1 - 2.0 * phi * a * d21 - phi * eta * t1
    return f1, f2, (j11, j12, j21, j22)


def _scales(t1, t2, z, c: _Coef):
    """Largest monomial magnitude in each polynomial."""
    phi, psi, eta, a, etap, s = c
    a1, a2, az = abs(t1), abs(t2), abs(z)
    a12 = a1 * a2
    a112 = a1 * a12
    sc1 = max(
        phi * a * a12,
        phi * phi * max(a1, a2),
        a * psi * az * a112,
        a * psi * a12,
        a * a * s * psi * a12 * max(a1, a2),
        a * s * psi * etap * a112,
        a * s * phi * a12,
    )
    sc2 = max(
        a * s * abs(etap - eta) * a112,
        a * az * a112,
        a * a12,
        phi * a * max(a1, a2) ** 2,
        2.0 * phi * a * a12,
        phi * eta * a1 * max(a1, a2),
    )
    return sc1, sc2


def _dz_partials(t1, t2, c: _Coef):
    a = c.zeta
    return a * c.psi * t1 * t1 * t2, a * t1 * t1 * t2


def _solve2(j, b1, b2):
    j11, j12, j21, j22 = j
    det = j11 * j22 - j12 * j21
    if det == 0:
        raise ZeroDivisionError
    return (j22 * b1 - j12 * b2) / det, (j11 * b2 - j21 * b1) / det


def _scaled_residual(t1, t2, z, c):
    f1, f2, _ = _system(t1, t2, z, c)
    sc1, sc2 = _scales(t1, t2, z, c)
    return max(abs(f1) / max(sc1, 1e-300), abs(f2) / max(sc2, 1e-300))


def _newton(t1, t2, z, c, tol=1e-14, max_iter=NEWTON_MAX_ITER):
    """Plain Newton on the 2x2 system; returns (t1, t2, ok, iterations).

    Stops at relative step ``tol`` or once steps stop shrinking near
    roundoff level.
    """
    prev = math.inf
    for it in range(1, max_iter + 1):
        f1, f2, jac = _system(t1, t2, z, c)
        try:
            d1, d2 = _solve2(jac, -f1, -f2)
        except ZeroDivisionError:
            return t1, t2, False, it
        t1 = t1 + d1
        t2 = t2 + d2
        if not (cmath.isfinite(t1) and cmath.isfinite(t2)):
            return t1, t2, False, it
        step = max(abs(d1) / max(abs(t1), 1e-300), abs(d2) / max(abs(t2), 1e-300))
        if step < tol or (step < 1e-11 and step >= 0.5 * prev):
            return t1, t2, True, it
        # ill-conditioned roots stall above tol once the residual is at roundoff
        if step >= 0.5 * prev and _scaled_residual(t1, t2, z, c) < 1e-12:
            return t1, t2, True, it
        prev = step
    ok = _scaled_residual(t1, t2, z, c) < 1e-12
    return t1, t2, ok, max_iter


def _polish(t1: float, t2: float, gamma: float, c: _Coef, iters: int = 4):
    """Refine a real root with residuals in extended precision.

    Near-singular configurations lose digits in the double-precision
    residual; evaluating it in ``np.longdouble`` recovers them.
    """
    ld = np.longdouble
    cl = _Coef(*(ld(v) for v in c))
    x1, x2, g = ld(t1), ld(t2), ld(gamma)
    for _ in range(iters):
        f1, f2, _ = _system(x1, x2, g, cl)
        _, _, jac = _system(float(x1), float(x2), float(g), c)
        try:
            d1, d2 = _solve2(jac, -float(f1), -float(f2))
        except ZeroDivisionError:
            break
        x1 += ld(d1)
        x2 += ld(d2)
        if abs(d1) <= 1e-17 * abs(float(x1)) and abs(d2) <= 1e-17 * abs(float(x2)):
            break
    return float(x1), float(x2)


def _on_branch(t1, t2, y) -> bool:
    """Stieltjes half-plane condition: Im z > 0 requires Im tau <= 0."""
    if y <= 0:
        return True
    tol = 1e-12
    return t1.imag <= tol * abs(t1) and t2.imag <= tol * abs(t2)


def _homotopy(c: _Coef, gamma: float, gamma_eff: float):
    """Continue from gamma + iT down to the real axis.

    ``gamma_eff`` is a lower bound on the smallest eigenvalue of the
    limiting kernel; it sets how close to the axis the path must come.
    Returns real (tau1, tau2).
    """
    scale = 1.0 + gamma + c.eta + c.s * c.etap
    y = 10.0 * scale
    z = complex(gamma, y)
    g0 = 1.0 / (z + c.eta + c.s * c.etap)
    t1, t2, ok, _ = _newton(g0, g0, z, c)
    if not ok or not _on_branch(t1, t2, y):
        raise SolverError("homotopy start failed", _scaled_residual(t1, t2, z, c))

    singular_probe = gamma == 0.0 and gamma_eff <= 1e-10 * scale
    y_stop = 1e-6 * gamma_eff if not singular_probe else 1e-7 * scale
    ratio = 0.1
    steps = 0
    while y > y_stop:
        steps += 1
        if steps > MAX_PATH_STEPS:
            raise SolverError(
                f"homotopy exceeded {MAX_PATH_STEPS} steps at Im z = {y:.3g}",
                _scaled_residual(t1, t2, complex(gamma, y), c),
            )
        y_new = max(y * ratio, y_stop)
        # tangent predictor: d tau / dy = i d tau / dz
        _, _, jac = _system(t1, t2, complex(gamma, y), c)
        p1, p2 = _dz_partials(t1, t2, c)
        try:
            v1, v2 = _solve2(jac, -p1, -p2)
        except ZeroDivisionError:
            v1 = v2 = 0.0
        # predictor linear in (log y, log tau); exact for tau ~ 1/(iy)
        dlog = math.log(y_new / y)
        g1 = t1 * cmath.exp(1j * y * v1 / t1 * dlog)
        g2 = t2 * cmath.exp(1j * y * v2 / t2 * dlog)
        z_new = complex(gamma, y_new)
        n1, n2, ok, iters = _newton(g1, g2, z_new, c, tol=1e-7)
        jump = max(abs(n1 - g1) / abs(g1), abs(n2 - g2) / abs(g2)) if ok else math.inf
        if ok and _on_branch(n1, n2, y_new) and jump < 0.2:
            t1, t2, y = n1, n2, y_new
            if iters <= 3:
                ratio = max(ratio * ratio, 1e-4)
            elif iters >= 5:
                ratio = math.sqrt(ratio)
        else:
            ratio = math.sqrt(ratio)
            if 1.0 - ratio < PATH_MIN_STEP:
                raise SolverError(
                    f"homotopy stalled at Im z = {y:.3g}",
                    _scaled_residual(t1, t2, complex(gamma, y), c),
                )

    if singular_probe and abs(y * t1) > 1e-3:
        raise DegenerateBranchError(
            "limiting kernel is singular at gamma = 0 (zero-eigenvalue mass "
            f"~{abs(y * t1):.3g}); add a small ridge"
        )

    r1, r2, ok, _ = _newton(t1.real, t2.real, gamma, c)
    if not ok:
        raise SolverError(
            "Newton polish on the real axis failed", _scaled_residual(r1, r2, gamma, c)
        )
    if abs(r1 - t1.real) > 1e-3 * abs(r1) or abs(r2 - t2.real) > 1e-3 * abs(r2):
        raise SolverError("branch jump while landing on the real axis")
    return _polish(float(r1), float(r2), gamma, c)


def _ttau(t1, t2, c: _Coef):
    tt2 = t2 / t1 - 1.0
    tt1 = c.s * c.zeta * t2 + c.phi * tt2
    return tt1, tt2


def _closed_form_derivatives(tt1, tt2, t2, c: _Coef):
    phi, psi, eta, a, _, _ = c
    q = tt2 + 1.0
    terms = (
        psi * tt1**2 * (a * a * q * q + phi * (a * tt2 + eta) * (a * tt2 * (2 * tt2 + 3) + eta)),
        a * a * phi * phi * q * q * (phi * tt2 * tt2 - 1.0),
    )
    den = terms[0] + terms[1]
    if abs(den) <= 1e-14 * max(abs(terms[0]), abs(terms[1]), 1e-300):
        raise DegenerateDerivativeError(
            f"derivative denominator vanishes at ttau1={tt1!r}, ttau2={tt2!r}"
        )
    d1 = -a * a * t2 * t2 * (psi * tt1 * tt1 - phi * phi) / den
    d2 = -a * t2 * t2 * (psi * tt1 * tt1 * (a - eta) - a * phi * phi * q * q) / den
    return d1, d2


def tau_derivatives(
    solution: TauSolution, shape: ModelShape, moments: GaussianMoments
) -> tuple[float, float]:
    """Closed-form d tau1/d gamma and d tau2/d gamma at a finite solution."""
    if not solution.finite:
        raise DegenerateDerivativeError("derivatives are infinite on the ridgeless branch")
    return _closed_form_derivatives(
        solution.ttau1, solution.ttau2, solution.tau2, _coef(shape, moments)
    )


def _from_finite(t1, t2, shape, c, method, residual) -> TauSolution:
    tt1, tt2 = _ttau(t1, t2, c)
    d1, d2 = _closed_form_derivatives(tt1, tt2, t2, c)
    return TauSolution(
        tau1=t1,
        tau2=t2,
        dtau1=d1,
        dtau2=d2,
        ttau1=tt1,
        ttau2=tt2,
        residual_max=residual,
        method=method,
        gamma=shape.gamma,
        ratio=t2 / t1,
        dratio=d2 / d1,
        dtau1_rel=d1 / (t1 * t1),
        dtau2_rel=d2 / (t1 * t1),
    )


def ridgeless_ttau2(phi: float, psi: float, moments: GaussianMoments) -> float:
    """Explicit ridgeless root for ``tau2/tau1 - 1`` (RF model)."""
    eta, zeta = moments.eta, moments.zeta
    w = max(phi, psi)
    disc = (zeta + eta * w) ** 2 - 4.0 * zeta * zeta * w
    if disc < 0:
        # eta >= zeta makes disc >= 0; tiny negatives are roundoff
        if disc < -1e-12 * (zeta + eta * w) ** 2:
            raise AssertionError(f"negative discriminant {disc!r}")
        disc = 0.0
    return (-zeta - eta * w + math.sqrt(disc)) / (2.0 * zeta * w)


def ridgeless_quartic_residual(
    ttau2: float, phi: float, psi: float, gamma: float, moments: GaussianMoments
) -> float:
    """Residual of the quartic satisfied by ``ttau2`` in the RF model."""
    eta, zeta = moments.eta, moments.zeta
    t = ttau2
    qpsi = t * (zeta * psi * t + zeta + eta * psi) + zeta
    qphi = t * (zeta * phi * t + zeta + eta * phi) + zeta
    return qpsi * qphi + gamma * zeta * phi * t * (t + 1.0)


def zero_mode_mass(phi: float, psi: float, moments: GaussianMoments) -> float:
    """Fraction of zero eigenvalues of the limiting ridgeless RF kernel."""
    if moments.is_linear:
        return max(0.0, 1.0 - min(phi, phi / psi, 1.0))
    return max(0.0, 1.0 - phi / psi)


def _ridgeless_rf(shape: ModelShape, moments: GaussianMoments, c: _Coef) -> TauSolution:
    phi, psi = shape.phi, shape.psi
    linear = moments.is_linear
    if shape.at_threshold and linear:
        raise DegenerateBranchError(
            "linear activation at the interpolation threshold has no ridgeless "
            "limit; use a small positive gamma"
        )
    if linear and abs(phi - 1.0) < THRESHOLD_ATOL and psi <= phi:
        raise DegenerateBranchError(
            "linear activation with n0 = m is singular without ridge; "
            "use a small positive gamma"
        )
    tt2 = ridgeless_ttau2(phi, psi, moments)
    w = max(phi, psi)
    zeta, eta = moments.zeta, moments.eta
    qres = tt2 * (zeta * w * tt2 + zeta + eta * w) + zeta
    qscale = max(zeta * w * tt2 * tt2, abs((zeta + eta * w) * tt2), zeta)
    u0 = zero_mode_mass(phi, psi, moments)

    if u0 > 0.0 or shape.at_threshold:
        q = 1.0 + tt2
        if shape.at_threshold:
            r1 = r2 = -math.inf
        else:
            r1 = -1.0 / u0
            r2 = -q / u0
        return TauSolution(
            tau1=math.inf,
            tau2=math.inf,
            dtau1=-math.inf,
            dtau2=-math.inf,
            ttau1=phi * tt2,
            ttau2=tt2,
            residual_max=abs(qres) / qscale,
            method="ridgeless-closed-form",
            gamma=0.0,
            ratio=q,
            dratio=q,
            dtau1_rel=r1,
            dtau2_rel=r2,
        )

    t2 = phi * phi * tt2 / (zeta * (psi - phi))
    t1 = t2 / (1.0 + tt2)
    res = max(_scaled_residual(t1, t2, 0.0, c), abs(qres) / qscale)
    return _from_finite(t1, t2, shape, c, "ridgeless-closed-form", res)


def solve_tau(shape: ModelShape, moments: GaussianMoments) -> TauSolution:
    """Solve the general (NTK) system; RF is the ``sigma_w2 = 0`` case.

    Raises
    ------
    SolverError
        When the path continuation or the final certification fails.
    DegenerateBranchError
        For ridgeless configurations whose limiting kernel is singular in a
        way the theory does not cover.
    """
    c = _coef(shape, moments)
    if shape.gamma == 0.0 and shape.is_rf:
        sol = _ridgeless_rf(shape, moments, c)
    else:
        gamma_eff = shape.gamma + c.s * (c.etap - c.zeta)
        t1, t2 = _homotopy(c, shape.gamma, gamma_eff)
        res = _scaled_residual(t1, t2, shape.gamma, c)
        sol = _from_finite(t1, t2, shape, c, "homotopy", res)
    if not sol.residual_max < RESIDUAL_TOL:
        raise SolverError(
            f"residual {sol.residual_max:.3g} above tolerance", sol.residual_max
        )
    if sol.finite and not (sol.tau1 > 0 and sol.tau2 > 0):
        raise SolverError(f"non-positive solution tau1={sol.tau1!r}, tau2={sol.tau2!r}")
    return sol


def solve_tau_rf(shape: ModelShape, moments: GaussianMoments) -> TauSolution:
    if not shape.is_rf:
        raise ValueError("the RF model requires sigma_w2 = 0")
    return solve_tau(shape, moments)


def solve_tau_ntk(shape: ModelShape, moments: GaussianMoments) -> TauSolution:
    return solve_tau(shape, moments)


def scaled_residuals(
    tau1: float, tau2: float, shape: ModelShape, moments: GaussianMoments
) -> tuple[float, float]:
    """Residuals of both equations divided by their largest monomial."""
    c = _coef(shape, moments)
    f1, f2, _ = _system(tau1, tau2, shape.gamma, c)
    sc1, sc2 = _scales(tau1, tau2, shape.gamma, c)
    return abs(f1) / max(sc1, 1e-300), abs(f2) / max(sc2, 1e-300)
