"""Gaussian moments of activation functions.

The asymptotic theory depends on the activation only through three numbers
evaluated at a standard normal input ``g``::

    eta       = E[sigma(g)^2]
    zeta      = (E[sigma'(g)])^2 = (E[g sigma(g)])^2
    eta_prime = E[sigma'(g)^2]

They are computed with Gauss-Hermite quadrature for the probabilists'
weight ``exp(-x^2/2)``, normalised to the standard normal density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy.special import roots_hermitenorm

__all__ = [
    "Activation",
    "GaussianMoments",
    "TeacherMoments",
    "QuadratureError",
    "InfiniteSNRError",
    "get_activation",
    "compute_moments",
    "stein_check",
    "teacher_moments",
    "effective_snr",
]

ArrayFn = Callable[[np.ndarray], np.ndarray]

MIN_NODES = 16
CONVERGED_RTOL = 1e-10
DIVERGED_RTOL = 1e-6
FD_STEP = 1e-5


class QuadratureError(ValueError):
    """Raised when a moment does not settle under node doubling."""


class InfiniteSNRError(ZeroDivisionError):
    """Raised when a linear, noiseless teacher makes the SNR infinite."""


@dataclass(frozen=True)
class Activation:
    """Entrywise nonlinearity with an optional analytic derivative.

    When ``derivative`` is ``None`` the derivative is taken by central
    differences with step ``fd_step * max(1, |x|)``.
    """

    name: str
    fn: ArrayFn
    derivative: Optional[ArrayFn] = None
    fd_step: float = FD_STEP

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.fn(x)

    @property
    def analytic(self) -> bool:
        return self.derivative is not None

    def prime(self, x: np.ndarray) -> np.ndarray:
        """Evaluate sigma'(x), analytically when possible."""
        if self.derivative is not None:
            return self.derivative(x)
        x = np.asarray(x, dtype=float)
        h = self.fd_step * np.maximum(1.0, np.abs(x))
        return (self.fn(x + h) - self.fn(x - h)) / (2.0 * h)


def _identity(x):
    return np.asarray(x, dtype=float).copy()


def _identity_prime(x):
    return np.ones_like(np.asarray(x, dtype=float))


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_prime(x):
    # 1/2 at the kink keeps odd node counts symmetric
    return np.heaviside(x, 0.5)


def _tanh_prime(x):
    return 1.0 / np.cosh(np.clip(x, -350.0, 350.0)) ** 2


_BUILTIN = {
    "identity": Activation("identity", _identity, _identity_prime),
    "relu": Activation("relu", _relu, _relu_prime),
    "tanh": Activation("tanh", np.tanh, _tanh_prime),
}


def get_activation(name: str | Activation) -> Activation:
    """Return a built-in activation by name (``identity``, ``relu``, ``tanh``)."""
    if isinstance(name, Activation):
        return name
    try:
        return _BUILTIN[name]
    except KeyError:
        raise ValueError(
            f"unknown activation {name!r}; expected one of {sorted(_BUILTIN)}"
        ) from None


@dataclass(frozen=True)
class GaussianMoments:
    eta: float
    zeta: float
    eta_prime: float
    quadrature_nodes: int = 0
    converged: bool = True

    @property
    def is_linear(self) -> bool:
        """True when the activation has no nonlinear Gaussian component."""
        return self.eta - self.zeta <= 1e-12 * max(self.eta, 1e-300)


@dataclass(frozen=True)
class TeacherMoments:
    eta_t: float
    zeta_t: float


@lru_cache(maxsize=16)
def _nodes(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = roots_hermitenorm(n)
    return x, w / math.sqrt(2.0 * math.pi)


def _raw_moments(act: Activation, n: int) -> dict[str, float]:
    x, w = _nodes(n)
    # overflow shows up as a non-finite moment, reported by the caller
    with np.errstate(over="ignore", invalid="ignore"):
        s = act(x)
        ds = act.prime(x)
        mean_prime = float(w @ ds)
        mean_gs = float(w @ (x * s))
        zeta = mean_prime**2 if act.analytic else mean_gs**2
        return {
            "eta": float(w @ (s * s)),
            "zeta": zeta,
            "eta_prime": float(w @ (ds * ds)),
        }


def compute_moments(activation: Activation | str, nodes: int = 128) -> GaussianMoments:
    """Gaussian moments of ``activation`` by Gauss-Hermite quadrature.

    The result is flagged ``converged`` when doubling the node count moves
    every moment by less than 1e-10 relative.

    Raises
    ------
    QuadratureError
        If some moment moves by 1e-6 relative or more under doubling, or
        is not finite.
    """
    act = get_activation(activation)
    if nodes < MIN_NODES:
        raise ValueError(f"need at least {MIN_NODES} quadrature nodes, got {nodes}")
    base = _raw_moments(act, nodes)
    fine = _raw_moments(act, 2 * nodes)
    converged = True
    for key, value in base.items():
        ref = fine[key]
        if not (math.isfinite(value) and math.isfinite(ref)):
            raise QuadratureError(f"moment {key} is not finite for {act.name}")
        rel = abs(value - ref) / max(abs(ref), 1e-300)
        if rel >= DIVERGED_RTOL and abs(value - ref) > 1e-300:
            raise QuadratureError(
                f"moment {key} of {act.name} changed by {rel:.3g} relative "
                f"between {nodes} and {2 * nodes} nodes"
            )
        if rel >= CONVERGED_RTOL:
            converged = False

    eta, zeta, eta_prime = base["eta"], base["zeta"], base["eta_prime"]
    slack = 1e-12 * max(eta, eta_prime, 1.0)
    if zeta > eta + slack or zeta > eta_prime + slack:
        raise QuadratureError(
            f"moment ordering violated for {act.name}: "
            f"eta={eta!r}, zeta={zeta!r}, eta_prime={eta_prime!r}"
        )
    return GaussianMoments(eta, zeta, eta_prime, nodes, converged)


def stein_check(activation: Activation | str, nodes: int = 128) -> float:
    """Relative gap between the two equivalent definitions of ``zeta``.

    Stein's lemma gives E[g sigma(g)] = E[sigma'(g)] for Gaussian ``g``.
    """
    act = get_activation(activation)
    x, w = _nodes(nodes)
    via_stein = float(w @ (x * act(x))) ** 2
    via_prime = float(w @ act.prime(x)) ** 2
    return abs(via_stein - via_prime) / max(via_prime, 1e-30)


def teacher_moments(activation: Activation | str, nodes: int = 128) -> TeacherMoments:
    m = compute_moments(activation, nodes)
    return TeacherMoments(m.eta, m.zeta)


def effective_snr(teacher: TeacherMoments, sigma_eps: float) -> float:
    """SNR of the equivalent linear teacher plus noise.

    A nonlinear teacher contributes ``eta_t - zeta_t`` of effective noise.
    """
    if sigma_eps < 0:
        raise ValueError("sigma_eps must be nonnegative")
    denom = teacher.eta_t - teacher.zeta_t + sigma_eps**2
    # quadrature leaves eta_t - zeta_t ~ 1e-16 for a linear teacher
    if denom <= 1e-12 * max(teacher.eta_t, 1.0):
        raise InfiniteSNRError(
            "linear teacher without label noise has infinite SNR; pass sigma_eps directly"
        )
    return teacher.zeta_t / denom
