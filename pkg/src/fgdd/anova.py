"""Symmetric (functional ANOVA) variance decomposition over k variables.

Two copies of the inputs are coupled so that the copy shares exactly the
variables selected by a mask ``i``.  With ``H_i = E[Y Y~ | shared = i]``,
Moebius inversion over the subset lattice gives the variance attributable
to each subset ``s``::

    V_s = sum_{j subset of s} (-1)^{|s| - |j|} H_j

Mask convention
---------------
Masks are integers whose binary string, padded to ``k`` digits, lists the
variables left to right: ``"110"`` for variables ``(P, X, eps)`` means P and
X are shared and eps is redrawn.  A set bit always means *shared*.  The
variable at position ``j`` (0-based, left to right) is bit ``k - 1 - j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

__all__ = [
    "MAX_VARIABLES",
    "HTable",
    "VarDecomp",
    "mask_to_str",
    "str_to_mask",
    "variable_bit",
    "mobius_variance",
    "subset_sum_check",
    "monotonicity_check",
    "nonnegativity_check",
    "permute_table",
    "coupled_htable",
]

MAX_VARIABLES = 16

MaskLike = Union[int, str]


def mask_to_str(mask: int, k: int) -> str:
    return format(mask, f"0{k}b")


def str_to_mask(text: str, k: int) -> int:
    if len(text) != k or set(text) - {"0", "1"}:
        raise ValueError(f"mask {text!r} is not a {k}-digit bit string")
    return int(text, 2)


def variable_bit(position: int, k: int) -> int:
    """Bit for the variable at ``position`` in the left-to-right order."""
    return 1 << (k - 1 - position)


def _check_k(k: int) -> None:
    if not 1 <= k <= MAX_VARIABLES:
        raise ValueError(f"k must be in [1, {MAX_VARIABLES}], got {k}")


def _as_mask(mask: MaskLike, k: int) -> int:
    if isinstance(mask, str):
        return str_to_mask(mask, k)
    mask = int(mask)
    if not 0 <= mask < 1 << k:
        raise ValueError(f"mask {mask} out of range for k={k}")
    return mask


def _default_names(k: int) -> tuple[str, ...]:
    return tuple(f"X{i + 1}" for i in range(k))


@dataclass(frozen=True)
class HTable:
    """Coupling expectations ``H[mask]`` with optional standard errors.

    ``second_moment`` is ``E[Y^2]`` for the uncoupled output.  When every
    source of randomness is among the variables it equals ``H[full]``; any
    excess is variance that none of the variables explain.
    """

    k: int
    values: np.ndarray
    std_errors: np.ndarray
    names: tuple[str, ...] = ()
    second_moment: Optional[float] = None

    def __post_init__(self):
        _check_k(self.k)
        n = 1 << self.k
        values = np.asarray(self.values, dtype=float)
        if values.shape != (n,):
            raise ValueError(f"expected {n} H values, got shape {values.shape}")
        se = np.zeros(n) if self.std_errors is None else np.asarray(self.std_errors, float)
        if se.shape != (n,):
            raise ValueError(f"expected {n} standard errors, got shape {se.shape}")
        if np.any(se < 0):
            raise ValueError("standard errors must be nonnegative")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "std_errors", se)
        if not self.names:
            object.__setattr__(self, "names", _default_names(self.k))
        elif len(self.names) != self.k:
            raise ValueError("need one name per variable")

    @classmethod
    def from_mapping(
        cls,
        k: int,
        values: Mapping[MaskLike, float],
        std_errors: Optional[Mapping[MaskLike, float]] = None,
        names: Sequence[str] = (),
        second_moment: Optional[float] = None,
    ) -> "HTable":
        """Build a table keyed by masks (ints or bit strings).

        Raises ``KeyError`` naming the first missing mask.
        """
        _check_k(k)
        vals = {_as_mask(m, k): float(v) for m, v in values.items()}
        ses = {_as_mask(m, k): float(v) for m, v in (std_errors or {}).items()}
        arr = np.empty(1 << k)
        err = np.zeros(1 << k)
        for mask in range(1 << k):
            if mask not in vals:
                raise KeyError(f"H entry for mask {mask_to_str(mask, k)} is missing")
            arr[mask] = vals[mask]
            err[mask] = ses.get(mask, 0.0)
        return cls(k, arr, err, tuple(names), second_moment)

    def __getitem__(self, mask: MaskLike) -> float:
        return float(self.values[_as_mask(mask, self.k)])

    def se(self, mask: MaskLike) -> float:
        return float(self.std_errors[_as_mask(mask, self.k)])

    def as_dict(self) -> dict[str, float]:
        return {mask_to_str(i, self.k): float(v) for i, v in enumerate(self.values)}


@dataclass(frozen=True)
class VarDecomp:
    """Variance terms ``V[s]`` indexed by subset mask.

    ``terms[0]`` holds the unexplained remainder ``V_empty``.
    """

    k: int
    terms: np.ndarray
    std_errors: np.ndarray
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.names:
            object.__setattr__(self, "names", _default_names(self.k))

    def __getitem__(self, mask: MaskLike) -> float:
        return float(self.terms[_as_mask(mask, self.k)])

    def se(self, mask: MaskLike) -> float:
        return float(self.std_errors[_as_mask(mask, self.k)])

    def label(self, mask: MaskLike) -> str:
        """Human-readable subset label such as ``"P,X"`` (empty set -> ``"-"``)."""
        mask = _as_mask(mask, self.k)
        parts = [n for j, n in enumerate(self.names) if mask & variable_bit(j, self.k)]
        return ",".join(parts) if parts else "-"

    @property
    def explained(self) -> float:
        return float(np.sum(self.terms[1:]))

    def as_dict(self) -> dict[str, float]:
        return {mask_to_str(i, self.k): float(v) for i, v in enumerate(self.terms)}


def _zeta_transform(values: np.ndarray, k: int, sign: float) -> np.ndarray:
    """In-place-style subset sum (sign=+1) or Moebius inversion (sign=-1)."""
    out = np.array(values, dtype=float, copy=True)
    idx = np.arange(1 << k)
    for b in range(k):
        bit = 1 << b
        upper = idx[(idx & bit) != 0]
        out[upper] += sign * out[upper ^ bit]
    return out


def mobius_variance(h: HTable) -> VarDecomp:
    """Moebius-invert an H-table into the symmetric variance terms.

    Standard errors combine the contributing H errors in quadrature,
    ignoring their covariance.
    """
    if not np.all(np.isfinite(h.values)):
        bad = int(np.nonzero(~np.isfinite(h.values))[0][0])
        raise ValueError(f"H entry for mask {mask_to_str(bad, h.k)} is not finite")
    v = _zeta_transform(h.values, h.k, -1.0)
    var = _zeta_transform(h.std_errors**2, h.k, +1.0)
    full = (1 << h.k) - 1
    v[0] = 0.0 if h.second_moment is None else h.second_moment - h.values[full]
    return VarDecomp(h.k, v, np.sqrt(var), h.names)


def subset_sum_check(v: VarDecomp, h: HTable) -> float:
    """Largest violation of ``sum_{s subset S} V[s] = H[S] - H[empty]``."""
    if v.k != h.k:
        raise ValueError("tables have different numbers of variables")
    explained = np.array(v.terms, dtype=float, copy=True)
    explained[0] = 0.0
    sums = _zeta_transform(explained, v.k, +1.0)
    return float(np.max(np.abs(sums - (h.values - h.values[0]))))


def _proper_subsets(mask: int):
    sub = (mask - 1) & mask
    while True:
        yield sub
        if sub == 0:
            return
        sub = (sub - 1) & mask


def monotonicity_check(h: HTable, n_se: float = 3.0) -> list[tuple[str, str]]:
    """Pairs ``(a, b)`` with ``a`` a proper subset of ``b`` and ``H[a]`` too large.

    ``H`` is nondecreasing along the subset order; a pair is reported when
    ``H[a] > H[b] + n_se * sqrt(se_a^2 + se_b^2)``.
    """
    out = []
    k = h.k
    for big in range(1 << k):
        for small in sorted(_proper_subsets(big)) if big else ():
            se = np.hypot(h.std_errors[small], h.std_errors[big])
            if h.values[small] > h.values[big] + n_se * se:
                out.append((mask_to_str(small, k), mask_to_str(big, k)))
    return sorted(out)


def nonnegativity_check(
    v: VarDecomp, n_se: float = 3.0, atol: float = 1e-12
) -> list[str]:
    """Subsets whose variance term is significantly negative."""
    scale = max(1.0, float(np.max(np.abs(v.terms))))
    bad = v.terms < -(n_se * v.std_errors + atol * scale)
    return [mask_to_str(int(i), v.k) for i in np.nonzero(bad)[0]]


def permute_table(values: np.ndarray, k: int, perm: Sequence[int]) -> np.ndarray:
    """Relabel variables: new position ``j`` holds old variable ``perm[j]``."""
    values = np.asarray(values)
    out = np.empty_like(values)
    for old in range(1 << k):
        new = 0
        for j, src in enumerate(perm):
            if old & variable_bit(src, k):
                new |= variable_bit(j, k)
        out[new] = values[old]
    return out


def coupled_htable(
    func: Callable[..., np.ndarray],
    samplers: Sequence[Callable[[np.random.Generator, int], np.ndarray]],
    n_samples: int,
    rng: np.random.Generator,
    names: Sequence[str] = (),
) -> HTable:
    """Monte Carlo H-table for ``Y = func(*variables)``.

    Each sampler draws ``n`` realisations of one variable.  One base and
    one independent copy are drawn per variable; every mask reuses them,
    so the estimates share common random numbers.
    """
    k = len(samplers)
    _check_k(k)
    base = [s(rng, n_samples) for s in samplers]
    copy = [s(rng, n_samples) for s in samplers]
    y_base = np.asarray(func(*base), dtype=float)
    values = np.empty(1 << k)
    errors = np.empty(1 << k)
    for mask in range(1 << k):
        args = [
            base[j] if mask & variable_bit(j, k) else copy[j] for j in range(k)
        ]
        prod = y_base * np.asarray(func(*args), dtype=float)
        values[mask] = prod.mean()
        errors[mask] = prod.std(ddof=1) / np.sqrt(n_samples)
    return HTable(k, values, errors, tuple(names), float(np.mean(y_base**2)))
