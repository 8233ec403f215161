"""Finite-size Monte Carlo for random-feature and NTK kernel regression.

Each replicate draws base and copy realisations of the random parameters
``P = (W1, W2)``, the training inputs ``X`` and the label noise ``eps``.
A predictor is fitted for every way of mixing base and copy variables, so
the coupling expectations ``H[mask] = E[yhat_base * yhat_mask]`` can be
estimated with common random numbers.  Ensembles reuse the same machinery
with several independent draws per role.

Randomness is keyed by ``(base_seed, replicate, kind, role, index)``
through :class:`numpy.random.SeedSequence` and the counter-based Philox
generator, so results do not depend on execution order or worker count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.linalg.blas import dsyrk

from .anova import HTable, VarDecomp, mask_to_str, mobius_variance, _zeta_transform
from .ensemble import EnsembleSpec
from .moments import Activation, GaussianMoments, compute_moments, get_activation
from .tau import ModelShape

__all__ = [
    "SimConfig",
    "Experiment",
    "ReplicateOutput",
    "SimEstimate",
    "SingularKernelError",
    "make_experiment",
    "gaussian_equivalent_features",
    "build_kernel",
    "predict",
    "run_replicate",
    "run_replicates",
    "estimate_decomposition",
    "simulate_ensemble",
    "simulate_ensembles",
    "jackknife",
    "worker_count",
    "MIN_REPLICATES",
]

MIN_REPLICATES = 8
THREADS_ENV = "FGDD_THREADS"

# stream kinds for seed derivation
_K_BETA, _K_TEST_FIXED, _K_P, _K_X, _K_EPS, _K_TEST, _K_THETA, _K_THETA_TEST = range(8)
BASE, COPY = 1, 0
MASK_ORDER = ("P", "X", "eps")


class SingularKernelError(np.linalg.LinAlgError):
    """The kernel could not be factored or solved."""


@dataclass(frozen=True)
class SimConfig:
    """Monte Carlo experiment settings.

    ``test_sampling`` selects whether test inputs are redrawn for every
    replicate (``"per-replicate"``, default) or fixed once per experiment
    (``"fixed"``).  Redrawing averages over the input distribution, so
    the standard errors account for the finite test set too.
    """

    m: int
    n0: int
    n1: int
    activation: str | Activation = "tanh"
    gamma: float = 1e-6
    sigma_eps: float = 0.0
    model: str = "rf"
    sigma_w2: float = 0.0
    centering: bool = False
    feature_mode: str = "exact"
    n_test: int = 512
    n_replicates: int = 64
    base_seed: int = 0
    test_sampling: str = "per-replicate"

    def __post_init__(self):
        for name in ("m", "n0", "n1", "n_test", "n_replicates"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise ValueError("gamma must be finite and nonnegative")
        if not self.sigma_eps >= 0:
            raise ValueError("sigma_eps must be nonnegative")
        if self.model not in ("rf", "ntk"):
            raise ValueError(f"model must be 'rf' or 'ntk', got {self.model!r}")
        if self.model == "rf" and self.sigma_w2 != 0:
            raise ValueError("the RF model has no second-layer weights; sigma_w2 must be 0")
        if not self.sigma_w2 >= 0:
            raise ValueError("sigma_w2 must be nonnegative")
        if self.feature_mode not in ("exact", "gaussian-equivalent"):
            raise ValueError(f"unknown feature_mode {self.feature_mode!r}")
        if self.test_sampling not in ("per-replicate", "fixed"):
            raise ValueError(f"unknown test_sampling {self.test_sampling!r}")
        if not 0 <= int(self.base_seed) < 2**64:
            raise ValueError("base_seed must be a 64-bit unsigned integer")
        get_activation(self.activation)

    @property
    def act(self) -> Activation:
        return get_activation(self.activation)

    @property
    def nu(self) -> int:
        return 0 if self.centering or self.model == "rf" else 1

    @property
    def shape(self) -> ModelShape:
        """Matching asymptotic shape for the theory."""
        return ModelShape.from_sizes(
            self.n0,
            self.m,
            self.n1,
            gamma=self.gamma,
            sigma_w2=self.sigma_w2,
            sigma_eps=self.sigma_eps,
            nu=self.nu if self.model == "ntk" else 1,
        )


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass(frozen=True)
class Experiment:
    """Teacher and (optionally fixed) test inputs shared by all replicates.

    ``beta`` is rescaled to ``|beta|^2 = n0``; by rotational invariance
    only its norm matters, and fixing it removes a needless source of
    between-experiment variation.
    """

    config: SimConfig
    beta: np.ndarray
    test_points: np.ndarray
    test_labels: np.ndarray

    @cached_property
    def moments(self) -> GaussianMoments:
        return compute_moments(self.config.act)


def make_experiment(config: SimConfig) -> Experiment:
    rng = _rng(config.base_seed, _K_BETA)
    beta = rng.standard_normal(config.n0)
    beta *= math.sqrt(config.n0) / np.linalg.norm(beta)
    x = _rng(config.base_seed, _K_TEST_FIXED).standard_normal((config.n0, config.n_test))
    return Experiment(config, beta, x, beta @ x / math.sqrt(config.n0))


def gaussian_equivalent_features(
    W1: np.ndarray, X: np.ndarray, moments: GaussianMoments, noise: np.random.Generator | np.ndarray
) -> np.ndarray:
    """Linear-plus-noise surrogate for ``sigma(W1 X / sqrt(n0))``.

    ``noise`` is either a generator (a fresh Gaussian block is drawn) or
    an explicit array of that shape.
    """
    gap = moments.eta - moments.zeta
    assert gap >= -1e-12, "eta < zeta: invalid moments"
    lin = math.sqrt(moments.zeta) * (W1 @ X) / math.sqrt(X.shape[0])
    if gap <= 1e-12 * moments.eta:  # linear activation up to quadrature roundoff
        return lin
    if isinstance(noise, np.random.Generator):
        noise = noise.standard_normal(lin.shape)
    return lin + math.sqrt(gap) * noise


@dataclass
class _Features:
    F: np.ndarray
    Fp: Optional[np.ndarray]


def _features(cfg: SimConfig, moments, W1, X, theta) -> _Features:
    if cfg.feature_mode == "gaussian-equivalent":
        return _Features(gaussian_equivalent_features(W1, X, moments, theta), None)
    Z = W1 @ X
    Z /= math.sqrt(cfg.n0)
    act = cfg.act
    Fp = act.prime(Z) if cfg.model == "ntk" else None
    return _Features(act(Z), Fp)


def _gram(F: np.ndarray, scale: float) -> np.ndarray:
    """``scale * F^T F`` via a symmetric rank-k update."""
    G = dsyrk(scale, np.asfortranarray(F.T))
    iu = np.tril_indices_from(G, -1)
    G[iu] = G.T[iu]
    return G


def _kernel(cfg: SimConfig, moments, X, feats: _Features, W2) -> np.ndarray:
    K = _gram(feats.F, 1.0 / cfg.n1)
    if cfg.model == "ntk" and cfg.sigma_w2 > 0:
        gram_x = X.T @ X / cfg.n0
        if cfg.feature_mode == "gaussian-equivalent":
            s = cfg.sigma_w2**2
            K += s * moments.zeta * gram_x
            K[np.diag_indices_from(K)] += s * (moments.eta_prime - moments.zeta)
        else:
            G = feats.Fp * np.abs(W2)[:, None]
            K += gram_x * _gram(G, 1.0 / cfg.n1)
    return K


def _cross_kernel(cfg, moments, X, x, feats: _Features, ftest: _Features, W2):
    Kx = feats.F.T @ ftest.F / cfg.n1
    if cfg.model == "ntk" and cfg.sigma_w2 > 0:
        gram_x = X.T @ x / cfg.n0
        if cfg.feature_mode == "gaussian-equivalent":
            Kx += cfg.sigma_w2**2 * moments.zeta * gram_x
        else:
            w = (W2 * W2)[:, None]
            Kx += gram_x * (feats.Fp.T @ (w * ftest.Fp) / cfg.n1)
    return Kx


def build_kernel(
    config: SimConfig,
    X: np.ndarray,
    W1: np.ndarray,
    W2: Optional[np.ndarray] = None,
    theta: Optional[np.ndarray] = None,
    moments: Optional[GaussianMoments] = None,
) -> np.ndarray:
    """Training kernel with the ridge on its diagonal."""
    if moments is None:
        moments = compute_moments(config.act)
    feats = _features(config, moments, W1, X, theta)
    K = _kernel(config, moments, X, feats, W2)
    K[np.diag_indices_from(K)] += config.gamma
    return K


def _solve(K: np.ndarray, rhs: np.ndarray, gamma: float) -> np.ndarray:
    try:
        c = linalg.cho_factor(K, lower=False, check_finite=False, overwrite_a=False)
        sol = linalg.cho_solve(c, rhs, check_finite=False)
    except linalg.LinAlgError:
        if gamma > 0:
            raise SingularKernelError("kernel is not positive definite") from None
        sol = linalg.lstsq(K, rhs, check_finite=False)[0]
    if not np.all(np.isfinite(sol)):
        raise SingularKernelError(
            "singular kernel at gamma = 0; use a small ridge such as gamma = 1e-6"
        )
    return sol


def _n0_out(cfg: SimConfig, F: np.ndarray, W2) -> np.ndarray:
    return W2 @ F / math.sqrt(cfg.n1)


@dataclass
class _Fit:
    test: np.ndarray  # (n_rhs, n_test)
    train_loss: float


def _fit_predict(cfg, moments, W1, W2, X, labels, x, theta, theta_test, want_train):
    feats = _features(cfg, moments, W1, X, theta)
    ftest = _features(cfg, moments, W1, x, theta_test)
    K = _kernel(cfg, moments, X, feats, W2)
    Kr = K.copy()
    Kr[np.diag_indices_from(Kr)] += cfg.gamma
    nu = cfg.nu
    rhs = np.array(labels, dtype=float).T  # (m, n_rhs)
    if nu:
        rhs = rhs - _n0_out(cfg, feats.F, W2)[:, None]
    alpha = _solve(Kr, rhs, cfg.gamma)
    pred = (_cross_kernel(cfg, moments, X, x, feats, ftest, W2).T @ alpha).T
    if nu:
        pred = pred + _n0_out(cfg, ftest.F, W2)[None, :]
    train = math.nan
    if want_train:
        fitted = K @ alpha[:, 0]
        if nu:
            fitted = fitted + _n0_out(cfg, feats.F, W2)
        train = float(np.mean((fitted - labels[0]) ** 2))
    return _Fit(pred, train)


def predict(
    config: SimConfig,
    experiment: Experiment,
    W1: np.ndarray,
    W2: Optional[np.ndarray],
    X: np.ndarray,
    eps: np.ndarray,
    query: np.ndarray,
    theta: Optional[np.ndarray] = None,
    theta_test: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Kernel-regression prediction at the columns of ``query``."""
    y = experiment.beta @ X / math.sqrt(config.n0) + config.sigma_eps * eps
    if config.feature_mode == "gaussian-equivalent" and theta is None:
        raise ValueError("gaussian-equivalent features need theta and theta_test")
    fit = _fit_predict(
        config, experiment.moments, W1, W2, X, [y], query, theta, theta_test, False
    )
    return fit.test[0]


@dataclass
class ReplicateOutput:
    """Member predictions of one replicate.

    ``members[p_role, i, x_role, j, e_role]`` is the prediction vector of
    the learner built from parameter draw ``i`` and dataset draw ``j``
    with the given base (1) or copy (0) roles.
    """

    index: int
    members: np.ndarray
    test_labels: np.ndarray
    train_loss: float

    def predictions_for(self, spec: EnsembleSpec = EnsembleSpec()) -> dict[str, np.ndarray]:
        kp, kd = int(spec.k_p), int(spec.k_d)
        out = {}
        for mask in range(8):
            bp, bx, be = (mask >> 2) & 1, (mask >> 1) & 1, mask & 1
            out[mask_to_str(mask, 3)] = self.members[bp, :kp, bx, :kd, be].mean(axis=(0, 1))
        return out

    @property
    def predictions(self) -> dict[str, np.ndarray]:
        return self.predictions_for(EnsembleSpec(1, 1))


def run_replicate(
    experiment: Experiment, replicate_index: int, k_p: int = 1, k_d: int = 1
) -> ReplicateOutput:
    """Fit every coupled learner of one replicate.

    With ``k_p = k_d = 1`` this is the eight-predictor coupling; larger
    values draw that many independent parameter or dataset realisations
    per role for ensembles.  Draws are keyed by index, so the first
    members coincide across ensemble sizes.
    """
    cfg = experiment.config
    mo = experiment.moments
    seed, r = cfg.base_seed, replicate_index
    ge = cfg.feature_mode == "gaussian-equivalent"
    ntk = cfg.model == "ntk"
    root_n0 = math.sqrt(cfg.n0)

    if cfg.test_sampling == "fixed":
        x = experiment.test_points
    else:
        x = _rng(seed, r, _K_TEST).standard_normal((cfg.n0, cfg.n_test))
    y_test = experiment.beta @ x / root_n0

    data = {}
    for role in (BASE, COPY):
        for j in range(k_d):
            X = _rng(seed, r, _K_X, role, j).standard_normal((cfg.n0, cfg.m))
            eps = {
                er: _rng(seed, r, _K_EPS, er, j).standard_normal(cfg.m)
                for er in (BASE, COPY)
            }
            clean = experiment.beta @ X / root_n0
            data[role, j] = (X, [clean + cfg.sigma_eps * eps[BASE], clean + cfg.sigma_eps * eps[COPY]])

    members = np.empty((2, k_p, 2, k_d, 2, cfg.n_test))
    train = math.nan
    for prole in (BASE, COPY):
        for i in range(k_p):
            rng = _rng(seed, r, _K_P, prole, i)
            W1 = rng.standard_normal((cfg.n1, cfg.n0))
            W2 = cfg.sigma_w2 * rng.standard_normal(cfg.n1) if ntk else None
            theta_test = None
            if ge:
                theta_test = _rng(seed, r, _K_THETA_TEST, prole, i).standard_normal(
                    (cfg.n1, cfg.n_test)
                )
            for xrole in (BASE, COPY):
                for j in range(k_d):
                    X, labels = data[xrole, j]
                    theta = None
                    if ge:
                        theta = _rng(seed, r, _K_THETA, prole, i, xrole, j).standard_normal(
                            (cfg.n1, cfg.m)
                        )
                    base_fit = prole == BASE and xrole == BASE and i == 0 and j == 0
                    if cfg.sigma_eps == 0:
                        # identical labels: reuse one solve so eps masks match bitwise
                        fit = _fit_predict(cfg, mo, W1, W2, X, labels[:1], x, theta, theta_test, base_fit)
                        members[prole, i, xrole, j, BASE] = fit.test[0]
                        members[prole, i, xrole, j, COPY] = fit.test[0]
                    else:
                        fit = _fit_predict(cfg, mo, W1, W2, X, labels, x, theta, theta_test, base_fit)
                        members[prole, i, xrole, j, BASE] = fit.test[0]
                        members[prole, i, xrole, j, COPY] = fit.test[1]
                    if base_fit:
                        train = fit.train_loss
    return ReplicateOutput(replicate_index, members, y_test, train)


def worker_count(requested: Optional[int] = None) -> int:
    """Worker processes: the request, capped by ``FGDD_THREADS`` and CPUs."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return max(1, n)


def _replicate_task(args):
    experiment, index, k_p, k_d = args
    return run_replicate(experiment, index, k_p, k_d)


def run_replicates(
    experiment: Experiment,
    k_p: int = 1,
    k_d: int = 1,
    workers: Optional[int] = None,
    indices: Optional[Iterable[int]] = None,
) -> list[ReplicateOutput]:
    """All replicates in index order, optionally in worker processes."""
    if indices is None:
        indices = range(experiment.config.n_replicates)
    tasks = [(experiment, int(i), k_p, k_d) for i in indices]
    n = min(worker_count(workers), len(tasks))
    if n <= 1:
        out = [_replicate_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            out = list(pool.map(_replicate_task, tasks))
    return sorted(out, key=lambda o: o.index)


def jackknife(
    samples: np.ndarray, stat: Optional[Callable[[np.ndarray], np.ndarray]] = None
) -> tuple[np.ndarray, np.ndarray]:
    """Delete-one jackknife estimate and standard error.

    ``samples`` has one row per replicate; ``stat`` maps a mean vector to
    the statistics of interest (identity by default).
    """
    samples = np.asarray(samples, dtype=float)
    R = samples.shape[0]
    if R < MIN_REPLICATES:
        raise ValueError(f"jackknife needs at least {MIN_REPLICATES} replicates, got {R}")
    stat = stat or (lambda v: v)
    total = samples.sum(axis=0)
    full = np.asarray(stat(total / R))
    loo = np.array([stat((total - samples[i]) / (R - 1)) for i in range(R)])
    centered = loo - loo.mean(axis=0)
    se = np.sqrt((R - 1) / R * np.sum(centered**2, axis=0))
    return full, se


TERM_MASKS = {
    "V_P": "100",
    "V_X": "010",
    "V_eps": "001",
    "V_PX": "110",
    "V_Peps": "101",
    "V_Xeps": "011",
    "V_PXeps": "111",
}


@dataclass(frozen=True)
class SimEstimate:
    """Monte Carlo estimates with jackknife standard errors."""

    spec: EnsembleSpec
    htable: HTable
    vardecomp: VarDecomp
    bias: float
    bias_se: float
    total_variance: float
    total_variance_se: float
    e_test: float
    e_test_se: float
    e_train: float
    e_train_se: float
    n_replicates: int
    per_replicate: np.ndarray = field(repr=False)

    def terms(self) -> dict[str, tuple[float, float]]:
        """Estimates keyed like the theory terms, as (value, se)."""
        out = {"B": (self.bias, self.bias_se)}
        for name, mask in TERM_MASKS.items():
            out[name] = (self.vardecomp[mask], self.vardecomp.se(mask))
        out["E_test"] = (self.e_test, self.e_test_se)
        return out


def _replicate_stats(rep: ReplicateOutput, spec: EnsembleSpec) -> np.ndarray:
    """Per-replicate row: H[0..7], bias cross term, squared error, train loss."""
    preds = rep.predictions_for(spec)
    y = rep.test_labels
    base = preds["111"]
    h = [np.mean(base * preds[mask_to_str(m, 3)]) for m in range(8)]
    bias = np.mean((y - base) * (y - preds["000"]))
    err = np.mean((y - base) ** 2)
    return np.array(h + [bias, err, rep.train_loss])


def _summarise(stats: np.ndarray, spec: EnsembleSpec) -> SimEstimate:
    R = stats.shape[0]
    if R < MIN_REPLICATES:
        raise ValueError(f"need at least {MIN_REPLICATES} replicates, got {R}")

    def stat(v):
        h = v[:8]
        mob = _zeta_transform(h, 3, -1.0)
        return np.concatenate([h, mob, [v[8], h[7] - h[0], v[9], v[10]]])

    est, se = jackknife(stats, stat)
    H = HTable(3, est[:8], se[:8], MASK_ORDER)
    V = mobius_variance(H)
    V = VarDecomp(3, V.terms, np.concatenate([[0.0], se[9:16]]), MASK_ORDER)
    return SimEstimate(
        spec=spec,
        htable=H,
        vardecomp=V,
        bias=float(est[16]),
        bias_se=float(se[16]),
        total_variance=float(est[17]),
        total_variance_se=float(se[17]),
        e_test=float(est[18]),
        e_test_se=float(se[18]),
        e_train=float(est[19]),
        e_train_se=float(se[19]),
        n_replicates=R,
        per_replicate=stats,
    )


def simulate_ensembles(
    experiment: Experiment,
    specs: Sequence[EnsembleSpec],
    workers: Optional[int] = None,
    replicates: Optional[Sequence[ReplicateOutput]] = None,
) -> list[SimEstimate]:
    """Estimate several ensemble sizes from one shared set of draws."""
    if experiment.config.n_replicates < MIN_REPLICATES:
        raise ValueError(
            f"need at least {MIN_REPLICATES} replicates for the jackknife, "
            f"got {experiment.config.n_replicates}"
        )
    kp = max(int(s.k_p) for s in specs)
    kd = max(int(s.k_d) for s in specs)
    if replicates is None:
        replicates = run_replicates(experiment, kp, kd, workers)
    out = []
    for spec in specs:
        stats = np.array([_replicate_stats(rep, spec) for rep in replicates])
        out.append(_summarise(stats, spec))
    return out


def simulate_ensemble(
    experiment: Experiment, spec: EnsembleSpec, workers: Optional[int] = None
) -> SimEstimate:
    return simulate_ensembles(experiment, [spec], workers)[0]


def estimate_decomposition(
    experiment: Experiment, workers: Optional[int] = None
) -> SimEstimate:
    """H-table, symmetric variance terms, bias and losses with jackknife errors.

    The bias is estimated as ``mean (y - yhat_base)(y - yhat_000)``; the
    two predictors share no randomness, so the product is unbiased for the
    squared bias at each test input.
    """
    return simulate_ensemble(experiment, EnsembleSpec(1, 1), workers)
