"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from fgdd.anova import HTable, coupled_htable, mobius_variance
from fgdd.decomposition import (
    decompose,
    recombine,
    threshold_diagnostics,
    training_loss,
)
from fgdd.ensemble import EnsembleSpec, optimal_ratio, scale_decomposition
from fgdd.moments import compute_moments, stein_check
from fgdd.simulator import (
    SimConfig,
    make_experiment,
    run_replicates,
    simulate_ensembles,
)
from fgdd.tau import (
    DegenerateBranchError,
    ModelShape,
    SolverError,
    ridgeless_ttau2,
    scaled_residuals,
    solve_tau,
)

GRID = np.geomspace(1 / 32, 4, 20)
GAMMAS = (0.0, 1e-3, 1e-1, 1.0)
SIGMA_W2 = (0.0, 1.0)

# scaled Monte Carlo setting shared by criteria 6 and 8
MC_N0, MC_M = 512, 1024
MC_WIDTHS = (256, 512, 1024, 2048, 4096)
MC_SPECS = (EnsembleSpec(1, 1), EnsembleSpec(2, 1), EnsembleSpec(1, 2), EnsembleSpec(2, 2))
MC_SIGMA_EPS = math.sqrt(0.2)  # SNR = 5
MC_GAMMA = 1e-6
NONZERO = ("B", "V_P", "V_X", "V_PX", "V_Xeps", "V_PXeps", "E_test")


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line, then assert."""

    def report(number, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        assert ok, detail

    return report


@pytest.fixture(scope="module")
def moments():
    return {a: compute_moments(a, 128) for a in ("identity", "relu", "tanh")}


def _grid_shapes(gamma):
    for phi in GRID:
        for psi in GRID:
            for s in SIGMA_W2:
                yield ModelShape(phi, psi, gamma, s)


def test_criterion_01_moments(verdict):
    start = time.perf_counter()
    relu = compute_moments("relu", 128)
    gaps = [abs(relu.eta - 0.5), abs(relu.zeta - 0.25), abs(relu.eta_prime - 0.5)]
    stein = {a: stein_check(a, 128) for a in ("identity", "relu", "tanh")}
    elapsed = time.perf_counter() - start
    ok = max(gaps) <= 1e-12 and max(stein.values()) < 1e-8 and elapsed < 1.0
    verdict(1, ok, f"relu gap {max(gaps):.1e}, worst stein {max(stein.values()):.1e}, {elapsed:.2f} s")


def test_criterion_02_residuals(verdict, moments):
    start = time.perf_counter()
    worst, accepted, rejected = 0.0, 0, 0
    for name in ("tanh", "identity"):
        mo = moments[name]
        for gamma in GAMMAS:
            for shape in _grid_shapes(gamma):
                try:
                    sol = solve_tau(shape, mo)
                except DegenerateBranchError:
                    rejected += 1
                    continue
                accepted += 1
                res = sol.residual_max
                if sol.finite:
                    res = max(res, *scaled_residuals(sol.tau1, sol.tau2, shape, mo))
                worst = max(worst, res)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10 and elapsed < 30.0
    verdict(
        2, ok,
        f"{accepted} solutions (degenerate excluded: {rejected}), worst scaled residual "
        f"{worst:.1e}, {elapsed:.1f} s",
    )


def test_criterion_03_derivatives(verdict, moments):
    worst = 0.0
    for name in ("tanh", "identity"):
        mo = moments[name]
        for gamma in GAMMAS[1:]:
            h = 1e-4 * gamma
            for shape in _grid_shapes(gamma):
                sol = solve_tau(shape, mo)
                up = solve_tau(shape.with_(gamma=gamma + h), mo)
                dn = solve_tau(shape.with_(gamma=gamma - h), mo)
                fd1 = (up.tau1 - dn.tau1) / (2 * h)
                fd2 = (up.tau2 - dn.tau2) / (2 * h)
                worst = max(worst, abs(fd1 / sol.dtau1 - 1), abs(fd2 / sol.dtau2 - 1))
    verdict(3, worst < 1e-6, f"worst relative mismatch {worst:.1e}")


def test_criterion_04_ridgeless_closed_form(verdict, moments):
    worst, points = 0.0, 0
    for name in ("tanh", "identity"):
        mo = moments[name]
        for phi in GRID:
            for psi in GRID:
                if phi == psi:
                    continue  # the interpolation threshold is excluded from ridgeless sweeps
                sol = solve_tau(ModelShape(phi, psi, 1e-9), mo)
                worst = max(worst, abs(sol.ratio - (1 + ridgeless_ttau2(phi, psi, mo))))
                points += 1
    verdict(4, worst < 1e-5, f"{points} off-threshold points, worst |tau2/tau1 - root| {worst:.1e}")


def test_criterion_05_threshold_properties(verdict, moments):
    start = time.perf_counter()
    phi = 1 / 16
    near = [phi * (1 + s * 10.0**-k) for k in range(2, 7) for s in (1, -1)]
    psis = np.concatenate([np.geomspace(phi / 16, 16 * phi, 50), near])
    report = threshold_diagnostics(
        moments["tanh"], phi, psis, sigma_eps=0.1,
        bias_tol=1e-10, bounded_factor=10.0, window=1e-3, divergence_floor=1e3,
        scaled_k=(3, 4, 5, 6), scaled_factor=2.0, strict=False,
    )
    elapsed = time.perf_counter() - start
    ok = report.ok and len(psis) == 60 and elapsed < 10.0
    detail = "all checks hold" if report.ok else "; ".join(report.failures)
    verdict(5, ok, f"{detail} ({len(psis)} grid points, {elapsed:.2f} s)")


@pytest.fixture(scope="module")
def mc_runs():
    """Ensemble estimates for every width; the slowest fixture in the suite."""
    start = time.perf_counter()
    out = {}
    for n1 in MC_WIDTHS:
        cfg = SimConfig(
            m=MC_M, n0=MC_N0, n1=n1, gamma=MC_GAMMA, sigma_eps=MC_SIGMA_EPS, n_replicates=64
        )
        out[n1] = (cfg, dict(zip(MC_SPECS, simulate_ensembles(make_experiment(cfg), MC_SPECS))))
    return out, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_06_theory_vs_monte_carlo(verdict, moments, mc_runs):
    runs, elapsed = mc_runs
    failures, worst = [], 0.0
    for n1, (cfg, ests) in runs.items():
        theory = decompose(cfg.shape, moments["tanh"])
        for name, (value, se) in ests[EnsembleSpec(1, 1)].terms().items():
            if name not in NONZERO:
                continue
            z = (value - getattr(theory, name)) / se
            worst = max(worst, abs(z))
            if abs(z) > 4:
                failures.append(f"{name}@n1={n1} z={z:+.2f}")

    # eps bit must not matter without label noise
    mask_mismatch = 0
    for n1 in MC_WIDTHS:
        cfg = SimConfig(m=MC_M, n0=MC_N0, n1=n1, gamma=MC_GAMMA, sigma_eps=0.0, n_replicates=8)
        exp = make_experiment(cfg)
        for rep in run_replicates(exp, indices=range(2)):
            preds = rep.predictions
            mask_mismatch += sum(
                not np.array_equal(preds[m + "0"], preds[m + "1"]) for m in ("00", "01", "10", "11")
            )
    ok = not failures and mask_mismatch == 0
    detail = f"worst |z| {worst:.2f} over {len(runs)} widths; eps-mask mismatches {mask_mismatch}"
    if failures:
        detail += "; beyond 4 SE: " + ", ".join(failures)
    verdict(6, ok, f"{detail}; shared MC run {elapsed / 60:.1f} min")


def test_criterion_07_anova_oracle(verdict):
    exact_h = {"000": 0, "100": 1, "010": 4, "110": 6, "001": 0, "101": 1, "011": 4, "111": 6}
    order = ("100", "010", "001", "110", "101", "011", "111")
    exact = mobius_variance(HTable.from_mapping(3, exact_h))
    exact_ok = tuple(exact[m] for m in order) == (1, 4, 0, 1, 0, 0, 0)

    def f(x1, x2, x3):
        return x1 + 2 * x2 + x1 * x2

    def normal(rng, n):
        return rng.standard_normal(n)

    est = mobius_variance(coupled_htable(f, [normal] * 3, 100_000, np.random.default_rng(2024)))
    z = []
    for m in order:
        diff = abs(est[m] - exact[m])
        z.append(diff / est.se(m) if est.se(m) > 0 else (0.0 if diff == 0 else math.inf))
    ok = exact_ok and max(z) <= 4
    verdict(7, ok, f"exact table {'matches' if exact_ok else 'differs'}, MC worst |z| {max(z):.2f}")


@pytest.mark.slow
def test_criterion_08_ensemble_algebra(verdict, moments, mc_runs):
    runs, _ = mc_runs
    failures, worst = [], 0.0
    for n1, (cfg, ests) in runs.items():
        base = decompose(cfg.shape, moments["tanh"])
        for spec, est in ests.items():
            pred = scale_decomposition(base, spec)
            for name, (value, se) in est.terms().items():
                z = (value - getattr(pred, name)) / se if se > 0 else 0.0
                worst = max(worst, abs(z))
                if abs(z) > 4:
                    failures.append(f"{name}@n1={n1},k=({spec.k_p},{spec.k_d}) z={z:+.2f}")

    def peak(spec):
        return max((ests[spec].e_test, ests[spec].e_test_se, n1) for n1, (_, ests) in runs.items())

    e11, se11, w11 = peak(EnsembleSpec(1, 1))
    e22, se22, w22 = peak(EnsembleSpec(2, 2))
    margin = (e11 - e22) / math.hypot(se11, se22)
    ok = not failures and margin > 4
    detail = (
        f"worst |z| {worst:.2f}; peak (1,1) {e11:.4f} at n1={w11}, (2,2) {e22:.4f} at n1={w22}, "
        f"drop {margin:.1f} combined SE"
    )
    if failures:
        detail += "; beyond 4 SE: " + ", ".join(failures)
    verdict(8, ok, detail)


def test_criterion_09_optimal_ratio(verdict, moments):
    budget = 16.0
    worst, ratios = 0.0, []
    for n1 in MC_WIDTHS:
        shape = ModelShape.from_sizes(MC_N0, MC_M, n1, gamma=MC_GAMMA, sigma_eps=MC_SIGMA_EPS)
        d = decompose(shape, moments["tanh"])
        r = optimal_ratio(d)
        ratios.append(r)
        kp, kd = math.sqrt(budget / r), math.sqrt(budget * r)
        # unit direction (1, -1)/sqrt(2) in (log k_p, log k_d) keeps k_p k_d fixed
        deriv = (-d.V_P / kp + (d.V_X + d.V_eps + d.V_Xeps) / kd) / math.sqrt(2)
        worst = max(worst, abs(deriv))
    crosses = ratios[0] < 1 < ratios[-1]
    ok = worst < 1e-8 and crosses
    shown = ", ".join(f"{r:.3g}" for r in ratios)
    verdict(9, ok, f"worst |directional derivative| {worst:.1e}; ratios over widths [{shown}]")


@pytest.mark.slow
def test_criterion_10_training_loss(verdict, moments):
    lines, ok = [], True
    for gamma in (0.05, 0.2):
        cfg = SimConfig(m=512, n0=256, n1=512, gamma=gamma, sigma_eps=math.sqrt(0.2), n_replicates=64)
        est = simulate_ensembles(make_experiment(cfg), [EnsembleSpec(1, 1)])[0]
        theory = training_loss(cfg.shape, moments["tanh"]).E_train
        z = (est.e_train - theory) / est.e_train_se
        ok &= abs(z) <= 3
        lines.append(f"gamma={gamma}: sim {est.e_train:.5f} theory {theory:.5f} z={z:+.2f}")
    verdict(10, ok, "; ".join(lines))


def test_criterion_11_recombination(verdict, moments):
    worst, points, vsc_bad = 0.0, 0, 0
    for name in ("tanh", "identity"):
        mo = moments[name]
        for gamma in GAMMAS:
            for base in _grid_shapes(gamma):
                for nu in (0, 1):
                    for sigma_eps in (0.0, 0.3):
                        shape = base.with_(nu=nu, sigma_eps=sigma_eps)
                        try:
                            d = decompose(shape, mo)
                        except (DegenerateBranchError, SolverError):
                            continue
                        if d.diverged:
                            continue
                        v = recombine(d)
                        for total in v.view_totals().values():
                            worst = max(worst, abs(total - d.E_test) / max(abs(d.E_test), 1.0))
                        if sigma_eps == 0.0 and v.V_sc != 0.0:
                            vsc_bad += 1
                        points += 1
    ok = worst < 1e-12 and vsc_bad == 0
    verdict(11, ok, f"{points} configurations, worst view gap {worst:.1e}, nonzero V_sc at sigma_eps=0: {vsc_bad}")
