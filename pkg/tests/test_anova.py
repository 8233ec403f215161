"""Symmetric variance decomposition: exact tables, Monte Carlo and invariants."""

import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fgdd.anova import (
    HTable,
    coupled_htable,
    mask_to_str,
    mobius_variance,
    monotonicity_check,
    nonnegativity_check,
    permute_table,
    str_to_mask,
    subset_sum_check,
    variable_bit,
)

ORDER = ("100", "010", "001", "110", "101", "011", "111")

# Y = X1 + 2 X2 + X1 X2 with a third, unused Gaussian input.
# H[S] = Var E[Y | X_S] since E[Y] = 0.
EXACT_H = {
    "000": 0.0,
    "100": 1.0,
    "010": 4.0,
    "110": 6.0,
    "001": 0.0,
    "101": 1.0,
    "011": 4.0,
    "111": 6.0,
}


def _poly(x1, x2, x3):
    return x1 + 2.0 * x2 + x1 * x2


def _normal(rng, n):
    return rng.standard_normal(n)


def _table_from_terms(terms: np.ndarray, k: int) -> np.ndarray:
    """H[S] = sum of V over subsets of S (with V[empty] acting as H[empty])."""
    h = np.zeros(1 << k)
    for s in range(1 << k):
        h[s] = sum(terms[j] for j in range(1 << k) if j & s == j)
    return h


class TestMasks:
    def test_left_to_right(self):
        assert variable_bit(0, 3) == 0b100
        assert str_to_mask("110", 3) == 6
        assert mask_to_str(1, 3) == "001"

    @pytest.mark.parametrize("bad", ["11", "1102", "abc"])
    def test_rejects_malformed(self, bad):
        with pytest.raises(ValueError):
            str_to_mask(bad, 3)

    def test_label(self):
        v = mobius_variance(HTable.from_mapping(3, EXACT_H, names=("P", "X", "eps")))
        assert v.label("110") == "P,X"
        assert v.label(0) == "-"


class TestExactOracle:
    def test_polynomial_terms(self):
        v = mobius_variance(HTable.from_mapping(3, EXACT_H))
        assert tuple(v[m] for m in ORDER) == (1.0, 4.0, 0.0, 1.0, 0.0, 0.0, 0.0)

    def test_second_moment_gives_unexplained_term(self):
        h = HTable.from_mapping(3, EXACT_H, second_moment=6.5)
        assert mobius_variance(h)[0] == pytest.approx(0.5)

    def test_missing_entry_names_mask(self):
        partial = dict(EXACT_H)
        del partial["101"]
        with pytest.raises(KeyError, match="101"):
            HTable.from_mapping(3, partial)

    def test_nonfinite_entry_rejected(self):
        bad = dict(EXACT_H, **{"011": float("nan")})
        with pytest.raises(ValueError, match="011"):
            mobius_variance(HTable.from_mapping(3, bad))

    def test_single_variable(self):
        v = mobius_variance(HTable.from_mapping(1, {0: 0.0, 1: 2.5}))
        assert v[1] == 2.5

    @pytest.mark.parametrize("k", [0, 17])
    def test_variable_count_bounds(self, k):
        with pytest.raises(ValueError):
            HTable(k, np.zeros(1 << max(k, 0)), None)


class TestMonteCarlo:
    def test_polynomial_within_four_se(self):
        h = coupled_htable(_poly, [_normal] * 3, 100_000, np.random.default_rng(7))
        v = mobius_variance(h)
        exact = mobius_variance(HTable.from_mapping(3, EXACT_H))
        for m in ORDER:
            assert abs(v[m] - exact[m]) <= 4 * v.se(m) + 1e-12, m
        assert v[0] == pytest.approx(0.0, abs=1e-12)

    def test_irrelevant_variable_terms_vanish_exactly(self):
        v = mobius_variance(coupled_htable(_poly, [_normal] * 3, 2000, np.random.default_rng(1)))
        for m in ("001", "101", "011", "111"):
            assert v[m] == 0.0

    def test_reproducible(self):
        a = coupled_htable(_poly, [_normal] * 3, 500, np.random.default_rng(3))
        b = coupled_htable(_poly, [_normal] * 3, 500, np.random.default_rng(3))
        assert np.array_equal(a.values, b.values)


terms_strategy = arrays(np.float64, 8, elements=st.floats(0, 10))


class TestInvariants:
    @given(terms=terms_strategy)
    def test_roundtrip(self, terms):
        h = HTable(3, _table_from_terms(terms, 3), None)
        v = mobius_variance(h)
        np.testing.assert_allclose(v.terms[1:], terms[1:], atol=1e-12)
        assert subset_sum_check(v, h) < 1e-12

    @given(terms=terms_strategy, perm=st.permutations(range(3)))
    def test_permutation_symmetry(self, terms, perm):
        h = HTable(3, _table_from_terms(terms, 3), None)
        moved = mobius_variance(HTable(3, permute_table(h.values, 3, perm), None))
        np.testing.assert_allclose(
            moved.terms, permute_table(mobius_variance(h).terms, 3, perm), atol=1e-12
        )

    @given(terms=terms_strategy)
    def test_nonnegative_terms_give_monotone_table(self, terms):
        h = HTable(3, _table_from_terms(terms, 3), None)
        assert monotonicity_check(h) == []
        assert nonnegativity_check(mobius_variance(h)) == []

    @given(terms=terms_strategy)
    def test_terms_partition_variance(self, terms):
        h = HTable(3, _table_from_terms(terms, 3), None)
        v = mobius_variance(h)
        assert v.explained == pytest.approx(h[7] - h[0], abs=1e-12)

    def test_monotonicity_violation_reported(self):
        h = HTable.from_mapping(2, {"00": 0.0, "10": 2.0, "01": 1.0, "11": 1.5})
        assert monotonicity_check(h) == [("10", "11")]

    def test_negative_term_reported(self):
        h = HTable.from_mapping(2, {"00": 0.0, "10": 1.0, "01": 1.0, "11": 1.5})
        assert nonnegativity_check(mobius_variance(h)) == ["11"]

    def test_standard_errors_add_in_quadrature(self):
        se = {format(i, "02b"): 0.1 for i in range(4)}
        v = mobius_variance(HTable.from_mapping(2, {"00": 0, "10": 1, "01": 1, "11": 2}, se))
        assert v.se("11") == pytest.approx(0.2)

    @pytest.mark.parametrize("perm", list(itertools.permutations(range(3))))
    def test_permute_is_bijection(self, perm):
        vals = np.arange(8.0)
        assert sorted(permute_table(vals, 3, perm)) == list(vals)
        assert permute_table(vals, 3, perm)[0] == 0 and permute_table(vals, 3, perm)[7] == 7
