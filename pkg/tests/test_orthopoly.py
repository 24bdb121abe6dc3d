import math

import numpy as np
import pytest

from pctraj.orthopoly import (
    PolyFamily,
    eval_poly,
    gauss_rule,
    hermite_triple_product,
    multi_indices,
    norm_sq,
    product_integral,
    tensor_basis_eval,
    weight_mass,
)

HERM = PolyFamily.HERMITE_PROBABILISTS
LEG = PolyFamily.LEGENDRE


def gaussian_moment(k: int) -> float:
    # E[xi^k] for xi ~ N(0,1): odd zero, even double factorial of k-1
    if k % 2 == 1:
        return 0.0
    return float(math.prod(range(k - 1, 0, -2))) if k else 1.0


def legendre_moment(k: int) -> float:
    # integral of xi^k over [-1, 1] with unit weight
    return 0.0 if k % 2 == 1 else 2.0 / (k + 1)


class TestEvalPoly:
    def test_hermite_degree_two(self):
        assert eval_poly(HERM, 2, 2.0) == pytest.approx(3.0)

    def test_legendre_degree_two(self):
        assert eval_poly(LEG, 2, 1.0) == pytest.approx(1.0)

    def test_degree_zero_is_one(self):
        assert eval_poly(HERM, 0, 7.3) == 1.0
        assert eval_poly(LEG, 0, 7.3) == 1.0

    def test_first_few_hermite(self):
        x = 1.7
        assert eval_poly(HERM, 1, x) == pytest.approx(x)
        assert eval_poly(HERM, 2, x) == pytest.approx(x**2 - 1)
        assert eval_poly(HERM, 3, x) == pytest.approx(x**3 - 3 * x)

    def test_legendre_half_coefficients(self):
        x = 0.3
        assert eval_poly(LEG, 2, x) == pytest.approx(1.5 * x**2 - 0.5)

    def test_array_input(self):
        xs = np.array([-1.0, 0.0, 2.0])
        np.testing.assert_allclose(eval_poly(HERM, 2, xs), xs**2 - 1)


class TestNormSq:
    def test_hermite_factorial(self):
        assert norm_sq(HERM, 3) == pytest.approx(6.0)

    def test_legendre(self):
        assert norm_sq(LEG, 2) == pytest.approx(0.4)

    def test_constant(self):
        assert norm_sq(HERM, 0) == pytest.approx(1.0)
        assert norm_sq(LEG, 0) == pytest.approx(2.0)


class TestProductIntegral:
    def test_hermite_triple(self):
        assert product_integral(HERM, [1, 1, 2]) == pytest.approx(2.0, abs=1e-10)

    def test_orthogonality_to_constant(self):
        assert product_integral(HERM, [0, 5]) == pytest.approx(0.0, abs=1e-10)

    def test_hermite_triple_closed_form_value(self):
        assert product_integral(HERM, [2, 2, 2]) == pytest.approx(8.0, abs=1e-9)

    @pytest.mark.parametrize("family", [HERM, LEG])
    def test_pairwise_orthogonality(self, family):
        for i in range(9):
            for j in range(9):
                value = product_integral(family, [i, j])
                expected = norm_sq(family, i) if i == j else 0.0
                assert value == pytest.approx(
                    expected, abs=1e-10 * max(1.0, abs(expected))
                )

    def test_triple_closed_form_matches_quadrature(self):
        # The even/odd parity condition applies to the SUM of the degrees.
        for i in range(6):
            for j in range(6):
                for g in range(6):
                    quad = product_integral(HERM, [i, j, g])
                    closed = hermite_triple_product(i, j, g)
                    assert quad == pytest.approx(closed, abs=1e-8), (i, j, g)

    def test_sum_parity_contradicts_per_index_parity(self):
        # (1, 1, 2) has odd individual degrees but even sum and is nonzero.
        assert hermite_triple_product(1, 1, 2) == pytest.approx(2.0)


class TestGaussRule:
    def test_two_point_hermite(self):
        rule = gauss_rule(HERM, 2)
        np.testing.assert_allclose(rule.nodes, [-1.0, 1.0], atol=1e-14)
        np.testing.assert_allclose(rule.weights, [0.5, 0.5], atol=1e-14)

    def test_one_point_legendre(self):
        rule = gauss_rule(LEG, 1)
        np.testing.assert_allclose(rule.nodes, [0.0])
        np.testing.assert_allclose(rule.weights, [2.0])

    def test_gaussian_eighth_moment(self):
        rule = gauss_rule(HERM, 5)
        assert rule.integrate(rule.nodes**8) == pytest.approx(105.0, abs=1e-10)

    @pytest.mark.parametrize("family", [HERM, LEG])
    @pytest.mark.parametrize("n", range(1, 9))
    def test_exactness_up_to_degree(self, family, n):
        rule = gauss_rule(family, n)
        moment = gaussian_moment if family is HERM else legendre_moment
        for degree in range(2 * n):
            exact = moment(degree)
            value = rule.integrate(rule.nodes**degree)
            assert value == pytest.approx(exact, abs=1e-10 * max(1.0, abs(exact))), (
                family,
                n,
                degree,
            )

    @pytest.mark.parametrize("family", [HERM, LEG])
    def test_weights_sum_to_weight_mass(self, family):
        for n in range(1, 9):
            rule = gauss_rule(family, n)
            assert rule.weights.sum() == pytest.approx(weight_mass(family), rel=1e-12)
            assert np.all(rule.weights > 0)

    def test_invalid_node_count(self):
        with pytest.raises(ValueError):
            gauss_rule(HERM, 0)


class TestMultiIndices:
    def test_total_count_duffing_setup(self):
        assert len(multi_indices(2, 3)) == 10

    def test_total_count_quadrotor_setup(self):
        assert len(multi_indices(2, 2)) == 6

    def test_degenerate(self):
        assert multi_indices(1, 0).indices == ((0,),)

    @pytest.mark.parametrize("d", range(1, 5))
    @pytest.mark.parametrize("r", range(7))
    def test_cardinality_formula(self, d, r):
        expected = math.factorial(r + d) // (math.factorial(r) * math.factorial(d))
        assert len(multi_indices(d, r)) == expected

    def test_graded_order(self):
        idx = multi_indices(3, 4).indices
        assert idx[0] == (0, 0, 0)
        degrees = [sum(t) for t in idx]
        assert degrees == sorted(degrees)
        # within each degree, plain lexicographic
        for a, b in zip(idx, idx[1:]):
            if sum(a) == sum(b):
                assert a < b

    def test_zero_dimensions(self):
        assert multi_indices(0, 3).indices == ((),)


class TestTensorBasisEval:
    def test_all_zeros_index(self):
        assert tensor_basis_eval((HERM, HERM), (0, 0), [1.3, -0.4]) == 1.0

    def test_product_of_linears(self):
        assert tensor_basis_eval((HERM, HERM), (1, 1), [2.0, 3.0]) == pytest.approx(6.0)

    def test_mixed_families(self):
        value = tensor_basis_eval((HERM, LEG), (2, 2), [1.0, 1.0])
        assert value == pytest.approx(0.0)  # (1 - 1) * 1

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            tensor_basis_eval((HERM,), (1, 1), [0.5])
