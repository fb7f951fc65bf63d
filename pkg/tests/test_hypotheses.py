import math
import warnings

import numpy as np
import pytest

from mcboost import hypotheses as H
from mcboost import numlin
from mcboost.exceptions import ContractError


def _class_x_link():
    return H.FactorizedClass(
        (H.FeatureMap("coordinate", (0,)),),
        (H.LinkMap("constant", (1.0,)), H.LinkMap("identity")),
    )


def _random_class(rng, d):
    h = (H.FeatureMap("coordinate", (int(rng.integers(d)),)), H.FeatureMap("threshold", (0, float(rng.normal()))))
    g = (H.LinkMap("tanh", (float(rng.uniform(0.5, 2)),)), H.LinkMap("affine", (float(rng.normal()), 0.3)))
    return H.FactorizedClass(h, g)


class TestEvalB:
    def test_constant_class(self):
        np.testing.assert_array_equal(H.eval_B(H.mean_class(), np.zeros((3, 2)), np.zeros(3)), np.ones((3, 1)))

    def test_direct_substitution(self):
        B = H.eval_B(_class_x_link(), [[2.0], [5.0]], [1.0, 3.0])
        np.testing.assert_array_equal(B, [[2, 2], [5, 15]])

    def test_double_loop_oracle(self, rng):
        X = rng.normal(size=(7, 3))
        f = rng.normal(size=7)
        hc = _random_class(rng, 3)
        B = H.eval_B(hc, X, f)
        for i in range(7):
            for a, h in enumerate(hc.h_maps):
                for b, g in enumerate(hc.g_maps):
                    assert B[i, a * hc.k + b] == pytest.approx(h(X[i : i + 1])[0] * g(f[i : i + 1])[0], abs=0)

    def test_kronecker_block_identity(self, rng):
        # B(f) = D_g(f) (H(X) kron I_k), with D_g the n x nk block-diagonal of g(f_i)^T
        X = rng.normal(size=(5, 3))
        f = rng.normal(size=5)
        hc = _random_class(rng, 3)
        n, k = 5, hc.k
        Hm = hc.eval_H(X)
        G = hc.eval_G(f)
        D = np.zeros((n, n * k))
        for i in range(n):
            D[i, i * k : (i + 1) * k] = G[i]
        np.testing.assert_allclose(H.eval_B(hc, X, f), D @ np.kron(Hm, np.eye(k)), atol=1e-12)

    def test_non_finite_names_map_and_row(self):
        hc = H.FactorizedClass((H.FeatureMap("coordinate", (0,)),), (H.LinkMap("identity"),))
        with pytest.raises(ContractError):
            H.eval_B(hc, [[1.0], [np.inf]], [0.0, 0.0])
        hc2 = H.FactorizedClass((H.FeatureMap("constant", (1e308,)),), (H.LinkMap("affine", (10.0, 0.0)),))
        with pytest.raises(ContractError, match="row 1"):
            H.eval_B(hc2, [[0.0], [0.0]], [0.0, 1e308])

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            H.eval_B(H.mean_class(), np.zeros((3, 1)), np.zeros(2))

    def test_warns_when_p_exceeds_n(self):
        hc = H.intercept_slope_class(np.zeros((2, 3)))
        with pytest.warns(UserWarning, match="p=8 > n=2"):
            H.eval_B(hc, np.zeros((2, 3)), np.zeros(2))


class TestBounds:
    def test_LB_constant_links(self):
        assert H.bound_LB(H.mean_class(), np.ones((4, 2))) == 0.0

    def test_LB_substitution(self):
        hc = H.FactorizedClass((H.FeatureMap("coordinate", (0,)),), (H.LinkMap("identity"),))
        assert H.bound_LB(hc, [[1.0], [-5.0], [3.0]]) == pytest.approx(5.0)

    def test_LB_four_links(self):
        h = (H.FeatureMap("constant", (2.0,)),)
        g = tuple(H.LinkMap("affine", (s, 0.0)) for s in (0.5, -0.5, 0.25, 0.0))
        assert H.bound_LB(H.FactorizedClass(h, g), np.zeros((3, 1))) == pytest.approx(2.0)

    def test_LB_refuses_indicator_links(self):
        hc = H.FactorizedClass((H.FeatureMap("constant", (1.0,)),), (H.LinkMap("indicator", (0.0,)),))
        with pytest.raises(ContractError):
            H.bound_LB(hc, np.zeros((2, 1)))

    def test_LA_values(self):
        assert H.bound_LA(1, 1, 1) == pytest.approx(5.2360680, abs=1e-7)
        assert H.bound_LA(0, 0.3, 2) == 0.0
        assert H.bound_LA(1, 2, 4) == pytest.approx(7.4721360, abs=1e-7)

    @pytest.mark.parametrize("args", [(1, 0, 1), (1, -1, 1), (1, 2, 1), (-1, 1, 2)])
    def test_LA_contract(self, args):
        with pytest.raises(ContractError):
            H.bound_LA(*args)

    @pytest.mark.filterwarnings("ignore:hypothesis class has p")
    def test_B_lipschitz_bound_empirical(self, rng):
        X = rng.normal(size=(12, 2))
        hc = H.clamped_link_class(X, rng.normal(size=12), n_knots=3)
        LB = H.bound_LB(hc, X)
        for _ in range(30):
            u, v = rng.normal(size=12), rng.normal(size=12)
            lhs = numlin.spectral_norm(H.eval_B(hc, X, u) - H.eval_B(hc, X, v))
            assert lhs <= LB * np.linalg.norm(u - v) * (1 + 1e-12)


class TestMeasuredLipschitz:
    def test_constant_links_give_zero(self, rng):
        hc = H.intercept_slope_class(rng.normal(size=(6, 2)))
        hc = H.FactorizedClass(hc.h_maps, (H.LinkMap("constant", (1.0,)),))
        X = rng.normal(size=(6, 2))
        assert H.measured_lipschitz_A(hc, X, rng.normal(size=6), rng.normal(size=6)) == pytest.approx(0, abs=1e-12)

    def test_equal_inputs_rejected(self):
        with pytest.raises(ContractError):
            H.measured_lipschitz_A(H.mean_class(), np.zeros((3, 1)), np.zeros(3), np.zeros(3))

    def test_small_instance_below_bound(self):
        hc = H.FactorizedClass((H.FeatureMap("constant", (1.0,)),), (H.LinkMap("constant", (1.0,)), H.LinkMap("identity")))
        X = np.zeros((3, 1))
        u, v = np.zeros(3), np.array([1e-3, 0, 0])
        # B(u) has a zero column, so compare against the bound with delta, M measured on B(v)
        measured = H.measured_lipschitz_A(hc, X, u + np.array([0, 1, 2.0]), v + np.array([0, 1, 2.0]))
        B = H.eval_B(hc, X, v + np.array([0, 1, 2.0]))
        res = numlin.svd(B)
        bound = H.bound_LA(H.bound_LB(hc, X), res.singular_values[-1] / 2, res.singular_values[0] * 2)
        assert measured <= bound


class TestMaps:
    def test_link_lipschitz_declarations_hold(self):
        for g in (
            H.LinkMap("identity"),
            H.LinkMap("affine", (-2.0, 1.0)),
            H.LinkMap("clamp", (-1.0, 1.0)),
            H.LinkMap("hinge", (0.5,)),
            H.LinkMap("tanh", (3.0,)),
        ):
            assert g.spot_check_lipschitz(-3, 3) <= g.lipschitz + 1e-12

    def test_indicator_has_no_constant(self):
        assert H.LinkMap("indicator", (0.0,)).lipschitz is None

    def test_threshold_feature(self):
        np.testing.assert_array_equal(H.FeatureMap("threshold", (1, 0.5))([[0, 0.4], [0, 0.5]]), [0, 1])

    @pytest.mark.parametrize("bad", [("nope", ()), ("coordinate", ()), ("threshold", (1,))])
    def test_bad_feature_maps(self, bad):
        with pytest.raises(ContractError):
            H.FeatureMap(*bad)

    def test_bad_links(self):
        with pytest.raises(ContractError):
            H.LinkMap("clamp", (1.0, -1.0))
        with pytest.raises(ContractError):
            H.LinkMap("identity", (1.0,))

    def test_empty_class_rejected(self):
        with pytest.raises(ContractError):
            H.FactorizedClass((), (H.LinkMap("identity"),))


class TestConfig:
    @pytest.mark.filterwarnings("ignore:hypothesis class has p")
    def test_round_trip(self, rng):
        X = rng.normal(size=(20, 2))
        hc = H.clamped_link_class(X, rng.normal(size=20), n_thresholds=2)
        hc2 = H.class_from_config(H.class_to_config(hc))
        assert hc2.h_maps == hc.h_maps and hc2.g_maps == hc.g_maps
        f = rng.normal(size=20)
        np.testing.assert_array_equal(H.eval_B(hc, X, f), H.eval_B(hc2, X, f))

    def test_declared_constant_recorded(self):
        text = H.class_to_config(H.intercept_slope_class(np.zeros((3, 1))))
        assert "lipschitz=1.0" in text and "lipschitz=0.0" in text

    def test_malformed(self):
        with pytest.raises(ContractError):
            H.class_from_config("[hypothesis_class]\nh.0 = coordinate\ng.0 = identity\n")
        with pytest.raises(ContractError):
            H.class_from_config("[other]\n")


def test_golden_constant():
    assert H.GOLDEN == pytest.approx((1 + math.sqrt(5)) / 2)


def test_product_overflow_reported():
    X = np.full((4, 1), 1e200)
    with pytest.raises(ContractError, match="overflows"):
        H.eval_B(H.intercept_slope_class(X), X, np.full(4, 1e200))
