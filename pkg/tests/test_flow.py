import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swfr_flow import autodiff as ad
from swfr_flow.flow import (
    FlowConfig,
    forward_flow,
    inverse_flow,
    mean_potential,
    normalize_weights,
    round_trip,
    trajectory_header,
    write_trajectory_csv,
)
from swfr_flow.potential import Potential, init_params, random_params


def quadratic_potential(d=1, m=4):
    """phi = |x|^2 / 2."""
    p = init_params(d, m)
    p["A"] = np.hstack([np.eye(d), np.zeros((d, 1))])
    return p


def linear_potential(m=4):
    """phi = x."""
    p = init_params(1, m)
    p["b"] = np.array([[1.0, 0.0]])
    return p


class TestFlowConfig:
    @pytest.mark.parametrize("alpha", [0.0, -1.0, float("nan")])
    def test_rejects_bad_alpha(self, alpha):
        with pytest.raises(ValueError):
            FlowConfig(alpha=alpha)

    def test_rejects_bad_grid(self):
        with pytest.raises(ValueError):
            FlowConfig(nt=0)
        with pytest.raises(ValueError):
            FlowConfig(T=float("inf"))

    def test_infinite_alpha_is_pure_transport(self):
        cfg = FlowConfig(alpha=math.inf)
        assert cfg.pure_transport and cfg.inv_alpha == 0.0

    def test_grid(self):
        cfg = FlowConfig(T=2.0, nt=4)
        assert cfg.h == 0.5
        np.testing.assert_allclose(cfg.times, [0, 0.5, 1.0, 1.5, 2.0])


class TestOracles:
    def test_quadratic_single_particle(self):
        fwd = forward_flow(np.array([[1.0]]), None, quadratic_potential(), FlowConfig(alpha=math.inf, nt=8))
        assert abs(fwd.positions[-1, 0, 0] - math.exp(-1.0)) <= 1e-5
        assert abs(fwd.logdets[-1, 0] + 1.0) <= 1e-5

    def test_logistic_two_particles(self):
        fwd = forward_flow(np.array([[-1.0], [1.0]]), None, linear_potential(), FlowConfig(alpha=1.0, nt=32))
        assert abs(fwd.weights[-1, 0] - 2.0 / (1.0 + math.exp(-2.0))) <= 1e-4
        np.testing.assert_allclose(fwd.weights.sum(axis=1), 2.0, rtol=1e-14)

    def test_rk4_order(self):
        errs = []
        for nt in (4, 8, 16, 32):
            fwd = forward_flow(np.array([[1.0]]), None, quadratic_potential(), FlowConfig(alpha=math.inf, nt=nt))
            errs.append(abs(fwd.positions[-1, 0, 0] - math.exp(-1.0)))
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        np.testing.assert_allclose(orders, 4.0, atol=0.5)

    def test_logistic_log_ratio_is_exact(self):
        # a linear potential makes log(w1 / w2) linear in time, which RK4 integrates exactly
        exact = 2.0 / (1.0 + math.exp(-2.0))
        for nt in (1, 4, 8):
            fwd = forward_flow(np.array([[-1.0], [1.0]]), None, linear_potential(), FlowConfig(alpha=1.0, nt=nt))
            assert abs(fwd.weights[-1, 0] - exact) <= 1e-14

    def test_quadratic_cost_integrals(self):
        # |grad phi|^2 / 2 = x^2 e^{-2t} / 2 integrates to (1 - e^{-2}) / 4 for x = 1
        fwd = forward_flow(np.array([[1.0]]), None, quadratic_potential(), FlowConfig(alpha=math.inf, nt=16))
        assert abs(ad.value_of(fwd.int_swfr).item() - (1 - math.exp(-2.0)) / 4) <= 1e-6
        # phi = x^2 / 2 integrates to the same value
        assert abs(ad.value_of(fwd.int_phi).item() - (1 - math.exp(-2.0)) / 4) <= 1e-6


class TestInvariants:
    def test_identity_potential_is_identity_flow(self):
        x = np.random.default_rng(0).standard_normal((10, 2))
        w = np.random.default_rng(1).uniform(0.5, 2.0, 10)
        fwd = forward_flow(x, w, init_params(2, 8, seed=3), FlowConfig(alpha=2.0, nt=4))
        np.testing.assert_array_equal(fwd.positions[-1], x)
        np.testing.assert_allclose(fwd.weights[-1], w / w.mean(), rtol=1e-15)
        for v in (fwd.logdet, fwd.int_phi, fwd.int_swfr, fwd.int_reg):
            np.testing.assert_array_equal(ad.value_of(v), 0.0)

    @pytest.mark.parametrize("seed", range(4))
    def test_weights_stay_positive_and_normalized(self, seed):
        rng = np.random.default_rng(seed)
        p = random_params(2, 8, seed, scale=0.4)
        fwd = forward_flow(rng.standard_normal((32, 2)), rng.uniform(0.1, 5.0, 32), p, FlowConfig(alpha=0.2, nt=6))
        assert (fwd.weights > 0).all()
        np.testing.assert_allclose(fwd.weights.mean(axis=1), 1.0, rtol=1e-13)
        inv = inverse_flow(rng.standard_normal((32, 2)), p, FlowConfig(alpha=0.2, nt=6))
        assert (inv.weights > 0).all()
        np.testing.assert_allclose(inv.weights.mean(axis=1), 1.0, rtol=1e-13)

    def test_single_particle_weight_frozen(self):
        fwd = forward_flow(np.array([[0.3, -0.2]]), None, random_params(2, 8, 1), FlowConfig(alpha=0.5, nt=4))
        np.testing.assert_array_equal(fwd.weights, 1.0)

    def test_pure_transport_keeps_initial_weights(self):
        w = np.array([1.0, 2.0, 3.0])
        fwd = forward_flow(np.zeros((3, 1)), w, random_params(1, 4, 0), FlowConfig(alpha=math.inf, nt=4))
        np.testing.assert_allclose(fwd.weights, np.tile(w / w.mean(), (5, 1)))

    def test_weight_scale_does_not_matter(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((8, 1))
        w = rng.uniform(0.5, 1.5, 8)
        p = random_params(1, 8, 5)
        a = forward_flow(x, w, p, FlowConfig(alpha=1.0, nt=4))
        b = forward_flow(x, 37.0 * w, p, FlowConfig(alpha=1.0, nt=4))
        np.testing.assert_allclose(a.weights, b.weights, rtol=1e-13)
        np.testing.assert_allclose(a.positions, b.positions, rtol=1e-13)

    def test_mean_potential_matches_direct_average(self):
        p = random_params(2, 8, 2)
        rng = np.random.default_rng(2)
        x = rng.standard_normal((12, 2))
        w = normalize_weights(rng.uniform(0.5, 1.5, 12))
        direct = np.mean(w[:, 0] * Potential.from_params(p).phi(x, 0.7)[:, 0])
        np.testing.assert_allclose(np.ravel(mean_potential(x, w, p, 0.7))[0], direct, rtol=1e-14)

    def test_phibar_recorded_per_step(self):
        fwd = forward_flow(np.random.default_rng(0).standard_normal((5, 1)), None, random_params(1, 4, 0), FlowConfig(nt=6))
        assert fwd.phibar.shape == (7,)
        assert fwd.positions.shape == (7, 5, 1)

    @pytest.mark.parametrize("bad", [[1.0, 0.0], [1.0, -2.0], [1.0, np.inf]])
    def test_invalid_weights_rejected(self, bad):
        with pytest.raises(ValueError):
            forward_flow(np.zeros((2, 1)), bad, init_params(1, 4), FlowConfig())

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            forward_flow(np.zeros((0, 1)), None, init_params(1, 4), FlowConfig())

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_step(self):
        p = init_params(1, 4)
        p["A"] = np.array([[1e80, 0.0]])
        with pytest.raises(ad.NonFiniteError, match="step"):
            forward_flow(np.array([[1e100]]), None, p, FlowConfig(alpha=math.inf, nt=1))


class TestInverse:
    def test_round_trip_small_at_fine_grid(self):
        p = random_params(1, 8, 4, scale=0.3)
        x = np.random.default_rng(4).standard_normal((64, 1))
        pos, wt = round_trip(x, None, p, FlowConfig(alpha=2.0, nt=16))
        assert pos <= 1e-5 and wt <= 1e-4

    def test_round_trip_error_shrinks_with_grid(self):
        p = random_params(1, 8, 4, scale=0.3)
        x = np.random.default_rng(4).standard_normal((64, 1))
        errs = [round_trip(x, None, p, FlowConfig(alpha=2.0, nt=nt))[0] for nt in (8, 16, 32)]
        assert errs[0] > errs[1] > errs[2]

    def test_inverse_with_zero_potential(self):
        z = np.random.default_rng(1).standard_normal((6, 2))
        inv = inverse_flow(z, init_params(2, 4), FlowConfig(alpha=3.0, nt=4))
        np.testing.assert_array_equal(inv.positions_T, z)
        np.testing.assert_array_equal(inv.weights_T, 1.0)
        np.testing.assert_array_equal(inv.phihat, 0.0)

    def test_inverse_logdet_of_quadratic(self):
        # backward flow of phi = x^2/2 expands volume: l = +1 over unit time
        inv = inverse_flow(np.array([[0.5]]), quadratic_potential(), FlowConfig(alpha=math.inf, nt=8), track_logdet=True)
        assert abs(inv.logdets[-1, 0] - 1.0) <= 1e-12
        assert abs(inv.positions_T[0, 0] - 0.5 * math.e) <= 1e-4

    def test_phihat_series_length(self):
        inv = inverse_flow(np.zeros((4, 1)), random_params(1, 4, 0), FlowConfig(nt=5))
        assert inv.phihat.shape == (6,)
        assert len(inv.phihat_vars) == 6


class TestTrajectoryCsv:
    def test_header(self):
        assert trajectory_header(2) == ["step", "t", "particle_id", "z0", "z1", "w", "l"]

    def test_rows(self, tmp_path):
        fwd = forward_flow(np.zeros((3, 2)), None, random_params(2, 4, 0), FlowConfig(nt=2))
        path = tmp_path / "traj.csv"
        write_trajectory_csv(path, fwd.times, fwd.positions, fwd.weights, fwd.logdets, particles=[0, 2])
        lines = path.read_text().splitlines()
        assert lines[0] == "step,t,particle_id,z0,z1,w,l"
        assert len(lines) == 1 + 3 * 2
        assert lines[-1].split(",")[:3] == ["2", "1", "2"]


@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 50.0), st.integers(0, 1000))
def test_weights_normalized_for_any_alpha(alpha, seed):
    rng = np.random.default_rng(seed)
    p = random_params(1, 4, seed, scale=0.5)
    fwd = forward_flow(rng.standard_normal((6, 1)), rng.uniform(0.2, 2.0, 6), p, FlowConfig(alpha=alpha, nt=3))
    assert (fwd.weights > 0).all()
    np.testing.assert_allclose(fwd.weights.mean(axis=1), 1.0, rtol=1e-12)


class TestWorkedValues:
    def test_logistic_from_zero_and_two(self):
        fwd = forward_flow(np.array([[0.0], [2.0]]), np.ones(2), linear_potential(), FlowConfig(alpha=1.0, nt=32))
        np.testing.assert_allclose(fwd.positions[-1, :, 0], [-1.0, 1.0], atol=1e-12)
        assert abs(fwd.weights[-1, 0] - 1.761594) <= 1e-4
        assert abs(fwd.weights[-1, 1] - 0.238406) <= 1e-4

    def test_inverse_of_quadratic(self):
        inv = inverse_flow(np.array([[0.3]]), quadratic_potential(), FlowConfig(alpha=1.0, nt=8))
        assert abs(inv.positions_T[0, 0] - 0.3 * math.e) <= 1e-5

    def test_round_trip_of_zero_potential_is_exact(self):
        x = np.random.default_rng(2).standard_normal((5, 2))
        assert round_trip(x, None, init_params(2, 4, 2), FlowConfig(alpha=1.0, nt=4)) == (0.0, 0.0)

    def test_round_trip_fine_grid(self):
        pos, _ = round_trip(np.array([[1.0]]), None, quadratic_potential(), FlowConfig(alpha=1.0, nt=64))
        assert pos <= 1e-6

    @staticmethod
    def _round_trip_ratios():
        errs = [round_trip(np.array([[1.0]]), None, quadratic_potential(), FlowConfig(alpha=1.0, nt=nt))[0]
                for nt in (8, 16, 32, 64)]
        return np.array(errs[:-1]) / np.array(errs[1:])

    def test_round_trip_errors_cancel_to_fifth_order(self):
        # forward and inverse RK4 errors cancel at leading order on this linear flow
        np.testing.assert_allclose(np.log2(self._round_trip_ratios()), 5.0, atol=0.05)

    @pytest.mark.xfail(strict=True, reason="observed ratio is 32, not 2^4, because leading errors cancel")
    def test_round_trip_ratio_window(self):
        r = self._round_trip_ratios()
        assert np.all((r >= 10) & (r <= 22))

    def test_constant_velocity_has_no_regularizer(self):
        fwd = forward_flow(np.array([[0.4]]), None, linear_potential(), FlowConfig(alpha=1.0, nt=8))
        assert ad.value_of(fwd.int_reg).item() == 0.0
        assert ad.value_of(fwd.int_swfr).item() == pytest.approx(0.5, rel=1e-14)

    def test_quadratic_regularizer_integral(self):
        # int_0^1 (e^{-t} - 1)^2 dt = 2/e - e^{-2}/2 - 1/2
        fwd = forward_flow(np.array([[1.0]]), None, quadratic_potential(), FlowConfig(alpha=1.0, nt=32))
        exact = 2 * math.exp(-1) - 0.5 * math.exp(-2) - 0.5
        assert abs(ad.value_of(fwd.int_reg).item() - exact) <= 1e-4


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 20.0), st.integers(0, 1000))
def test_cost_integrals_nonnegative(alpha, seed):
    rng = np.random.default_rng(seed)
    p = random_params(2, 4, seed, scale=0.5)
    fwd = forward_flow(rng.standard_normal((5, 2)), rng.uniform(0.2, 2.0, 5), p, FlowConfig(alpha=alpha, nt=3))
    assert (ad.value_of(fwd.int_swfr) >= 0).all()
    assert (ad.value_of(fwd.int_reg) >= 0).all()
