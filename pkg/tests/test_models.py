import numpy as np
import pytest

from pctraj.gpc import GpcCoefficients
from pctraj.models import GimbalLockError, duffing, quadrotor
from pctraj.verify import fd_jacobian

LAM_MEAN = np.array([2.90e-5, 1.10e-6])
HOVER_THRUST = 9.81 / 4


@pytest.fixture(scope="module")
def quad():
    return quadrotor()


class TestDuffing:
    def test_direct_substitution(self):
        m = duffing()
        f = m.f(np.array([1.0, 0.0]), np.array([0.0]), 0.0, np.array([3.0]))
        np.testing.assert_allclose(f, [0.0, -4.0])

    def test_state_jacobian_closed_form(self):
        m = duffing()
        x = np.array([1.3, -0.4])
        lam = np.array([2.5])
        fx = m.fx(x, np.array([0.0]), 0.0, lam)
        np.testing.assert_allclose(
            fx, [[0.0, 1.0], [-2.5 - 3 * 1.3**2, -0.25]], atol=1e-14
        )

    def test_euler_lagrange_identity(self):
        # d/dt dL/dv - dL/dq = F reproduces the acceleration row of f exactly
        m = duffing()
        mech = m.mechanical
        rng = np.random.default_rng(2)
        for _ in range(25):
            q, v, u, lam = rng.standard_normal(4) * np.array([2, 2, 1, 0.3]) + np.array(
                [0, 0, 0, 3.0]
            )
            grad = mech.lagrangian_grad(np.array([q]), np.array([v]), np.array([lam]))
            force = mech.force(np.array([q]), np.array([v]), np.array([u]), np.array([lam]))
            mass = mech.lagrangian_hess(np.array([q]), np.array([v]), np.array([lam]))[1, 1]
            accel = (grad[0] + force[0]) / mass
            f = m.f(np.array([q, v]), np.array([u]), 0.0, np.array([lam]))
            assert accel == pytest.approx(f[1], abs=1e-12)

    def test_derivatives_match_finite_differences(self):
        m = duffing()
        rng = np.random.default_rng(4)
        u = np.array([0.7])
        lam = np.array([3.1])
        for _ in range(100):
            x = rng.uniform(-3, 3, size=2)
            fx = m.fx(x, u, 0.0, lam)
            fd = fd_jacobian(lambda y: m.f(y, u, 0.0, lam), x, step=1e-5)
            assert np.max(np.abs(fx - fd)) / max(1.0, np.max(np.abs(fx))) < 1e-5
            fxx = m.fxx(x, u, 0.0, lam)
            fd2 = fd_jacobian(lambda y: m.fx(y, u, 0.0, lam), x, step=1e-5)
            assert np.max(np.abs(fxx - fd2)) < 1e-5

    def test_batched_evaluation(self):
        m = duffing()
        xs = np.random.default_rng(0).standard_normal((7, 2))
        lams = np.full((7, 1), 3.0)
        f = m.f(xs, np.array([0.5]), 0.0, lams)
        assert f.shape == (7, 2)
        np.testing.assert_allclose(f[0], m.f(xs[0], np.array([0.5]), 0.0, lams[0]))


class TestQuadrotor:
    def test_hover_equilibrium(self, quad):
        x = np.zeros(12)
        u = np.full(4, HOVER_THRUST)
        np.testing.assert_allclose(quad.f(x, u, 0.0, LAM_MEAN), 0.0, atol=1e-12)

    def test_free_fall(self, quad):
        x = np.zeros(12)
        f = quad.f(x, np.zeros(4), 0.0, LAM_MEAN)
        expected = np.zeros(12)
        expected[8] = -9.81
        np.testing.assert_allclose(f, expected, atol=1e-12)

    def test_symmetric_thrust_zero_torque(self, quad):
        x = np.zeros(12)
        f = quad.f(x, np.ones(4), 0.0, LAM_MEAN)
        np.testing.assert_allclose(f[9:], 0.0, atol=1e-12)

    def test_derivatives_match_finite_differences(self, quad):
        rng = np.random.default_rng(12)
        worst_fx = worst_fu = worst_fxx = 0.0
        for _ in range(20):
            x = np.concatenate(
                [
                    rng.uniform(-3, 3, 3),
                    rng.uniform(-0.4, 0.4, 3),
                    rng.uniform(-2, 2, 3),
                    rng.uniform(-1.5, 1.5, 3),
                ]
            )
            u = HOVER_THRUST + rng.uniform(-1, 1, 4)
            lam = LAM_MEAN * (1 + rng.uniform(-0.01, 0.01, 2))
            fx = quad.fx(x, u, 0.0, lam)
            fd = fd_jacobian(lambda y: quad.f(y, u, 0.0, lam), x, step=1e-5)
            worst_fx = max(worst_fx, np.max(np.abs(fx - fd)) / max(1, np.max(np.abs(fx))))
            fu = quad.fu(x, u, 0.0, lam)
            fd_u = fd_jacobian(lambda w: quad.f(x, w, 0.0, lam), u, step=1e-5)
            worst_fu = max(worst_fu, np.max(np.abs(fu - fd_u)) / max(1, np.max(np.abs(fu))))
            fxx = quad.fxx(x, u, 0.0, lam)
            fd_xx = fd_jacobian(lambda y: quad.fx(y, u, 0.0, lam), x, step=1e-5)
            worst_fxx = max(
                worst_fxx, np.max(np.abs(fxx - fd_xx)) / max(1, np.max(np.abs(fxx)))
            )
        assert worst_fx < 1e-5
        assert worst_fu < 1e-5
        assert worst_fxx < 1e-4

    def test_conservative_energy_drift(self, quad):
        # No controls, no dissipation: RK4 total energy drift stays tiny.
        mech = quad.mechanical
        lam = LAM_MEAN

        def energy(x):
            q, v = x[:6], x[6:]
            grad = mech.lagrangian_grad(q, v, lam)
            lag = mech.lagrangian(q, v, lam)
            return float(grad[6:] @ v - lag)

        x = np.concatenate([[0.2, -0.1, 0.5], [0.15, -0.1, 0.2], [0.3, 0.2, -0.1], [0.4, -0.3, 0.2]])
        e0 = energy(x)
        dt = 1e-4
        u = np.zeros(4)
        for k in range(10_000):
            k1 = quad.f(x, u, 0.0, lam)
            k2 = quad.f(x + 0.5 * dt * k1, u, 0.0, lam)
            k3 = quad.f(x + 0.5 * dt * k2, u, 0.0, lam)
            k4 = quad.f(x + dt * k3, u, 0.0, lam)
            x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        assert abs(energy(x) - e0) / abs(e0) < 1e-6

    def test_gimbal_guard(self, quad):
        x = np.zeros(12)
        x[4] = np.pi / 2 - 0.05
        with pytest.raises(GimbalLockError):
            quad.f(x, np.zeros(4), 0.0, LAM_MEAN)

    def test_rate_envelope_guard(self, quad):
        x = np.zeros(12)
        x[9] = 40.0
        with pytest.raises(GimbalLockError):
            quad.f(x, np.zeros(4), 0.0, LAM_MEAN)

    def test_mechanical_force_matches_dynamics_channel(self, quad):
        # thrust rotates with attitude; at zero attitude it is purely vertical
        mech = quad.mechanical
        q = np.zeros(6)
        v = np.zeros(6)
        u = np.array([1.0, 2.0, 3.0, 4.0])
        force = mech.force(q, v, u, LAM_MEAN)
        assert force[2] == pytest.approx(10.0)
        ratio = 0.24 * LAM_MEAN[0] / LAM_MEAN[1]
        assert force[3] == pytest.approx((u[2] - u[0]) * ratio)
        assert force[4] == pytest.approx((u[1] - u[3]) * ratio)
        assert force[5] == pytest.approx(u[0] + u[2] - u[1] - u[3])


class TestDuffingClosedForm:
    def test_rejects_wrong_basis(self):
        quad_model = quadrotor()
        basis = quad_model.basis(2)
        coeffs = GpcCoefficients(np.zeros((2, basis.n_terms)))
        with pytest.raises(ValueError):
            from pctraj.models import duffing_gpc_rhs_closed_form

            duffing_gpc_rhs_closed_form(coeffs, np.zeros(1), basis)

    def test_mean_only_state_reduces_to_deterministic(self):
        from pctraj.models import duffing_gpc_rhs_closed_form

        m = duffing()
        basis = m.basis(3)
        coeffs = np.zeros((2, basis.n_terms))
        coeffs[:, 0] = [2.0, 1.0]
        rate = duffing_gpc_rhs_closed_form(GpcCoefficients(coeffs), np.array([0.5]), basis)
        f_mean = m.f(np.array([2.0, 1.0]), np.array([0.5]), 0.0, np.array([3.0]))
        np.testing.assert_allclose(rate.coeffs[:, 0], f_mean, atol=1e-12)
        # the random stiffness couples the mean into its own first-order slot
        unit = tuple(1 if k == 0 else 0 for k in range(basis.d))
        j = basis.index_set.indices.index(unit)
        assert rate.coeffs[1, j] == pytest.approx(-0.1 * 2.0)
