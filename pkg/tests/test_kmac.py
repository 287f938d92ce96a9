import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flatmuscle import hill, kmac, plants, skeleton
from flatmuscle.hill import HillParams, MuscleState
from flatmuscle.kmac import KmacGains
from flatmuscle.skeleton import SimState

import oracles

P = HillParams(f_max=100.0, l_min=0.05, l_opt=0.1, l_max=0.15)
finite = st.floats(-1e3, 1e3)


def run_pend1(kp, q_star=0.3, seconds=2.0, kd=1.0):
    model = plants.reference_model("pend1", gravity=0.0)
    ctl = kmac.Kmac(model, KmacGains(kp=kp, kd=kd), dt_ctrl=1e-3)
    s = model.initial_state()
    acts = []
    for _ in range(int(round(seconds / 1e-3))):
        s = skeleton.advance(s, ctl(np.array([q_star]), s), model, 1e-4, nsub=10)
        acts.append(s.act.mean())
    return s, np.array(acts)


class TestPdForce:
    def test_at_target(self):
        assert kmac.pd_force(0.1, 0.1, 0.0, KmacGains(), P) == 0.0

    def test_hand_example(self):
        T = kmac.pd_force(0.10, 0.11, 0.0, KmacGains(kp=5.0, kd=0.0), P)
        assert T == pytest.approx(50.0, abs=1e-12)

    def test_cannot_push(self):
        assert kmac.pd_force(0.11, 0.10, 0.0, KmacGains(kp=5.0, kd=0.0), P) == 0.0

    @given(finite, finite, finite, st.floats(0.01, 100.0), st.floats(0.0, 100.0))
    def test_bounded(self, ls, l, ld, kp, kd):
        T = kmac.pd_force(ls, l, ld, KmacGains(kp=kp, kd=kd), P)
        assert 0.0 <= T <= P.f_max

    def test_gain_validation(self):
        with pytest.raises(ValueError):
            KmacGains(kp=0.0)
        with pytest.raises(ValueError):
            KmacGains(kd=-1.0)
        with pytest.raises(ValueError):
            KmacGains(mode="adaptive")


class TestTargets:
    def test_identity(self, arm3d):
        q = np.array(plants.ARM3D_READY)
        l, clamped = kmac.target_lengths(q, arm3d)
        assert np.allclose(l, skeleton.muscle_lengths(q, arm3d), atol=1e-15) and not clamped

    def test_pend1_symmetric(self, pend1):
        l, _ = kmac.target_lengths([0.0], pend1)
        assert l[0] == pytest.approx(l[1], abs=1e-15)
        assert l[0] == pytest.approx(oracles.pend1_length(0.0, "flexor"), abs=1e-15)

    def test_clamped(self, pend1):
        l, clamped = kmac.target_lengths([3.0], pend1)
        assert clamped and np.allclose(l, skeleton.muscle_lengths([2.2], pend1))


class TestStep:
    def test_quiescence(self):
        model = plants.reference_model("pend1", fp_stiffness=0.0)
        for q in (-0.7, 0.0, 0.4):
            s = SimState(np.array([q]), np.zeros(1), np.zeros(2))
            ms, _ = skeleton.muscle_state(s, model)
            out = kmac.kmac_step(np.array([q]), ms, KmacGains(), model)
            assert np.array_equal(out.u, np.zeros(2))

    def test_direction(self, pend1):
        s = pend1.initial_state()
        ms, _ = skeleton.muscle_state(s, pend1)
        out = kmac.kmac_step(np.array([0.2]), ms, KmacGains(), pend1)
        assert out.u[0] > 0 and out.u[1] == 0.0
        out = kmac.kmac_step(np.array([-0.2]), ms, KmacGains(), pend1)
        assert out.u[0] == 0.0 and out.u[1] > 0

    @given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(-5.0, 5.0))
    def test_antagonists_exclusive(self, q, q_star, qd):
        model = plants.reference_model("pend1", fp_stiffness=0.0)
        s = SimState(np.array([q]), np.array([qd]), np.zeros(2))
        ms, _ = skeleton.muscle_state(s, model)
        out = kmac.kmac_step(np.array([q_star]), ms, KmacGains(kd=0.0), model)
        if abs(q_star - q) > 1e-6:
            assert np.count_nonzero(out.u) == 1

    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2),
           st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2), st.floats(-3.0, 3.0))
    def test_output_bounded(self, l, ld, q_star):
        model = plants.reference_model("pend1")
        ms = MuscleState(np.array(l), np.array(ld), np.zeros(2))
        out = kmac.kmac_step(np.array([q_star]), ms, KmacGains(), model)
        assert np.all((out.u >= 0) & (out.u <= 1))

    def test_rate_compensated(self, pend1):
        s = pend1.initial_state()
        ms, _ = skeleton.muscle_state(s, pend1)
        g = KmacGains(mode="rate-compensated")
        first = kmac.kmac_step(np.array([0.2]), ms, g, pend1)
        again = kmac.kmac_step(np.array([0.2]), ms, g, pend1, prev_act=first.act, dt_ctrl=1e-3)
        assert np.array_equal(again.u, first.act)
        prev = np.zeros(2)
        out = kmac.kmac_step(np.array([0.2]), ms, g, pend1, prev_act=prev, dt_ctrl=1e-3)
        u_ref, _ = hill.invert_activation(first.act, first.act / 1e-3, pend1.hill)
        assert np.array_equal(out.u, np.clip(u_ref, 0, 1))
        with pytest.raises(ValueError):
            kmac.kmac_step(np.array([0.2]), ms, g, pend1, prev_act=prev)


class TestClosedLoop:
    def test_convergence(self):
        s, _ = run_pend1(5.0)
        assert abs(s.q[0] - 0.3) < 0.05

    def test_effort_monotone_in_gain(self):
        effort = [run_pend1(kp)[1][1000:].mean() for kp in (2.0, 5.0, 10.0)]
        assert effort[0] <= effort[1] <= effort[2]


class TestInverse:
    def test_realises_torque(self, arm3d, rng):
        gains = KmacGains()
        for _ in range(20):
            q = np.array(plants.ARM3D_READY) + rng.uniform(-0.2, 0.2, arm3d.n) * [0, 0, 1, 1, 1]
            s = SimState(q, rng.normal(scale=0.3, size=arm3d.n), np.zeros(arm3d.m))
            tau = rng.normal(scale=1.0, size=arm3d.n)
            q_star, res = kmac.kmac_inverse(tau, s, gains, arm3d)
            assert np.array_equal(q_star[:2], q[:2])
            ms, J = skeleton.muscle_state(s, arm3d)
            l_star = ms.length + J @ (q_star - q)
            T = kmac.realized_tension(kmac.pd_force(l_star, ms.length, ms.velocity, gains,
                                                    arm3d.hill), ms, arm3d.hill)
            achieved = (-J.T @ T)[2:]
            assert np.abs(achieved - tau[2:]).max() == pytest.approx(res, abs=1e-12)
            if res < 1e-9:
                assert np.allclose(achieved, tau[2:], atol=1e-9)

    def test_zero_torque_at_rest(self):
        model = plants.reference_model("pend1", fp_stiffness=0.0)
        s = model.initial_state()
        q_star, res = kmac.kmac_inverse(np.zeros(1), s, KmacGains(), model)
        assert res == 0.0 and q_star[0] == pytest.approx(0.0, abs=1e-12)
