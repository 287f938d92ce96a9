import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flatmuscle import fixtures, flatness, hill, plants, skeleton
from flatmuscle.flatness import FlatTrajectory

import oracles


class TestRank:
    def test_pend1_full_rank(self, pend1):
        rc = flatness.check_rank([0.0], pend1)
        assert rc.ok and rc.sigma_min == pytest.approx(0.05 * np.sqrt(2), rel=1e-9)

    def test_world_anchored_rank_zero(self, rankdef):
        rc = flatness.check_rank([0.2], rankdef)
        assert not rc.ok and rc.sigma_min == 0.0 and rc.cond == np.inf

    def test_arm3d_ready(self, arm3d):
        q = np.array(plants.ARM3D_READY)
        rc = flatness.check_rank(q, arm3d)
        s = np.linalg.svd(skeleton.muscle_jacobian(q, arm3d)[:, 2:], compute_uv=False)
        assert rc.ok and rc.sigma_min == pytest.approx(s.min(), rel=1e-12)


class TestDistribute:
    def test_hand_example(self, pend1):
        d = flatness.distribute_forces([0.1], [0.0], pend1)
        assert d.feasible
        assert d.tensions == pytest.approx([2.0, 0.0], abs=1e-12)
        J = skeleton.muscle_jacobian([0.0], pend1)
        assert (-J.T @ d.tensions)[0] == pytest.approx(0.1, abs=1e-12)

    def test_zero_demand(self, pend1):
        d = flatness.distribute_forces([0.0], [0.0], pend1)
        assert d.feasible and np.array_equal(d.tensions, np.zeros(2))

    def test_alpha_kept_inside_box(self, pend1):
        d = flatness.distribute_forces([0.1], [0.0], pend1, alpha=[10.0, 10.0])
        assert d.feasible and d.iterations == 0
        assert d.tensions == pytest.approx([11.0, 9.0], abs=1e-12)

    def test_over_capacity_infeasible(self, pend1):
        d = flatness.distribute_forces([50.0], [0.0], pend1)
        assert not d.feasible
        assert np.all(d.tensions >= 0) and np.all(d.tensions <= 200.0)

    @pytest.mark.parametrize("name", ["pend1", "arm3d"])
    def test_projector_identities(self, name, rng):
        model = skeleton.load_model(name)
        for q in rng.uniform(model.lower, model.upper, size=(1000, model.n)):
            A = flatness.moment_matrix(q, model)
            tau = rng.normal(scale=0.5, size=A.shape[0])
            d = flatness.distribute_forces(tau, q, model)
            P = d.projector
            assert np.abs(P @ P - P).max() < 1e-10
            assert np.abs(A @ P).max() < 1e-10
            if d.feasible:
                assert np.abs(A @ d.tensions - tau).max() < 1e-9
                assert np.all(d.tensions >= 0)

    @given(st.floats(-2.0, 2.0), st.floats(-3.0, 3.0), st.floats(0.0, 50.0))
    def test_feasible_reconstruction(self, q, tau, c):
        model = plants.reference_model("pend1")
        d = flatness.distribute_forces([tau], [q], model, alpha=[c, c])
        if d.feasible:
            J = skeleton.muscle_jacobian([q], model)
            assert abs((-J.T @ d.tensions)[0] - tau) < 1e-9
            assert np.all(d.tensions >= 0) and np.all(d.tensions <= 200.0)


class TestFlatInvert:
    def test_gravity_free_equilibrium(self):
        model = plants.reference_model("pend1", fp_stiffness=0.0, gravity=0.0)
        r = flatness.flat_invert(FlatTrajectory.constant([0.0], 0.05), model, 1e-3,
                                 cocontraction=0.0)
        assert r.feasible and np.all(r.u == 0.0)

    def test_horizontal_hold(self, pend1):
        traj = FlatTrajectory.constant([np.pi / 2], 0.05)
        r = flatness.flat_invert(traj, pend1, 1e-3, cocontraction=0.0)
        u_ref, T_ref = oracles.pend1_static_hold(np.pi / 2, 0.45)
        assert r.feasible
        assert np.allclose(r.tensions, T_ref, rtol=1e-7)
        assert np.allclose(r.u, u_ref, rtol=1e-7)
        assert r.u[0] == pytest.approx([0.486275, 0.324646], abs=1e-6)
        J = skeleton.muscle_jacobian([np.pi / 2], pend1)
        assert (-J.T @ r.tensions[0])[0] == pytest.approx(4.905, abs=1e-9)

    def test_pend1_sine_round_trip(self, pend1):
        traj = FlatTrajectory.sinusoid([0.3], [0.5], horizon=4.0)
        r = flatness.flat_invert(traj, pend1, 1e-3)
        assert r.feasible and np.all(r.c3_ok)
        assert flatness.round_trip_rms(r, pend1, dt=1e-4) < 5e-3

    def test_excitations_bounded(self, arm3d):
        traj = fixtures.bundled_trajectories("arm3d")["strike"]
        r = flatness.flat_invert(traj, arm3d, 1e-3)
        assert r.u.shape == (len(r.t) - 1, arm3d.m)
        assert np.all((r.u >= 0) & (r.u <= 1))

    def test_c1_witness(self):
        name, traj = fixtures.witness("c1")
        r = flatness.flat_invert(traj, skeleton.load_model(name), 1e-3)
        assert not r.c1_ok.any() and not r.feasible

    def test_c2_witness(self):
        name, traj = fixtures.witness("c2")
        r = flatness.flat_invert(traj, skeleton.load_model(name), 1e-3)
        assert r.c1_ok.all() and not r.c2_ok.all()
        # velocities reach 15 rad/s, yet the force-velocity floor keeps C3
        assert r.c3_ok.all()

    def test_open_loop_requires_integer_ratio(self, pend1):
        r = flatness.flat_invert(FlatTrajectory.constant([0.0], 0.01), pend1, 1e-3)
        with pytest.raises(ValueError):
            flatness.simulate_open_loop(r, pend1, dt=3e-4)


class TestTrajectories:
    def test_inconsistent_derivative_rejected(self):
        with pytest.raises(flatness.TrajectoryError):
            FlatTrajectory(lambda t: (np.sin(t), 2 * np.cos(t), 0.0, 0.0), 1.0)

    def test_csv_round_trip(self, tmp_path):
        traj = FlatTrajectory.sinusoid([0.3, 0.1], [0.5, 0.8], horizon=2.0)
        path = tmp_path / "t.csv"
        flatness.write_trajectory_csv(path, traj)
        back = flatness.load_trajectory_csv(path)
        for t in np.linspace(0.1, 1.9, 7):
            assert np.allclose(back(t)[0], traj(t)[0], atol=1e-9)
            assert np.allclose(back(t)[1], traj(t)[1], atol=1e-5)

    @pytest.mark.parametrize("text, match", [
        ("x,y1\n0,0\n", "header"),
        ("t,y1\n0,0\n0.1,abc\n", "line 3"),
        ("t,y1\n0,0\n0.1\n", "line 3"),
        ("t,y1\n0,0\n0.1,0\n", "six samples"),
    ])
    def test_csv_errors(self, tmp_path, text, match):
        path = tmp_path / "bad.csv"
        path.write_text(text)
        with pytest.raises(flatness.TrajectoryError, match=match):
            flatness.load_trajectory_csv(path)

    def test_report_exports(self, pend1, tmp_path):
        r = flatness.flat_invert(FlatTrajectory.sinusoid([0.1], [0.5], horizon=0.2), pend1, 1e-3)
        r.to_csv(tmp_path / "r.csv")
        r.to_json(tmp_path / "r.json")
        rows = (tmp_path / "r.csv").read_text().splitlines()
        assert rows[0] == "t,y1,u1,u2,c1_ok,c2_ok,c3_ok"
        assert len(rows) == len(r.t) + 1
        summary = json.loads((tmp_path / "r.json").read_text())
        assert summary["feasible"] and summary["samples"] == 201


def test_force_velocity_floor_certifies_c3():
    p = plants.reference_model("pend1").hill[0]
    v = np.linspace(-1e4, 1e4, 200001)
    assert hill.force_velocity(v, p).min() >= hill.FV_FLOOR > 0
