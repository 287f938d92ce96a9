import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flatmuscle import harness, planner
from flatmuscle.planner import BallState, PlannerConfig, TableGeometry

import oracles

TABLE = TableGeometry()
CFG = PlannerConfig()
vec = st.lists(st.floats(-10.0, 10.0), min_size=3, max_size=3).map(np.array)


def unit_vectors():
    return vec.filter(lambda v: np.linalg.norm(v) > 1e-3).map(lambda v: v / np.linalg.norm(v))


def single_scenario():
    return harness.load_scenario(harness.bundled_scenario("single"))


def landing(p, v, table=TABLE):
    """Closed-form first contact with ``z = 0`` of a return (independent of the module)."""
    t = (v[2] + np.sqrt(v[2] ** 2 + 2 * table.g * p[2])) / table.g
    return p[:2] + v[:2] * t


class TestPropagate:
    def test_drop(self):
        t_hit = np.sqrt(2 * 0.45 / 9.81)
        assert t_hit == pytest.approx(0.3029, abs=5e-5)
        before = planner.propagate(BallState([0, 0, 0.45], [0, 0, 0]), t_hit - 1e-9, TABLE)
        assert before.v[2] == pytest.approx(-2.971, abs=5e-4)
        after, events = planner.propagate_events(BallState([0, 0, 0.45], [0, 0, 0]),
                                                 t_hit + 1e-12, TABLE)
        assert len(events) == 1 and events[0][0] == pytest.approx(t_hit, abs=1e-12)
        assert after.v[2] == pytest.approx(0.9 * 2.971, abs=5e-4)
        assert after.v[2] == pytest.approx(2.674, abs=5e-4)

    def test_pure_gravity(self):
        b = planner.propagate(BallState([0, 0, 0.3], [0, 0, 0]), 1e-3, TABLE)
        assert b.v[2] == -9.81 * 1e-3

    def test_identity_horizontal_restitution(self):
        table = TableGeometry(c_h=1.0)
        b = planner.propagate(BallState([0.2, 0.1, 0.1], [1.5, -0.5, 0.0]), 0.3, table)
        assert b.v[0] == 1.5 and b.v[1] == -0.5

    def test_dead_ball(self):
        with pytest.raises(planner.DeadBall):
            planner.propagate(BallState([0, 0, 0.0005], [0, 0, 0]), 0.1, TABLE)

    @given(st.floats(0.05, 0.6), vec)
    def test_speed_never_increases_at_bounce(self, z, v):
        b = BallState([0.0, 0.0, z], v * [0.1, 0.1, 0.3])
        for table, exact in ((TABLE, False), (TableGeometry(c_h=1.0, c_v=1.0), True)):
            try:
                _, events = planner.propagate_events(b, 0.5, table)
            except planner.DeadBall:
                continue
            for t, _ in events:
                before = planner.propagate(b, t - b.t - 1e-9, table)
                after = planner.propagate(b, t - b.t + 1e-9, table)
                vb, va = np.linalg.norm(before.v), np.linalg.norm(after.v)
                if exact:
                    assert va == pytest.approx(vb, rel=1e-6)
                else:
                    assert va <= vb + 1e-6

    @given(st.floats(0.05, 0.5), vec, st.floats(0.01, 0.4), st.floats(0.01, 0.4))
    def test_composition(self, z, v, a, b):
        ball = BallState([0.0, 0.0, z], v * [0.3, 0.1, 0.2])
        try:
            one = planner.propagate(ball, a + b, TABLE)
            two = planner.propagate(planner.propagate(ball, a, TABLE), b, TABLE)
        except planner.DeadBall:
            return
        assert np.allclose(one.p, two.p, atol=1e-9) and np.allclose(one.v, two.v, atol=1e-9)

    def test_rejects_bad_dt(self):
        with pytest.raises(ValueError):
            planner.propagate(BallState([0, 0, 1], [0, 0, 0]), 0.0, TABLE)


class TestPredictStrike:
    def test_moving_away(self):
        with pytest.raises(planner.NoIntersection):
            planner.predict_strike(BallState([CFG.plane_x, 0, 0.3], [1, 0, 0]), CFG, TABLE)

    def test_linear_flight(self):
        table = TableGeometry(g=1e-12)
        s = planner.predict_strike(BallState([1.0, 0.0, 0.3], [-5.0, 0.0, 0.0]), CFG, table)
        assert s.t == pytest.approx(2.55 / 5.0, abs=1e-12)
        assert s.p[0] == CFG.plane_x and s.bounces == 0

    def test_second_bounce(self):
        with pytest.raises(planner.NoIntersection):
            planner.predict_strike(BallState([1.0, 0, 0.3], [-0.8, 0, 0]), CFG, TABLE)

    def test_matches_fine_oracle(self):
        sc = single_scenario()
        rng = np.random.default_rng(sc.seed)
        for _ in range(3):
            ball = harness.sample_serve(sc.serve, sc.table, sc.planner.plane_x, rng)
            s = planner.predict_strike(ball, sc.planner, sc.table)
            t, p = oracles.fine_plane_crossing(ball.p, ball.v, sc.planner.plane_x)
            assert s.bounces == 1
            assert np.abs(p - s.p).max() < 1e-5 and abs(t - s.t) < 1e-5


class TestSampleReturn:
    def test_degenerate_box(self):
        cfg = PlannerConfig(x_lower=0.7, x_upper=0.7, y_lower=0.1, y_upper=0.1)
        p = np.array([-1.55, 0.0, 0.3])
        v = planner.sample_return(p, cfg, TABLE, np.random.default_rng(0))
        t = planner.flight_time(v[2], p[2], TABLE.g)
        assert v[0] == (0.7 - p[0]) / t and v[1] == (0.1 - p[1]) / t

    def test_flight_time_example(self):
        t = planner.flight_time(2.0, 0.2, 9.81)
        assert t == pytest.approx((2 + np.sqrt(4 + 2 * 9.81 * 0.2)) / 9.81, abs=1e-15)
        assert t == pytest.approx(0.49082, abs=5e-6)

    def test_landings_inside_box(self):
        rng = np.random.default_rng(7)
        p = np.array([-1.55, 0.05, 0.28])
        for _ in range(10000):
            v = planner.sample_return(p, CFG, TABLE, rng)
            x, y = landing(p, v)
            assert CFG.x_lower - 1e-6 <= x <= CFG.x_upper + 1e-6
            assert CFG.y_lower - 1e-6 <= y <= CFG.y_upper + 1e-6

    def test_exhausted(self):
        cfg = PlannerConfig(vz_range=(-3.0, -3.0))
        with pytest.raises(planner.SamplingExhausted):
            planner.sample_return([-1.55, 0.0, 0.05], cfg, TABLE, np.random.default_rng(0))

    def test_crossing_box_respected(self):
        box = (-0.25, 0.25, 0.25, 0.4)
        cfg = PlannerConfig(crossing_box=box)
        rng = np.random.default_rng(3)
        p = np.array([-1.55, 0.0, 0.3])
        for _ in range(200):
            v = planner.sample_return(p, cfg, TABLE, rng)
            c = planner.return_crossing(p, v, TABLE, cfg.plane_x)
            assert box[0] <= c[1] <= box[1] and box[2] <= c[2] <= box[3]


class TestImpact:
    def test_elastic_fixed_point(self):
        v_hat, u = planner.racket_impact([-5, 0, 0], [5, 0, 0], 1.0)
        assert np.array_equal(u, [1, 0, 0]) and np.allclose(v_hat, 0.0)

    def test_one_dimensional(self):
        v_hat, u = planner.racket_impact([-4, 0, 0], [6, 0, 0], 0.8)
        assert v_hat == pytest.approx([2.8 / 1.8, 0, 0], abs=1e-15)
        assert planner.restitute(np.array([-4.0, 0, 0]), v_hat, u, 0.8)[0] == pytest.approx(6.0)

    def test_degenerate(self):
        with pytest.raises(planner.DegenerateImpact):
            planner.racket_impact([1, 2, 3], [1, 2, 3], 0.8)

    @given(vec, vec, st.floats(0.05, 1.0))
    def test_impact_law_identity(self, v_i, v_o, c_r):
        if np.linalg.norm(v_o - v_i) < 1e-3:
            return
        v_hat, u = planner.racket_impact(v_i, v_o, c_r)
        out = planner.restitute(v_i, v_hat, u, c_r)
        assert abs(out @ u - v_o @ u) < 1e-12 * max(1.0, np.abs(v_o).max() + np.abs(v_i).max())
        assert np.linalg.norm(np.cross(v_hat, u)) < 1e-12 * max(1.0, np.linalg.norm(v_hat))
        assert np.linalg.norm(v_hat) <= max(abs(v_o @ u), abs(v_i @ u)) + 1e-12


class TestQuaternion:
    def test_identity(self):
        assert np.array_equal(planner.normal_to_quaternion(planner.N0), [1, 0, 0, 0])

    def test_quarter_turn(self):
        q = planner.normal_to_quaternion([0.0, 1.0, 0.0])
        assert q == pytest.approx([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)], abs=1e-15)

    def test_antiparallel(self):
        q = planner.normal_to_quaternion(-planner.N0)
        assert np.array_equal(q, [0, 0, 0, 1])
        assert planner.quat_rotate(q, planner.N0) == pytest.approx(-planner.N0, abs=1e-15)

    def test_not_unit(self):
        with pytest.raises(ValueError):
            planner.normal_to_quaternion([2.0, 0, 0])

    @given(unit_vectors())
    def test_round_trip(self, u):
        q = planner.normal_to_quaternion(u)
        assert abs(np.linalg.norm(q) - 1) < 1e-12
        assert np.abs(planner.quat_rotate(q, planner.N0) - u).max() < 1e-12


class TestPlan:
    def test_self_consistency(self):
        sc = single_scenario()
        rng = np.random.default_rng(11)
        cfg, table = sc.planner, sc.table
        for _ in range(1000):
            ball = harness.sample_serve(sc.serve, table, cfg.plane_x, rng)
            cmd = planner.plan(ball, cfg, table, rng)
            assert cmd.p_hat[0] == cfg.plane_x
            assert abs(np.linalg.norm(cmd.o_hat) - 1) < 1e-12
            n = planner.quat_rotate(cmd.o_hat, planner.N0)
            v = planner.restitute(cmd.v_in, cmd.v_hat, n, cfg.c_r)
            x, y = landing(cmd.p_hat, v, table)
            assert cfg.x_lower - 1e-6 <= x <= cfg.x_upper + 1e-6
            assert cfg.y_lower - 1e-6 <= y <= cfg.y_upper + 1e-6
            tn = (table.net_x - cmd.p_hat[0]) / v[0]
            assert cmd.p_hat[2] + v[2] * tn - 0.5 * table.g * tn ** 2 > table.net_height

    def test_deterministic(self):
        ball = BallState([1.5, 0.0, 0.3], [-5.0, 0.2, 0.5])
        a = planner.plan(ball, CFG, TABLE, np.random.default_rng(5))
        b = planner.plan(ball, CFG, TABLE, np.random.default_rng(5))
        assert repr(a.to_dict()) == repr(b.to_dict())

    def test_moving_away(self):
        with pytest.raises(planner.NoIntersection):
            planner.plan(BallState([0.5, 0, 0.3], [3, 0, 0]), CFG, TABLE, np.random.default_rng(0))

    def test_mirrored(self):
        b = planner.mirrored(BallState([1.0, 0.2, 0.3], [-3.0, 0.5, 1.0], 0.4))
        assert np.array_equal(b.p, [-1.0, -0.2, 0.3]) and np.array_equal(b.v, [3.0, -0.5, 1.0])
        assert b.t == 0.4

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PlannerConfig(x_lower=1.0, x_upper=0.5)
        with pytest.raises(ValueError):
            PlannerConfig(c_r=0.0)
        with pytest.raises(ValueError):
            TableGeometry(c_v=1.5)
