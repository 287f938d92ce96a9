import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flatmuscle import controller, harness, planner
from flatmuscle.harness import EpisodeLog, Racket, RewardWeights, StepState
from flatmuscle.planner import BallState, PlannerCommand


@pytest.fixture(scope="module")
def single():
    return harness.load_scenario(harness.bundled_scenario("single"))


@pytest.fixture(scope="module")
def dual():
    return harness.load_scenario(harness.bundled_scenario("dual"))


def fake_log(act, hit=True, success=False, rally_length=0):
    act = np.asarray(act, dtype=float)
    steps = np.c_[np.arange(len(act)), act]
    return EpisodeLog(0, "single", ["t"] + [f"a{i}" for i in range(act.shape[1])], steps,
                      list(range(1, act.shape[1] + 1)), [],
                      {"hit": hit, "success": success, "rally_length": rally_length})


class TestContact:
    def test_receding(self):
        rk = Racket(np.zeros(3), np.zeros(3), np.array([1.0, 0, 0]))
        ball = BallState([0.01, 0, 0], [2.0, 0, 0])
        assert harness.racket_contact(ball, rk, 0.85) is None

    def test_outside_disc(self):
        rk = Racket(np.zeros(3), np.zeros(3), np.array([1.0, 0, 0]))
        ball = BallState([0.01, 0.1, 0], [-2.0, 0, 0])
        assert harness.racket_contact(ball, rk, 0.85) is None

    def test_elastic_reflection(self):
        rk = Racket(np.zeros(3), np.zeros(3), np.array([1.0, 0, 0]))
        out = harness.racket_contact(BallState([0.01, 0, 0], [-3.0, 0.5, 0]), rk, 1.0)
        assert np.array_equal(out.v, [3.0, 0.5, 0.0])

    def test_planner_consistency(self, single):
        rng = np.random.default_rng(single.seed)
        cfg, table = single.planner, single.table
        for _ in range(200):
            ball = harness.sample_serve(single.serve, table, cfg.plane_x, rng)
            cmd = planner.plan(ball, cfg, table, rng)
            n = planner.quat_rotate(cmd.o_hat, planner.N0)
            rk = Racket(cmd.p_hat, cmd.v_hat, n)
            out = harness.racket_contact(BallState(cmd.p_hat, cmd.v_in, cmd.t_strike), rk, cfg.c_r)
            assert np.abs(out.v - cmd.v_out).max() < 1e-6

    def test_sweep_finds_crossing(self, single):
        table = single.table
        rk = Racket(np.array([-1.55, 0.0, 0.3]), np.zeros(3), np.array([1.0, 0, 0]))
        ball = BallState([-1.54, 0.02, 0.31], [-4.0, 0.0, 0.0])
        s, b, r = harness.sweep_contact(ball, 0.005, rk, rk, table)
        assert b.p[0] == pytest.approx(-1.55, abs=1e-12)
        assert s == pytest.approx(0.0025, abs=1e-6)
        moving = Racket(rk.p, np.zeros(3), rk.n)
        later = Racket(rk.p + [0.04, 0, 0], np.zeros(3), rk.n)
        s2, b2, _ = harness.sweep_contact(ball, 0.005, moving, later, table)
        assert s2 < s and b2.p[0] > -1.55

    def test_sweep_misses(self, single):
        rk = Racket(np.array([-1.55, 0.0, 0.3]), np.zeros(3), np.array([1.0, 0, 0]))
        ball = BallState([-1.54, 0.2, 0.31], [-4.0, 0.0, 0.0])
        assert harness.sweep_contact(ball, 0.005, rk, rk, single.table) is None


class TestReward:
    W = RewardWeights()

    def command(self):
        n = np.array([0.6, 0.0, 0.8])
        return PlannerCommand(np.array([-1.55, 0, 0.3]), 2.0 * n, planner.normal_to_quaternion(n),
                              0.5, normal=n)

    def test_at_target(self):
        cmd = self.command()
        rw = harness.reward(StepState(Racket(cmd.p_hat, np.zeros(3), cmd.normal)), cmd, self.W)
        assert rw["r_c"] == pytest.approx(2.0, abs=1e-7)
        assert rw["r"] == pytest.approx(self.W.w_g * 1 + self.W.w_c * 2, abs=1e-7)
        assert rw["r_s"] == 0.0

    def test_no_command(self):
        rk = Racket(np.zeros(3), np.zeros(3), np.array([1.0, 0, 0]))
        rw = harness.reward(StepState(rk, np.zeros(3), np.array([0.05, 0, 0])), None, self.W)
        assert rw["r_c"] == 0.0 and rw["r_g"] == pytest.approx(np.exp(-1))
        assert rw["r"] == pytest.approx(self.W.w_g * np.exp(-1))

    def test_hit_terms(self):
        cmd = self.command()
        rk = Racket(cmd.p_hat, cmd.v_hat, cmd.normal)
        rw = harness.reward(StepState(rk, contact=True, first_contact=True, return_predicted=True),
                            cmd, self.W)
        assert rw["r_c"] == pytest.approx(3.0, abs=1e-7) and rw["r_s"] == 2.0

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    def test_terms_bounded(self, a, b, c):
        cmd = self.command()
        n = np.array([a, b, c + 0.1])
        rk = Racket(cmd.p_hat + [a, b, c], np.array([c, a, b]), n / np.linalg.norm(n))
        rw = harness.reward(StepState(rk, contact=a > 0.5), cmd, self.W)
        assert 0 <= rw["r_c"] <= 3 and np.isfinite(rw["r"])


class TestMetrics:
    def test_effort_fixture(self):
        m = harness.compute_metrics([fake_log([[1, 0], [0, 1]])])
        assert m.effort == 0.5

    def test_zero_effort(self):
        assert harness.compute_metrics([fake_log(np.zeros((5, 3)))]).effort == 0.0

    def test_counting(self):
        logs = [fake_log(np.zeros((2, 2)), hit=h, success=s)
                for h, s in ((True, True), (True, False), (False, False), (True, False))]
        m = harness.compute_metrics(logs)
        assert m.success_rate == 0.25 and m.hit_rate == 0.75

    def test_order_invariant(self, rng):
        logs = [fake_log(rng.uniform(size=(rng.integers(1, 20), 4)), success=bool(i % 2))
                for i in range(7)]
        a = harness.compute_metrics(logs)
        b = harness.compute_metrics(logs[::-1])
        assert a.effort == pytest.approx(b.effort, rel=1e-15)
        assert (a.hit_rate, a.success_rate) == (b.hit_rate, b.success_rate)

    def test_empty(self):
        with pytest.raises(harness.EmptyInput):
            harness.compute_metrics([])
        with pytest.raises(harness.EmptyInput):
            harness.compute_metrics([fake_log(np.zeros((0, 2)))])


class TestSingle:
    def test_idle_never_hits(self, single):
        model = single.model()
        lg = harness.run_episode(single, controller.HoldController(model, single.ready))
        assert not lg.outcome["hit"] and not lg.outcome["success"]
        assert lg.outcome["termination"] in ("missed", "double_bounce")

    def test_scripted_strike(self, single):
        lg = harness.run_episode(single, seed=single.seed)
        assert lg.outcome["hit"] and lg.outcome["success"] and lg.outcome["hits"] == 1
        i = lg.columns.index("a_r_s")
        assert lg.steps[:, i].sum() == 2.0
        kinds = [e["type"] for e in lg.events]
        assert kinds[0] == "serve" and kinds[-1] == "end" and kinds.count("hit") == 1

    def test_deterministic(self, single):
        a = harness.run_episode(single, seed=3)
        b = harness.run_episode(single, seed=3)
        assert a.to_csv() == b.to_csv() and a.to_json() == b.to_json()

    def test_exactly_once(self, single):
        eng = harness._SingleEngine(single, harness.default_controller(single), 0)
        rb = eng.robots[0]
        eng.ball = BallState([-1.5, 0.0, 0.3], [3.0, 0.0, 1.0])
        before = eng.ball
        eng.on_tick(0.1, before, rb, rb.racket, [])
        eng.on_tick(0.2, before, rb, rb.racket, [])
        eng.on_tick(0.5, before, None, None, [(0.5, np.array([0.7, 0.0, 0.0]))])
        out = eng.outcome()
        assert out["hits"] == 2 and out["hit"] and not out["success"]
        assert out["termination"] == "landed"

    def test_run_many_order(self, single):
        logs = harness.run_many(single, 2, base_seed=40, workers=1)
        assert [lg.seed for lg in logs] == [40, 41]
        assert logs[1].to_csv() == harness.run_episode(single, seed=41).to_csv()

    def test_log_exports(self, single, tmp_path):
        lg = harness.run_episode(single, seed=5)
        lg.to_csv(tmp_path / "e.csv")
        lg.to_json(tmp_path / "e.json")
        header = (tmp_path / "e.csv").read_text().splitlines()[0].split(",")
        assert header[:4] == ["t", "ball_x", "ball_y", "ball_z"] and "a_act7" in header
        assert json.loads((tmp_path / "e.json").read_text())["seed"] == 5


class TestDual:
    def test_idle_opponent(self, dual):
        model = dual.model()
        for seed in (dual.seed, dual.seed + 1):
            lg = harness.run_rally(dual, controller_a=controller.HoldController(model, dual.ready),
                                   seed=seed)
            assert lg.outcome["rally_length"] == 0

    def test_mode_checks(self, single, dual):
        with pytest.raises(harness.ScenarioError):
            harness.run_rally(single)
        with pytest.raises(harness.ScenarioError):
            harness.run_episode(dual)


class TestScenario:
    def base(self):
        return json.loads(harness.bundled_scenario("single").read_text())

    def test_round_trip(self, single):
        again = harness.scenario_from_dict(single.to_dict())
        assert again == single

    @pytest.mark.parametrize("edit, match", [
        (lambda d: d.pop("serve"), "missing"),
        (lambda d: d.update(colour="red"), "unknown keys"),
        (lambda d: d["table"].update(c_v=2.0), "table"),
        (lambda d: d["planner"].update(speed=1), "planner: unknown"),
        (lambda d: d.update(seed="x"), "seed"),
        (lambda d: d.update(mode="triple"), "mode"),
        (lambda d: d.update(horizon=-1), "horizon"),
        (lambda d: d["rewards"].update(w_s=-1), "rewards"),
        (lambda d: d.update(mode="dual", planner=dict(d["planner"], crossing_box=[0, 1, 0, 1])),
         "crossing box"),
    ])
    def test_errors(self, edit, match):
        d = self.base()
        edit(d)
        with pytest.raises(harness.ScenarioError, match=match):
            harness.scenario_from_dict(d)

    def test_bad_json(self, tmp_path):
        p = tmp_path / "s.json"
        p.write_text("{\n  'plant': 1\n}")
        with pytest.raises(harness.ScenarioError, match="line 2"):
            harness.load_scenario(p)

    def test_serve_lands_in_crossing_box(self, dual):
        rng = np.random.default_rng(1)
        cfg = dual.planner_config()
        ylo, yhi, zlo, zhi = dual.serve.crossing_box
        for _ in range(100):
            ball = harness.sample_serve(dual.serve, dual.table, cfg.plane_x, rng)
            s = planner.predict_strike(ball, cfg, dual.table)
            assert s.bounces == 1
            assert ylo - 1e-9 <= s.p[1] <= yhi + 1e-9 and zlo - 1e-9 <= s.p[2] <= zhi + 1e-9


def test_workers_env(monkeypatch):
    monkeypatch.setenv("FLATMUSCLE_THREADS", "3")
    assert harness.default_workers() == 3
    monkeypatch.setenv("FLATMUSCLE_THREADS", "zero")
    assert harness.default_workers() == 1
