import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from pushgrid import evalbench as EB
from pushgrid.dynamics import Obstacle
from pushgrid.env import PushEnv, episode_streams, sample_scene
from pushgrid.errors import InvalidInputError
from pushgrid.nn.policy import ActorCritic
from pushgrid.scenarios import SCENARIOS, obstacle_shape
from pushgrid.scene import Pose2D, Workspace, footprint_bounds

WS = Workspace()


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return ActorCritic("attention")


def still(_obs):
    return (5, 5)


@pytest.fixture(scope="module")
def timeout_outcome():
    return EB.run_episode(None, "training", seed=11, action_source=still)


# -- episodes ----------------------------------------------------------------------------


def test_zero_velocity_times_out_at_200(timeout_outcome):
    o = timeout_outcome
    assert o.kind == "timeout" and o.steps == 200
    assert len(o.trajectory) == 200


def toward(target_xy):
    """Scripted controller that drives the pusher straight at ``target_xy``."""
    def act(obs):
        px, py = obs.pusher_pos
        return tuple(int(np.clip(round(5 + 50 * d), 0, 10)) for d in (target_xy[0] - px, target_xy[1] - py))
    return act


def test_scripted_collision_ends_at_first_contact():
    seed = 3
    env = PushEnv(EB.evaluation_scenario("training"))
    env.reset(seed)
    centre = env.state.obstacles[0].pose.xy
    o = EB.run_episode(None, "training", seed, action_source=toward(centre))
    assert o.kind == "collision"
    flags = [rec["collision"] for rec in o.trajectory]
    assert flags[-1] and not any(flags[:-1])
    assert o.steps == len(o.trajectory) < 200


def test_episode_is_deterministic(model):
    a = EB.run_episode(model, "dynamic", 5)
    b = EB.run_episode(model, "dynamic", 5)
    assert (a.kind, a.steps, a.final_pos_error, a.final_ang_error) == (b.kind, b.steps, b.final_pos_error, b.final_ang_error)
    assert a.trajectory == b.trajectory
    s1 = EB.run_episode(model, "training", 6, deterministic=False)
    s2 = EB.run_episode(model, "training", 6, deterministic=False)
    assert s1.trajectory == s2.trajectory


def test_outcome_kind_validated():
    with pytest.raises(InvalidInputError):
        EB.EpisodeOutcome("crash", 3, 0.0, 0.0)


# -- reports -----------------------------------------------------------------------------


def test_all_successes():
    outs = [EB.EpisodeOutcome("success", 40 + i % 3, 0.01, 0.1) for i in range(100)]
    m = EB.ScenarioMetrics.from_outcomes("training", outs)
    assert m.rate("success") == 100.0
    assert all(m.rate(k) == 0.0 for k in ("collision", "timeout", "boundary"))
    assert m.mean_steps_to_success == pytest.approx(np.mean([40 + i % 3 for i in range(100)]))


def test_suite_recount_matches_report(model, tmp_path):
    ckpt = tmp_path / "m.pt"
    from pushgrid import ppo
    t = ppo.Trainer(ppo.TrainConfig(num_envs=2, rollout_length=4), "training")
    t.save(ckpt)
    before = ckpt.read_bytes()
    report = EB.run_suite(ckpt, ["training", "dual"], episodes=6, seed=1, batch=4)
    assert ckpt.read_bytes() == before
    for row in report.rows:
        outs = report.outcomes[row.scenario]
        assert len(outs) == row.episodes == 6
        for kind in EB.OUTCOME_KINDS:
            assert row.rate(kind) == 100.0 * sum(o.kind == kind for o in outs) / 6
        assert sum(row.rate(k) for k in EB.OUTCOME_KINDS) == pytest.approx(100.0, abs=1e-9)
    lines = report.to_csv().splitlines()
    assert lines[0].split(",")[0] == "scenario" and len(lines) == 3
    assert "training" in report.format_table()
    # Sequential single episodes agree with the batched suite.
    again = EB.run_suite(t.model, ["training", "dual"], episodes=6, seed=1, batch=6)
    assert again.to_csv() == report.to_csv()
    with pytest.raises(InvalidInputError):
        EB.run_suite(t.model, [], episodes=1)


def test_wilson_interval_solves_score_equation():
    z = 1.959963984540054
    for k, n in [(0, 10), (3, 10), (97, 100), (100, 100), (1942, 2000)]:
        lo, hi = EB.wilson_interval(k, n)
        p = k / n
        assert 0.0 <= lo <= p <= hi <= 1.0
        for end in (lo, hi):
            # Wilson endpoints are roots of (p - q)^2 = z^2 q (1 - q) / n.
            assert abs((p - end) ** 2 - z * z * end * (1 - end) / n) < 1e-12
    assert EB.wilson_interval(0, 0) == (0.0, 1.0)


# -- dynamic obstacles -----------------------------------------------------------------------


def wall(y, vy):
    return Obstacle(obstacle_shape("rectangle"), Pose2D(0.3, y, 0.0), (0.0, vy))


def test_dynamic_update_examples():
    o = EB.dynamic_obstacle_update(wall(0.25, 0.1), 0.1)
    assert o.pose.y - 0.25 == pytest.approx(0.01, abs=1e-15)
    assert o.velocity == (0.0, 0.1)
    top = EB.dynamic_obstacle_update(wall(0.475, 0.1), 0.1)
    assert top.velocity == (0.0, -0.1)
    assert footprint_bounds(top.shape, top.pose)[3] <= WS.height + 1e-12
    bottom = EB.dynamic_obstacle_update(wall(0.025, -0.1), 0.1)
    assert bottom.velocity == (0.0, 0.1)


def test_two_reversals_return_to_start():
    start = wall(0.2, 0.1)
    half = 0.02  # rectangle half-height
    period = 2 * (WS.height - 2 * half) / 0.01
    o, flips = start, 0
    for _ in range(round(period)):
        nxt = EB.dynamic_obstacle_update(o, 0.1)
        flips += nxt.velocity[1] != o.velocity[1]
        o = nxt
    assert flips == 2
    assert o.velocity == start.velocity
    assert abs(o.pose.y - start.pose.y) < 1e-12


@given(st.floats(0.021, 0.479), st.sampled_from([-0.1, 0.1]), st.integers(1, 300))
def test_dynamic_speed_constant_and_inside(y, vy, n):
    o = wall(y, vy)
    for _ in range(n):
        o = EB.dynamic_obstacle_update(o, 0.1)
        assert abs(o.velocity[1]) == 0.1
        _, y0, _, y1 = footprint_bounds(o.shape, o.pose)
        assert y0 >= -1e-12 and y1 <= WS.height + 1e-12


def test_training_draws_never_use_evaluation_shapes():
    names = set()
    for seed in range(500):
        s = sample_scene(episode_streams(seed)[0], SCENARIOS["training"], WS)
        names.update(o.shape.name for o in s.obstacles)
    assert names == {"rectangle"}


# -- trajectories -----------------------------------------------------------------------------


def test_csv_export_rows_and_bytes(timeout_outcome, tmp_path):
    a = EB.export_trajectory(timeout_outcome, tmp_path / "a.csv")
    b = EB.export_trajectory(timeout_outcome, tmp_path / "b.csv")
    lines = a.read_text().splitlines()
    assert len(lines) == 201
    assert lines[0] == ",".join(EB.TRAJECTORY_COLUMNS)
    assert a.read_bytes() == b.read_bytes()
    with pytest.raises(InvalidInputError):
        EB.export_trajectory(timeout_outcome, tmp_path / "a.xml")


def test_ndjson_replay_and_reward_oracle(model, tmp_path):
    o = EB.run_episode(model, "dynamic", 8)
    path = EB.export_trajectory(o, tmp_path / "t.ndjson")
    again = EB.export_trajectory(o, tmp_path / "u.ndjson")
    assert path.read_bytes() == again.read_bytes()
    r = EB.replay(path)
    assert r.max_pose_divergence < 1e-9 and r.max_angle_divergence < 1e-9 and r.max_reward_divergence < 1e-9
    assert r.outcome == o.kind and r.steps == o.steps
    header, steps = EB.load_trajectory(path)
    rec = EB.recomputed_rewards(header, steps)
    assert max(abs(x - s["reward"]) for x, s in zip(rec, steps)) <= 1e-9


def test_truncated_trajectory_rejected(timeout_outcome, tmp_path):
    path = EB.export_trajectory(timeout_outcome, tmp_path / "t.ndjson")
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(InvalidInputError):
        EB.replay(path)
    path.write_text(lines[0][:40])
    with pytest.raises(InvalidInputError):
        EB.load_trajectory(path)
