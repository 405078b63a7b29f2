import json

import numpy as np
import pytest

from hjshield.dynamics import AgentState, DynamicsParams
from hjshield.env import (
    ACTIVE,
    COLLISION,
    FROZEN,
    SUCCESS,
    EnvConfig,
    EpisodeTrace,
    MultiAgentEnv,
    SpawnError,
    TaskSpec,
    TraceFormatError,
    build_frame,
    build_observation,
    default_controller,
    make_view,
    restrictiveness_factor,
    spawn_task,
    success_rate,
)
from hjshield.supervisor import AlwaysDefault, run_episode

CFG = EnvConfig()


def test_difficult_spawn_symmetric():
    spec = TaskSpec(n_agents=4, scenario="difficult", r=1.7, jitter_deg=0.0)
    poses, goals = spawn_task(spec, np.random.default_rng(0))
    ang = np.degrees(np.arctan2(poses[:, 1], poses[:, 0]))
    assert np.allclose(np.mod(ang, 360), [0, 90, 180, 270], atol=1e-9)
    assert np.allclose(np.hypot(poses[:, 0], poses[:, 1]), 1.7)
    assert np.allclose(goals, -poses[:, :2])


def test_degenerate_annulus_puts_everything_on_circle():
    spec = TaskSpec(n_agents=3, scenario="moderate", r1=2.0, r2=2.0)
    poses, goals = spawn_task(spec, np.random.default_rng(1))
    assert np.allclose(np.hypot(poses[:, 0], poses[:, 1]), 2.0)
    assert np.allclose(np.hypot(goals[:, 0], goals[:, 1]), 2.0)


@pytest.mark.parametrize("seed", range(20))
def test_spawn_min_separation(seed):
    for spec in (TaskSpec(6, "moderate"), TaskSpec(6, "difficult")):
        poses, _ = spawn_task(spec, np.random.default_rng(seed))
        diff = poses[:, None, :2] - poses[None, :, :2]
        dist = np.hypot(diff[..., 0], diff[..., 1])[np.triu_indices(6, 1)]
        assert dist.min() > 2 * 0.35


def test_spawn_failure_is_reported():
    with pytest.raises(SpawnError):
        spawn_task(TaskSpec(8, "difficult", r=0.3), np.random.default_rng(0), max_tries=5)


def test_taskspec_validation():
    with pytest.raises(ValueError):
        TaskSpec(scenario="easy")
    with pytest.raises(ValueError):
        TaskSpec(r1=3.0, r2=2.0)
    with pytest.raises(ValueError):
        TaskSpec(n_agents=2, frozen_agents=(5,))


def test_default_controller_examples():
    dyn = DynamicsParams()
    u = default_controller(AgentState(0, 0, 0), (5.0, 0.0), dyn)
    assert (u.v, u.omega) == pytest.approx((0.22, 0.0))
    u = default_controller(AgentState(1, 1, 0.3), (1.0, 1.0), dyn)
    assert (u.v, u.omega) == (0.0, 0.0)
    u = default_controller(AgentState(0, 0, 0), (-5.0, 0.01), dyn)
    assert abs(u.omega) == pytest.approx(2.84)
    for th in np.linspace(-3, 3, 13):
        u = default_controller(AgentState(0, 0, th), (0.4, -0.7), dyn)
        assert 0 <= u.v <= 0.22 and abs(u.omega) <= 2.84


def _env(coarse_vf, n=2, **kw):
    return MultiAgentEnv(TaskSpec(n, "difficult", **kw), CFG, coarse_vf, noise=False)


def test_collision_at_distance_below_d(coarse_vf):
    env = _env(coarse_vf)
    env.state = np.array([[0.0, 0.0, 0.0], [0.34, 0.0, np.pi]])
    env.obs = env.state.copy()
    rewards, branches, statuses = env.step(np.array([0, 0]))
    assert statuses == [COLLISION, COLLISION]
    assert rewards == [-300.0, -300.0] and branches == ["collision", "collision"]
    assert env.done


def test_avoidance_actions_apply_saturated_turns(coarse_vf):
    env = _env(coarse_vf)
    u = env.controls_for(np.array([1, 2]))
    assert np.allclose(u, [[0.22, 2.84], [0.22, -2.84]])


def test_single_agent_drives_to_goal(coarse_vf):
    spec = TaskSpec(1, "moderate", goals=((1.5, 0.0),), heading_noise=0.0)
    env = MultiAgentEnv(spec, CFG, coarse_vf, noise=False)
    env.state = np.array([[-1.5, 0.0, 0.0]])
    env.obs = env.state.copy()
    for _ in range(5):
        env.step(np.array([0]))
        assert abs(env.state[0, 1]) < 1e-12 and abs(env.state[0, 2]) < 1e-12
    assert env.state[0, 0] == pytest.approx(-1.5 + 5 * 0.022)
    while not env.done:
        env.step(np.array([0]))
    assert env.status == [SUCCESS]


def test_frozen_agents_hold_pose(coarse_vf):
    env = MultiAgentEnv(TaskSpec(3, "difficult", frozen_agents=(1,)), CFG, coarse_vf)
    p0 = env.state[1].copy()
    for _ in range(10):
        env.step(np.zeros(3, dtype=int))
    assert np.array_equal(env.state[1], p0) and env.status[1] == FROZEN


def test_no_teleportation_and_noise_free_collisions(coarse_vf):
    env = MultiAgentEnv(TaskSpec(4, "moderate", seed=3), CFG, coarse_vf)
    rng = np.random.default_rng(0)
    while not env.done:
        prev = env.state.copy()
        env.step(rng.integers(0, 3, 4))
        step = np.hypot(*(env.state[:, :2] - prev[:, :2]).T)
        assert np.all(step <= 0.22 * 0.1 + 1e-12)
        for i, s in enumerate(env.status):
            if s == COLLISION:
                d = np.hypot(*(env.state[:, :2] - env.state[i, :2]).T)
                d[i] = np.inf
                assert d.min() <= CFG.d


def test_observation_padding_and_sizes(coarse_vf):
    env = _env(coarse_vf, n=2)
    obs = build_observation(0, [env.view], [], history=4)
    assert len(obs.frames) == 4 and obs.actions == [0, 0, 0]
    assert all(np.array_equal(f.features(), obs.frames[0].features()) for f in obs.frames)
    assert obs.frames[0].rel.shape == (1, 3)


def test_truncation_keeps_most_critical(coarse_vf):
    env = MultiAgentEnv(TaskSpec(8, "difficult", r=2.5, seed=2), CFG, coarse_vf)
    fr = build_frame(0, env.view, max_neighbors=6)
    vals = np.delete(env.view.values[0], 0)
    assert len(fr.values) == 6
    assert np.allclose(np.sort(fr.values), np.sort(vals)[:6])


def test_frames_sorted_ascending(coarse_vf):
    env = MultiAgentEnv(TaskSpec(6, "moderate", seed=5), CFG, coarse_vf)
    rng = np.random.default_rng(1)
    for _ in range(40):
        if env.done:
            break
        for i in range(6):
            v = build_frame(i, env.view).values
            assert np.all(np.diff(v) >= 0)
        env.step(rng.integers(0, 3, 6))


def test_equal_values_tie_break_by_index(coarse_vf):
    obs = np.array([[0, 0, 0], [1.0, 0.5, np.pi], [1.0, -0.5, np.pi]])
    view = make_view(obs, coarse_vf)
    view.values[0, 1] = view.values[0, 2] = 0.7
    assert build_frame(0, view).neighbors.tolist() == [1, 2]


def test_metrics_definitions():
    ok = [{"status": [SUCCESS] * 3, "actions": [0] * 5}] * 4
    assert success_rate(ok) == 1.0
    single = [{"status": [SUCCESS]}] * 93 + [{"status": [COLLISION]}] * 7
    assert success_rate(single) == pytest.approx(0.93)
    assert restrictiveness_factor([{"actions": [0] * 10}]) == 0.0
    assert restrictiveness_factor([{"actions": [1] * 46 + [0] * 54}]) == pytest.approx(0.46)
    assert restrictiveness_factor([{"actions": [1, 2, 2]}]) == 1.0
    with pytest.raises(ValueError):
        success_rate([])


def test_episode_determinism_and_trace_round_trip(coarse_vf, tmp_path):
    spec = TaskSpec(3, "moderate", seed=11)
    a = run_episode(spec, CFG, coarse_vf, AlwaysDefault())
    b = run_episode(spec, CFG, coarse_vf, AlwaysDefault())
    assert a.to_lines() == b.to_lines()
    p = tmp_path / "t.jsonl"
    a.write(p)
    back = EpisodeTrace.read(p)
    assert back.to_lines() == a.to_lines()
    assert len(a.steps) <= spec.horizon
    assert set(a.final_status()) <= {SUCCESS, COLLISION, "timeout"}
    rec = json.loads(p.read_text().splitlines()[1])
    assert {"t", "agents", "values"} <= set(rec)
    assert {"pose", "action", "interrupt", "reward", "status"} <= set(rec["agents"][0])


def test_malformed_trace_reports_line(tmp_path, coarse_vf):
    tr = run_episode(TaskSpec(2, "difficult", seed=1), CFG, coarse_vf, AlwaysDefault())
    lines = tr.to_lines()
    bad = lines[:3] + ["{not json"] + lines[3:]
    with pytest.raises(TraceFormatError, match=":4:"):
        EpisodeTrace.from_lines(bad)
    rec = json.loads(lines[2])
    rec["agents"][0]["pose"] = [0.0, "x", 0.0]
    with pytest.raises(TraceFormatError, match=":3:"):
        EpisodeTrace.from_lines(lines[:2] + [json.dumps(rec)])
    with pytest.raises(TraceFormatError, match="missing episode header"):
        EpisodeTrace.from_lines([])


def test_statuses_start_active(coarse_vf):
    env = MultiAgentEnv(TaskSpec(3, "moderate"), CFG, coarse_vf)
    assert env.status == [ACTIVE] * 3
