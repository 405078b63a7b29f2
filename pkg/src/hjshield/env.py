"""Multi-agent episodic environment for planar unicycles.

Ground-truth poses drive collision and goal checks. Every decision
(default controller, supervisors, observations) sees poses corrupted by
zero-mean Gaussian noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import DynamicsParams, step_states, wrap_angle, relative_states
from .reachability import ValueFunction
from .reward import RewardConfig, StepOutcome, reward_branch

ACTIVE, SUCCESS, COLLISION, TIMEOUT, FROZEN = "active", "success", "collision", "timeout", "frozen"
TERMINAL = (SUCCESS, COLLISION, TIMEOUT, FROZEN)

# Per-neighbour payload fed to the sequence encoder.
FEATURES = ("px", "py", "sin_theta", "cos_theta", "value")
N_FEATURES = len(FEATURES)


class SpawnError(RuntimeError):
    """No valid initial configuration found for a task specification."""


@dataclass(frozen=True)
class TaskSpec:
    n_agents: int = 3
    scenario: str = "moderate"
    r1: float = 1.0
    r2: float = 2.0
    r: float = 1.7
    jitter_deg: float = 10.0
    goal_spread_deg: float = 90.0
    heading_noise: float = 0.2
    goals: tuple | None = None
    seed: int = 0
    frozen_agents: tuple = ()
    horizon: int = 600

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("n_agents must be positive")
        if self.scenario not in ("moderate", "difficult"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.r1 > self.r2:
            raise ValueError("moderate scenario needs r1 <= r2")
        if any(not 0 <= i < self.n_agents for i in self.frozen_agents):
            raise ValueError("frozen agent index out of range")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")

    def with_seed(self, seed: int) -> "TaskSpec":
        return TaskSpec(**{**asdict(self), "seed": int(seed)})

    def label(self) -> str:
        if self.scenario == "moderate":
            return f"moderate-n{self.n_agents}-r{self.r1:g}-{self.r2:g}"
        return f"difficult-n{self.n_agents}-r{self.r:g}"


@dataclass(frozen=True)
class EnvConfig:
    dynamics: DynamicsParams = field(default_factory=DynamicsParams)
    d: float = 0.35
    goal_tol: float = 0.15
    sigma_pos: float = 0.01
    sigma_theta: float = 0.01
    heading_gain: float = 2.0
    stop_and_stay: bool = True
    reward: RewardConfig = field(default_factory=RewardConfig)


# -- task generation ---------------------------------------------------------

def _min_pairwise(p: np.ndarray) -> float:
    if len(p) < 2:
        return np.inf
    diff = p[:, None, :] - p[None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    return float(dist[np.triu_indices(len(p), 1)].min())


def _polar(radius, angle):
    return np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])


def spawn_task(spec: TaskSpec, rng: np.random.Generator, d: float = 0.35, max_tries: int = 1000):
    """Initial poses (N, 3) and goal positions (N, 2) for one episode.

    Moderate: start and goal radii uniform in [r1, r2]; the goal sits on the
    far side (start bearing + pi, spread by ``goal_spread_deg``) and the
    initial heading is perturbed. Difficult: equally spaced starts on radius
    ``r`` with angular jitter and antipodal goals.
    """
    n = spec.n_agents
    for _ in range(max_tries):
        if spec.scenario == "difficult":
            jitter = np.deg2rad(spec.jitter_deg)
            ang = 2.0 * np.pi * np.arange(n) / n + rng.uniform(-jitter, jitter, n)
            starts = _polar(np.full(n, spec.r), ang)
            goals = -starts
            noise = np.zeros(n)
        else:
            ang = rng.uniform(0.0, 2.0 * np.pi, n)
            starts = _polar(rng.uniform(spec.r1, spec.r2, n), ang)
            spread = np.deg2rad(spec.goal_spread_deg)
            g_ang = ang + np.pi + rng.uniform(-spread, spread, n)
            goals = _polar(rng.uniform(spec.r1, spec.r2, n), g_ang)
            noise = rng.uniform(-spec.heading_noise, spec.heading_noise, n)
        if spec.goals is not None:
            goals = np.asarray(spec.goals, dtype=float).reshape(n, 2)
        if _min_pairwise(starts) > 2 * d and _min_pairwise(goals) > 2 * d:
            heading = np.arctan2(goals[:, 1] - starts[:, 1], goals[:, 0] - starts[:, 0])
            poses = np.column_stack([starts, wrap_angle(heading + noise)])
            return poses, goals
    raise SpawnError(f"could not place {n} agents for {spec} after {max_tries} tries")


# -- default controller ------------------------------------------------------

def default_controls(states: np.ndarray, goals: np.ndarray, dyn: DynamicsParams,
                     d: float = 0.35, gain: float = 2.0) -> np.ndarray:
    """Proportional goal-reaching (v, omega) for (N, 3) poses and (N, 2) goals."""
    states = np.atleast_2d(states)
    goals = np.atleast_2d(goals)
    dx = goals[:, 0] - states[:, 0]
    dy = goals[:, 1] - states[:, 1]
    dist = np.hypot(dx, dy)
    err = wrap_angle(np.arctan2(dy, dx) - states[:, 2])
    omega = np.clip(gain * err, -dyn.omega_max, dyn.omega_max)
    v = dyn.v_max * np.maximum(0.0, np.cos(err)) * np.minimum(1.0, dist / (3.0 * d))
    arrived = dist < 1e-9
    return np.column_stack([np.where(arrived, 0.0, v), np.where(arrived, 0.0, omega)])


def default_controller(state, goal, dyn: DynamicsParams | None = None, d: float = 0.35,
                       gain: float = 2.0):
    from .dynamics import AgentState, ControlInput

    dyn = dyn or DynamicsParams()
    s = state.as_array() if isinstance(state, AgentState) else np.asarray(state, dtype=float)
    u = default_controls(s[None, :], np.asarray(goal, dtype=float)[None, :2], dyn, d, gain)[0]
    return ControlInput(float(u[0]), float(u[1]))


def avoidance_controls(actions: np.ndarray, dyn: DynamicsParams) -> np.ndarray:
    """Map actions 1/2 to (v_max, +omega_max) / (v_max, -omega_max)."""
    sign = np.where(actions == 1, 1.0, -1.0)
    return np.column_stack([np.full(len(actions), dyn.v_max), sign * dyn.omega_max])


# -- observations ------------------------------------------------------------

@dataclass
class StepView:
    """Everything a decision at one time step may depend on (noisy poses)."""

    obs: np.ndarray          # (N, 3) observed poses
    rel: np.ndarray          # (N, N, 3) rel[i, j] = pose of j in i's frame
    values: np.ndarray       # (N, N) safety values, +inf on the diagonal
    distances: np.ndarray    # (N, N) planar distances, +inf on the diagonal


def make_view(obs: np.ndarray, vf: ValueFunction) -> StepView:
    n = len(obs)
    rel = relative_states(obs[:, None, :], obs[None, :, :])
    values = np.full((n, n), np.inf)
    if n > 1:
        off = ~np.eye(n, dtype=bool)
        vals, _ = vf.interpolate(rel[off])
        values[off] = vals
    distances = np.hypot(rel[..., 0], rel[..., 1])
    np.fill_diagonal(distances, np.inf)
    return StepView(obs=obs, rel=rel, values=values, distances=distances)


@dataclass
class ObservationFrame:
    rel: np.ndarray       # (K, 3), ascending safety value
    values: np.ndarray    # (K,)
    neighbors: np.ndarray  # (K,) agent indices

    def features(self) -> np.ndarray:
        return frame_features(self.rel, self.values)


def frame_features(rel: np.ndarray, values: np.ndarray) -> np.ndarray:
    return np.column_stack([rel[:, 0], rel[:, 1], np.sin(rel[:, 2]), np.cos(rel[:, 2]), values])


def build_frame(i: int, view: StepView, max_neighbors: int | None = None) -> ObservationFrame:
    """Neighbours of agent ``i`` sorted by ascending value (ties by index), truncated to the most critical."""
    n = len(view.obs)
    others = np.array([j for j in range(n) if j != i], dtype=int)
    vals = view.values[i, others]
    order = np.lexsort((others, vals))
    if max_neighbors is not None and len(order) > max_neighbors:
        order = order[:max_neighbors]
    idx = others[order]
    return ObservationFrame(rel=view.rel[i, idx], values=view.values[i, idx], neighbors=idx)


@dataclass
class Observation:
    frames: list           # [o_t, o_{t-1}, ...] ObservationFrames, newest first
    actions: list          # [a_{t-1}, a_{t-2}, ...]

    def feature_stack(self) -> np.ndarray:
        return np.stack([f.features() for f in self.frames])


def build_observation(i: int, view_history: list, action_history: list, history: int = 4,
                      max_neighbors: int | None = None) -> Observation:
    """Stack the last ``history`` frames (newest first) and ``history - 1`` past actions.

    ``view_history`` and ``action_history`` are chronological (oldest first);
    missing slots repeat the oldest frame and use action 0.
    """
    views = list(view_history[-history:])
    frames = [build_frame(i, v, max_neighbors) for v in reversed(views)]
    while len(frames) < history:
        frames.append(frames[-1])
    acts = list(reversed(list(action_history)[-(history - 1):])) if history > 1 else []
    acts += [0] * (history - 1 - len(acts))
    return Observation(frames=frames, actions=acts)


# -- environment -------------------------------------------------------------

class MultiAgentEnv:
    def __init__(self, spec: TaskSpec, cfg: EnvConfig, vf: ValueFunction,
                 noise: bool = True):
        self.spec = spec
        self.cfg = cfg
        self.vf = vf
        self.noise = noise
        self.reset()

    def reset(self):
        self.rng = np.random.default_rng(self.spec.seed)
        self.state, self.goals = spawn_task(self.spec, self.rng, self.cfg.d)
        self.start = self.state.copy()
        n = self.spec.n_agents
        self.status = [FROZEN if i in self.spec.frozen_agents else ACTIVE for i in range(n)]
        self.t = 0
        self.obs = self._observe()
        self.view = make_view(self.obs, self.vf)
        return self.view

    @property
    def n(self) -> int:
        return self.spec.n_agents

    @property
    def done(self) -> bool:
        return all(s != ACTIVE for s in self.status)

    def active(self) -> list[int]:
        return [i for i, s in enumerate(self.status) if s == ACTIVE]

    def _observe(self) -> np.ndarray:
        if not self.noise:
            return self.state.copy()
        n = self.n
        eps = self.rng.standard_normal((n, 3)) * np.array(
            [self.cfg.sigma_pos, self.cfg.sigma_pos, self.cfg.sigma_theta])
        obs = self.state + eps
        obs[:, 2] = wrap_angle(obs[:, 2])
        return obs

    def controls_for(self, actions: np.ndarray) -> np.ndarray:
        dyn = self.cfg.dynamics
        actions = np.asarray(actions)
        u = default_controls(self.obs, self.goals, dyn, self.cfg.d, self.cfg.heading_gain)
        interrupt = actions != 0
        if interrupt.any():
            u[interrupt] = avoidance_controls(actions[interrupt], dyn)
        for i, s in enumerate(self.status):
            if s != ACTIVE:
                u[i] = 0.0
        return u

    def step(self, actions):
        """Advance one step. Returns (rewards, branches, statuses); inactive agents get None."""
        actions = np.asarray(actions, dtype=int)
        if actions.shape != (self.n,) or np.any((actions < 0) | (actions > 2)):
            raise ValueError(f"expected {self.n} actions in {{0, 1, 2}}, got {actions}")
        was_active = [s == ACTIVE for s in self.status]
        # decision-time safety from ground truth
        true_rel = relative_states(self.state[:, None, :], self.state[None, :, :])
        off = ~np.eye(self.n, dtype=bool)
        min_val = np.full(self.n, np.inf)
        min_dist = np.full(self.n, np.inf)
        vals = np.full((self.n, self.n), np.inf)
        if self.n > 1:
            vals[off] = self.vf.interpolate(true_rel[off])[0]
            dist = np.hypot(true_rel[..., 0], true_rel[..., 1])
            dist[~off] = np.inf
            min_val = vals.min(axis=1)
            min_dist = dist.min(axis=1)
        self.decision_values = vals

        u = self.controls_for(actions)
        self.state = step_states(self.state, u, self.cfg.dynamics)
        self.t += 1

        collided = np.zeros(self.n, dtype=bool)
        if self.n > 1:
            diff = self.state[:, None, :2] - self.state[None, :, :2]
            dist = np.hypot(diff[..., 0], diff[..., 1])
            close = (dist <= self.cfg.d) & off
            collided = close.any(axis=1)
        to_goal = np.hypot(*(self.state[:, :2] - self.goals).T)

        rewards: list = [None] * self.n
        branches: list = [None] * self.n
        for i in range(self.n):
            if not was_active[i]:
                continue
            hit = bool(collided[i])
            fin = (not hit) and to_goal[i] <= self.cfg.goal_tol
            if hit:
                self.status[i] = COLLISION
            elif fin:
                self.status[i] = SUCCESS
            outcome = StepOutcome(collided=hit, finished=fin, min_value=float(min_val[i]),
                                  action=int(actions[i]), min_distance=float(min_dist[i]))
            rewards[i], branches[i] = reward_branch(outcome, self.cfg.reward)
        if self.t >= self.spec.horizon:
            self.status = [TIMEOUT if s == ACTIVE else s for s in self.status]
        if not self.cfg.stop_and_stay:
            # finished agents leave the arena
            for i, s in enumerate(self.status):
                if s == SUCCESS:
                    self.state[i, :2] = 1e3 * (i + 1)
        self.obs = self._observe()
        self.view = make_view(self.obs, self.vf)
        return rewards, branches, list(self.status)


def step_env(env: MultiAgentEnv, actions):
    """Functional wrapper: (next true state, rewards, statuses)."""
    rewards, _, status = env.step(actions)
    return env.state.copy(), rewards, status


# -- traces and metrics ------------------------------------------------------

@dataclass
class EpisodeTrace:
    header: dict
    steps: list = field(default_factory=list)

    @property
    def n_agents(self) -> int:
        return self.header["n_agents"]

    def final_status(self) -> list[str]:
        if not self.steps:
            return list(self.header.get("initial_status", [ACTIVE] * self.n_agents))
        return [a["status"] for a in self.steps[-1]["agents"]]

    def to_lines(self) -> list[str]:
        lines = [json.dumps({"type": "episode", **self.header}, sort_keys=True)]
        lines += [json.dumps({"type": "step", **s}, sort_keys=True) for s in self.steps]
        return lines

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n")

    @classmethod
    def from_lines(cls, lines, source: str = "<trace>") -> "EpisodeTrace":
        header = None
        steps = []
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"{source}:{lineno}: invalid JSON ({exc.msg})") from exc
            kind = rec.pop("type", None) if isinstance(rec, dict) else None
            if kind == "episode" and header is None:
                header = rec
            elif kind == "step" and header is not None:
                if "agents" not in rec or len(rec["agents"]) != header.get("n_agents"):
                    raise TraceFormatError(f"{source}:{lineno}: step record has wrong agent count")
                for a in rec["agents"]:
                    pose = a.get("pose") if isinstance(a, dict) else None
                    if (not isinstance(pose, list) or len(pose) != 3
                            or not all(isinstance(v, (int, float)) for v in pose)
                            or a.get("status") not in (ACTIVE,) + TERMINAL):
                        raise TraceFormatError(f"{source}:{lineno}: malformed agent record")
                steps.append(rec)
            else:
                raise TraceFormatError(f"{source}:{lineno}: unexpected record type {kind!r}")
        if header is None:
            raise TraceFormatError(f"{source}: missing episode header")
        return cls(header=header, steps=steps)

    @classmethod
    def read(cls, path) -> "EpisodeTrace":
        with open(path) as fh:
            return cls.from_lines(fh.read().splitlines(), source=str(path))


class TraceFormatError(ValueError):
    pass


def success_rate(traces, agents=None) -> float:
    """Fraction of non-frozen agent-episodes ending in success.

    ``agents`` optionally restricts the count to the given agent indices.
    """
    traces = list(traces)
    if not traces:
        raise ValueError("success_rate needs at least one trace")
    succ = total = 0
    for tr in traces:
        for i, s in enumerate(_statuses(tr)):
            if s == FROZEN or (agents is not None and i not in agents):
                continue
            total += 1
            succ += s == SUCCESS
    return succ / total if total else float("nan")


def restrictiveness_factor(traces) -> float:
    """Fraction of supervisor decisions that interrupted the default controller."""
    inter = total = 0
    for tr in traces:
        for act in _actions(tr):
            total += 1
            inter += act != 0
    return inter / total if total else 0.0


def _statuses(tr):
    if isinstance(tr, EpisodeTrace):
        return tr.final_status()
    return list(tr["status"] if isinstance(tr, dict) else tr)


def _actions(tr):
    if isinstance(tr, EpisodeTrace):
        for s in tr.steps:
            for a in s["agents"]:
                if a["action"] is not None:
                    yield a["action"]
    elif isinstance(tr, dict):
        yield from tr["actions"]
    else:
        yield from tr
