"""Least-restrictive supervisors and the episode runner.

A supervisor picks, for each agent it owns, one of three actions:
0 keep the default controller, 1 turn right (v_max, +omega_max),
2 turn left (v_max, -omega_max).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dynamics import ControlInput, DynamicsParams
from .env import (
    ACTIVE,
    EnvConfig,
    EpisodeTrace,
    MultiAgentEnv,
    TaskSpec,
    build_frame,
)
from .reachability import ValueFunction, avoidance_argument

DEFAULT, TURN_RIGHT, TURN_LEFT = 0, 1, 2
ACTIONS = (DEFAULT, TURN_RIGHT, TURN_LEFT)
# switching-function band in which a continuing interrupt keeps its turn direction
TURN_DEADBAND = 0.02


@dataclass(frozen=True)
class SupervisionDecision:
    action: int
    min_value: float
    interrupted: bool

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"action must be one of {ACTIONS}, got {self.action}")
        if self.interrupted != (self.action != DEFAULT):
            raise ValueError("interrupted must be true exactly when action != 0")


def decision(action: int, min_value: float) -> SupervisionDecision:
    return SupervisionDecision(int(action), float(min_value), int(action) != DEFAULT)


def action_to_control(action, default: ControlInput, dyn: DynamicsParams | None = None) -> ControlInput:
    """Action 0 passes the default control through; 1/2 are full-speed saturated turns."""
    dyn = dyn or DynamicsParams()
    a = action.action if isinstance(action, SupervisionDecision) else int(action)
    if a == DEFAULT:
        return default
    if a == TURN_RIGHT:
        return ControlInput(dyn.v_max, dyn.omega_max)
    if a == TURN_LEFT:
        return ControlInput(dyn.v_max, -dyn.omega_max)
    raise ValueError(f"action must be one of {ACTIONS}, got {a}")


def avoidance_action(vf: ValueFunction, x) -> int:
    """Discrete avoidance against one neighbour: positive omega -> 1, otherwise 2."""
    return TURN_RIGHT if float(avoidance_argument(vf, np.asarray(x, dtype=float))[0]) > 0 else TURN_LEFT


def classical_supervise(rel: np.ndarray, vf: ValueFunction, threshold: float = 0.0,
                        hysteresis: float = 0.1, interrupting: bool = False,
                        values: np.ndarray | None = None, keep_turn: int | None = None,
                        deadband: float = TURN_DEADBAND) -> SupervisionDecision:
    """Value-threshold rule over the relative states (K, 3) of all other agents.

    Interrupts when the smallest value is at or below ``threshold``, or at or
    below ``threshold + hysteresis`` while already interrupting, steering
    against the single most critical neighbour. ``keep_turn`` (1 or 2), when
    given for a continuing interrupt, is repeated while the switching function
    lies within ``deadband`` of zero; with 0.1 s steps the bang-bang sign
    otherwise flips every step near the switching surface and the pair
    drifts together.
    """
    rel = np.atleast_2d(np.asarray(rel, dtype=float))
    if rel.shape[0] == 0:
        return decision(DEFAULT, np.inf)
    if values is None:
        values, _ = vf.interpolate(rel)
    k = int(np.argmin(values))
    vmin = float(values[k])
    limit = threshold + (hysteresis if interrupting else 0.0)
    if vmin > limit:
        return decision(DEFAULT, vmin)
    arg = float(avoidance_argument(vf, rel[k])[0])
    if interrupting and keep_turn in (TURN_RIGHT, TURN_LEFT) and abs(arg) <= deadband:
        return decision(keep_turn, vmin)
    return decision(TURN_RIGHT if arg > 0 else TURN_LEFT, vmin)


# -- supervisor objects used by the runner ------------------------------------

class Supervisor:
    """Base class: owns some agents of one episode and decides their actions."""

    kind = "base"

    def reset(self, env: MultiAgentEnv) -> None:
        pass

    def decide(self, env: MultiAgentEnv, agents: list[int]) -> dict[int, SupervisionDecision]:
        raise NotImplementedError


class AlwaysDefault(Supervisor):
    kind = "none"

    def decide(self, env, agents):
        return {i: decision(DEFAULT, _min_value(env, i)) for i in agents}


class AlwaysInterrupt(Supervisor):
    """Test baseline: always applies the avoidance turn against the most critical neighbour."""

    kind = "always_interrupt"

    def __init__(self, vf: ValueFunction):
        self.vf = vf

    def decide(self, env, agents):
        out = {}
        for i in agents:
            others = [j for j in range(env.n) if j != i]
            if not others:
                out[i] = decision(TURN_LEFT, np.inf)
                continue
            vals = env.view.values[i, others]
            k = others[int(np.argmin(vals))]
            out[i] = decision(avoidance_action(self.vf, env.view.rel[i, k]), float(vals.min()))
        return out


class ClassicalSupervisor(Supervisor):
    kind = "classical"

    def __init__(self, vf: ValueFunction, threshold: float = 0.0, hysteresis: float = 0.1,
                 deadband: float = TURN_DEADBAND):
        self.vf = vf
        self.threshold = threshold
        self.hysteresis = hysteresis
        self.deadband = deadband
        self.interrupting: dict[int, bool] = {}
        self.last: dict[int, tuple[int, int]] = {}  # agent -> (critical neighbour, turn)

    def reset(self, env):
        self.interrupting = {}
        self.last = {}

    def decide(self, env, agents):
        out = {}
        for i in agents:
            others = [j for j in range(env.n) if j != i]
            vals = env.view.values[i, others]
            critical = others[int(np.argmin(vals))] if others else -1
            prev = self.last.get(i)
            keep = prev[1] if prev is not None and prev[0] == critical else None
            dec = classical_supervise(env.view.rel[i, others], self.vf, self.threshold,
                                      self.hysteresis, self.interrupting.get(i, False),
                                      values=vals, keep_turn=keep, deadband=self.deadband)
            self.interrupting[i] = dec.interrupted
            if dec.interrupted:
                self.last[i] = (critical, dec.action)
            else:
                self.last.pop(i, None)
            out[i] = dec
        return out


class LearnedSupervisor(Supervisor):
    """Policy over the augmented latent built from the encoded observation history.

    ``mode="eval"`` uses posterior means and the argmax action (lowest index
    wins ties); ``mode="train"`` samples both with ``rng``.
    """

    kind = "learned"

    def __init__(self, model, mode: str = "eval", rng: np.random.Generator | None = None,
                 max_neighbors: int | None = None):
        if mode not in ("eval", "train"):
            raise ValueError("mode must be 'eval' or 'train'")
        if mode == "train" and rng is None:
            raise ValueError("training mode needs an rng")
        self.model = model
        self.mode = mode
        self.rng = rng
        self.max_neighbors = max_neighbors if max_neighbors is not None else model.vae_cfg.max_neighbors
        self.reset(None)

    @property
    def history(self) -> int:
        return self.model.vae_cfg.history

    def reset(self, env):
        self.frames: dict[int, list] = {}
        self.latents: dict[int, list] = {}
        self.actions: dict[int, list] = {}
        self.log_probs: dict[int, list] = {}

    def frame(self, env, i) -> np.ndarray:
        return build_frame(i, env.view, self.max_neighbors).features()

    def decide(self, env, agents):
        if not agents:
            return {}
        feats = np.stack([self.frame(env, i) for i in agents])
        z = self.model.latents(feats, self.rng if self.mode == "train" else None)
        H = self.history
        z_hist, a_hist = [], []
        for row, i in enumerate(agents):
            self.frames.setdefault(i, []).append(feats[row])
            lat = self.latents.setdefault(i, [])
            lat.append(z[row])
            window = lat[::-1][:H]
            window += [window[-1]] * (H - len(window))
            z_hist.append(np.stack(window))
            past = self.actions.setdefault(i, [])[::-1][:H - 1]
            a_hist.append(past + [DEFAULT] * (H - 1 - len(past)))
        Z = self.model.augmented(np.stack(z_hist), np.array(a_hist, dtype=int).reshape(len(agents), H - 1))
        dist = self.model.policy_dist(Z)
        acts = dist.sample(self.rng) if self.mode == "train" else dist.argmax()
        logp = dist.log_probs.data[np.arange(len(agents)), acts]
        out = {}
        for row, i in enumerate(agents):
            self.actions[i].append(int(acts[row]))
            self.log_probs.setdefault(i, []).append(float(logp[row]))
            out[i] = decision(int(acts[row]), _min_value(env, i))
        return out


def _min_value(env, i) -> float:
    row = env.view.values[i]
    return float(np.min(row)) if env.n > 1 else float("inf")


# -- episode runner -----------------------------------------------------------

def _json_float(x: float):
    return None if not np.isfinite(x) else float(x)


def run_episode(spec: TaskSpec, cfg: EnvConfig, vf: ValueFunction, supervisors,
                noise: bool = True, on_step=None) -> EpisodeTrace:
    """Run one episode; ``supervisors`` is one Supervisor or a per-agent list.

    ``on_step(env, active, decisions, rewards, branches, statuses)`` is
    invoked after every environment step.
    """
    env = MultiAgentEnv(spec, cfg, vf, noise=noise)
    if isinstance(supervisors, Supervisor):
        supervisors = [supervisors] * env.n
    if len(supervisors) != env.n:
        raise ValueError(f"need {env.n} supervisors, got {len(supervisors)}")
    unique = list({id(s): s for s in supervisors}.values())
    for s in unique:
        s.reset(env)
    header = {
        "n_agents": env.n,
        "task": asdict(spec),
        "start": env.state.round(12).tolist(),
        "goals": env.goals.round(12).tolist(),
        "supervisors": [s.kind for s in supervisors],
        "d": cfg.d,
        "initial_status": list(env.status),
    }
    trace = EpisodeTrace(header=header)
    while not env.done:
        active = env.active()
        decisions: dict[int, SupervisionDecision] = {}
        for s in unique:
            mine = [i for i in active if supervisors[i] is s]
            if mine:
                decisions.update(s.decide(env, mine))
        actions = np.array([decisions[i].action if i in decisions else 0 for i in range(env.n)])
        rewards, branches, statuses = env.step(actions)
        agents = []
        for i in range(env.n):
            acted = i in decisions
            agents.append({
                "pose": env.state[i].tolist(),
                "action": int(actions[i]) if acted else None,
                "interrupt": bool(acted and actions[i] != 0),
                "reward": rewards[i],
                "branch": branches[i],
                "status": statuses[i],
            })
        vals = env.decision_values
        trace.steps.append({
            "t": env.t,
            "agents": agents,
            "values": [[_json_float(v) for v in row] for row in vals.tolist()],
        })
        if on_step is not None:
            on_step(env, active, decisions, rewards, branches, statuses)
    return trace


def make_supervisors(n: int, kind: str, vf: ValueFunction, adopters: int | None = None,
                     model=None, threshold: float = 0.0, hysteresis: float = 0.1):
    """Per-agent supervisor list; the first ``adopters`` agents use ``kind``, the rest run default."""
    if kind == "classical":
        sup = ClassicalSupervisor(vf, threshold, hysteresis)
    elif kind == "learned":
        if model is None:
            raise ValueError("learned supervisor needs a trained model")
        sup = LearnedSupervisor(model, mode="eval")
    elif kind == "none":
        sup = AlwaysDefault()
    elif kind == "always_interrupt":
        sup = AlwaysInterrupt(vf)
    else:
        raise ValueError(f"unknown supervisor {kind!r}")
    k = n if adopters is None else adopters
    if not 0 <= k <= n:
        raise ValueError(f"adopters must lie in [0, {n}]")
    rest = AlwaysDefault()
    return [sup if i < k else rest for i in range(n)]


__all__ = [
    "SupervisionDecision", "action_to_control", "classical_supervise", "avoidance_action",
    "Supervisor", "AlwaysDefault", "AlwaysInterrupt", "ClassicalSupervisor", "LearnedSupervisor",
    "run_episode", "make_supervisors", "ACTIVE", "DEFAULT", "TURN_RIGHT", "TURN_LEFT",
]
