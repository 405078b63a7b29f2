"""Multi-task training loop: rollouts, advantage estimation, heat-up, joint updates."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..env import ACTIVE, COLLISION, SUCCESS, EnvConfig, TaskSpec, restrictiveness_factor, success_rate
from ..nn import Adam, Tape, load_checkpoint, save_checkpoint
from ..nn import tensor as T
from ..reachability import ValueFunction
from ..reward import NEUTRAL, WRONG_INTERRUPT, DANGER
from ..supervisor import LearnedSupervisor, run_episode
from .buffer import ReplayBuffer, TransitionRecord
from .model import PPOConfig, ShieldModel, VAEConfig
from .ppo import critic_loss, gae, policy_loss

log = logging.getLogger(__name__)

LOG_FIELDS = [
    "round", "update_steps", "phase", "transitions", "elbo", "probe_elbo", "critic_loss",
    "policy_loss", "approx_kl", "mean_reward", "train_success", "train_collisions",
    "interrupt_rate", "wrong_interrupts", "wrong_interrupt_penalty", "danger_steps",
    "eval_success", "eval_restrictiveness",
]


class TrainingDivergence(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 50
    eval_episodes: int = 20
    eval_every: int = 1
    probe_size: int = 1000
    probe_every: int = 10
    seed: int = 0


@dataclass
class TrainState:
    round: int = 0
    update_steps: int = 0
    rng_state: dict = field(default_factory=dict)


def episode_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# -- rollouts -----------------------------------------------------------------

def _windows(frames: np.ndarray, actions: np.ndarray, history: int):
    """Per-step (H+1)-frame and H-action windows, newest first, padded at the start."""
    T_ = len(actions)
    t = np.arange(T_)[:, None]
    fidx = np.clip(t + 1 - np.arange(history + 1)[None, :], 0, None)
    aidx = t - np.arange(history)[None, :]
    acts = np.where(aidx >= 0, actions[np.clip(aidx, 0, None)], 0)
    return frames[fidx], acts


def collect_episode(model: ShieldModel, spec: TaskSpec, cfg: EnvConfig, vf: ValueFunction,
                    rng: np.random.Generator):
    """Roll out one training episode with every agent on the sampling policy.

    Returns per-agent trajectories and the episode trace.
    """
    sup = LearnedSupervisor(model, mode="train", rng=rng)
    rewards: dict[int, list] = {}
    branches: dict[int, list] = {}
    final: dict[int, tuple] = {}

    def on_step(env, active, decisions, rew, br, statuses):
        for i in active:
            rewards.setdefault(i, []).append(rew[i])
            branches.setdefault(i, []).append(br[i])
            if statuses[i] != ACTIVE:
                final[i] = (sup.frame(env, i), statuses[i])

    trace = run_episode(spec, cfg, vf, sup, noise=True, on_step=on_step)
    H = model.vae_cfg.history
    trajs = []
    for i in sorted(rewards):
        last_frame, status = final[i]
        frames = np.stack(sup.frames[i] + [last_frame])
        acts = np.array(sup.actions[i], dtype=int)
        fw, aw = _windows(frames, acts, H)
        trajs.append({
            "agent": i,
            "frames": fw,
            "actions": aw,
            "rewards": np.array(rewards[i], dtype=float),
            "branches": branches[i],
            "log_probs": np.array(sup.log_probs[i]),
            "terminal": status in (SUCCESS, COLLISION),
            "status": status,
        })
    return trajs, trace


def _augmented_pair(model: ShieldModel, frames: np.ndarray, actions: np.ndarray, z=None):
    """Current and next augmented latents for windows (B, H+1, K, F) / (B, H)."""
    B, Hp1 = frames.shape[:2]
    if z is None:
        z = model.latents(frames)
    z = z.reshape(B, Hp1, -1)
    Z = model.augmented(z[:, 1:], actions[:, 1:])
    Zn = model.augmented(z[:, :-1], actions[:, :-1])
    return Z, Zn


def trajectory_advantages(model: ShieldModel, traj: dict, gamma: float, lam: float) -> np.ndarray:
    Z, Zn = _augmented_pair(model, traj["frames"], traj["actions"])
    values = model.value(Z).data
    last = 0.0 if traj["terminal"] else float(model.value(Zn[-1:]).data[0])
    return gae(traj["rewards"], values, gamma, lam, last)


def to_records(traj: dict, adv: np.ndarray) -> list[TransitionRecord]:
    n = len(traj["rewards"])
    return [
        TransitionRecord(
            frames=traj["frames"][t], actions=traj["actions"][t], reward=float(traj["rewards"][t]),
            terminal=bool(traj["terminal"] and t == n - 1), log_prob=float(traj["log_probs"][t]),
            advantage=float(adv[t]),
        )
        for t in range(n)
    ]


# -- trainer ------------------------------------------------------------------

class Trainer:
    def __init__(self, tasks: list[TaskSpec], env_cfg: EnvConfig, vf: ValueFunction,
                 vae_cfg: VAEConfig, ppo_cfg: PPOConfig, train_cfg: TrainConfig,
                 out_dir=None, eval_tasks: list[TaskSpec] | None = None):
        if not tasks:
            raise ValueError("need at least one training task")
        self.tasks = list(tasks)
        self.eval_tasks = list(eval_tasks) if eval_tasks is not None else self.tasks
        self.env_cfg = env_cfg
        self.vf = vf
        self.vae_cfg = vae_cfg
        self.ppo = ppo_cfg
        self.cfg = train_cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.model = ShieldModel(vae_cfg, ppo_cfg, seed=train_cfg.seed)
        self.opt_vae = Adam(self.model.vae, ppo_cfg.lr_vae, max_grad_norm=ppo_cfg.max_grad_norm)
        self.opt_critic = Adam(self.model.critic, ppo_cfg.lr_critic, max_grad_norm=ppo_cfg.max_grad_norm)
        self.opt_policy = Adam(self.model.policy, ppo_cfg.lr_policy, max_grad_norm=ppo_cfg.max_grad_norm)
        self.rng = np.random.default_rng(train_cfg.seed)
        self.state = TrainState()
        self.buffers = [ReplayBuffer(ppo_cfg.buffer_capacity, t.label()) for t in self.tasks]
        self.probe: np.ndarray | None = None
        self.probe_eps: np.ndarray | None = None
        self.log_rows: list[dict] = []
        self.elbo_trace: list[tuple[int, float]] = []

    # -- paths ---------------------------------------------------------------
    @property
    def checkpoint_path(self) -> Path | None:
        return None if self.out_dir is None else self.out_dir / "checkpoint.bin"

    @property
    def log_path(self) -> Path | None:
        return None if self.out_dir is None else self.out_dir / "train_log.csv"

    # -- probe set for the ELBO curve ------------------------------------------
    def _build_probe(self, trajs: list[dict]) -> None:
        frames = np.concatenate([t["frames"][:, 1] for t in trajs])
        # one neighbour count per probe set; keep the most common shape
        n = min(self.cfg.probe_size, len(frames))
        pick = np.random.default_rng(episode_seed(self.cfg.seed, 7)).choice(len(frames), n, replace=False)
        self.probe = frames[np.sort(pick)]
        self.probe_eps = np.random.default_rng(episode_seed(self.cfg.seed, 8)).standard_normal(
            (n, self.vae_cfg.latent_dim))

    def probe_elbo(self) -> float:
        if self.probe is None:
            return float("nan")
        return float(self.model.elbo_loss(self.probe, self.probe_eps).data)

    # -- one round -----------------------------------------------------------
    def collect(self, rnd: int) -> dict:
        stats = {"rewards": [], "statuses": [], "branches": [], "actions": []}
        probe_trajs = []
        for ti, (task, buf) in enumerate(zip(self.tasks, self.buffers)):
            buf.clear()
            for k in range(self.ppo.rollout_rounds):
                spec = task.with_seed(episode_seed(self.cfg.seed, rnd, ti, k))
                trajs, _ = collect_episode(self.model, spec, self.env_cfg, self.vf, self.rng)
                for tr in trajs:
                    adv = trajectory_advantages(self.model, tr, self.ppo.gamma, self.ppo.lam)
                    buf.extend(to_records(tr, adv))
                    stats["rewards"].extend(tr["rewards"].tolist())
                    stats["branches"].extend(tr["branches"])
                    stats["actions"].extend(tr["actions"][:, 0].tolist())
                    stats["statuses"].append(tr["status"])
                if ti == 0:
                    probe_trajs.extend(trajs)
        if self.probe is None and probe_trajs:
            self._build_probe(probe_trajs)
        return stats

    def update_step(self, batch: dict, joint: bool, old_policy) -> dict:
        m = self.model
        frames, actions = batch["frames"], batch["actions"]
        B, Hp1, K, F = frames.shape
        eps = self.rng.standard_normal((B * Hp1, self.vae_cfg.latent_dim))
        out = {}
        m.vae.zero_grad()
        with Tape() as tape:
            nll, kl, z, _ = m.elbo_terms(frames.reshape(B * Hp1, K, F), eps)
            elbo = (nll + kl).mean()
            tape.backward(elbo)
        self.opt_vae.step()
        out["elbo"] = float(elbo.data)
        if not joint:
            return out
        Z, Zn = _augmented_pair(m, frames, actions, z=z.data)
        # critic
        next_v = m.value(Zn, m.target).data
        m.critic.zero_grad()
        with Tape() as tape:
            loss_c = critic_loss(m.value(Z), batch["rewards"], batch["terminals"], next_v, self.ppo.gamma)
            tape.backward(loss_c)
        self.opt_critic.step()
        m.target.polyak_update(m.critic, self.ppo.tau)
        out["critic_loss"] = float(loss_c.data)
        # policy
        adv = batch["advantages"]
        if self.ppo.normalize_advantages and len(adv) > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        old_lp = m.policy_dist(Z, old_policy).log_probs.data
        m.policy.zero_grad()
        with Tape() as tape:
            new_lp = m.policy_dist(Z).log_probs
            loss_p, st = policy_loss(new_lp, old_lp, actions[:, 0], adv, self.ppo.clip,
                                     self.ppo.beta, self.ppo.entropy_coef)
            tape.backward(loss_p)
        self.opt_policy.step()
        out["policy_loss"] = float(loss_p.data)
        out["approx_kl"] = st["kl"]
        return out

    def update(self) -> dict:
        sizes = [len(b) for b in self.buffers if len(b)]
        if not sizes:
            return {}
        n_steps = self.ppo.epochs * math.ceil(max(sizes) / self.ppo.minibatch)
        old_policy = self.model.policy.copy()
        acc: dict[str, list] = {}
        for _ in range(n_steps):
            joint = self.state.update_steps >= self.ppo.heat_up_steps
            for buf in self.buffers:
                if not len(buf):
                    continue
                res = self.update_step(buf.sample(self.ppo.minibatch, self.rng), joint, old_policy)
                for k, v in res.items():
                    acc.setdefault(k, []).append(v)
            if not joint and self.cfg.probe_every and self.state.update_steps % self.cfg.probe_every == 0:
                self.elbo_trace.append((self.state.update_steps, self.probe_elbo()))
            self.state.update_steps += 1
        return {k: float(np.mean(v)) for k, v in acc.items()}

    def eval_traces(self, n_episodes: int | None = None, tasks=None) -> list[list]:
        """Greedy-policy traces per evaluation task; task ``ti`` episode ``e`` is seeded by (seed, 10**6, ti, e)."""
        n_episodes = self.cfg.eval_episodes if n_episodes is None else n_episodes
        out = []
        for ti, task in enumerate(tasks or self.eval_tasks):
            out.append([run_episode(task.with_seed(episode_seed(self.cfg.seed, 10**6, ti, e)),
                                    self.env_cfg, self.vf, LearnedSupervisor(self.model, mode="eval"))
                        for e in range(n_episodes)])
        return out

    def evaluate(self, n_episodes: int | None = None, tasks=None) -> tuple[float, float]:
        traces = [t for per_task in self.eval_traces(n_episodes, tasks) for t in per_task]
        return success_rate(traces), restrictiveness_factor(traces)

    def run_round(self) -> dict:
        rnd = self.state.round
        probe_before = self.probe_elbo() if self.probe is not None else None
        stats = self.collect(rnd)
        if probe_before is None and self.cfg.probe_every:
            self.elbo_trace.append((self.state.update_steps, self.probe_elbo()))
        losses = self.update()
        for k, v in losses.items():
            if not np.isfinite(v):
                raise TrainingDivergence(f"non-finite {k} in round {rnd}")
        branches = stats["branches"]
        wrong = sum(b == WRONG_INTERRUPT for b in branches)
        row = {
            "round": rnd,
            "update_steps": self.state.update_steps,
            "phase": "joint" if self.state.update_steps > self.ppo.heat_up_steps else "heatup",
            "transitions": sum(len(b) for b in self.buffers),
            "elbo": losses.get("elbo", float("nan")),
            "probe_elbo": self.probe_elbo(),
            "critic_loss": losses.get("critic_loss", float("nan")),
            "policy_loss": losses.get("policy_loss", float("nan")),
            "approx_kl": losses.get("approx_kl", float("nan")),
            "mean_reward": float(np.mean(stats["rewards"])) if stats["rewards"] else float("nan"),
            "train_success": float(np.mean([s == SUCCESS for s in stats["statuses"]])),
            "train_collisions": int(sum(s == COLLISION for s in stats["statuses"])),
            "interrupt_rate": float(np.mean(np.array(stats["actions"]) != 0)),
            "wrong_interrupts": int(wrong),
            "wrong_interrupt_penalty": float(wrong * self.env_cfg.reward.wrong_interrupt_penalty),
            "danger_steps": int(sum(b == DANGER for b in branches)),
            "eval_success": float("nan"),
            "eval_restrictiveness": float("nan"),
        }
        if self.cfg.eval_every and (rnd + 1) % self.cfg.eval_every == 0 and self.cfg.eval_episodes:
            row["eval_success"], row["eval_restrictiveness"] = self.evaluate()
        self.state.round += 1
        self.log_rows.append(row)
        return row

    def train(self, rounds: int | None = None, on_round=None) -> list[dict]:
        rounds = self.cfg.rounds if rounds is None else rounds
        while self.state.round < rounds:
            try:
                row = self.run_round()
            except (FloatingPointError, T.NonFiniteError) as exc:
                raise TrainingDivergence(f"training diverged in round {self.state.round}: {exc}") from exc
            self.write_log()
            self.save()
            log.info("round %d: eval success %.3f, reward %.3f", row["round"],
                     row["eval_success"], row["mean_reward"])
            if on_round is not None:
                on_round(row)
        return self.log_rows

    # -- persistence ---------------------------------------------------------
    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.log_rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def write_log(self) -> None:
        if self.log_path is None:
            return
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        self.log_path.write_text(self.log_csv())
        trace = "\n".join(f"{s},{v!r}" for s, v in self.elbo_trace)
        (self.out_dir / "elbo_heatup.csv").write_text("update_step,probe_elbo\n" + trace + "\n")

    def manifest(self) -> dict:
        return {
            "model": self.model.manifest(),
            "train": asdict(self.cfg),
            "tasks": [asdict(t) for t in self.tasks],
            "state": {"round": self.state.round, "update_steps": self.state.update_steps},
            "rng": self.rng.bit_generator.state,
            "log": self.log_rows,
            "elbo_trace": self.elbo_trace,
        }

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"model/{k}": v for k, v in self.model.state_dict().items()}
        out.update(self.opt_vae.state_dict("opt_vae"))
        out.update(self.opt_critic.state_dict("opt_critic"))
        out.update(self.opt_policy.state_dict("opt_policy"))
        if self.probe is not None:
            out["probe/frames"] = self.probe
            out["probe/eps"] = self.probe_eps
        return out

    def save(self, path=None) -> None:
        path = path or self.checkpoint_path
        if path is None:
            return
        save_checkpoint(path, self.tensors(), self.manifest())

    def load(self, path=None) -> None:
        path = path or self.checkpoint_path
        tensors, manifest = load_checkpoint(path)
        if manifest["model"] != self.model.manifest():
            raise ValueError(f"{path}: checkpoint was written with a different model configuration")
        self.model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model/")})
        self.opt_vae.load_state_dict(tensors, "opt_vae")
        self.opt_critic.load_state_dict(tensors, "opt_critic")
        self.opt_policy.load_state_dict(tensors, "opt_policy")
        if "probe/frames" in tensors:
            self.probe = tensors["probe/frames"]
            self.probe_eps = tensors["probe/eps"]
        self.rng.bit_generator.state = manifest["rng"]
        self.state.round = manifest["state"]["round"]
        self.state.update_steps = manifest["state"]["update_steps"]
        self.log_rows = manifest["log"]
        self.elbo_trace = [tuple(x) for x in manifest["elbo_trace"]]


def load_model(path) -> ShieldModel:
    """Rebuild a ShieldModel from a training checkpoint."""
    tensors, manifest = load_checkpoint(path)
    mm = manifest["model"]
    model = ShieldModel(VAEConfig(**mm["vae"]), PPOConfig(**mm["ppo"]), seed=mm["seed"])
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model/")})
    return model
