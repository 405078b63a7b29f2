from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hjshield.env import EnvConfig, MultiAgentEnv, TaskSpec, build_frame, make_view
from hjshield.learner import (
    PPOConfig,
    ReplayBuffer,
    ShieldModel,
    TrainConfig,
    Trainer,
    TransitionRecord,
    VAEConfig,
    clipped_surrogate,
    critic_loss,
    gae,
    policy_loss,
    prepare_sequences,
)
from hjshield.nn import Tape, Tensor, log_softmax
from oracles import finite_difference, gae_recursion, gradient_errors

TINY_VAE = VAEConfig(latent_dim=3, hidden=4, decoder_hidden=4)
TINY_PPO = PPOConfig(policy_hidden=8, rollout_rounds=1, epochs=1, minibatch=64, heat_up_steps=3)
TOL = 1e-4


# -- advantages and losses ------------------------------------------------------

def test_gae_examples():
    assert np.array_equal(gae([1.0, 1.0], [0.0, 0.0], 1.0, 1.0), [2.0, 1.0])
    assert gae([3.0], [1.0], 0.99, 1.0)[0] == 2.0
    r, v = np.array([1.0, -2.0, 5.0]), np.array([0.5, 0.1, -1.0])
    assert np.array_equal(gae(r, v, 0.0, 1.0), r - v)


def test_gae_matches_recursion_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        r, v = rng.standard_normal(n) * 10, rng.standard_normal(n) * 10
        gamma, lam = rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)
        last = 0.0 if rng.random() < 0.5 else float(rng.standard_normal())
        assert gae(r, v, gamma, lam, last).tolist() == gae_recursion(r.tolist(), v.tolist(), gamma, lam, last)


def test_gae_length_mismatch():
    with pytest.raises(ValueError):
        gae([1.0, 2.0], [0.0], 0.9, 1.0)


def test_clip_hand_cases():
    assert clipped_surrogate(1.5, 1.0, 0.2) == 1.2
    assert clipped_surrogate(0.5, -1.0, 0.2) == -0.8
    assert clipped_surrogate(1.0, 3.0, 0.2) == 3.0


@settings(max_examples=300, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(-100, 100), st.floats(0.01, 0.99))
def test_clip_bound(ratio, adv, eps):
    s = float(clipped_surrogate(ratio, adv, eps))
    assert s <= max((1 + eps) * adv, (1 - eps) * adv, adv) + 1e-12


def test_critic_loss_examples():
    z = Tensor(np.zeros(4))
    assert float(critic_loss(z, np.zeros(4), np.zeros(4), np.zeros(4), 0.99).data) == 0.0
    loss = critic_loss(Tensor(np.zeros(1)), [300.0], [1.0], [1234.0], 0.99)
    assert float(loss.data) == 300.0 ** 2


def test_policy_loss_identity_case():
    rng = np.random.default_rng(1)
    lp = np.log(rng.dirichlet(np.ones(3), 6))
    adv = rng.standard_normal(6)
    acts = rng.integers(0, 3, 6)
    loss, stats = policy_loss(Tensor(lp), lp, acts, adv, 0.2, 0.01)
    assert float(loss.data) == pytest.approx(-adv.mean(), abs=1e-12)
    assert stats["kl"] == pytest.approx(0.0, abs=1e-12) and stats["clip_frac"] == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_critic_and_policy_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    B = int(rng.integers(1, 6))
    r, done, nxt = rng.standard_normal(B), (rng.random(B) < 0.3).astype(float), rng.standard_normal(B)
    assert max(gradient_errors(lambda v: critic_loss(v, r, done, nxt, 0.9), [rng.standard_normal(B)])) < TOL

    old = np.log(rng.dirichlet(np.ones(3), B))
    acts, adv = rng.integers(0, 3, B), rng.standard_normal(B)
    # keep ratios away from the clip kinks where the derivative jumps
    logits = old + rng.uniform(-0.1, 0.1, (B, 3))

    def build(lg):
        return policy_loss(log_softmax(lg), old, acts, adv, 0.5, 0.3, entropy_coef=0.1)[0]

    assert max(gradient_errors(build, [logits])) < TOL


@pytest.mark.parametrize("seed", range(5))
def test_elbo_gradients(seed):
    rng = np.random.default_rng(seed)
    model = ShieldModel(VAEConfig(latent_dim=2, hidden=3, decoder_hidden=3), PPOConfig(policy_hidden=4), seed=seed)
    frames = rng.standard_normal((2, int(rng.integers(1, 4)), 5))
    eps = rng.standard_normal((2, 2))
    model.vae.zero_grad()
    with Tape() as tape:
        tape.backward(model.elbo_loss(frames, eps))
    for k in model.vae.names():
        num = finite_difference(lambda: float(model.elbo_loss(frames, eps).data), model.vae[k].data)
        scale = max(np.abs(num).max(), np.abs(model.vae.grad(k)).max(), 1e-6)
        assert np.abs(num - model.vae.grad(k)).max() / scale < TOL, k


# -- model shapes ---------------------------------------------------------------

@pytest.mark.parametrize("n_agents", range(3, 9))
def test_augmented_latent_size_is_agent_count_free(coarse_vf, n_agents):
    spec = TaskSpec(n_agents=n_agents, scenario="difficult", seed=n_agents)
    env = MultiAgentEnv(spec, EnvConfig(), coarse_vf)
    model = ShieldModel(VAEConfig(), PPOConfig(), seed=0)
    feats = np.stack([build_frame(i, env.view).features() for i in range(n_agents)])
    assert feats.shape == (n_agents, n_agents - 1, 5)
    z = model.latents(feats)
    Z = model.augmented(np.repeat(z[:, None], 4, axis=1), np.zeros((n_agents, 3), dtype=int))
    assert Z.shape == (n_agents, 4 * 16 + 9) == (n_agents, VAEConfig().augmented_dim)


def test_relabeling_neighbors_leaves_latent_unchanged(coarse_vf):
    spec = TaskSpec(n_agents=5, scenario="difficult", seed=3)
    env = MultiAgentEnv(spec, EnvConfig(), coarse_vf, noise=False)
    perm = np.array([0, 3, 1, 4, 2])
    view = make_view(env.obs[perm], coarse_vf)
    model = ShieldModel(TINY_VAE, TINY_PPO, seed=0)
    a = model.latents(build_frame(0, env.view).features()[None])
    b = model.latents(build_frame(0, view).features()[None])
    assert np.allclose(a, b, atol=1e-12)


def test_sequence_is_consumed_most_critical_last():
    frames = np.arange(2 * 3 * 5, dtype=float).reshape(2, 3, 5)
    seq = prepare_sequences(frames)
    assert np.array_equal(seq[:, -1], frames[:, 0])


def test_empty_frame_uses_placeholder():
    model = ShieldModel(TINY_VAE, TINY_PPO, seed=0)
    assert model.latents(np.zeros((2, 0, 5))).shape == (2, 3)


# -- buffers --------------------------------------------------------------------

def _record(task_tag, adv=0.0):
    return TransitionRecord(frames=np.full((2, 1, 5), task_tag), actions=np.zeros(1, int), reward=0.0,
                            terminal=False, log_prob=0.0, advantage=adv)


def test_buffer_rejects_missing_advantage_and_is_bounded():
    buf = ReplayBuffer(3, "a")
    with pytest.raises(ValueError):
        buf.add(_record(0, None))
    buf.extend(_record(k) for k in range(5))
    assert len(buf) == 3
    assert sorted(buf.arrays()["frames"][:, 0, 0, 0]) == [2.0, 3.0, 4.0]


def test_buffer_samples_stay_within_task():
    bufs = [ReplayBuffer(100, "a"), ReplayBuffer(100, "b")]
    for tag, b in enumerate(bufs):
        b.extend(_record(tag) for _ in range(30))
    rng = np.random.default_rng(0)
    for tag, b in enumerate(bufs):
        batch = b.sample(16, rng)
        assert batch["task"] == b.task and np.all(batch["frames"] == tag)


# -- training loop --------------------------------------------------------------

def _trainer(vf, tmp_path=None, tasks=None, ppo=TINY_PPO, rounds=2):
    tasks = tasks or [TaskSpec(n_agents=2, horizon=40)]
    return Trainer(tasks, EnvConfig(), vf, TINY_VAE, ppo,
                   TrainConfig(rounds=rounds, eval_episodes=2, eval_every=1, probe_size=50, seed=3),
                   out_dir=tmp_path)


def test_heat_up_only_changes_encoder(coarse_vf):
    tr = _trainer(coarse_vf, ppo=replace(TINY_PPO, heat_up_steps=10**9))
    before = tr.model.state_dict()
    tr.train()
    after = tr.model.state_dict()
    changed = {k for k in before if not np.array_equal(before[k], after[k])}
    assert changed and all(k.startswith("vae/") for k in changed)
    assert all(r["phase"] == "heatup" for r in tr.log_rows)


def test_minibatches_never_mix_tasks(coarse_vf):
    tasks = [TaskSpec(n_agents=2, horizon=30), TaskSpec(n_agents=3, horizon=30)]
    tr = _trainer(coarse_vf, tasks=tasks, rounds=1)
    seen = []
    orig = tr.update_step

    def spy(batch, joint, old):
        seen.append((batch["task"], batch["frames"].shape[2]))
        return orig(batch, joint, old)

    tr.update_step = spy
    tr.train()
    assert {s for s in seen} == {(tasks[0].label(), 1), (tasks[1].label(), 2)}


def test_training_is_deterministic(coarse_vf):
    a, b = _trainer(coarse_vf), _trainer(coarse_vf)
    a.train()
    b.train()
    assert a.log_csv() == b.log_csv()
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert any(r["phase"] == "joint" for r in a.log_rows)


def test_resume_matches_uninterrupted_run(coarse_vf, tmp_path):
    full = _trainer(coarse_vf, tmp_path / "full")
    full.train()
    part = _trainer(coarse_vf, tmp_path / "part", rounds=1)
    part.train()
    resumed = _trainer(coarse_vf, tmp_path / "part")
    resumed.load()
    resumed.train()
    assert resumed.log_csv() == full.log_csv()
    assert (tmp_path / "part" / "train_log.csv").read_text() == (tmp_path / "full" / "train_log.csv").read_text()


def test_log_reports_wrong_interrupt_penalty(coarse_vf):
    tr = _trainer(coarse_vf, rounds=1)
    row = tr.train()[0]
    assert row["wrong_interrupt_penalty"] == -5.0 * row["wrong_interrupts"]
    assert set(row) >= {"elbo", "eval_success", "eval_restrictiveness", "critic_loss"}
