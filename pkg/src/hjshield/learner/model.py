"""LSTM-VAE observation encoder plus the policy and critic heads.

Observation frames are stored newest-first, each as a sequence of neighbour
feature rows in ascending safety-value order. The encoder consumes each
sequence reversed, so the most critical neighbour is the last input the
LSTM sees.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..env import N_FEATURES
from ..nn import (
    ParameterSet,
    Tensor,
    categorical,
    init_linear,
    init_lstm,
    kl_diag_gaussian_vs_standard,
    linear,
    lstm_cell,
    reparameterized_sample,
    tanh,
)
from ..nn import tensor as T

N_ACTIONS = 3
# Stand-in sequence for an agent with no neighbours: far away, maximally safe.
NO_NEIGHBOR_TOKEN = np.array([0.0, 0.0, 0.0, 1.0, 5.0])
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class VAEConfig:
    latent_dim: int = 16
    hidden: int = 64
    decoder_hidden: int = 64
    history: int = 4
    max_neighbors: int | None = None
    recon_std: float = 0.1

    def __post_init__(self):
        if self.latent_dim < 1 or self.hidden < 1 or self.decoder_hidden < 1:
            raise ValueError("network sizes must be positive")
        if self.recon_std <= 0:
            raise ValueError("recon_std must be positive")
        if self.history < 1:
            raise ValueError("history must be at least 1")

    @property
    def augmented_dim(self) -> int:
        return self.history * self.latent_dim + N_ACTIONS * (self.history - 1)


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    lam: float = 1.0
    clip: float = 0.2
    beta: float = 0.01
    lr_vae: float = 3e-4
    lr_critic: float = 3e-4
    lr_policy: float = 3e-4
    rollout_rounds: int = 5
    heat_up_steps: int = 2000
    epochs: int = 4
    minibatch: int = 256
    buffer_capacity: int = 100_000
    tau: float = 0.005
    policy_hidden: int = 64
    entropy_coef: float = 0.0
    max_grad_norm: float = 1.0
    normalize_advantages: bool = True
    init_default_prob: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.init_default_prob < 1.0:
            raise ValueError("init_default_prob must lie in (0, 1)")
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must lie in (0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")


def prepare_sequences(frames: np.ndarray) -> np.ndarray:
    """(..., K, F) frames in storage order -> (B, K', F) encoder inputs in consumption order."""
    frames = np.asarray(frames, dtype=float)
    if frames.shape[-2] == 0:
        frames = np.broadcast_to(NO_NEIGHBOR_TOKEN, frames.shape[:-2] + (1, N_FEATURES))
    seq = frames.reshape((-1,) + frames.shape[-2:])
    return seq[:, ::-1, :]


def init_mlp(params: ParameterSet, prefix: str, sizes, rng, out_gain=1.0):
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = out_gain if i == len(sizes) - 2 else 1.0
        for k, v in init_linear(rng, a, b, gain).items():
            params.add(f"{prefix}.{i}.{k}", v)


def mlp(params: ParameterSet, prefix: str, x, n_layers: int) -> Tensor:
    for i in range(n_layers):
        x = linear(x, params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"])
        if i < n_layers - 1:
            x = tanh(x)
    return x


class ShieldModel:
    """Parameters phi (VAE), theta (policy), psi (critic) and the target critic."""

    def __init__(self, vae_cfg: VAEConfig, ppo_cfg: PPOConfig, seed: int = 0):
        self.vae_cfg = vae_cfg
        self.ppo_cfg = ppo_cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        H, L, Hd = vae_cfg.hidden, vae_cfg.latent_dim, vae_cfg.decoder_hidden
        self.vae = ParameterSet(seed)
        for k, v in init_lstm(rng, N_FEATURES, H).items():
            self.vae.add(f"enc.{k}", v)
        for name in ("mu", "logvar"):
            for k, v in init_linear(rng, H, L, gain=0.1).items():
                self.vae.add(f"enc_{name}.{k}", v)
        for k, v in init_lstm(rng, L, Hd).items():
            self.vae.add(f"dec.{k}", v)
        for k, v in init_linear(rng, Hd, N_FEATURES).items():
            self.vae.add(f"dec_out.{k}", v)
        P = ppo_cfg.policy_hidden
        Z = vae_cfg.augmented_dim
        self.policy = ParameterSet(seed)
        init_mlp(self.policy, "pi", [Z, P, P, N_ACTIONS], rng, out_gain=0.01)
        # start close to the pass-through supervisor: action 0 gets init_default_prob
        p0 = ppo_cfg.init_default_prob
        self.policy["pi.2.b"].data[0] = np.log(p0 / ((1.0 - p0) / (N_ACTIONS - 1)))
        self.critic = ParameterSet(seed)
        init_mlp(self.critic, "q", [Z, P, P, 1], rng)
        self.target = self.critic.copy()

    # -- VAE -----------------------------------------------------------------
    def encode(self, frames):
        """Return (mu, log_var) tensors for frames (..., K, F) in storage order."""
        seq = prepare_sequences(frames)
        B, K, _ = seq.shape
        H = self.vae_cfg.hidden
        p = self.vae
        h = Tensor(np.zeros((B, H)))
        c = Tensor(np.zeros((B, H)))
        for k in range(K):
            h, c = lstm_cell(seq[:, k, :], h, c, p["enc.W_x"], p["enc.W_h"], p["enc.b"])
        mu = linear(h, p["enc_mu.W"], p["enc_mu.b"])
        log_var = linear(h, p["enc_logvar.W"], p["enc_logvar.b"])
        return mu, log_var

    def decode(self, z, length: int) -> list:
        p = self.vae
        B = z.shape[0]
        Hd = self.vae_cfg.decoder_hidden
        h = Tensor(np.zeros((B, Hd)))
        c = Tensor(np.zeros((B, Hd)))
        outs = []
        for _ in range(length):
            h, c = lstm_cell(z, h, c, p["dec.W_x"], p["dec.W_h"], p["dec.b"])
            outs.append(linear(h, p["dec_out.W"], p["dec_out.b"]))
        return outs

    def elbo_terms(self, frames, eps):
        """Per-sequence reconstruction NLL and KL plus the sampled latents.

        The decoder likelihood is an isotropic Gaussian with standard
        deviation ``recon_std`` around each input feature. ``eps`` is standard-normal noise of shape (B, latent_dim).
        """
        seq = prepare_sequences(frames)
        mu, log_var = self.encode(frames)
        z = reparameterized_sample(mu, log_var, eps)
        outs = self.decode(z, seq.shape[1])
        s = self.vae_cfg.recon_std
        nll = None
        for k, xh in enumerate(outs):
            diff = (xh - seq[:, k, :]) * (1.0 / s)
            term = (diff * diff).sum(axis=-1) * 0.5
            nll = term if nll is None else nll + term
        nll = nll + seq.shape[1] * N_FEATURES * (0.5 * LOG_2PI + np.log(s))
        kl = kl_diag_gaussian_vs_standard(mu, log_var)
        return nll, kl, z, mu

    def elbo_loss(self, frames, eps) -> Tensor:
        """Negated ELBO averaged over all sequences in ``frames``."""
        nll, kl, _, _ = self.elbo_terms(frames, eps)
        return (nll + kl).mean()

    # -- latents -------------------------------------------------------------
    def latents(self, frames, rng: np.random.Generator | None = None) -> np.ndarray:
        """Untracked latents for frames (..., K, F): posterior mean, or a sample when ``rng`` is given."""
        lead = np.shape(frames)[:-2]
        mu, log_var = self.encode(frames)
        z = mu.data
        if rng is not None:
            z = z + np.exp(0.5 * log_var.data) * rng.standard_normal(z.shape)
        return z.reshape(lead + (self.vae_cfg.latent_dim,))

    def augmented(self, z_hist: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """(B, history, L) latents newest-first and (B, history-1) past actions -> (B, Zdim)."""
        z_hist = np.asarray(z_hist, dtype=float)
        B = z_hist.shape[0]
        parts = [z_hist.reshape(B, -1)]
        if self.vae_cfg.history > 1:
            onehot = np.eye(N_ACTIONS)[np.asarray(actions, dtype=int)]
            parts.append(onehot.reshape(B, -1))
        return np.concatenate(parts, axis=1)

    # -- heads ---------------------------------------------------------------
    def policy_logits(self, Z, params: ParameterSet | None = None) -> Tensor:
        return mlp(params or self.policy, "pi", Z, 3)

    def policy_dist(self, Z, params: ParameterSet | None = None):
        return categorical(self.policy_logits(Z, params))

    def value(self, Z, params: ParameterSet | None = None, prefix: str = "q") -> Tensor:
        out = mlp(params or self.critic, prefix, Z, 3)
        return T.reshape(out, (out.shape[0],))

    # -- persistence ---------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for group, ps in (("vae", self.vae), ("policy", self.policy),
                          ("critic", self.critic), ("target", self.target)):
            out.update({f"{group}/{k}": v for k, v in ps.state_dict().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for group, ps in (("vae", self.vae), ("policy", self.policy),
                          ("critic", self.critic), ("target", self.target)):
            pre = f"{group}/"
            ps.load_state_dict({k[len(pre):]: v for k, v in state.items() if k.startswith(pre)})

    def manifest(self) -> dict:
        from dataclasses import asdict

        return {"vae": asdict(self.vae_cfg), "ppo": asdict(self.ppo_cfg), "seed": self.seed}


__all__ = ["VAEConfig", "PPOConfig", "ShieldModel", "prepare_sequences",
           "NO_NEIGHBOR_TOKEN", "N_ACTIONS"]
