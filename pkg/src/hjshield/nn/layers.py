"""Layer functions used by the encoder, policy and critic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, exp, log_softmax, matmul, mul, pick, sigmoid, tanh, tsum


def orthogonal(rng: np.random.Generator, n_rows: int, n_cols: int, gain: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((max(n_rows, n_cols), min(n_rows, n_cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_rows < n_cols:
        q = q.T
    return gain * q[:n_rows, :n_cols]


def scaled_uniform(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))


def linear(x, W: Tensor, b: Tensor) -> Tensor:
    return matmul(x, W) + b


def lstm_cell(x, h_prev, c_prev, W_x: Tensor, W_h: Tensor, b: Tensor):
    """One LSTM step; gate blocks in ``W_x``, ``W_h``, ``b`` are ordered (i, f, g, o).

    Shapes: x (B, n_in), h/c (B, H), W_x (n_in, 4H), W_h (H, 4H), b (4H,).
    """
    x, h_prev, c_prev = as_tensor(x), as_tensor(h_prev), as_tensor(c_prev)
    H = h_prev.shape[-1]
    if W_x.shape != (x.shape[-1], 4 * H) or W_h.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ValueError(
            f"lstm_cell shape mismatch: x {x.shape}, h {h_prev.shape}, "
            f"W_x {W_x.shape}, W_h {W_h.shape}, b {b.shape}"
        )
    z = matmul(x, W_x) + matmul(h_prev, W_h) + b
    i = sigmoid(z[:, 0:H])
    f = sigmoid(z[:, H:2 * H])
    g = tanh(z[:, 2 * H:3 * H])
    o = sigmoid(z[:, 3 * H:4 * H])
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, c


def init_lstm(rng, n_in: int, hidden: int) -> dict[str, np.ndarray]:
    W_x = np.concatenate([scaled_uniform(rng, n_in, hidden) for _ in range(4)], axis=1)
    W_h = np.concatenate([orthogonal(rng, hidden, hidden) for _ in range(4)], axis=1)
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate
    return {"W_x": W_x, "W_h": W_h, "b": b}


def init_linear(rng, n_in: int, n_out: int, gain: float = 1.0) -> dict[str, np.ndarray]:
    return {"W": gain * scaled_uniform(rng, n_in, n_out), "b": np.zeros(n_out)}


def reparameterized_sample(mu, log_var, eps) -> Tensor:
    """``mu + exp(log_var / 2) * eps``; ``eps`` is fixed standard-normal noise."""
    mu, log_var = as_tensor(mu), as_tensor(log_var)
    if mu.shape != log_var.shape:
        raise ValueError("mu and log_var must have the same shape")
    return mu + mul(exp(log_var * 0.5), np.asarray(eps, dtype=float))


def sample_gaussian(mu, log_var, rng: np.random.Generator) -> Tensor:
    return reparameterized_sample(mu, log_var, rng.standard_normal(as_tensor(mu).shape))


def kl_diag_gaussian_vs_standard(mu, log_var) -> Tensor:
    """KL(N(mu, diag(exp(log_var))) || N(0, I)), summed over the last axis."""
    mu, log_var = as_tensor(mu), as_tensor(log_var)
    return tsum(exp(log_var) + mu * mu - 1.0 - log_var, axis=-1) * 0.5


@dataclass
class Categorical:
    logits: Tensor
    log_probs: Tensor

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)

    def log_prob(self, actions) -> Tensor:
        return pick(self.log_probs, actions)

    def entropy(self) -> Tensor:
        return -tsum(exp(self.log_probs) * self.log_probs, axis=-1)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        p = self.probs
        u = rng.random(p.shape[0])[:, None]
        # inverse-CDF draw; clamp guards against cumsum ending a hair below 1
        return np.minimum((u > np.cumsum(p, axis=1)).sum(axis=1), p.shape[1] - 1)

    def argmax(self) -> np.ndarray:
        return np.argmax(self.log_probs.data, axis=1)


def categorical(logits) -> Categorical:
    logits = as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    return Categorical(logits, log_softmax(logits, axis=-1))


def categorical_head(logits, rng: np.random.Generator | None = None, actions=None):
    """Softmax probabilities, a temperature-1 sample, its log-probability and the entropy.

    Pass ``actions`` to score given actions instead of sampling.
    """
    dist = categorical(logits)
    if actions is None:
        rng = rng if rng is not None else np.random.default_rng()
        actions = dist.sample(rng)
    actions = np.asarray(actions, dtype=np.intp)
    return dist.probs, actions, dist.log_prob(actions), dist.entropy()


def categorical_kl(old_log_probs, new_log_probs) -> Tensor:
    """KL(old || new) per row for two log-probability tables."""
    old = as_tensor(old_log_probs)
    new = as_tensor(new_log_probs)
    return tsum(exp(old) * (old - new), axis=-1)
