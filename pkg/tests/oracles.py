"""Independent reference computations used only by the tests."""

import numpy as np


def _rel_rhs(x, wi, wj, v):
    px, py, th = x[:, 0], x[:, 1], x[:, 2]
    return np.stack([-v + v * np.cos(th) + wi * py, v * np.sin(th) - wi * px, wj - wi], axis=1)


def _rk4(x, wi, wj, v, dt):
    k1 = _rel_rhs(x, wi, wj, v)
    k2 = _rel_rhs(x + 0.5 * dt * k1, wi, wj, v)
    k3 = _rel_rhs(x + 0.5 * dt * k2, wi, wj, v)
    k4 = _rel_rhs(x + dt * k3, wi, wj, v)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def game_tree_value(x0, v, wmax, d, horizon=3.0, dt=0.1, stages=5, levels=3):
    """Brute-force discretized max-min value of the pursuit-evasion game.

    Both players pick a constant turn rate from ``levels`` values in
    [-wmax, wmax] for each of ``stages`` equal segments of the horizon; at
    every stage the ego commits first and the other player responds. Payoff
    is the minimum over the trajectory of (planar distance - d).
    """
    controls = np.linspace(-wmax, wmax, levels)
    steps = int(round(horizon / dt / stages))
    x = np.asarray(x0, dtype=float)[None, :]
    running = np.hypot(x[:, 0], x[:, 1]) - d
    pairs = np.array([(a, b) for a in controls for b in controls])
    for _ in range(stages):
        n = len(x)
        x = np.repeat(x, len(pairs), axis=0)
        running = np.repeat(running, len(pairs))
        wi = np.tile(pairs[:, 0], n)
        wj = np.tile(pairs[:, 1], n)
        for _ in range(steps):
            x = _rk4(x, wi, wj, v, dt)
            running = np.minimum(running, np.hypot(x[:, 0], x[:, 1]) - d)
    vals = running.reshape((levels, levels) * stages)
    for _ in range(stages):
        vals = vals.min(axis=-1).max(axis=-1)
    return float(vals)


def gae_recursion(rewards, values, gamma, lam, last_value=0.0):
    """Plain-Python backward recursion for generalized advantages."""
    n = len(rewards)
    adv = [0.0] * n
    running = 0.0
    for t in range(n - 1, -1, -1):
        nxt = values[t + 1] if t + 1 < n else last_value
        delta = rewards[t] + gamma * nxt - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv


def finite_difference(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` w.r.t. array ``x`` (modified in place, restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def gradient_errors(build, arrays, eps=1e-5):
    """Relative error between tape gradients and central differences.

    ``build(*tensors)`` returns a scalar Tensor; ``arrays`` are the leaf
    values. Returns one relative error per leaf.
    """
    from hjshield.nn import Tape, Tensor

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = build(*leaves)
        tape.backward(out)
    analytic = [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]
    errs = []
    for k, a in enumerate(arrays):
        work = [x.copy() for x in arrays]

        def f():
            return float(build(*[Tensor(x) for x in work]).data)

        num = finite_difference(f, work[k], eps)
        scale = max(np.abs(num).max(), np.abs(analytic[k]).max(), 1e-6)
        errs.append(float(np.abs(num - analytic[k]).max() / scale))
    return errs
