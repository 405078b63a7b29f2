import numpy as np
import pytest

from hjshield.nn import (
    Adam,
    CheckpointError,
    NonFiniteError,
    ParameterSet,
    Tape,
    Tensor,
    categorical,
    categorical_head,
    categorical_kl,
    kl_diag_gaussian_vs_standard,
    linear,
    load_checkpoint,
    lstm_cell,
    reparameterized_sample,
    save_checkpoint,
    softmax,
)
from hjshield.nn import tensor as T
from oracles import gradient_errors

TOL = 1e-4


def test_lstm_zero_parameters_give_zero_state():
    B, n, H = 3, 4, 5
    h, c = lstm_cell(np.ones((B, n)), np.zeros((B, H)), np.zeros((B, H)),
                     Tensor(np.zeros((n, 4 * H))), Tensor(np.zeros((H, 4 * H))), Tensor(np.zeros(4 * H)))
    assert np.array_equal(h.data, np.zeros((B, H))) and np.array_equal(c.data, np.zeros((B, H)))


def test_lstm_saturated_forget_gate_keeps_cell(rng):
    H = 4
    b = np.zeros(4 * H)
    b[H:2 * H] = 100.0
    b[0:H] = -100.0  # input gate closed
    c_prev = rng.standard_normal((2, H))
    _, c = lstm_cell(rng.standard_normal((2, 3)), rng.standard_normal((2, H)), c_prev,
                     Tensor(np.zeros((3, 4 * H))), Tensor(np.zeros((H, 4 * H))), Tensor(b))
    assert np.allclose(c.data, c_prev, atol=1e-12)


def test_lstm_shape_mismatch():
    with pytest.raises(ValueError):
        lstm_cell(np.ones((2, 3)), np.zeros((2, 4)), np.zeros((2, 4)),
                  Tensor(np.zeros((3, 8))), Tensor(np.zeros((4, 16))), Tensor(np.zeros(16)))


@pytest.mark.parametrize("seed", range(10))
def test_lstm_gradients(seed):
    rng = np.random.default_rng(seed)
    B, n, H = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4)
    arrays = [rng.standard_normal((B, n)), rng.standard_normal((B, H)), rng.standard_normal((B, H)),
              0.5 * rng.standard_normal((n, 4 * H)), 0.5 * rng.standard_normal((H, 4 * H)),
              0.5 * rng.standard_normal(4 * H)]
    w = rng.standard_normal((B, H))

    def build(x, h, c, Wx, Wh, b):
        h1, c1 = lstm_cell(x, h, c, Wx, Wh, b)
        h2, c2 = lstm_cell(x, h1, c1, Wx, Wh, b)
        return (h2 * w).sum() + (c2 * c2).sum()

    assert max(gradient_errors(build, arrays)) < TOL


def test_reparameterized_sample_cases(rng):
    mu = rng.standard_normal(5)
    eps = rng.standard_normal(5)
    assert np.allclose(reparameterized_sample(mu, np.full(5, -100.0), eps).data, mu)
    assert np.array_equal(reparameterized_sample(np.zeros(5), np.zeros(5), eps).data, eps)


def test_reparameterized_sample_monte_carlo(rng):
    n = 100_000
    mu, log_var = 0.7, np.log(2.0)
    z = reparameterized_sample(np.full(n, mu), np.full(n, log_var), rng.standard_normal(n)).data
    assert abs(z.mean() - mu) < 3 * np.sqrt(2.0) / np.sqrt(n)


@pytest.mark.parametrize("seed", range(10))
def test_reparameterized_gradients(seed):
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
    eps = rng.standard_normal(shape)
    w = rng.standard_normal(shape)
    arrays = [rng.standard_normal(shape), 0.5 * rng.standard_normal(shape)]
    assert max(gradient_errors(lambda m, lv: (reparameterized_sample(m, lv, eps) * w).sum(), arrays)) < TOL


@pytest.mark.parametrize("mu, lv, expected", [(0.0, 0.0, 0.0), (1.0, 0.0, 0.5),
                                              (0.0, np.log(4.0), 0.5 * (4 - 1 - np.log(4.0)))])
def test_kl_closed_form(mu, lv, expected):
    assert float(kl_diag_gaussian_vs_standard(np.array([[mu]]), np.array([[lv]])).data[0]) == pytest.approx(expected, abs=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_kl_gradients(seed):
    rng = np.random.default_rng(seed)
    shape = (2, int(rng.integers(1, 6)))
    arrays = [rng.standard_normal(shape), rng.standard_normal(shape)]
    assert max(gradient_errors(lambda m, lv: kl_diag_gaussian_vs_standard(m, lv).sum(), arrays)) < TOL


def test_categorical_cases(rng):
    probs, a, lp, ent = categorical_head(np.zeros(3), rng)
    assert np.allclose(probs, 1 / 3) and float(ent.data[0]) == pytest.approx(np.log(3))
    probs, *_ = categorical_head(np.array([100.0, 0.0, 0.0]), rng)
    assert probs[0, 0] == pytest.approx(1.0) and probs[0, 1] < 1e-40
    p = softmax(Tensor(rng.standard_normal((50, 3)) * 5)).data
    assert np.all(p >= 0) and np.allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_categorical_sampling_frequencies():
    logits = np.log(np.array([[0.2, 0.5, 0.3]]))
    dist = categorical(np.repeat(logits, 20000, axis=0))
    counts = np.bincount(dist.sample(np.random.default_rng(0)), minlength=3) / 20000
    assert np.allclose(counts, [0.2, 0.5, 0.3], atol=0.015)


@pytest.mark.parametrize("seed", range(10))
def test_categorical_gradients(seed):
    rng = np.random.default_rng(seed)
    B = int(rng.integers(1, 5))
    acts = rng.integers(0, 3, B)
    w = rng.standard_normal(B)
    old = np.log(rng.dirichlet(np.ones(3), B))

    def build(logits):
        d = categorical(logits)
        return (d.log_prob(acts) * w).sum() + d.entropy().sum() + categorical_kl(old, d.log_probs).sum()

    assert max(gradient_errors(build, [rng.standard_normal((B, 3))])) < TOL


@pytest.mark.parametrize("seed", range(5))
def test_elementwise_op_gradients(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.5, 2.0, (3, 4))
    b = rng.uniform(0.5, 2.0, (3, 4))
    W = rng.standard_normal((4, 2))
    bias = rng.standard_normal(2)

    def build(a, b, W, bias):
        x = T.tanh(a) * T.sigmoid(b) + T.log(a) / b - T.exp(b * 0.1)
        y = T.minimum(x, b) + T.clip(a, 0.8, 1.5) + T.square(a - b)
        z = linear(y, W, bias)
        return z.sum() + T.concat([z, z * 2.0], axis=1).mean() + T.stack([a, b]).sum()

    assert max(gradient_errors(build, [a, b, W, bias])) < TOL


def test_disconnected_parameter_gets_zero_gradient():
    ps = ParameterSet(0)
    a = ps.add("a", np.ones(3))
    ps.add("b", np.ones(2))
    ps.zero_grad()
    with Tape() as tape:
        tape.backward((a * 2.0).sum())
    assert np.array_equal(ps.grad("b"), np.zeros(2))
    assert np.array_equal(ps.grad("a"), np.full(3, 2.0))


def test_gradients_accumulate_across_uses():
    x = Tensor(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        tape.backward((x * x + x).sum())
    assert x.grad[0] == pytest.approx(7.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_values_trip_error():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0, np.nan]))
    with pytest.raises(NonFiniteError):
        T.log(Tensor(np.array([0.0])))


def test_adam_minimizes_quadratic():
    ps = ParameterSet(0)
    x = ps.add("x", np.array([3.0, -2.0]))
    opt = Adam(ps, lr=0.1)
    for _ in range(300):
        ps.zero_grad()
        with Tape() as tape:
            tape.backward(T.square(x - np.array([1.0, 1.0])).sum())
        opt.step()
    assert np.allclose(x.data, [1.0, 1.0], atol=1e-3)


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"a/W": rng.standard_normal((3, 4)), "b": rng.standard_normal(5), "s": np.array(2.5)}
    save_checkpoint(tmp_path / "c.bin", tensors, {"latent": 4, "name": "x"})
    back, manifest = load_checkpoint(tmp_path / "c.bin")
    assert manifest == {"latent": 4, "name": "x"}
    assert set(back) == set(tensors)
    assert all(np.array_equal(back[k], tensors[k]) for k in tensors)
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.bin")


def test_seeded_initialization_is_deterministic():
    from hjshield.learner import PPOConfig, ShieldModel, VAEConfig
    a = ShieldModel(VAEConfig(latent_dim=3, hidden=4, decoder_hidden=4), PPOConfig(), seed=5).state_dict()
    b = ShieldModel(VAEConfig(latent_dim=3, hidden=4, decoder_hidden=4), PPOConfig(), seed=5).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_truncated_checkpoint_is_reported(tmp_path, rng):
    save_checkpoint(tmp_path / "c.bin", {"w": rng.standard_normal(10)}, {})
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-7])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.bin")
