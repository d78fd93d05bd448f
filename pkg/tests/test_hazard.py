import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cnsc.errors import DomainError
from cnsc.hazard import MonotoneNet, survival_from_hazard
from cnsc.nn import MLP, seeded_rng


def random_net(seed, latent=4, hidden=(6, 6)):
    rng = seeded_rng(seed, 31)
    net = MonotoneNet.build(latent, list(hidden), rng)
    for layer in net.mlp.layers:
        layer.weight[...] = rng.normal(0, 0.8, layer.weight.shape)
        layer.bias[...] = rng.normal(0, 0.5, layer.bias.shape)
    return net, rng.normal(size=latent)


def zero_net(latent=3, hidden=(5,)):
    net = MonotoneNet.build(latent, list(hidden), seeded_rng(0))
    for layer in net.mlp.layers:
        layer.weight[...] = 0.0
        layer.bias[...] = 0.0
    return net


def test_requires_squared_weights():
    with pytest.raises(ValueError):
        MonotoneNet(MLP.build([4, 5, 2], seeded_rng(0)))


def test_zero_at_time_zero():
    net, lat = random_net(0)
    assert np.array_equal(net.cumulative_hazard(lat, [0.0]), np.zeros((1, 2)))


def test_lambda_at_zero_is_m():
    net, lat = random_net(1)
    out = net.mlp(np.append(lat, 0.0))
    np.testing.assert_allclose(net.instantaneous_hazard(lat, [0.0])[0], np.logaddexp(0, out), rtol=1e-15)


def test_zero_weights_give_log2():
    net = zero_net()
    t = np.linspace(0, 5, 11)
    Lambda, lam = net.evaluate(np.ones(3), t)
    np.testing.assert_allclose(Lambda, np.outer(t, [np.log(2), np.log(2)]), rtol=1e-15)
    np.testing.assert_allclose(lam, np.log(2), rtol=1e-15)


def test_effective_weights_non_negative():
    net, _ = random_net(2)
    assert all(np.all(net.mlp.effective_weight(l) >= 0) for l in net.mlp.layers)


@pytest.mark.parametrize("seed", range(100))
def test_monotone_on_grid(seed):
    net, lat = random_net(seed, hidden=(5,) * (1 + seed % 3))
    grid = np.linspace(0.0, 3.0, 101)
    Lambda, lam = net.evaluate(lat, grid)
    assert np.all(np.diff(Lambda, axis=0) >= 0)
    assert np.all(Lambda >= 0) and np.all(lam >= 0)


@pytest.mark.parametrize("seed", range(20))
def test_lambda_matches_fd_of_Lambda(seed):
    net, lat = random_net(seed)
    t = np.linspace(0.01, 2.0, 25)
    h = 1e-6
    fd = (net.cumulative_hazard(lat, t + h) - net.cumulative_hazard(lat, t - h)) / (2 * h)
    lam = net.instantaneous_hazard(lat, t)
    assert np.max(np.abs(lam - fd) / np.abs(fd)) < 1e-4


@given(st.lists(st.floats(0, 10), min_size=2, max_size=20), st.integers(0, 50))
def test_monotone_any_points(times, seed):
    net, lat = random_net(seed)
    t = np.sort(np.array(times))
    Lambda = net.cumulative_hazard(lat, t)
    assert np.all(np.diff(Lambda, axis=0) >= 0)


def test_negative_time_rejected():
    net, lat = random_net(0)
    with pytest.raises(DomainError):
        net.evaluate(lat, [-0.1])


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_fd(seed):
    net, _ = random_net(seed, latent=3, hidden=(4, 4))
    rng = seeded_rng(seed, 32)
    lat = rng.normal(size=(6, 3))
    t = rng.uniform(0, 2, 6)
    gL, gl = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))

    def loss():
        Lambda, lam = net.evaluate(lat, t)
        return np.sum(gL * Lambda) + np.sum(gl * lam)

    _, _, tape = net.evaluate(lat, t, record=True)
    grads, g_lat = net.backward(tape, gL, gl)
    h = 1e-6
    flat = [g for pair in grads for g in pair] + [g_lat]
    arrays = list(net.parameters().values()) + [lat]
    for g, p in zip(flat, arrays):
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            fp = loss()
            p[idx] = old - h
            fm = loss()
            p[idx] = old
            fd[idx] = (fp - fm) / (2 * h)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5


def test_hazard_pair_fields():
    net, lat = random_net(3)
    pair = net.hazard_pair(lat, [0.0, 1.0])
    assert pair.Lambda0[0] == 0 and pair.Lambda1[0] == 0
    assert np.all(pair.lambda0 > 0) and np.all(pair.lambda1 > 0)


class TestSurvivalFromHazard:
    def test_zero(self):
        assert survival_from_hazard(0.0) == 1.0

    def test_log2(self):
        assert survival_from_hazard(np.log(2)) == pytest.approx(0.5, rel=1e-15)

    def test_large_against_extended_precision(self):
        got = float(survival_from_hazard(50.0))
        ref = float(mpmath.exp(-50))
        assert got > 0 and abs(got - ref) / ref < 1e-15

    def test_negative_rejected(self):
        with pytest.raises(DomainError):
            survival_from_hazard(-1e-3)
