import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from otp_safe_rl import nn
from otp_safe_rl.nn import (COV_FLOOR, Adam, GaussianPolicy, Mlp, NetworkError, TargetCopy,
                            ema_update, gradient_check, load_checkpoint, save_checkpoint)


def _reference_forward(net, x):
    # straight-line re-evaluation with plain loops over layers
    h = np.atleast_2d(x)
    for i in range(net.n_layers):
        W, b = net.param(f"W{i}"), net.param(f"b{i}")
        z = np.einsum("bi,ij->bj", h, W) + b
        if i == net.n_layers - 1:
            h = z
        elif i == 0 and net.layer_norm:
            mu = z.mean(axis=1, keepdims=True)
            var = ((z - mu) ** 2).mean(axis=1, keepdims=True)
            h = np.tanh((z - mu) / np.sqrt(var + nn.LN_EPS) * net.param("ln_g")
                        + net.param("ln_b"))
        else:
            h = np.where(z > 0, z, np.exp(np.minimum(z, 0)) - 1)
    return h


def test_zero_last_layer_outputs_zero():
    net = Mlp([3, 8, 2], rng=np.random.default_rng(0), zero_last=True)
    x = np.random.default_rng(1).normal(size=(5, 3)) * 10
    assert np.array_equal(net.forward(x), np.zeros((5, 2)))


def test_single_linear_layer():
    rng = np.random.default_rng(0)
    net = Mlp([3, 2], rng=rng)
    net.param("b0")[:] = [0.5, -1.0]
    x = rng.normal(size=3)
    assert np.allclose(net.forward(x), x @ net.param("W0") + net.param("b0"), atol=1e-15)


@pytest.mark.parametrize("layer_norm", [False, True])
def test_forward_matches_reference(layer_norm):
    rng = np.random.default_rng(2)
    net = Mlp([4, 16, 16, 3], layer_norm=layer_norm, rng=rng)
    x = rng.normal(size=(7, 4))
    assert np.max(np.abs(net.forward(x) - _reference_forward(net, x))) <= 1e-12


def test_forward_deterministic():
    net = Mlp([4, 8, 1], layer_norm=True, rng=np.random.default_rng(3))
    x = np.random.default_rng(4).normal(size=(6, 4))
    assert np.array_equal(net.forward(x), net.forward(x.copy()))


def test_backward_before_forward_errors():
    net = Mlp([2, 3, 1])
    with pytest.raises(NetworkError):
        net.backward(np.ones((1, 1)))
    pol = GaussianPolicy(2, 1, hidden=(4,))
    with pytest.raises(NetworkError):
        pol.backward(np.ones((1, 1)))


def test_zero_upstream_zero_gradients():
    net = Mlp([3, 5, 5, 2], layer_norm=True, rng=np.random.default_rng(0))
    net.forward(np.ones((4, 3)))
    grads, dx = net.backward(np.zeros((4, 2)))
    assert all(np.all(g == 0) for g in grads) and np.all(dx == 0)


def test_bad_input_width():
    with pytest.raises(NetworkError):
        Mlp([3, 2]).forward(np.ones(4))
    with pytest.raises(NetworkError):
        Mlp([3])


@pytest.mark.parametrize("layer_norm", [False, True])
def test_scalar_net_gradient_check(layer_norm):
    rng = np.random.default_rng(5)
    net = Mlp([3, 10, 10, 1], layer_norm=layer_norm, rng=rng)
    x = rng.normal(size=(6, 3))
    w = rng.normal(size=(6, 1))

    def loss():
        return float(np.sum(w * net.forward(x)))

    def grads():
        net.forward(x)
        return net.backward(w)[0]

    assert gradient_check(loss, grads, net.params, rng, per_param=8) <= 1e-4


def test_elu_kink_gradient_check():
    # pre-activations pushed to within 1e-3 of zero
    rng = np.random.default_rng(6)
    net = Mlp([2, 6, 1], rng=rng)
    x = rng.normal(size=(4, 2))
    z = x @ net.param("W0")
    net.param("b0")[:] = -z.mean(axis=0) + 1e-4
    w = np.ones((4, 1))

    def loss():
        return float(np.sum(net.forward(x)))

    def grads():
        net.forward(x)
        return net.backward(w)[0]

    assert gradient_check(loss, grads, net.params, rng, per_param=8) <= 1e-3


def test_input_gradient():
    rng = np.random.default_rng(7)
    net = Mlp([3, 8, 2], layer_norm=True, rng=rng)
    x = rng.normal(size=3)
    u = rng.normal(size=2)
    net.forward(x)
    _, dx = net.backward(u)
    h = 1e-6
    num = np.array([(u @ net.forward(x + h * e) - u @ net.forward(x - h * e)) / (2 * h)
                    for e in np.eye(3)])
    assert nn.relative_error(dx, num) <= 1e-6


# policy -----------------------------------------------------------------

def test_zero_noise_gives_mode_and_log_density():
    pol = GaussianPolicy(3, 2, hidden=(8,), rng=np.random.default_rng(0))
    s = np.random.default_rng(1).normal(size=(4, 3))
    a, logp = pol.sample(s, np.zeros((4, 2)))
    mean, std, _ = pol.distribution(s)
    assert np.array_equal(a, mean)
    assert np.allclose(logp, -np.log(std).sum(axis=1) - np.log(2 * np.pi), atol=1e-14)


def test_initial_std():
    pol = GaussianPolicy(3, 2, hidden=(8, 8), init_std=0.3, rng=np.random.default_rng(0))
    _, std, _ = pol.distribution(np.random.default_rng(2).normal(size=(5, 3)) * 5)
    assert np.allclose(std, 0.3, atol=1e-12)


def test_log_prob_integrates_to_one_along_slices():
    pol = GaussianPolicy(2, 2, hidden=(8,), rng=np.random.default_rng(3))
    s = np.array([0.3, -0.2])
    mean, std, _ = pol.distribution(s)

    def density(a0, a1):
        return np.exp(pol.log_prob(s, np.array([a0, a1])))

    # mass over +-6 sigma boxes should be 1; integrate over a 2-D box numerically
    lo, hi = mean - 6 * std, mean + 6 * std
    mass, _ = integrate.dblquad(lambda y, x: density(x, y), lo[0], hi[0], lo[1], hi[1],
                                epsabs=1e-9)
    assert abs(mass - 1.0) <= 1e-3
    # and a small box near the mean matches the closed-form Gaussian mass
    box = 0.5 * std
    from scipy.stats import norm
    closed = np.prod(norm.cdf(box / std) - norm.cdf(-box / std))
    mass_box, _ = integrate.dblquad(lambda y, x: density(x, y), mean[0] - box[0],
                                    mean[0] + box[0], mean[1] - box[1], mean[1] + box[1])
    assert abs(mass_box - closed) <= 1e-3


def test_doubling_std_lowers_mode_density():
    pol = GaussianPolicy(2, 3, hidden=(4,), rng=np.random.default_rng(0))
    s = np.zeros((1, 2))
    _, lp1 = pol.sample(s, np.zeros((1, 3)))
    mean, std, _ = pol.distribution(s)
    last = pol.backbone.n_layers - 1
    assert np.allclose(std, 0.3)
    pol.backbone.param(f"b{last}")[3:] = nn.softplus_inv(0.6 ** 2 - COV_FLOOR)
    _, lp2 = pol.sample(s, np.zeros((1, 3)))
    assert np.allclose(lp1 - lp2, 3 * np.log(2), atol=1e-10)


@given(st.floats(-800, 800))
def test_softplus_positive(x):
    assert nn.softplus(np.array([x]))[0] >= 0.0
    pol_var = nn.softplus(np.array([x]))[0] + COV_FLOOR
    assert pol_var >= COV_FLOOR


def test_std_floor_under_extreme_raw():
    pol = GaussianPolicy(2, 1, hidden=(4,), rng=np.random.default_rng(0))
    pol.backbone.param(f"b{pol.backbone.n_layers - 1}")[1] = -1e4
    _, std, _ = pol.distribution(np.zeros(2))
    assert std[0] ** 2 >= COV_FLOOR * (1 - 1e-12)


def test_policy_gradient_check():
    rng = np.random.default_rng(8)
    pol = GaussianPolicy(3, 2, hidden=(8, 8), layer_norm=True, rng=rng)
    s = rng.normal(size=(5, 3))
    noise = rng.normal(size=(5, 2))
    w = rng.normal(size=(5, 2))

    def loss():
        return float(np.sum(w * pol.sample(s, noise)[0]))

    def grads():
        pol.sample(s, noise)
        return pol.backward(w)[0]

    assert gradient_check(loss, grads, pol.params, rng, per_param=8) <= 1e-4


# optimiser and targets ----------------------------------------------------

def test_adam_first_step_size():
    p = [np.array([1.0, -2.0])]
    opt = Adam(p, lr=0.1)
    opt.step([np.array([3.0, -0.5])])
    assert np.allclose(p[0], [0.9, -1.9], atol=1e-8)
    q = [np.zeros(1)]
    Adam(q, lr=0.1).step([np.array([1.0])], ascend=True)
    assert q[0][0] > 0


def test_adam_minimises_quadratic():
    p = [np.array([5.0, -3.0])]
    opt = Adam(p, lr=0.05)
    for _ in range(2000):
        opt.step([2 * p[0]])
    assert np.all(np.abs(p[0]) < 1e-2)


def test_ema_tau_one_copies():
    live = Mlp([2, 3, 1], rng=np.random.default_rng(0))
    tgt = TargetCopy(Mlp([2, 3, 1], rng=np.random.default_rng(1)))
    ema_update(tgt, live, 1.0)
    assert all(np.array_equal(a, b) for a, b in zip(tgt.params, live.params))


def test_ema_geometric_residual():
    live = Mlp([2, 3, 1], rng=np.random.default_rng(0))
    tgt = TargetCopy(Mlp([2, 3, 1], rng=np.random.default_rng(1)))
    start = [p.copy() for p in tgt.params]
    k, tau = 300, 0.005
    for _ in range(k):
        ema_update(tgt, live, tau)
    for t, t0, p in zip(tgt.params, start, live.params):
        assert np.allclose(t - p, (1 - tau) ** k * (t0 - p), atol=1e-13)


def test_ema_idempotent_and_validates():
    live = Mlp([2, 3, 1], rng=np.random.default_rng(0))
    tgt = TargetCopy(live)
    before = [p.copy() for p in tgt.params]
    ema_update(tgt, live, 0.005)
    assert all(np.allclose(a, b, atol=1e-15) for a, b in zip(tgt.params, before))
    with pytest.raises(NetworkError):
        ema_update(tgt, live, 0.0)


def test_target_copy_is_independent():
    live = Mlp([2, 3, 1], rng=np.random.default_rng(0))
    tgt = TargetCopy(live)
    live.params[0] += 1.0
    assert not np.array_equal(tgt.params[0], live.params[0])


# checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 4)), "b": np.array([1.5]), "c": rng.normal(size=7)}
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, arrays, {"step": 3})
    back, meta = load_checkpoint(path)
    assert meta == {"step": 3}
    assert set(back) == set(arrays)
    assert all(np.array_equal(back[k], arrays[k]) for k in arrays)
    data = path.read_bytes()
    assert data[:8] == b"OTPCKPT\x00"
    save_checkpoint(tmp_path / "y.ckpt", dict(reversed(list(arrays.items()))), {"step": 3})
    assert (tmp_path / "y.ckpt").read_bytes() == data


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(NetworkError):
        load_checkpoint(p)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 10_000))
def test_layer_norm_output_bounded(width_in, batch, seed):
    rng = np.random.default_rng(seed)
    net = Mlp([width_in, 5, 1], layer_norm=True, rng=rng)
    x = rng.normal(size=(batch, width_in)) * 100
    net.forward(x)
    h = net._cache[1][2]
    assert np.all(np.abs(h) <= 1.0)
