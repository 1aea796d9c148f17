import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nase.audio_io import SynthSpec, build_corpus
from nase.dsp import StftParams
from nase.errors import ConfigError, DomainError, FormatError, ShapeError
from nase.snn import (
    LifParams, SpikeTrace, SpikingNet, TrainHyper, encode_rate, forward, init_net, input_gradient,
    lif_step, load_checkpoint, mse, relaxed_forward, save_checkpoint, spectral_subtract, spike_rate,
    train,
)

P = LifParams()


def step_oracle(i, n, beta=0.9, theta=1.0):
    """Plain-Python LIF loop, spikes as a list (1-based step = index + 1)."""
    v, out = 0.0, []
    for _ in range(n):
        u = beta * v + i
        s = 1 if u >= theta else 0
        v = u - theta * s
        out.append(s)
    return out


def tiny_net(w1=1.0, w2=1.0, t_steps=25):
    lif = LifParams(t_steps=t_steps)
    return SpikingNet([1, 1, 1], [np.array([[w1]]), np.array([[w2]])], lif, input_scale=1.0, output_scale=1.0)


def test_lif_quiescent():
    assert lif_step(0.0, 0.0, P) == (0.0, 0)


def test_lif_zero_reset_mode():
    p = LifParams(reset="zero")
    assert lif_step(0.95, 0.5, p) == (0.0, 1)
    v, s = lif_step(0.95, 0.5, P)
    assert s == 1 and v == pytest.approx(0.9 * 0.95 + 0.5 - 1.0)


def test_lif_subthreshold_fixed_point():
    v, spikes = 0.0, 0
    for _ in range(1000):
        v, s = lif_step(v, 0.05, P)
        spikes += s
    assert spikes == 0
    assert abs(v - 0.05 / (1 - 0.9)) <= 1e-9


def test_lif_first_spike_matches_step_oracle():
    v, first = 0.0, None
    for t in range(1, 30):
        v, s = lif_step(v, 0.2, P)
        if s and first is None:
            first = t
    oracle = step_oracle(0.2, 30)
    assert first == oracle.index(1) + 1
    # closed form v_t = 2 (1 - 0.9^t) first reaches 1 at the smallest t with 0.9^t < 0.5
    assert first == int(np.ceil(np.log(0.5) / np.log(0.9))) == 7


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 0.999), st.floats(0.05, 0.95))
def test_subthreshold_never_spikes(frac, beta):
    # fixed point i / (1 - beta) stays below threshold
    p = LifParams(beta=beta)
    i = frac * (1 - beta) * p.threshold
    v = 0.0
    for _ in range(300):
        v, s = lif_step(v, i, p)
        assert s == 0


def test_params_validation():
    for bad in (dict(beta=1.0), dict(beta=0.0), dict(threshold=0), dict(t_steps=0), dict(reset="soft")):
        with pytest.raises(ConfigError):
            LifParams(**bad)


def test_encode_rate_properties():
    net = init_net(4, 3, seed=1, ref_magnitude=1.0)
    assert encode_rate(np.zeros(4), net).spikes.sum() == 0
    counts = encode_rate(np.array([0.1, 0.5, 1.0, 1.5]), net).counts
    assert np.all(np.diff(counts) >= 0)
    # drive >= threshold every step saturates at one spike per step
    assert encode_rate(np.full(4, 2.0 / net.input_scale), net).counts.tolist() == [25] * 4
    with pytest.raises(DomainError):
        encode_rate(np.array([-1.0, 0, 0, 0]), net)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5))
def test_rate_code_monotone(a, b):
    net = init_net(2, 2, seed=0)
    lo, hi = sorted((a, b))
    c = encode_rate(np.array([lo, hi]), net).counts
    assert c[0] <= c[1]


def test_forward_zero_weights():
    net = init_net(6, 5, seed=2)
    net.weights = [np.zeros_like(w) for w in net.weights]
    out, trace = forward(net, np.linspace(0, 3, 6))
    assert not np.any(out)
    assert trace.per_layer_counts[1:] == (0, 0)
    assert trace.per_layer_counts[0] > 0


def test_forward_hand_built_chain():
    net = tiny_net()
    out, trace = forward(net, np.array([0.2]))
    oracle = step_oracle(0.2, 25)
    # a unit-weight spike always lifts the next neuron over threshold
    assert trace.per_layer_counts == (sum(oracle), sum(oracle), sum(oracle)) == (3, 3, 3)
    assert out[0] == pytest.approx(3 / 25)


def test_forward_shape_and_determinism():
    net = init_net(8, 6, seed=3)
    x = np.random.default_rng(0).uniform(0, 2, (5, 8))
    a, ta = forward(net, x)
    b, tb = forward(net, x)
    assert np.array_equal(a, b) and ta == tb and np.all(a >= 0)
    with pytest.raises(ShapeError):
        forward(net, np.zeros(7))


def finite_diff(net, x, target, h=1e-3):
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (mse(relaxed_forward(net, x + e), target) - mse(relaxed_forward(net, x - e), target)) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(4))
def test_input_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = init_net(12, [20], seed=seed, ref_magnitude=1.0)
    net.weights = [2 * w for w in net.weights]
    x, target = rng.uniform(0, 3, 12), rng.uniform(0, 1, 12)
    g, fd = input_gradient(net, x, target), finite_diff(net, x, target)
    assert np.mean(np.sign(g) == np.sign(fd)) >= 0.99
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 0.05


def test_input_gradient_zero_reset_mode():
    rng = np.random.default_rng(9)
    net = init_net(6, [10], seed=9, lif=LifParams(reset="zero", t_steps=10))
    x, target = rng.uniform(0, 3, 6), rng.uniform(0, 1, 6)
    g, fd = input_gradient(net, x, target), finite_diff(net, x, target)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 0.05


def test_input_gradient_trivial_cases():
    net = init_net(5, 4, seed=0)
    x = np.linspace(0.5, 2, 5)
    zero = init_net(5, 4, seed=0)
    zero.weights = [np.zeros_like(w) for w in zero.weights]
    assert not np.any(input_gradient(zero, x, np.ones(5)))
    assert np.max(np.abs(input_gradient(net, x, relaxed_forward(net, x)))) <= 1e-9


def test_batched_gradient_equals_per_frame():
    net = init_net(6, 5, seed=4)
    rng = np.random.default_rng(1)
    x, y = rng.uniform(0, 2, (3, 6)), rng.uniform(0, 1, (3, 6))
    batch = input_gradient(net, x, y)
    for t in range(3):
        np.testing.assert_allclose(batch[t], input_gradient(net, x[t], y[t]), atol=1e-14)


def test_spike_rate():
    assert spike_rate(SpikeTrace(100, 0.1, (100,))) == pytest.approx(1000)
    assert spike_rate(SpikeTrace(0, 1.0, (0,))) == 0
    assert SpikeTrace.merge([SpikeTrace(3, 0.5, (1, 2)), SpikeTrace(4, 0.5, (4, 0))]) == SpikeTrace(7, 1.0, (5, 2))


def test_spectral_subtract():
    mag = np.array([[1.0, 0.3, 0.0]])
    np.testing.assert_array_equal(spectral_subtract(mag, np.ones(3), 0.0), mag)
    assert not np.any(spectral_subtract(mag, mag[0], 1.0))
    assert spectral_subtract(np.array([[1.0]]), np.array([0.3]), 2.0)[0, 0] == pytest.approx(0.4)


@pytest.fixture(scope="module")
def small_corpus():
    return build_corpus(SynthSpec(num_clips=3, clip_seconds=0.5), 21)


def test_train_epochs_zero_is_identity(small_corpus):
    net = init_net(257, 16, seed=5)
    out = train(net, small_corpus, StftParams(), TrainHyper(epochs=0))
    assert all(np.array_equal(a, b) for a, b in zip(out.weights, net.weights))
    assert out.input_scale == net.input_scale


def test_train_reduces_loss_and_is_deterministic(small_corpus):
    hyper = TrainHyper(epochs=2, seed=3, max_clips=3)
    a = train(init_net(257, 16, seed=5), small_corpus, StftParams(), hyper)
    b = train(init_net(257, 16, seed=5), small_corpus, StftParams(), hyper)
    assert a.final_loss <= a.initial_loss
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))


def test_checkpoint_roundtrip(tmp_path):
    net = init_net(9, [7, 5], seed=8, lif=LifParams(beta=0.8, reset="zero"))
    net.final_loss = 0.25
    save_checkpoint(net, tmp_path / "n.snn")
    back = load_checkpoint(tmp_path / "n.snn")
    assert back.layer_sizes == net.layer_sizes and back.lif == net.lif
    assert back.final_loss == 0.25 and back.input_scale == net.input_scale
    assert all(np.array_equal(a, b) for a, b in zip(back.weights, net.weights))
    assert (tmp_path / "n.snn").read_bytes()[:4] == b"SNN1"
    (tmp_path / "bad.snn").write_bytes(b"XXXX")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.snn")
