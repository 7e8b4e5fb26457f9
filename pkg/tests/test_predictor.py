import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from learnres import autodiff as ad
from learnres import predictor as P
from learnres.losses import bce
from learnres.scale import ScaleConfig

CFG = ScaleConfig(0.2, 1.5)
PCFG = P.PredictorConfig(input_dim=6, hidden_dims=(5, 4), init_seed=3)


def test_config_validation():
    with pytest.raises(ValueError):
        P.PredictorConfig(input_dim=0)
    with pytest.raises(ValueError):
        P.PredictorConfig(hidden_dims=(4, 0))
    with pytest.raises(ValueError):
        P.PredictorConfig(activation="gelu")
    assert P.PredictorConfig().layer_dims == [16, 32, 16, 1]


def test_init_deterministic_and_bounded():
    a, b = P.init_params(PCFG, zero_head=False), P.init_params(PCFG, zero_head=False)
    assert np.array_equal(a.flat(), b.flat())
    for w, bias, fan_in in zip(a.weights, a.biases, PCFG.layer_dims[:-1]):
        assert np.all(bias == 0)
        assert np.all(np.abs(w) <= math.sqrt(6 / fan_in))
        assert np.any(w != 0)
    c = P.init_params(PCFG)
    assert np.all(c.weights[-1] == 0)


def test_flat_roundtrip():
    p = P.init_params(PCFG, zero_head=False)
    q = P.PredictorParams.from_flat(PCFG, p.flat())
    assert np.array_equal(p.flat(), q.flat())
    assert p.size == 6 * 5 + 5 + 5 * 4 + 4 + 4 + 1


def test_zero_network():
    phi, raw = P.predict_scale(np.zeros(6), P.zero_params(PCFG), CFG, PCFG)
    assert phi.data == 0.75 and raw.data == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=6, max_size=6), st.integers(0, 1000))
def test_output_in_range(feats, seed):
    params = P.init_params(P.PredictorConfig(6, (5, 4), init_seed=seed), zero_head=False)
    params.biases[-1][:] = 3.0 * (seed % 3 - 1)
    phi, _ = P.predict_scale(np.array(feats), params, CFG, PCFG)
    assert CFG.tau_min <= phi.data <= CFG.tau_max
    fast = P.predict_phi(params, np.array([feats]), CFG)
    assert fast[0] == pytest.approx(phi.data, rel=1e-12)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        P.predict_scale(np.zeros(5), P.zero_params(PCFG), CFG, PCFG)


def test_golden_value():
    pcfg = P.PredictorConfig(input_dim=4, hidden_dims=(3,), init_seed=0)
    params = P.init_params(pcfg, zero_head=False)
    phi, _ = P.predict_scale(np.array([0.1, -0.2, 0.3, 0.4]), params, CFG, pcfg)
    again, _ = P.predict_scale(np.array([0.1, -0.2, 0.3, 0.4]), P.init_params(pcfg, zero_head=False), CFG, pcfg)
    assert phi.data == again.data
    assert phi.data == pytest.approx(0.7092201588071358, abs=1e-15)


@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_numpy_backward_matches_tape(act):
    pcfg = P.PredictorConfig(6, (5, 4), activation=act, init_seed=1)
    params = P.init_params(pcfg, zero_head=False)
    X = np.random.default_rng(0).normal(size=(3, 6))
    raw, cache = P.forward(params, X, act)
    g = np.array([0.3, -1.2, 0.7])
    grads = P.backward(params, cache, g, act)
    tape = ad.Tape()
    leaves = P.params_on_tape(params, tape)
    total = ad.vsum([P.raw_on_tape(x, leaves, pcfg) * gi for x, gi in zip(X, g)])
    assert total.data == pytest.approx(float(raw @ g), rel=1e-12)
    total.backward()
    assert np.allclose([v.grad for v in leaves], grads.flat(), rtol=1e-10, atol=1e-14)


def test_weights_pass_gradient_check():
    params = P.init_params(PCFG, zero_head=False)
    x = np.random.default_rng(2).normal(size=6)

    def f(leaves):
        phi, _ = P.predict_scale(x, leaves, CFG, PCFG)
        return bce(0.8, phi / CFG.tau_max)

    rep = ad.check_gradients(f, params.flat())
    assert not rep.skipped and rep.max_rel_error < 1e-4


def test_checkpoint_roundtrip(tmp_path):
    params = P.init_params(PCFG, zero_head=False)
    path = tmp_path / "c.bin"
    P.save_checkpoint(path, PCFG, params, extra={"tau_max": 1.5}, tail=np.array([2.0, 3.5]))
    raw = path.read_bytes()
    assert raw[:8] == b"LRESCKPT"
    cfg, q, tail, extra = P.load_checkpoint(path)
    assert cfg == PCFG and np.array_equal(q.flat(), params.flat())
    assert list(tail) == [2.0, 3.5] and extra == {"tau_max": 1.5}
    assert len(raw) % 8 == (16 + int.from_bytes(raw[12:16], "little")) % 8


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(ValueError):
        P.load_checkpoint(path)
