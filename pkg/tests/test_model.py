import math

import numpy as np
import pytest

from attnlab.model import (Dims, InitConfig, attention_rows, default_init_std, forward, init_model,
                           load_checkpoint, save_checkpoint, token_values)
from conftest import tiny_instance


def forward_loop(params, X):
    """Plain-Python evaluation of the network on one sample."""
    M = X.shape[0]
    Q = X @ params.W_Q
    K = X @ params.W_K
    v = X @ params.W_V @ params.w_O
    total = 0.0
    for l in range(M):
        logits = [float(Q[l] @ K[j]) for j in range(M)]
        m = max(logits)
        e = [math.exp(z - m) for z in logits]
        s = sum(e)
        total += sum(e[j] / s * v[j] for j in range(M))
    return total / M


def test_forward_matches_loop_oracle():
    for seed in range(5):
        params, data = tiny_instance(seed)
        out = forward(params, data.X)
        for n in range(data.N):
            assert out[n] == pytest.approx(forward_loop(params, data.X[n]), rel=1e-12, abs=1e-14)


def test_single_sample_equals_batch_entry(tiny):
    params, data = tiny
    assert forward(params, data.X[1]) == pytest.approx(forward(params, data.X)[1], rel=1e-14)


def test_zero_query_key_gives_uniform_attention(tiny):
    params, data = tiny
    z = params.replace(W_Q=np.zeros_like(params.W_Q))
    A = attention_rows(z, data.X)
    assert np.allclose(A, 1 / data.X.shape[1])
    np.testing.assert_allclose(forward(z, data.X), token_values(z, data.X).mean(axis=1), rtol=1e-13)


def test_no_logit_scaling():
    params, data = tiny_instance(1)
    X = data.X[0]
    A = attention_rows(params, X)
    logits = X @ params.W_Q @ params.W_K.T @ X.T
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    np.testing.assert_allclose(A, e / e.sum(axis=1, keepdims=True), rtol=1e-13)


def test_w_o_modes():
    dims = Dims(8, 4, 16, 3)
    c = init_model(InitConfig(0.1, 0.1), dims).w_O
    assert np.allclose(c, 1 / 4.0)
    u = init_model(InitConfig(0.1, 0.1, w_o_mode="unit-uniform"), dims).w_O
    assert np.linalg.norm(u) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        InitConfig(0.1, 0.1, w_o_mode="bogus")


def test_init_deterministic_and_scaled():
    dims = Dims(256, 128, 64, 4)
    a = init_model(InitConfig(0.05, 0.02, seed=3), dims)
    b = init_model(InitConfig(0.05, 0.02, seed=3), dims)
    assert np.array_equal(a.W_Q, b.W_Q) and np.array_equal(a.W_V, b.W_V)
    assert a.W_Q.std() == pytest.approx(0.05, rel=0.02)
    assert a.W_V.std() == pytest.approx(0.02, rel=0.02)
    assert not np.array_equal(a.W_Q, a.W_K)


def test_default_init_std_value():
    assert default_init_std(1024) == pytest.approx(1 / (16 * math.sqrt(3072)))


def test_dimension_mismatch_raises(tiny):
    params, _ = tiny
    with pytest.raises(ValueError, match="token dimension"):
        forward(params, np.zeros((3, 5)))
    with pytest.raises(ValueError):
        Dims(8, 4, 4, 1)


def test_checkpoint_round_trip_and_bytes(tmp_path):
    params, _ = tiny_instance(2)
    init = InitConfig(0.5, 0.5, seed=1)
    p1, p2 = tmp_path / "a.npz", tmp_path / "b.npz"
    save_checkpoint(p1, params, init, step=7)
    save_checkpoint(p2, params, init, step=7)
    assert p1.read_bytes() == p2.read_bytes()
    back, header = load_checkpoint(p1)
    assert header["step"] == 7 and header["version"] == 1
    for name in ("W_Q", "W_K", "W_V", "w_O"):
        assert np.array_equal(getattr(back, name), getattr(params, name))
