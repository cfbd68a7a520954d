import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ramen_vqa import autodiff as ad
from ramen_vqa.autodiff import ShapeError, Tensor
from ramen_vqa.nn import (
    BatchNorm1d, BiGRU, GRUCell, LayerNorm, Linear, MultiHeadAttention, TransformerEncoderLayer,
)


def weighted_sum(out, seed=7):
    w = Tensor(np.random.default_rng(seed).uniform(-1, 1, size=out.shape))
    return ad.sum_(ad.mul(out, w))


def zero_params(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


# ---- linear

def test_linear_identity(rng):
    lin = Linear(2, 2, rng)
    lin.weight.data = np.eye(2)
    lin.bias.data = np.zeros(2)
    np.testing.assert_array_equal(lin(Tensor([[1.0, 2.0]])).data, [[1.0, 2.0]])


def test_linear_zero_weight_bias_only(rng):
    lin = Linear(3, 1, rng)
    lin.weight.data[:] = 0.0
    lin.bias.data[:] = 5.0
    np.testing.assert_array_equal(lin(Tensor(rng.normal(size=(4, 3)))).data, np.full((4, 1), 5.0))


def test_linear_matches_loop_oracle(rng):
    lin = Linear(3, 2, rng)
    x = rng.uniform(-1, 1, (4, 3))
    W, b = lin.weight.data, lin.bias.data
    expect = [[sum(x[n, i] * W[o, i] for i in range(3)) + b[o] for o in range(2)] for n in range(4)]
    np.testing.assert_allclose(lin(Tensor(x)).data, expect, rtol=0, atol=1e-14)


def test_linear_shape_error(rng):
    with pytest.raises(ShapeError):
        Linear(3, 2, rng)(Tensor(np.zeros((2, 4))))


# ---- GRU

def gru_scalar_step(cell, x, h):
    """Reference GRU step written with explicit loops."""
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    H, D = cell.hidden, cell.din
    P = {k: getattr(cell, k).data for k in ("Wz", "Wr", "Wn", "Uz", "Ur", "Un", "bz", "br", "bn")}

    def aff(W, U, b, i, use_r=None):
        wx = sum(W[i, j] * x[j] for j in range(D))
        uh = sum(U[i, j] * h[j] for j in range(H))
        return wx, uh, b[i]

    out = []
    for i in range(H):
        wx, uh, b = aff(P["Wz"], P["Uz"], P["bz"], i)
        z = sig(wx + uh + b)
        wx, uh, b = aff(P["Wr"], P["Ur"], P["br"], i)
        r = sig(wx + uh + b)
        wx, uh, b = aff(P["Wn"], P["Un"], P["bn"], i)
        n = math.tanh(wx + r * uh + b)
        out.append((1 - z) * n + z * h[i])
    return np.array(out)


def test_gru_zero_weights_halve_state(rng):
    cell = GRUCell(3, 2, rng)
    zero_params(cell)
    out = cell(Tensor(rng.normal(size=3)), Tensor([2.0, -4.0]))
    np.testing.assert_array_equal(out.data, [1.0, -2.0])


def test_gru_zero_state_zero_weights(rng):
    cell = GRUCell(3, 2, rng)
    zero_params(cell)
    np.testing.assert_array_equal(cell(Tensor(rng.normal(size=3)), Tensor(np.zeros(2))).data, [0.0, 0.0])


@given(arrays(np.float64, 4, elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_gru_zero_params_halves_any_state(h):
    cell = GRUCell(2, 4, np.random.default_rng(0))
    zero_params(cell)
    np.testing.assert_array_equal(cell(Tensor(np.ones(2)), Tensor(h)).data, h / 2)


def test_gru_matches_scalar_oracle(rng):
    cell = GRUCell(3, 4, rng)
    x, h = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 4)
    np.testing.assert_allclose(cell(Tensor(x), Tensor(h)).data, gru_scalar_step(cell, x, h), rtol=0, atol=1e-14)


def test_gru_scan_masked_equals_unpadded(rng):
    cell = GRUCell(2, 3, rng)
    seq = rng.uniform(-1, 1, (2, 4, 2))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
    padded = cell.scan(Tensor(seq), mask=mask)[-1].data
    short = cell.scan(Tensor(seq[1:, :2]))[-1].data
    np.testing.assert_array_equal(padded[1], short[0])


def test_gru_grad_check(rng):
    cell = GRUCell(3, 2, rng)
    x, h = Tensor(rng.uniform(-1, 1, (2, 3)), requires_grad=True), Tensor(rng.uniform(-1, 1, (2, 2)), requires_grad=True)
    params = dict(cell.named_parameters(), x=x, h=h)
    assert ad.grad_check(lambda: weighted_sum(cell(x, h)), params).worst < 1e-6


# ---- bidirectional GRU

def test_bigru_single_step_output_is_final(rng):
    net = BiGRU(3, 2, rng)
    outputs, final = net(Tensor(rng.normal(size=(1, 3))))
    np.testing.assert_array_equal(outputs.data[0], final.data)


def test_bigru_backward_half_is_reversed_scan(rng):
    net = BiGRU(3, 2, rng)
    seq = rng.normal(size=(5, 3))
    outputs, final = net(Tensor(seq))
    h = np.zeros(2)
    rev = []
    for row in seq[::-1]:
        h = net.bwd(Tensor(row), Tensor(h)).data
        rev.append(h)
    np.testing.assert_allclose(outputs.data[:, 2:], np.array(rev[::-1]), rtol=0, atol=1e-14)
    np.testing.assert_allclose(final.data[2:], rev[-1], rtol=0, atol=1e-14)


def test_bigru_rejects_empty(rng):
    with pytest.raises(ValueError):
        BiGRU(3, 2, rng)(Tensor(np.zeros((0, 3))))


def test_bigru_grad_check(rng):
    net = BiGRU(3, 2, rng)
    seq = Tensor(rng.uniform(-1, 1, (4, 3)), requires_grad=True)

    def f():
        outputs, final = net(seq)
        return ad.add(weighted_sum(outputs), weighted_sum(final, seed=3))

    assert ad.grad_check(f, dict(net.named_parameters(), seq=seq)).worst < 1e-6


# ---- batch norm

def test_batchnorm_two_rows():
    bn = BatchNorm1d(1)
    out = bn(Tensor([[1.0], [3.0]])).data[:, 0]
    expect = 1.0 / math.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(out, [-expect, expect], rtol=0, atol=1e-15)
    assert out[1] == pytest.approx(0.999995, abs=1e-6)


def test_batchnorm_eval_identity(rng):
    bn = BatchNorm1d(4).eval()
    bn.eps = 0.0
    x = rng.normal(size=(5, 4))
    np.testing.assert_allclose(bn(Tensor(x)).data, x, rtol=0, atol=1e-9)


def test_batchnorm_eval_identity_default_eps_close(rng):
    bn = BatchNorm1d(4).eval()
    x = rng.normal(size=(5, 4))
    np.testing.assert_allclose(bn(Tensor(x)).data, x / math.sqrt(1 + 1e-5), rtol=0, atol=1e-15)


def test_batchnorm_train_single_row_rejected():
    with pytest.raises(ValueError, match="2 rows"):
        BatchNorm1d(3)(Tensor(np.zeros((1, 3))))


def test_batchnorm_running_stats_update(rng):
    bn = BatchNorm1d(2)
    x = rng.normal(size=(8, 2))
    bn(Tensor(x))
    np.testing.assert_allclose(bn.running_mean.data, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(bn.running_var.data, 0.9 + 0.1 * x.var(axis=0, ddof=1))
    assert np.all(bn.running_var.data >= 0)


@given(arrays(np.float64, st.tuples(st.integers(2, 40), st.integers(1, 5)),
              elements=st.floats(-100, 100, allow_nan=False)))
def test_batchnorm_normalized_stats(x):
    x = x[:, np.ptp(x, axis=0) > 1e-3]
    if x.shape[1] == 0:
        return
    out = BatchNorm1d(x.shape[1]).normalize(Tensor(x)).data
    assert np.all(np.abs(out.mean(axis=0)) < 1e-9)
    var = x.var(axis=0)
    # eps shrinks the variance by var / (var + eps)
    np.testing.assert_allclose(out.var(axis=0), var / (var + 1e-5), rtol=0, atol=1e-9)


def test_batchnorm_grad_check(rng):
    bn = BatchNorm1d(3)
    bn.gamma.data = rng.uniform(0.5, 1.5, 3)
    x = Tensor(rng.uniform(-1, 1, (5, 3)), requires_grad=True)
    assert ad.grad_check(lambda: weighted_sum(bn(x)), dict(bn.named_parameters(), x=x)).worst < 1e-6


def test_layernorm_grad_check(rng):
    ln = LayerNorm(4)
    x = Tensor(rng.uniform(-1, 1, (2, 3, 4)), requires_grad=True)
    assert ad.grad_check(lambda: weighted_sum(ln(x)), dict(ln.named_parameters(), x=x)).worst < 1e-6


# ---- attention

def test_attention_zero_query_key_is_uniform(rng):
    att = MultiHeadAttention(4, 2, rng)
    for lin in (att.query, att.key):
        zero_params(lin)
    x = rng.normal(size=(3, 4))
    out = att(Tensor(x)).data
    v = att.value(Tensor(x)).data
    expect = att.out(Tensor(np.tile(v.mean(axis=0), (3, 1)))).data
    np.testing.assert_allclose(out, expect, rtol=0, atol=1e-14)
    for w in att.last_weights:
        np.testing.assert_allclose(w, 1 / 3, rtol=0, atol=1e-15)


def test_attention_single_region(rng):
    att = MultiHeadAttention(4, 2, rng)
    x = Tensor(rng.normal(size=(1, 4)))
    out = att(x).data
    assert all(np.array_equal(w, np.ones((1, 1, 1))) for w in att.last_weights)
    np.testing.assert_allclose(out, att.out(att.value(x)).data, rtol=0, atol=1e-15)


def test_attention_rows_stochastic_and_grad_check(rng):
    att = MultiHeadAttention(4, 2, rng)
    x = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
    att(x)
    for w in att.last_weights:
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, rtol=0, atol=1e-9)
    assert ad.grad_check(lambda: weighted_sum(att(x)), dict(att.named_parameters(), x=x)).worst < 1e-6


def test_attention_dim_must_divide(rng):
    with pytest.raises(ValueError):
        MultiHeadAttention(5, 2, rng)


# ---- transformer encoder

def test_encoder_permutation_equivariant(rng):
    layer = TransformerEncoderLayer(8, 2, 16, rng)
    x = rng.normal(size=(2, 5, 8))
    perm = rng.permutation(5)
    a = layer(Tensor(x)).data[:, perm]
    b = layer(Tensor(x[:, perm])).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


def test_encoder_single_region_is_per_vector_map(rng):
    layer = TransformerEncoderLayer(8, 2, 16, rng)
    x = rng.normal(size=(1, 8))
    a, b = layer(Tensor(x)).data, layer(Tensor(x)).data
    np.testing.assert_array_equal(a, b)
    assert a.shape == (1, 8)


def test_encoder_grad_check(rng):
    layer = TransformerEncoderLayer(8, 2, 8, rng)
    x = Tensor(rng.uniform(-1, 1, (3, 8)), requires_grad=True)
    rep = ad.grad_check(lambda: weighted_sum(layer(x)), dict(layer.named_parameters(), x=x))
    assert rep.ok, rep.max_rel_error
