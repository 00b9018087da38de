"""Layers: values against independent numpy references, tied-head parameter
accounting, checkpoint round trips."""

import numpy as np
import pytest

from bevfuse import nn, tensor as T
from bevfuse.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from bevfuse.tensor import Tensor, grad_check


def test_layernorm_two_point_oracle():
    # [1, 3]: mean 2, population variance 1 -> roughly [-1, 1] (eps-damped).
    ln = nn.LayerNorm(2)
    out = ln(Tensor([[1.0, 3.0]]))
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)


def test_layernorm_matches_numpy_reference():
    rng = np.random.default_rng(11)
    ln = nn.LayerNorm(6)
    ln.gain.data[...] = rng.normal(size=6)
    ln.bias.data[...] = rng.normal(size=6)
    x = rng.normal(size=(4, 6))
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    expected = (x - mu) / np.sqrt(var + 1e-5) * ln.gain.data + ln.bias.data
    np.testing.assert_allclose(ln(Tensor(x)).data, expected, atol=1e-12)


def test_channel_norm_matches_numpy_reference():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(3, 4, 5)) * 7.0 - 2.0
    mu = x.mean(axis=(1, 2), keepdims=True)
    var = ((x - mu) ** 2).mean(axis=(1, 2), keepdims=True)
    expected = (x - mu) / np.sqrt(var + 1e-5)
    np.testing.assert_allclose(nn.channel_norm(Tensor(x)).data, expected,
                               atol=1e-12)


def test_channel_norm_cancels_per_channel_shift_and_scale():
    # The degenerate "drive the whole map negative" direction is a no-op
    # through the norm: adding any per-channel constant and rescaling leaves
    # the output unchanged, so a GELU behind it can never be starved.
    rng = np.random.default_rng(13)
    x = rng.normal(size=(2, 6, 6))
    shifted = x * 3.5 + np.array([-40.0, 25.0]).reshape(2, 1, 1)
    np.testing.assert_allclose(nn.channel_norm(Tensor(shifted)).data,
                               nn.channel_norm(Tensor(x)).data, atol=1e-4)


def test_channel_norm_gradients():
    rng = np.random.default_rng(14)
    x = Tensor(rng.normal(size=(2, 3, 4)) * 5.0, requires_grad=True)
    w = Tensor(rng.normal(size=(2, 3, 4)))
    worst = grad_check(lambda: T.sum_(T.gelu(nn.channel_norm(x)) * w), [x])
    assert worst < 1e-4


def test_linear_init_bounds():
    rng = np.random.default_rng(0)
    lin = nn.Linear(rng, 64, 32)
    bound = np.sqrt(1.0 / 64)
    assert np.abs(lin.weight.data).max() <= bound
    assert np.abs(lin.bias.data).max() <= bound


def _mha_reference(layer, q, k, v):
    """Straight-line numpy reimplementation of the attention forward."""
    heads, d_model = layer.heads, layer.d_model
    d_head = d_model // heads
    qp = q @ layer.w_q.data + layer.b_q.data
    kp = k @ layer.w_k.data + layer.b_k.data
    vp = v @ layer.w_v.data + layer.b_v.data

    def soft(x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    if layer.tied:
        attn = soft(qp @ kp.T / np.sqrt(d_head))
        head = attn @ vp
        mixed = np.concatenate([head] * heads, axis=-1)
        return mixed @ layer.w_o.data + layer.b_o.data, attn

    lq, lk = q.shape[0], k.shape[0]
    outs, attns = [], []
    for h in range(heads):
        sl = slice(h * d_head, (h + 1) * d_head)
        attn = soft(qp[:, sl] @ kp[:, sl].T / np.sqrt(d_head))
        outs.append(attn @ vp[:, sl])
        attns.append(attn)
    mixed = np.concatenate(outs, axis=-1)
    return mixed @ layer.w_o.data + layer.b_o.data, np.mean(attns, axis=0)


@pytest.mark.parametrize("tied", [True, False])
def test_mha_matches_reference(tied):
    rng = np.random.default_rng(5)
    layer = nn.MultiHeadAttention(rng, d_model=8, heads=2, tied=tied)
    q = rng.normal(size=(3, 8))
    k = rng.normal(size=(5, 8))
    out, attn = layer(Tensor(q), Tensor(k), Tensor(k))
    ref_out, ref_attn = _mha_reference(layer, q, k, k)
    np.testing.assert_allclose(out.data, ref_out, atol=1e-12)
    np.testing.assert_allclose(attn.data, ref_attn, atol=1e-12)


@pytest.mark.parametrize("tied", [True, False])
def test_mha_rows_sum_to_one(tied):
    rng = np.random.default_rng(9)
    layer = nn.MultiHeadAttention(rng, d_model=12, heads=3, tied=tied)
    for seed in range(20):
        r = np.random.default_rng(seed)
        q = Tensor(r.normal(size=(4, 6, 12)))
        k = Tensor(r.normal(size=(4, 5, 12)))
        _, attn = layer(q, k, k)
        np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-12)


def test_mha_key_columns_unconstrained():
    # Attention normalizes over keys, so one key may soak up weight from many
    # queries: with identical queries every row is identical and each column
    # total is n_queries * row_value; the argmax column exceeds 1.
    rng = np.random.default_rng(2)
    layer = nn.MultiHeadAttention(rng, d_model=4, heads=1, tied=False)
    q = Tensor(np.tile(rng.normal(size=(1, 4)), (5, 1)))
    k = Tensor(rng.normal(size=(3, 4)))
    _, attn = layer(q, k, k)
    col_totals = attn.data.sum(axis=0)
    assert col_totals.max() > 1.0
    np.testing.assert_allclose(col_totals.sum(), 5.0, atol=1e-12)


def test_mha_single_key_degenerates_to_value_mix():
    # One key: softmax weight is exactly 1 and the output ignores the query.
    rng = np.random.default_rng(4)
    layer = nn.MultiHeadAttention(rng, d_model=6, heads=2, tied=True)
    k = Tensor(rng.normal(size=(1, 6)))
    outs = []
    for _ in range(3):
        q = Tensor(rng.normal(size=(2, 6)))
        out, attn = layer(q, k, k)
        assert (attn.data == 1.0).all()
        outs.append(out.data)
    np.testing.assert_allclose(outs[0], outs[1], atol=1e-15)
    np.testing.assert_allclose(outs[1], outs[2], atol=1e-15)


def test_tied_qkv_count_is_untied_over_heads():
    rng = np.random.default_rng(0)
    for heads in (2, 4, 8):
        tied = nn.MultiHeadAttention(rng, 32, heads, tied=True)
        untied = nn.MultiHeadAttention(rng, 32, heads, tied=False)
        def qkv_count(layer):
            return sum(p.size for name, p in layer.named_parameters()
                       if name.split(".")[-1] in ("w_q", "w_k", "w_v", "b_q", "b_k", "b_v"))
        assert qkv_count(tied) * heads == qkv_count(untied)


def test_d_model_not_divisible_by_heads_raises():
    with pytest.raises(ValueError, match="divisible"):
        nn.MultiHeadAttention(np.random.default_rng(0), 10, 3, tied=False)


@pytest.mark.parametrize("tied", [True, False])
def test_transformer_grad_check(tied):
    rng = np.random.default_rng(13)
    enc = nn.TransformerEncoder(rng, 1, d_model=6, d_ff=10, heads=2, tied=tied)
    dec = nn.TransformerDecoder(rng, 1, d_model=6, d_ff=10, heads=2, tied=tied)
    x = Tensor(np.random.default_rng(1).normal(size=(4, 6)), requires_grad=True)
    q = Tensor(np.random.default_rng(2).normal(size=(3, 6)), requires_grad=True)
    target = np.random.default_rng(3).normal(size=(3, 6))

    def f():
        memory = enc(x)
        out, _ = dec(q, memory)
        return ((out - target) * (out - target)).sum()

    params = [x, q] + enc.parameters() + dec.parameters()
    err = grad_check(f, params, max_checks_per_param=6, rng=np.random.default_rng(0))
    assert err < 1e-4, f"worst relative error {err}"


def test_conv_module_and_layernorm_grad_check():
    rng = np.random.default_rng(21)
    conv = nn.Conv2d(rng, 2, 3, 3)
    ln = nn.LayerNorm(5)
    x = Tensor(np.random.default_rng(8).normal(size=(2, 4, 5)), requires_grad=True)

    def f():
        h = T.gelu(conv(x))
        return (ln(h) * 0.5).sum()

    err = grad_check(f, [x] + conv.parameters() + ln.parameters(),
                     max_checks_per_param=8, rng=np.random.default_rng(1))
    assert err < 1e-4


def test_named_parameters_are_unique_and_stable():
    rng = np.random.default_rng(0)
    enc = nn.TransformerEncoder(rng, 2, 8, 16, 2, True)
    names = [n for n, _ in enc.named_parameters()]
    assert len(names) == len(set(names))
    assert names == [n for n, _ in enc.named_parameters()]


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(3)
    enc = nn.TransformerEncoder(rng, 1, 8, 16, 2, True)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, enc.named_parameters())
    before = {n: p.data.copy() for n, p in enc.named_parameters()}

    for p in enc.parameters():
        p.data[...] = 0.0
    load_checkpoint(path, enc.named_parameters())
    for n, p in enc.named_parameters():
        assert (p.data == before[n]).all(), n

    # Re-saving after a load is byte-identical.
    path2 = tmp_path / "again.ckpt"
    save_checkpoint(path2, enc.named_parameters())
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_shape_mismatch(tmp_path):
    rng = np.random.default_rng(0)
    small = nn.Linear(rng, 3, 4)
    big = nn.Linear(rng, 3, 5)
    path = tmp_path / "lin.ckpt"
    save_checkpoint(path, small.named_parameters())
    with pytest.raises(ValueError, match="shape mismatch"):
        load_checkpoint(path, big.named_parameters())


def test_checkpoint_rejects_missing_and_unknown(tmp_path):
    rng = np.random.default_rng(0)
    lin = nn.Linear(rng, 3, 4)
    path = tmp_path / "lin.ckpt"
    save_checkpoint(path, lin.named_parameters())
    stored = read_checkpoint(path)
    assert set(stored) == {"weight", "bias"}
    with pytest.raises(KeyError, match="missing"):
        load_checkpoint(path, [("other", lin.weight)])


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        read_checkpoint(path)


def test_position_embedding_init_scale():
    rng = np.random.default_rng(0)
    emb = nn.PositionEmbedding(rng, 4096, 8)
    std = emb.table.data.std()
    assert 0.015 < std < 0.025  # N(0, 0.02) draw
