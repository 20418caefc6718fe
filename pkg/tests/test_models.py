import math

import numpy as np
import pytest

import idenc.numerics as nx
from idenc import models
from idenc.checkpoint import BadMagicError, DescriptorMismatchError
from idenc.diagnostics import TINY, tiny_model_grad_check
from idenc.models import ModelDescriptor, encode, init_params, predict_eps

SMALL = ModelDescriptor(
    image_size=8, base_channels=4, channel_mult=(1, 2), num_res_blocks=1, attn_resolutions=(4,),
    emb_dim=6, enc_base_channels=4, enc_channel_mult=(1, 2), enc_attn_resolutions=(4,), max_groups=2,
)


def _batch(rng, n, d=SMALL):
    return rng.uniform(-1, 1, (n, d.in_channels, d.image_size, d.image_size)).astype(np.float32)


def _randomize(params, rng, scale=0.2):
    for p in params.values():
        p.data = (p.data + scale * rng.standard_normal(p.shape)).astype(p.dtype)
    return params


# --- independent parameter count -------------------------------------------------------

def _conv(cin, cout, k=3, bias=True):
    return cout * cin * k * k + (cout if bias else 0)


def _res(cin, cout, emb):
    n = 2 * cin + _conv(cin, cout) + 2 * cout + _conv(cout, cout)
    if emb:
        n += 2 * cout * emb + 2 * cout
    if cin != cout:
        n += _conv(cin, cout, 1)
    return n


def _attn(c):
    return 2 * c + _conv(c, 3 * c, 1, bias=False) + _conv(c, c, 1)


def _count(d):
    tdim = 4 * d.base_channels
    n = tdim * d.base_channels + tdim + tdim * tdim + tdim + tdim * d.emb_dim
    n += _conv(d.in_channels, d.base_channels)
    ch, res, chans = d.base_channels, d.image_size, [d.base_channels]
    for lvl, m in enumerate(d.channel_mult):
        for _ in range(d.num_res_blocks):
            n += _res(ch, d.base_channels * m, tdim)
            ch = d.base_channels * m
            n += _attn(ch) if res in d.attn_resolutions else 0
            chans.append(ch)
        if lvl < len(d.channel_mult) - 1:
            n += _conv(ch, ch)
            chans.append(ch)
            res //= 2
    n += 2 * _res(ch, ch, tdim) + _attn(ch)
    for lvl in reversed(range(len(d.channel_mult))):
        for _ in range(d.num_res_blocks + 1):
            out = d.base_channels * d.channel_mult[lvl]
            n += _res(ch + chans.pop(), out, tdim)
            ch = out
            n += _attn(ch) if res in d.attn_resolutions else 0
        if lvl:
            n += _conv(ch, ch)
            res *= 2
    n += 2 * ch + _conv(ch, d.in_channels)
    # encoder
    ch, res = d.enc_base_channels, d.image_size
    n += _conv(d.in_channels, ch)
    for lvl, m in enumerate(d.enc_channel_mult):
        for _ in range(d.enc_num_res_blocks):
            n += _res(ch, d.enc_base_channels * m, None)
            ch = d.enc_base_channels * m
            n += _attn(ch) if res in d.enc_attn_resolutions else 0
        if lvl < len(d.enc_channel_mult) - 1:
            n += _conv(ch, ch)
            res //= 2
    n += 2 * ch + ch * d.emb_dim + d.emb_dim
    return n


def test_param_count_reference_descriptor():
    d = ModelDescriptor()  # base 32, multipliers (1, 2, 2), D = 64, 16x16
    assert (d.base_channels, d.channel_mult, d.emb_dim, d.image_size) == (32, (1, 2, 2), 64, 16)
    count = sum(math.prod(s) for s in models.param_shapes(d).values())
    assert count == _count(d)
    assert count == 2_052_355


@pytest.mark.parametrize("d", [SMALL, TINY])
def test_param_count_matches_enumeration(d):
    assert init_params(d, 0).count() == _count(d)


def test_tiny_model_is_small():
    assert init_params(TINY, 0).count() <= 5000


def test_init_deterministic():
    a, b, c = init_params(SMALL, 3), init_params(SMALL, 3), init_params(SMALL, 4)
    assert list(a) == list(b)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert not all(np.array_equal(a[k].data, c[k].data) for k in a)


def test_zero_init_tails_give_zero_output():
    params = init_params(SMALL, 0)
    for name, p in params.items():
        if ".conv2." in name or ".proj." in name or name.startswith("gen.out.conv."):
            assert not p.data.any(), name
    x = _batch(np.random.default_rng(0), 2)
    out = predict_eps(params, x, [3, 7], np.ones((2, SMALL.emb_dim)))
    assert not out.data.any()


def test_zero_init_res_block_is_skip_pathway():
    rng = np.random.default_rng(1)
    params = init_params(SMALL, 0)
    scope = models._Scope(params, "gen.", SMALL.max_groups)
    x = nx.as_tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
    emb = nx.as_tensor(rng.standard_normal((2, 4 * SMALL.base_channels)).astype(np.float32))
    np.testing.assert_array_equal(scope.res("down0.res0", x, emb).data, x.data)
    h = nx.as_tensor(rng.standard_normal((2, 8, 4, 4)).astype(np.float32))
    np.testing.assert_array_equal(scope.attn("down1.attn0", h, 1).data, h.data)


@pytest.mark.parametrize("d", [
    SMALL,
    TINY,
    ModelDescriptor(image_size=16, base_channels=4, channel_mult=(1, 1, 2), num_res_blocks=2, attn_resolutions=(8, 4),
                    emb_dim=4, enc_base_channels=4, enc_channel_mult=(1, 2), max_groups=4),
])
def test_output_shape_matches_input(d):
    rng = np.random.default_rng(2)
    params = _randomize(init_params(d, 0), rng)
    x = _batch(rng, 3, d)
    assert predict_eps(params, x, [1, 5, 9]).shape == x.shape
    assert encode(params, x).shape == (3, d.emb_dim)
    assert encode(params, x[0]).shape == (1, d.emb_dim)


def test_zero_embedding_equals_absent():
    rng = np.random.default_rng(3)
    params = _randomize(init_params(SMALL, 0), rng)
    x = _batch(rng, 2)
    a = predict_eps(params, x, [4, 8]).data
    b = predict_eps(params, x, [4, 8], np.zeros((2, SMALL.emb_dim), np.float32)).data
    np.testing.assert_array_equal(a, b)


def test_conditioning_changes_output():
    rng = np.random.default_rng(4)
    params = _randomize(init_params(SMALL, 0), rng)
    x = _batch(rng, 2)
    a = predict_eps(params, x, [4, 8], rng.standard_normal((2, SMALL.emb_dim))).data
    b = predict_eps(params, x, [4, 8], rng.standard_normal((2, SMALL.emb_dim))).data
    assert np.abs(a - b).mean() > 0


def test_batch_equivariance_and_purity():
    rng = np.random.default_rng(5)
    params = _randomize(init_params(SMALL, 0), rng)
    x, t, z = _batch(rng, 4), np.array([1, 2, 3, 4]), rng.standard_normal((4, SMALL.emb_dim)).astype(np.float32)
    perm = np.array([2, 0, 3, 1])
    out = predict_eps(params, x, t, z).data
    np.testing.assert_allclose(predict_eps(params, x[perm], t[perm], z[perm]).data, out[perm], atol=1e-6)
    np.testing.assert_array_equal(predict_eps(params, x, t, z).data, out)
    e = encode(params, x).data
    np.testing.assert_allclose(encode(params, x[perm]).data, e[perm], atol=1e-6)
    np.testing.assert_array_equal(encode(params, x).data, e)


def test_shape_errors():
    params = init_params(SMALL, 0)
    with pytest.raises(nx.ShapeError, match="encode"):
        encode(params, np.zeros((1, 3, 16, 16)))
    with pytest.raises(nx.ShapeError, match="predict_eps"):
        predict_eps(params, np.zeros((1, 3, 8, 8)), [1], np.zeros((1, SMALL.emb_dim + 1)))
    with pytest.raises(nx.ShapeError):
        predict_eps(params, np.zeros((2, 3, 8, 8)), [1, 2, 3])


def test_encoder_hand_computed():
    # one 3x3 conv on a 1x1x2x2 image, SiLU, global mean, linear head
    d = ModelDescriptor(image_size=2, in_channels=1, base_channels=1, channel_mult=(1,), num_res_blocks=1,
                        attn_resolutions=(), emb_dim=2, enc_base_channels=1, enc_channel_mult=(), max_groups=1)
    with nx.default_dtype(np.float64):
        params = init_params(d, 0)
    assert sorted(k for k in params if k.startswith("enc.")) == ["enc.conv_in.b", "enc.conv_in.w", "enc.head.b", "enc.head.w"]
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1], w[0, 0, 1, 2] = 1.0, 0.5
    params["enc.conv_in.w"].data = w
    params["enc.conv_in.b"].data = np.array([0.1])
    params["enc.head.w"].data = np.array([[1.0], [-2.0]])
    params["enc.head.b"].data = np.array([0.0, 0.5])
    # conv output: x[i,j] + 0.5 x[i,j+1] + 0.1 on [[1,2],[3,4]]
    conv = [2.1, 2.1, 5.1, 4.1]
    pooled = sum(v / (1 + math.exp(-v)) for v in conv) / 4
    expected = [pooled, -2 * pooled + 0.5]
    got = encode(params, np.array([[[[1.0, 2.0], [3.0, 4.0]]]])).data[0]
    np.testing.assert_allclose(got, expected, rtol=1e-12)


def test_timestep_embedding():
    e = models.timestep_embedding([0, 5], 8, np.float64)
    assert e.shape == (2, 8)
    np.testing.assert_array_equal(e[0], [1, 1, 1, 1, 0, 0, 0, 0])
    assert e[1, 0] == pytest.approx(math.cos(5.0))


def test_attention_sites():
    assert models.attention_sites(SMALL) == [
        ("down1.attn0", 8, 4), ("mid.attn", 8, 4), ("up1.attn0", 8, 4), ("up1.attn1", 8, 4)]


def test_params_checkpoint_round_trip(tmp_path):
    params = _randomize(init_params(SMALL, 0), np.random.default_rng(6))
    path = models.save_params(params, tmp_path / "m.ckpt", step=12, seed=3)
    back = models.load_params(path, SMALL)
    assert back.descriptor == SMALL and list(back) == list(params)
    for k in params:
        np.testing.assert_array_equal(back[k].data, params[k].data)
    with pytest.raises(DescriptorMismatchError):
        models.load_params(path, TINY)
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(BadMagicError):
        models.load_params(tmp_path / "bad.ckpt")


def test_tiny_model_grad_check_sampled():
    rep = tiny_model_grad_check(np.float64, max_elements=2)
    assert rep.n_checked > 50
    assert rep.max_rel_err < 1e-4
