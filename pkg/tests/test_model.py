import math

import numpy as np
import pytest

from triformer import ops
from triformer.errors import ConfigError, DimensionError
from triformer.gradcheck import grad_check
from triformer.model import (Attention, ChannelMixer, TriFormerBlock, TriFormerConfig, TriFormerModel,
                             full3d_attention, param_count, spatial_attention, spectral_attention)
from triformer.tensor import Tensor, backward


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def attn(dim, heads, seed=0, std=0.5):
    return Attention(dim, heads, np.random.default_rng(seed), np.float64, std=std)


def loop_attention(tokens, p: Attention):
    """Per-token, per-head scaled dot-product attention with explicit exp/sum."""
    T, C = tokens.shape
    h = p.heads
    dk = C // h
    q, k, v = tokens @ p.wq.data, tokens @ p.wk.data, tokens @ p.wv.data
    out = np.zeros((T, C))
    for head in range(h):
        sl = slice(head * dk, (head + 1) * dk)
        for i in range(T):
            s = [float(q[i, sl] @ k[j, sl]) / math.sqrt(dk) for j in range(T)]
            m = max(s)
            e = [math.exp(x - m) for x in s]
            z = sum(e)
            out[i, sl] = sum((e[j] / z) * v[j, sl] for j in range(T))
    return out @ p.wo.data


# -- attention -------------------------------------------------------------------------


@pytest.mark.parametrize("heads", [1, 2])
def test_spectral_attention_matches_loop_oracle(rng, heads):
    x = rng.normal(size=(2, 2, 3, 5, 4))
    p = attn(4, heads)
    y = spectral_attention(t64(x), p).data
    for b, i, j in np.ndindex(2, 2, 3):
        np.testing.assert_allclose(y[b, i, j], loop_attention(x[b, i, j], p), rtol=0, atol=1e-6)


@pytest.mark.parametrize("heads", [1, 2])
def test_spatial_attention_matches_loop_oracle(rng, heads):
    x = rng.normal(size=(1, 3, 2, 4, 4))
    p = attn(4, heads, seed=1)
    y = spatial_attention(t64(x), p).data
    for band in range(4):
        expected = loop_attention(x[0, :, :, band].reshape(6, 4), p).reshape(3, 2, 4)
        np.testing.assert_allclose(y[0, :, :, band], expected, rtol=0, atol=1e-6)


def test_full3d_attention_matches_loop_oracle(rng):
    x = rng.normal(size=(1, 2, 2, 3, 4))
    p = attn(4, 2, seed=2)
    np.testing.assert_allclose(full3d_attention(t64(x), p).data[0].reshape(12, 4),
                               loop_attention(x[0].reshape(12, 4), p), rtol=0, atol=1e-6)


def test_single_band_spectral_attention_is_value_projection(rng):
    x = rng.normal(size=(1, 3, 3, 1, 4))
    p = attn(4, 1)
    expected = (x @ p.wv.data) @ p.wo.data
    np.testing.assert_allclose(spectral_attention(t64(x), p).data, expected, rtol=0, atol=1e-12)


def test_spectral_attention_is_site_local(rng):
    x = rng.normal(size=(1, 3, 3, 5, 4))
    p = attn(4, 2)
    base = spectral_attention(t64(x), p).data
    x2 = x.copy()
    x2[0, 2, 1] += rng.normal(size=(5, 4))
    moved = spectral_attention(t64(x2), p).data
    mask = np.ones((3, 3), bool)
    mask[2, 1] = False
    assert np.array_equal(base[0][mask], moved[0][mask])
    assert not np.array_equal(base[0, 2, 1], moved[0, 2, 1])


def test_spatial_attention_is_band_local(rng):
    x = rng.normal(size=(1, 3, 3, 5, 4))
    p = attn(4, 2)
    base = spatial_attention(t64(x), p).data
    x2 = x.copy()
    x2[0, :, :, 3] += 1.0
    moved = spatial_attention(t64(x2), p).data
    others = [0, 1, 2, 4]
    assert np.array_equal(base[..., others, :], moved[..., others, :])


def test_spectral_attention_permutation_equivariant(rng):
    x = rng.normal(size=(1, 2, 2, 6, 4))
    p = attn(4, 2)
    perm = rng.permutation(6)
    a = spectral_attention(t64(x[:, :, :, perm]), p).data
    b = spectral_attention(t64(x), p).data[:, :, :, perm]
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_spatial_attention_permutation_equivariant(rng):
    x = rng.normal(size=(1, 3, 3, 2, 4))
    p = attn(4, 1)
    perm = rng.permutation(9)
    flat = x.reshape(1, 9, 1, 2, 4)
    a = spatial_attention(t64(flat[:, perm]), p).data
    b = spatial_attention(t64(flat), p).data[:, perm]
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_attention_shape_errors():
    with pytest.raises(DimensionError):
        spectral_attention(t64(np.zeros((2, 3, 4))), attn(4, 1))
    with pytest.raises(ConfigError):
        Attention(6, 4, np.random.default_rng(0))


# -- block -------------------------------------------------------------------------


def test_channel_mixer_zero_in_zero_out():
    m = ChannelMixer(8, 4, np.random.default_rng(0), np.float64)
    assert np.array_equal(m(t64(np.zeros((1, 2, 2, 3, 8)))).data, np.zeros((1, 2, 2, 3, 8)))


def test_block_with_zeroed_outputs_is_identity(rng):
    blk = TriFormerBlock(8, 2, 4, np.random.default_rng(0), np.float64)
    for t in (blk.spectral.wo, blk.spatial.wo, blk.mixer.fc2.weight, blk.mixer.fc2.bias):
        t.data[...] = 0.0
    x = rng.normal(size=(1, 3, 3, 4, 8))
    assert np.array_equal(blk(t64(x)).data, x)


def _rough_block(seed=0):
    blk = TriFormerBlock(8, 2, 4, np.random.default_rng(seed), np.float64)
    r = np.random.default_rng(seed + 100)
    # larger weights make attention non-uniform so the check is informative
    for _, p in blk.named_parameters():
        p.data[...] = r.normal(0, 0.4, p.shape) + (1.0 if p.ndim == 1 and p.shape == (8,) else 0.0)
    return blk


def test_block_grad_check_input(rng):
    blk = _rough_block()
    r = t64(rng.normal(size=(1, 3, 3, 4, 8)))
    x = t64(rng.normal(size=(1, 3, 3, 4, 8)))
    assert grad_check(lambda t: ops.sum(ops.mul(blk(t), r)), x, 1e-6) <= 1e-4


@pytest.mark.parametrize("name", ["norm1.gamma", "spectral.wq", "spatial.wk", "spectral.wv",
                                  "spatial.wo", "norm2.beta", "mixer.dwconv.kernel", "mixer.fc1.weight",
                                  "mixer.fc2.bias"])
def test_block_grad_check_parameters(rng, name):
    blk = _rough_block(1)
    r = t64(rng.normal(size=(1, 3, 3, 4, 8)))
    x = t64(rng.normal(size=(1, 3, 3, 4, 8)))
    *path, attr = name.split(".")
    owner = blk
    for part in path:
        owner = getattr(owner, part)
    start = getattr(owner, attr)

    def f(t):
        setattr(owner, attr, t)
        try:
            return ops.sum(ops.mul(blk(x), r))
        finally:
            setattr(owner, attr, start)

    assert grad_check(f, t64(start.data.copy()), 1e-6) <= 1e-4


def test_block_backward_reaches_every_parameter(rng):
    blk = _rough_block()
    backward(ops.sum(ops.mul(blk(t64(rng.normal(size=(1, 3, 3, 4, 8)))), t64(rng.normal(size=(1, 3, 3, 4, 8))))))
    for name, p in blk.named_parameters():
        assert p.grad is not None and np.abs(p.grad).sum() > 0, name


# -- whole model ---------------------------------------------------------------------


def test_stem_extents_default_config():
    m = TriFormerModel(TriFormerConfig(stage_depths=(0, 0, 0)))
    x = Tensor(np.zeros((1, 27, 27, 64, 1), np.float32))
    feats = m.features(x)
    assert feats[0].shape == (1, 27, 27, 32, 32)
    assert [f.shape[1:4] for f in feats[1:]] == [(14, 14, 16), (7, 7, 8), (4, 4, 4)]
    assert [f.shape[-1] for f in feats] == [32, 64, 128, 256]


def test_extents_match_forward():
    cfg = TriFormerConfig.tiny(in_bands=10, num_classes=3)
    m = TriFormerModel(cfg)
    feats = m.features(Tensor(np.zeros((2, 13, 13, 10, 1), np.float32)))
    assert [f.shape[1:4] for f in feats] == cfg.extents()


def test_forward_shapes_and_zero_head():
    cfg = TriFormerConfig.tiny(in_bands=8, num_classes=5, patch=7)
    logits = TriFormerModel(cfg)(Tensor(np.random.default_rng(0).normal(size=(3, 7, 7, 8, 1))))
    assert logits.shape == (3, 5)
    assert np.array_equal(logits.data, np.zeros((3, 5)))


def test_input_validation():
    m = TriFormerModel(TriFormerConfig.tiny(in_bands=8, patch=7))
    with pytest.raises(DimensionError, match="bands"):
        m(Tensor(np.zeros((1, 7, 7, 9, 1))))
    with pytest.raises(DimensionError):
        m(Tensor(np.zeros((1, 5, 5, 8, 1))))


@pytest.mark.parametrize("cfg", [
    TriFormerConfig(),
    TriFormerConfig.tiny(),
    TriFormerConfig(stage_depths=(0, 0, 0)),
    TriFormerConfig(stage_widths=(8, 16, 32, 64), stage_depths=(1, 3, 0), num_classes=16, mlp_ratio=2),
])
def test_param_count_matches_enumeration(cfg):
    assert param_count(cfg) == TriFormerModel(cfg).num_parameters()


def test_param_count_zero_depth_by_hand():
    # stem (compress 3*32+32, conv 27*32*32+32, norm 64), three downsamples, head
    stem = 3 * 32 + 32 + 27 * 32 * 32 + 32 + 64
    downs = sum(8 * c * 2 * c + 2 * c for c in (32, 64, 128))
    head = 256 * 9 + 9
    assert param_count(TriFormerConfig(stage_depths=(0, 0, 0))) == stem + downs + head


def test_param_count_reference_values():
    assert param_count(TriFormerConfig()) == 3_159_465
    assert param_count(TriFormerConfig.tiny()) == 446_553


def test_config_validation():
    with pytest.raises(ConfigError):
        TriFormerConfig(stage_widths=(32, 64, 96, 256))
    with pytest.raises(ConfigError):
        TriFormerConfig(patch=26)
    with pytest.raises(ConfigError):
        TriFormerConfig(heads_per_stage=(3, 3, 3))
    with pytest.raises(ConfigError):
        TriFormerConfig.from_dict({"patch": 27, "bogus": 1})
    cfg = TriFormerConfig.tiny()
    assert TriFormerConfig.from_dict(cfg.to_dict()) == cfg


def test_default_heads():
    assert TriFormerConfig().heads_per_stage == (2, 4, 8)
    assert TriFormerConfig(stage_widths=(8, 16, 32, 64)).heads_per_stage == (1, 1, 2)


def test_same_seed_same_weights():
    a, b = TriFormerModel(TriFormerConfig.tiny(), 3), TriFormerModel(TriFormerConfig.tiny(), 3)
    for (n1, p1), (n2, p2) in zip(a.named_parameters(), b.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
