import numpy as np
import pytest

import sasenet.tensor as T
from sasenet import attention as att
from sasenet import nn
from sasenet.tensor import ShapeError, Tensor


@pytest.fixture(autouse=True)
def fresh_tape():
    T.reset_tape()
    yield
    T.reset_tape()


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


# ---------------------------------------------------------------------------
# squeeze-excitation
# ---------------------------------------------------------------------------

def test_se_zero_weights_halve():
    se = att.SqueezeExcite(att.SEConfig(8, 4), rng=np.random.default_rng(0))
    for _, p in se.parameters():
        p.data[:] = 0
    y = Tensor(rand((8, 5, 5), seed=1))
    out = se(y)
    assert np.allclose(out.data, 0.5 * y.data)
    assert np.allclose(se.last_gate, 0.5)


def test_se_gate_permutation_invariant():
    se = att.SqueezeExcite(att.SEConfig(4, 4), rng=np.random.default_rng(1))
    y = rand((4, 6, 6), seed=2)
    out = se(Tensor(y))
    gate = se.last_gate.copy()
    perm = np.random.default_rng(3).permutation(36)
    yp = y.reshape(4, 36)[:, perm].reshape(4, 6, 6)
    outp = se(Tensor(yp))
    assert np.array_equal(se.last_gate, gate)
    assert np.allclose(outp.data.reshape(4, 36), out.data.reshape(4, 36)[:, perm])


def test_se_param_count_closed_form():
    se = att.SqueezeExcite(att.SEConfig(64, 16), rng=np.random.default_rng(0))
    assert se.param_count() == 64 * 4 + 4 + 4 * 64 + 64 == 580


def test_se_gate_open_interval():
    for seed in range(5):
        se = att.SqueezeExcite(att.SEConfig(8, 2), rng=np.random.default_rng(seed))
        se(Tensor(rand((8, 4, 4), seed=seed) * 5))
        assert (se.last_gate > 0).all() and (se.last_gate < 1).all()


def test_se_channel_mismatch():
    se = att.SqueezeExcite(att.SEConfig(8, 4), rng=np.random.default_rng(0))
    with pytest.raises(ShapeError):
        se(Tensor(rand((4, 5, 5))))


def test_se_config_divisibility():
    with pytest.raises(ShapeError):
        att.SEConfig(10, 4)


# ---------------------------------------------------------------------------
# skip-layer excitation
# ---------------------------------------------------------------------------

def test_sle_zero_weights_halve():
    sle = att.SkipLayerExcite(att.SLEConfig(6, 5), rng=np.random.default_rng(0))
    for _, p in sle.parameters():
        p.data[:] = 0
    x = Tensor(rand((6, 8, 8), seed=1))
    y = Tensor(rand((5, 16, 16), seed=2))
    out = sle(x, y)
    assert np.allclose(out.data, 0.5 * y.data)


def test_sle_gate_independent_of_target():
    sle = att.SkipLayerExcite(att.SLEConfig(6, 5), rng=np.random.default_rng(1))
    x = Tensor(rand((6, 8, 8), seed=3))
    sle(x, Tensor(rand((5, 16, 16), seed=4)))
    g1 = sle.last_gate.copy()
    sle(x, Tensor(rand((5, 16, 16), seed=5)))
    assert np.array_equal(sle.last_gate, g1)


def test_sle_requires_minimum_spatial():
    sle = att.SkipLayerExcite(att.SLEConfig(6, 5), rng=np.random.default_rng(0))
    with pytest.raises(ShapeError):
        sle(Tensor(rand((6, 3, 3))), Tensor(rand((5, 8, 8))))


def test_sle_with_source_equal_target_matches_se():
    # SE-matched configuration: pool to 1x1 (the first conv kernel collapses
    # to 1x1), relu mid activation, weights copied across.
    C, r = 8, 4
    rng = np.random.default_rng(7)
    se = att.SqueezeExcite(att.SEConfig(C, r), rng=rng)
    for _, p in se.parameters():
        p.data[:] = np.random.default_rng(11).standard_normal(p.shape)
    cfg = att.SLEConfig(C, C, pool_target=(1, 1), mid_channels=C // r, mid_activation="relu")
    sle = att.SkipLayerExcite(cfg, rng=rng)
    sle.conv1.w.data = se.fc1.w.data.copy()
    sle.conv1.b.data = se.fc1.b.data.copy()
    sle.conv2.w.data = se.fc2.w.data.copy()
    sle.conv2.b.data = se.fc2.b.data.copy()
    y = Tensor(rand((C, 6, 6), seed=12))
    out_se = se(y)
    out_sle = sle(y, y)
    assert np.abs(out_se.data - out_sle.data).max() <= 1e-12


# ---------------------------------------------------------------------------
# synthesis modulation
# ---------------------------------------------------------------------------

def synth_module(seed=0, heads=4, eps=1e-6, noise=0.0):
    cfg = att.SASESynthConfig(source_channels=8, target_shape=(6, 6, 6), heads=heads,
                              eps=eps, noise_std=noise)
    return att.SASESynthesis(cfg, rng=np.random.default_rng(seed))


def test_synth_single_head_degenerates_to_channel_modulation():
    m = synth_module(seed=1, heads=1)
    x = Tensor(rand((8, 5, 5), seed=2))
    w = m.weights(x)
    q = m.last_queries[0][:, None, None]
    k_min = m.last_keys[0].min()
    assert np.abs(w.data - q).max() <= m.cfg.eps / k_min


def test_synth_hand_example():
    # two heads, one channel, one location: W = (0.2*1 + 0.8*3) / (1 + 3)
    qs = [Tensor(np.full((1, 1, 1), 0.2)), Tensor(np.full((1, 1, 1), 0.8))]
    ks = [Tensor(np.full((1, 1, 1), 1.0)), Tensor(np.full((1, 1, 1), 3.0))]
    w = att.combine_masked_queries(qs, ks, eps=0.0)
    expected = (0.2 * 1.0 + 0.8 * 3.0) / (1.0 + 3.0)
    assert w.data.reshape(()) == expected
    assert abs(w.item() - 0.65) <= 1e-12


def test_synth_equal_keys_give_query_mean():
    g = 4
    rng = np.random.default_rng(3)
    k = rng.uniform(0.2, 0.9, size=(1, 5, 5))
    qs = [Tensor(rng.uniform(0.1, 0.9, size=(3, 1, 1))) for _ in range(g)]
    ks = [Tensor(k.copy()) for _ in range(g)]
    w = att.combine_masked_queries(qs, ks, eps=0.0)
    mean_q = np.mean([q.data for q in qs], axis=0)
    assert np.abs(w.data - mean_q).max() <= 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_synth_convex_combination_bounds(seed):
    # per location the eps guard shrinks the query hull by
    # delta = eps / (sum_k + eps); W must stay inside the shrunk hull
    m = synth_module(seed=seed)
    x = Tensor(rand((8, 5, 5), seed=seed + 50))
    w = m.weights(x).data
    qs = np.stack(m.last_queries)            # (g, C)
    delta = m.cfg.eps / (np.stack(m.last_keys).sum(axis=0) + m.cfg.eps)
    lo = qs.min(axis=0)[:, None, None] * (1 - delta)[None]
    hi = qs.max(axis=0)[:, None, None]
    assert (w >= lo - 1e-15).all()
    assert (w <= hi + 1e-15).all()


def test_synth_noise_requires_seed():
    m = synth_module(noise=1.0)
    x = Tensor(rand((8, 5, 5)))
    y = Tensor(rand((6, 6, 6)))
    with pytest.raises(ValueError):
        m(x, y)
    out1 = m(x, y, seed=4)
    out2 = m(x, y, seed=4)
    assert np.array_equal(out1.data, out2.data)
    assert (np.stack(m.last_keys) > 0).all() and (np.stack(m.last_keys) < 1).all()


def test_synth_rejects_bad_grouping():
    with pytest.raises(ShapeError):
        att.SASESynthConfig(source_channels=6, target_shape=(4, 4, 4), heads=4)


# ---------------------------------------------------------------------------
# recognition modulation
# ---------------------------------------------------------------------------

def recog_module(seed=0, channels=8, heads=2, stride=1, padding_mode="zeros"):
    cfg = att.SASERecogConfig(channels=channels, heads=heads, stride=stride,
                              padding_mode=padding_mode)
    m = att.SASERecognition(cfg, rng=np.random.default_rng(seed))
    m.set_training(False)
    return m


def test_recog_uniform_attention_where_logits_constant():
    m = recog_module(seed=1)
    # zero the key convs: logits q*0 = 0, constant across the head channels
    m.k_conv2.w.data[:] = 0
    x = Tensor(rand((8, 4, 4), seed=2))
    m(x)
    d = m.cfg.head_dim
    for a in m.last_attention:
        assert np.abs(a - 1.0 / d).max() <= 1e-12


def test_recog_shape_and_normalization():
    m = recog_module(seed=3, channels=4, heads=2)
    x = Tensor(rand((4, 3, 3), seed=4))
    out = m(x)
    assert out.shape == (4, 3, 3)
    for a in m.last_attention:
        assert np.abs(a.sum(axis=0) - 1).max() <= 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_recog_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    heads = int(rng.choice([1, 2, 4]))
    channels = heads * int(rng.choice([4, 8]))
    m = recog_module(seed=seed, channels=channels, heads=heads)
    x = Tensor(rng.standard_normal((channels, int(rng.integers(3, 7)), int(rng.integers(3, 7)))))
    out = m(x)
    ref = att.sase_recog_loop_oracle(m, x)
    assert np.abs(out.data - ref).max() <= 1e-11


def test_recog_strided():
    m = recog_module(seed=5, stride=2)
    x = Tensor(rand((8, 6, 6), seed=6))
    out = m(x)
    assert out.shape == (8, 3, 3)
    for a in m.last_attention:
        assert np.abs(a.sum(axis=0) - 1).max() <= 1e-10


def test_recog_translation_equivariance_in_circular_mode():
    # the query is globally pooled (shift-invariant) and all convs pad
    # circularly, so the whole block commutes with cyclic shifts
    m = recog_module(seed=7, padding_mode="circular")
    x = rand((8, 6, 6), seed=8)
    base = m(Tensor(x)).data
    for dy, dx in [(1, 0), (0, 2), (3, 4)]:
        shifted = m(Tensor(np.roll(x, (dy, dx), axis=(1, 2)))).data
        assert np.abs(shifted - np.roll(base, (dy, dx), axis=(1, 2))).max() <= 1e-10


def test_recog_batched_matches_loop():
    m = recog_module(seed=9)
    xb = Tensor(rand((3, 8, 4, 4), seed=10))
    out = m(xb)
    ref = att.sase_recog_loop_oracle(m, xb)
    assert out.shape == (3, 8, 4, 4)
    assert np.abs(out.data - ref).max() <= 1e-11


# ---------------------------------------------------------------------------
# MHSA
# ---------------------------------------------------------------------------

def test_mhsa_single_token():
    m = att.MHSA(att.MHSAConfig(4, 2), rng=np.random.default_rng(0))
    x = rand((4, 1, 1), seed=1)
    out = m(Tensor(x))
    v = m.wv.data @ x.reshape(4, 1)
    assert np.abs(out.data.reshape(4, 1) - v).max() <= 1e-12
    for a in m.last_attention:
        assert np.array_equal(a, [[1.0]])


def test_mhsa_zero_query_averages_values():
    m = att.MHSA(att.MHSAConfig(4, 2), rng=np.random.default_rng(1))
    m.wq.data[:] = 0
    x = rand((4, 2, 3), seed=2)
    n = 6
    out = m(Tensor(x))
    v = m.wv.data @ x.reshape(4, n)
    expected = np.repeat(v.mean(axis=1, keepdims=True), n, axis=1)
    assert np.abs(out.data.reshape(4, n) - expected).max() <= 1e-12
    for a in m.last_attention:
        assert np.abs(a - 1.0 / n).max() <= 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_mhsa_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    heads = int(rng.choice([1, 2, 4]))
    c = heads * int(rng.choice([2, 4]))
    m = att.MHSA(att.MHSAConfig(c, heads), rng=rng)
    x = rng.standard_normal((c, 4, 4))
    out = m(Tensor(x))
    ref = att.mhsa_naive_oracle(x, m.wq.data, m.wk.data, m.wv.data, heads)
    assert np.abs(out.data - ref).max() <= 1e-11


def test_mhsa_batched_consistent():
    m = att.MHSA(att.MHSAConfig(4, 2), rng=np.random.default_rng(3))
    xb = rand((2, 4, 3, 3), seed=4)
    out = m(Tensor(xb))
    for b in range(2):
        single = m(Tensor(xb[b]))
        assert np.abs(out.data[b] - single.data).max() == 0.0


def test_mhsa_rejects_bad_heads():
    with pytest.raises(ShapeError):
        att.MHSAConfig(6, 4)
