import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from glassbox import blackbox as bb
from glassbox.data import make_synthetic, standardize, train_test_split


def _model(M=12, C=3, channels=2, pool=6, kernel=1, seed=0):
    return bb.AutoencoderClassifier.initialize(M, C, channels, pool, kernel, seed=seed)


def _zero(model):
    for v in model.params.values():
        v[...] = 0.0
    return model


def test_initialize_rejects_non_compressing_geometry():
    with pytest.raises(ValueError):
        bb.AutoencoderClassifier.initialize(4, 2, channels=2, pool_size=2)


def test_zero_weights_give_zero_embedding():
    m = _zero(_model())
    z, sw = bb.encode(m, np.random.default_rng(0).normal(size=12))
    np.testing.assert_array_equal(z, 0.0)
    assert sw.positions.shape == (2, 2)


def test_maxpool_example():
    m = bb.AutoencoderClassifier.initialize(4, 2, channels=1, pool_size=2, kernel_size=1)
    m.params["enc_W"][...] = 1.0
    m.params["enc_b"][...] = 0.0
    z, sw = bb.encode(m, np.array([1.0, 3.0, 2.0, 0.0]))
    np.testing.assert_array_equal(z, [3.0, 2.0])
    np.testing.assert_array_equal(sw.positions.reshape(-1), [1, 2])
    u = bb.unpool(m, z[None], bb.PoolSwitches(sw.positions[None]))
    np.testing.assert_array_equal(u.reshape(-1), [0.0, 3.0, 2.0, 0.0])


def test_encode_deterministic_and_length_checked():
    m = _model(kernel=3)
    x = np.random.default_rng(1).normal(size=12)
    z1, s1 = bb.encode(m, x)
    z2, s2 = bb.encode(m, x.copy())
    np.testing.assert_array_equal(z1, z2)
    np.testing.assert_array_equal(s1.positions, s2.positions)
    with pytest.raises(ValueError):
        bb.encode(m, np.zeros(11))


def test_decode_zero_weights_is_half():
    m = _model()
    m.params["dec_W"][...] = 0.0
    m.params["dec_b"][...] = 0.0
    z, sw = bb.encode(m, np.ones(12))
    np.testing.assert_array_equal(bb.decode(m, z, sw), 0.5)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 12, elements=st.floats(-50, 50)), st.integers(0, 100))
def test_decode_shape_and_range(x, seed):
    m = _model(kernel=3, seed=seed)
    z, sw = bb.encode(m, x)
    out = bb.decode(m, z * 100, sw)
    assert out.shape == (12,)
    assert np.all((out >= 0) & (out <= 1))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 12, elements=st.floats(-5, 5)))
def test_unpool_keeps_window_maxima(x):
    m = _model(kernel=3)
    z, sw = bb.encode(m, x)
    u = bb.unpool(m, z[None], bb.PoolSwitches(sw.positions[None]))[0]
    pos = sw.positions
    for c in range(m.channels):
        for p in range(m.pooled_length):
            window = u[c, p * m.pool_size : (p + 1) * m.pool_size]
            j = pos[c, p] - p * m.pool_size
            assert 0 <= j < m.pool_size
            assert window[j] == z.reshape(m.channels, -1)[c, p]
            assert np.count_nonzero(np.delete(window, j)) == 0


def test_decode_geometry_mismatch():
    m = _model()
    with pytest.raises(ValueError):
        bb.decode(m, np.zeros(m.embedding_dim), bb.PoolSwitches(np.zeros((1, 2), dtype=int)))


def test_joint_loss_examples():
    m = _model(C=4)
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(8, 12)), rng.integers(0, 4, 8)
    cfg = bb.TrainConfig(alpha_r=0.0, alpha_ce=1.5)
    total, l_r, l_ce = bb.joint_loss(m, X, y, cfg)
    assert total == 1.5 * l_ce

    m.params["head_W"][...] = 0.0
    m.params["head_b"][...] = 0.0
    _, _, l_ce = bb.joint_loss(m, X, y, bb.TrainConfig())
    assert l_ce == pytest.approx(math.log(4), abs=1e-12)


def test_perfect_reconstruction_has_zero_l_r():
    m = _model()
    m.params["dec_W"][...] = 0.0
    m.params["dec_b"][...] = 0.0
    m.recon_min, m.recon_max = np.zeros(12), np.ones(12)
    X = np.full((4, 12), 0.5)
    y = np.zeros(4, dtype=int)
    _, l_r, _ = bb.joint_loss(m, X, y, bb.TrainConfig(weight_decay=0.0, gain_l1=0.0))
    assert l_r == 0.0
    m.params["enc_g"][...] = np.linspace(-1.0, 2.0, 12)
    _, l_r, _ = bb.joint_loss(m, X, y, bb.TrainConfig(weight_decay=0.5, gain_l1=2.0))
    expect = 0.5 * np.sum(m.params["enc_W"] ** 2) + 2.0 * np.sum(np.abs(m.params["enc_g"]))
    assert l_r == pytest.approx(expect, rel=1e-12)


def test_train_config_validation():
    with pytest.raises(ValueError):
        bb.TrainConfig(alpha_r=0.0, alpha_ce=0.0)
    with pytest.raises(ValueError):
        bb.TrainConfig(weight_decay=-1.0)
    with pytest.raises(ValueError):
        bb.TrainConfig(gain_l1=-1.0)
    with pytest.raises(ValueError):
        bb.TrainConfig(epochs=0)


def test_predict_contract():
    m = _model(C=3)
    x = np.random.default_rng(3).normal(size=12)
    p = bb.predict(m, x)
    assert p.probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert p.label == int(np.argmax(p.probs))
    assert p.embedding.shape == (m.embedding_dim,)
    m.params["head_W"][...] = 0.0
    m.params["head_b"][...] = 0.0
    np.testing.assert_allclose(bb.predict(m, x).probs, 1 / 3)
    with pytest.raises(ValueError):
        bb.predict(m, np.zeros(5))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.floats(-10, 10))
def test_softmax_shift_invariance(logits, shift):
    p = bb.softmax(logits)
    q = bb.softmax(logits + shift)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(p, q, atol=1e-12)
    np.testing.assert_array_equal(p.argmax(axis=1), q.argmax(axis=1))


def _small_batch(seed=0, C=3):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(8, 12)), rng.integers(0, C, 8)


@pytest.mark.parametrize("kernel", [1, 3])
def test_gradient_check_small_model(kernel):
    m = bb.AutoencoderClassifier.initialize(12, 3, channels=1, pool_size=3, kernel_size=kernel, seed=1)
    assert m.embedding_dim == 4
    X, y = _small_batch()
    m.fit_reconstruction_range(X)
    cfg = bb.TrainConfig(weight_decay=0.01)
    assert bb.gradient_check(m, X, y, 1e-6, cfg, n_params=500) < 1e-4


def test_gradient_check_samples_at_least_100_params():
    m = bb.AutoencoderClassifier.initialize(40, 3, channels=2, pool_size=4, kernel_size=3, seed=2)
    n = sum(v.size for v in m.params.values())
    assert n > 100
    X, y = _small_batch(1)
    X = np.random.default_rng(1).normal(size=(8, 40))
    assert bb.gradient_check(m, X, y, 1e-6, n_params=100) < 1e-4


def test_gradient_check_detects_corruption():
    m = _model()
    X, y = _small_batch()

    def corrupted(model, X, y, config, need_grads=True):
        total, l_r, l_ce, g = bb.loss_and_grads(model, X, y, config, need_grads)
        if g is not None:
            g = {k: v + 0.1 for k, v in g.items()}
        return total, l_r, l_ce, g

    assert bb.gradient_check(m, X, y, 1e-6, grad_fn=corrupted) > 1e-2


def test_gradient_check_zero_case_and_epsilon_range():
    m = _zero(_model())
    m.params["head_b"][...] = 0.0
    X = np.zeros((4, 12))
    y = np.zeros(4, dtype=int)
    cfg = bb.TrainConfig(alpha_r=1.0, alpha_ce=0.0)
    m.recon_min, m.recon_max = -np.ones(12), np.ones(12)
    assert bb.gradient_check(m, X, y, 1e-6, cfg) == 0.0
    with pytest.raises(ValueError):
        bb.gradient_check(m, X, y, 1e-2)


@pytest.fixture(scope="module")
def blobs():
    d, _ = make_synthetic(300, 30, 4, 3, seed=0, class_sep=3.0)
    s = train_test_split(d, 0.8, 0)
    tr, te, _ = standardize(s.train, s.test)
    return tr, te


def test_training_reduces_cross_entropy(blobs):
    tr, _ = blobs
    model, hist = bb.train(tr, bb.TrainConfig(epochs=15, seed=0))
    assert hist[-1]["l_ce"] < hist[0]["l_ce"]
    init = bb.AutoencoderClassifier.initialize(
        30, 3, model.channels, model.pool_size, model.kernel_size, seed=0
    )
    init.fit_reconstruction_range(tr.features)
    before = bb.joint_loss(init, tr.features, tr.labels, bb.TrainConfig())[2]
    after = bb.joint_loss(model, tr.features, tr.labels, bb.TrainConfig())[2]
    assert after < before


def test_training_deterministic(blobs):
    tr, _ = blobs
    _, h1 = bb.train(tr, bb.TrainConfig(epochs=3, seed=5))
    _, h2 = bb.train(tr, bb.TrainConfig(epochs=3, seed=5))
    assert h1 == h2


def test_gain_penalty_shrinks_noise_columns():
    d, inf = make_synthetic(480, 40, 4, 3, seed=1, class_sep=3.0)
    tr, _, _ = standardize(d, d)
    noise = np.setdiff1d(np.arange(40), inf)
    gains = {}
    for l1 in (0.0, 0.02):
        model, _ = bb.train(tr, bb.TrainConfig(epochs=100, gain_l1=l1))
        gains[l1] = np.abs(model.params["enc_g"])
    assert gains[0.02][noise].mean() < 0.5 * gains[0.0][noise].mean()
    assert gains[0.02][inf].mean() > 2 * gains[0.02][noise].mean()


def test_no_head_updates_without_ce(blobs):
    tr, _ = blobs
    K = bb.default_embedding_dim(30)
    ch, pool = bb.choose_geometry(30, K)
    init = bb.AutoencoderClassifier.initialize(30, 3, ch, pool, 1, seed=0)
    model, _ = bb.train(tr, bb.TrainConfig(alpha_r=1.0, alpha_ce=0.0, epochs=2), model=init)
    np.testing.assert_array_equal(model.params["head_W"], init.params["head_W"])
    np.testing.assert_array_equal(model.params["head_b"], init.params["head_b"])
    assert not np.array_equal(model.params["dec_W"], init.params["dec_W"])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises(blobs):
    tr, _ = blobs
    X = tr.features.copy()
    X[0, 0] = np.inf
    with pytest.raises(bb.TrainingError, match="epoch"):
        bb.train(tr.with_features(X), bb.TrainConfig(epochs=1))


def test_checkpoint_bit_exact(tmp_path, blobs):
    tr, te = blobs
    model, _ = bb.train(tr, bb.TrainConfig(epochs=2))
    path = bb.save_checkpoint(model, tmp_path / "m.json", bb.TrainConfig(epochs=2))
    back = bb.load_checkpoint(path)
    np.testing.assert_array_equal(back.predict_proba(te.features), model.predict_proba(te.features))
    raw = np.fromfile(tmp_path / "m.f64", dtype="<f8")
    assert raw.size == sum(v.size for v in model.params.values()) + 2 * model.n_features


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 600), st.integers(1, 100))
def test_choose_geometry_keeps_embedding_below_m(M, K):
    if K >= M:
        with pytest.raises(ValueError):
            bb.choose_geometry(M, K)
        return
    try:
        ch, pool = bb.choose_geometry(M, K)
    except ValueError:
        return
    assert ch * math.ceil(M / pool) < M
    assert pool >= 2


def test_default_embedding_dim():
    assert bb.default_embedding_dim(500) == 30
    assert bb.default_embedding_dim(10) == 1
