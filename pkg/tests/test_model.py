import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subbagmil import gradcheck
from subbagmil.exceptions import FormatError, ModelError, PartitionError
from subbagmil.model import (GatedAttentionParams, SubBagModelParams, TwinModel, encode_checkpoint,
                             load_checkpoint, save_checkpoint, t1_backward, t1_forward, t2_backward,
                             t2_forward)
from subbagmil.sampling import partition_by_distribution


def _params(seed=0, dim=8, cls=GatedAttentionParams):
    return cls(dim, 6, 5, 3, rng=np.random.default_rng(seed))


def _grads(params):
    return [p.grad.copy() for p in params.tensors()]


def test_t1_singleton_bag():
    beta, v, logits, _ = t1_forward(np.ones((1, 8)), _params())
    assert beta.tolist() == [1.0]
    assert v.shape == (6,) and logits.shape == (3,)


def test_t1_identical_instances_uniform_attention():
    p = _params()
    x = np.tile(np.random.default_rng(1).normal(size=8), (5, 1))
    beta, v, _, _ = t1_forward(x, p)
    np.testing.assert_allclose(beta, 0.2, atol=1e-15)
    h = np.maximum(x[0] @ p.proj_w.value + p.proj_b.value[0], 0)
    np.testing.assert_allclose(v, h, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_t1_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    p = _params(seed)
    x = rng.normal(size=(9, 8))
    perm = rng.permutation(9)
    b1, v1, z1, _ = t1_forward(x, p)
    b2, v2, z2, _ = t1_forward(x[perm], p)
    np.testing.assert_allclose(b2, b1[perm], atol=1e-12)
    np.testing.assert_allclose(v2, v1, atol=1e-12)
    np.testing.assert_allclose(z2, z1, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_beta_is_distribution_and_logits_finite(n, seed, scale):
    rng = np.random.default_rng(seed)
    beta, _, logits, _ = t1_forward(rng.normal(size=(n, 8)) * scale, _params(seed % 7))
    assert abs(beta.sum() - 1.0) <= 1e-12
    assert np.all(beta >= 0)
    assert np.all(np.isfinite(logits))


def test_dimension_mismatch_is_model_error():
    with pytest.raises(ModelError):
        t1_forward(np.ones((3, 5)), _params())
    with pytest.raises(ModelError):
        t1_forward(np.ones((0, 8)), _params())


def test_t1_backward_zero_and_linearity():
    p = _params()
    x = np.random.default_rng(2).normal(size=(4, 8))
    _, _, _, tr = t1_forward(x, p)
    t1_backward(tr, np.zeros(3))
    assert all(np.all(g == 0) for g in _grads(p))
    w = np.array([0.3, -1.0, 0.5])
    t1_backward(tr, w)
    once = _grads(p)
    t1_backward(tr, w)
    for a, b in zip(_grads(p), once):
        np.testing.assert_allclose(a, 2 * b, rtol=1e-14, atol=0)


def test_t2_single_subbag_equals_t1_with_shared_values():
    x = np.random.default_rng(3).normal(size=(7, 8))
    t2 = _params(4, cls=SubBagModelParams)
    t1 = _params(9)
    t1.load_values(t2)
    _, _, z1, tr1 = t1_forward(x, t1)
    emb, z2, tr2 = t2_forward(partition_by_distribution(np.ones(7) / 7, 1), x, t2)
    np.testing.assert_allclose(z2, z1, atol=1e-14)
    w = np.array([1.0, -2.0, 0.5])
    t1_backward(tr1, w)
    t2_backward(tr2, w)
    for a, b in zip(_grads(t1), _grads(t2)):
        np.testing.assert_allclose(a, b, atol=1e-13)


def test_t2_duplicated_subbags_match_single():
    x = np.random.default_rng(5).normal(size=(4, 8))
    t2 = _params(cls=SubBagModelParams)
    doubled = np.vstack([x, x])
    _, z_one, _ = t2_forward([np.arange(4)], x, t2)
    _, z_two, _ = t2_forward([np.arange(4), np.arange(4, 8)], doubled, t2)
    np.testing.assert_allclose(z_two, z_one, atol=1e-12)


@pytest.mark.parametrize("pooling", ["feature", "logit"])
def test_t2_order_invariance(pooling):
    rng = np.random.default_rng(6)
    x = rng.normal(size=(10, 8))
    t2 = _params(cls=SubBagModelParams)
    part = partition_by_distribution(rng.random(10), 3)
    _, z, _ = t2_forward(part, x, t2, pooling=pooling)
    shuffled = [rng.permutation(g) for g in part.subbags[::-1]]
    _, z2, _ = t2_forward(shuffled, x, t2, pooling=pooling)
    np.testing.assert_allclose(z2, z, atol=1e-12)


def test_feature_and_logit_pooling_agree():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(10, 8))
    t2 = _params(cls=SubBagModelParams)
    part = partition_by_distribution(rng.random(10), 4)
    np.testing.assert_allclose(t2_forward(part, x, t2, "feature")[1], t2_forward(part, x, t2, "logit")[1],
                               atol=1e-12)


def test_t2_partition_errors():
    t2 = _params(cls=SubBagModelParams)
    x = np.ones((4, 8))
    with pytest.raises(PartitionError):
        t2_forward([np.arange(4), np.array([], dtype=int)], x, t2)
    with pytest.raises(PartitionError):
        t2_forward([np.arange(3)], x, t2)
    with pytest.raises(PartitionError):
        t2_forward([np.array([0, 1]), np.array([1, 2, 3])], x, t2)


def test_t2_backward_zero():
    t2 = _params(cls=SubBagModelParams)
    _, _, tr = t2_forward([np.arange(3), np.arange(3, 6)], np.ones((6, 8)), t2)
    t2_backward(tr, np.zeros(3))
    assert all(np.all(g == 0) for g in _grads(t2))


@pytest.mark.parametrize("check", sorted(gradcheck.CHECKS))
@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(check, seed):
    assert gradcheck.CHECKS[check](seed) < gradcheck.GRADCHECK_TOL


def test_twin_model_heads_are_disjoint_and_seeded():
    a = TwinModel.create(8, 3, 6, 5, n_subbags=3, seed=1)
    b = TwinModel.create(8, 3, 6, 5, n_subbags=3, seed=1)
    assert not np.array_equal(a.t1.proj_w.value, a.t2.proj_w.value)
    assert all(np.array_equal(p.value, q.value) for p, q in zip(a.tensors(), b.tensors()))
    assert not np.shares_memory(a.t1.proj_w.value, a.copy().t1.proj_w.value)
    limit = np.sqrt(6 / (8 + 6))
    assert np.all(np.abs(a.t1.proj_w.value) <= limit)


def test_checkpoint_round_trip(tmp_path):
    m = TwinModel.create(8, 3, 6, 5, n_subbags=3, seed=2)
    m.epoch = 17
    for p in m.tensors():
        p.m1[...] = 0.5
        p.m2[...] = 0.25
        p.step_count = 4
    save_checkpoint(m, tmp_path / "best.ckpt")
    back = load_checkpoint(tmp_path / "best.ckpt")
    assert (back.n_subbags, back.seed, back.epoch, back.t1.dim, back.t1.n_classes) == (3, 2, 17, 8, 3)
    for p, q in zip(m.tensors(), back.tensors()):
        assert p.name == q.name
        assert p.value.tobytes() == q.value.tobytes()
        assert q.step_count == 4 and np.all(q.m1 == 0.5) and np.all(q.m2 == 0.25)
    assert encode_checkpoint(back) == encode_checkpoint(m)


def test_checkpoint_corruption(tmp_path):
    data = encode_checkpoint(TwinModel.create(4, 2, 3, 2, n_subbags=2))
    for name, blob in (("magic", b"XXXX" + data[4:]), ("short", data[:-5]), ("trail", data + b"\0")):
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / name)
