import numpy as np
import pytest

from vrgadapter.branches import (
    AuxBranch,
    aux_backward,
    aux_logits,
    build_prototypes,
    zero_shot_backward,
    zero_shot_logits,
)
from vrgadapter.errors import DataError, DegenerateInputError, DimensionError
from vrgadapter.numkernel import Param, grad_check


def test_zero_shot_orthonormal_prototypes():
    W = np.linalg.qr(np.random.default_rng(0).normal(size=(4, 4)))[0]
    np.testing.assert_allclose(zero_shot_logits(W[2:3], W), [[0, 0, 1, 0]], atol=1e-12)


def test_zero_shot_raw_zero_feature():
    np.testing.assert_array_equal(zero_shot_logits(np.zeros((1, 3)), np.ones((2, 3)), normalize=False), 0)


def test_zero_shot_hand_cosines():
    p = zero_shot_logits(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0], [0.6, 0.8]]))
    np.testing.assert_allclose(p, [[1.0, 0.6]], atol=1e-15)


def test_zero_shot_degenerate_rows():
    with pytest.raises(DegenerateInputError):
        zero_shot_logits(np.zeros((1, 2)), np.ones((2, 2)))
    with pytest.raises(DimensionError):
        zero_shot_logits(np.ones((1, 3)), np.ones((2, 2)))


def test_prototypes_examples():
    v = np.array([1.0, -2.0, 3.0])
    bank = build_prototypes({"a": (np.stack([v, -v, v * 2]), np.array([0, 0, 1]))}, 2)
    np.testing.assert_array_equal(bank[0].proto, [np.zeros(3), 2 * v])
    np.testing.assert_array_equal(bank[0].delta.value, 0)


@pytest.mark.parametrize("seed", range(5))
def test_prototypes_match_mean_oracle(seed):
    g = np.random.default_rng(seed)
    feats = g.normal(size=(3, 4, 5))
    flat, labels = feats.reshape(12, 5), np.repeat(np.arange(3), 4)
    order = g.permutation(12)
    bank = build_prototypes({"k": (flat[order], labels[order])}, 3)
    oracle = np.array([[sum(feats[i, j, d] for j in range(4)) / 4 for d in range(5)] for i in range(3)])
    np.testing.assert_allclose(bank[0].proto, oracle, rtol=0, atol=1e-12)


def test_prototypes_missing_class():
    with pytest.raises(DataError):
        build_prototypes({"k": (np.ones((2, 3)), np.array([0, 0]))}, 2)


def test_aux_examples():
    b = AuxBranch("k", np.array([[1.0], [-1.0]]), Param(np.array([[0.5], [0.0]])))
    np.testing.assert_array_equal(aux_logits(np.array([[2.0]]), b), [[3.0, -2.0]])
    np.testing.assert_array_equal(aux_logits(np.zeros((1, 1)), b), 0)
    b.delta.value[:] = 0
    np.testing.assert_array_equal(aux_logits(np.array([[2.0]]), b), [[2.0, -2.0]])
    with pytest.raises(DimensionError):
        aux_logits(np.ones((1, 2)), b)


@pytest.mark.parametrize("seed", range(5))
def test_aux_at_init_is_brute_force_dot_product(seed):
    g = np.random.default_rng(seed)
    C, N, D = g.integers(2, 6), g.integers(1, 5), 4
    feats = g.normal(size=(C * N, D))
    labels = np.repeat(np.arange(C), N)
    bank = build_prototypes({"k": (feats, labels)}, C)
    x = g.normal(size=(7, D))
    got = aux_logits(x, bank[0])
    for s in range(7):
        for i in range(C):
            assert got[s, i] == pytest.approx(sum(x[s, d] * bank[0].proto[i, d] for d in range(D)), abs=1e-12)


def test_class_permutation_permutes_columns():
    g = np.random.default_rng(3)
    C, N, D = 5, 3, 4
    feats, labels = g.normal(size=(C * N, D)), np.repeat(np.arange(C), N)
    perm = g.permutation(C)
    inv = np.argsort(perm)
    x = g.normal(size=(6, D))
    b = build_prototypes({"k": (feats, labels)}, C)[0]
    bp = build_prototypes({"k": (feats, inv[labels])}, C)[0]
    np.testing.assert_allclose(aux_logits(x, bp), aux_logits(x, b)[:, perm], atol=1e-14)
    W = g.normal(size=(C, D))
    np.testing.assert_allclose(zero_shot_logits(x, W[perm]), zero_shot_logits(x, W)[:, perm], atol=1e-14)


@pytest.mark.parametrize("normalize", [True, False])
@pytest.mark.parametrize("seed", range(10))
def test_zero_shot_gradient(seed, normalize):
    g = np.random.default_rng(seed)
    f = g.normal(size=(6, 5))
    W = Param(g.normal(size=(4, 5)))
    r = g.normal(size=(6, 4))

    def loss():
        W.grad = zero_shot_backward(f, W.value, r, normalize, scale=2.0)
        return float((zero_shot_logits(f, W.value, normalize, scale=2.0) * r).sum())

    assert grad_check(loss, [W]).passed


@pytest.mark.parametrize("seed", range(10))
def test_aux_gradient(seed):
    g = np.random.default_rng(seed)
    b = AuxBranch("k", g.normal(size=(4, 3)), Param(g.normal(size=(4, 3))))
    f, r = g.normal(size=(5, 3)), g.normal(size=(5, 4))

    def loss():
        b.delta.zero_grad()
        aux_backward(f, b, r)
        return float((aux_logits(f, b) * r).sum())

    assert grad_check(loss, [b.delta]).passed
