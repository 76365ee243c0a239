import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skatdnn.errors import ContractError
from skatdnn.objectives import (Adam, AamHead, ApHead, LrSchedule, aam_logits, aam_loss, adam_step,
                                ap_loss, combined_loss, lr_at)
from skatdnn.tensor import Tensor, grad_check

from conftest import SEEDS, leaf


def unit_rows(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def softmax_ce(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean()


# -- AAM ----------------------------------------------------------------------------------------
def test_aam_zero_margin_is_scaled_cosine_softmax(rng):
    emb, w = rng.standard_normal((6, 5)), rng.standard_normal((4, 5))
    labels = np.array([0, 1, 2, 3, 0, 1])
    cos = unit_rows(emb) @ unit_rows(w).T
    loss = aam_loss(Tensor(emb), labels, Tensor(w), margin=0.0, scale=30.0).item()
    assert abs(loss - softmax_ce(30 * cos, labels)) < 1e-10


def test_aam_on_target_matches_extended_precision(rng):
    w = rng.standard_normal((5, 8))
    emb = w[[2]] * 3.7
    loss = aam_loss(Tensor(emb), np.array([2]), Tensor(w), margin=0.2, scale=30.0).item()
    mpmath.mp.dps = 50
    unit = [mpmath.matrix(list(r)) / mpmath.norm(mpmath.matrix(list(r))) for r in w]
    logits = [30 * mpmath.cos(mpmath.mpf("0.2")) if j == 2 else 30 * (unit[2].T * unit[j])[0]
              for j in range(5)]
    oracle = -logits[2] + mpmath.log(sum(mpmath.e ** v for v in logits))
    assert abs(loss - float(oracle)) < 1e-10


def test_aam_uniform_logits_give_log_classes():
    classes = 7
    w = np.eye(classes + 1)[:classes]
    emb = np.eye(classes + 1)[[classes] * 3]
    loss = aam_loss(Tensor(emb), np.array([0, 3, 6]), Tensor(w), margin=0.0).item()
    assert abs(loss - math.log(classes)) < 1e-9


def test_aam_target_logit_and_guard():
    w = np.array([[1.0, 0.0], [0.0, 1.0]])
    for theta in (0.3, 1.5, math.pi - 0.1):
        emb = np.array([[math.cos(theta), math.sin(theta)]])
        target = aam_logits(Tensor(emb), np.array([0]), Tensor(w), 0.2, 30.0).data[0, 0]
        expected = math.cos(theta + 0.2) if theta + 0.2 < math.pi else math.cos(theta) - 0.2 * math.sin(0.2)
        assert abs(target / 30 - expected) < 1e-12


def test_aam_rejects_bad_labels(rng):
    with pytest.raises(ContractError):
        aam_loss(Tensor(rng.standard_normal((2, 3))), np.array([0, 4]), Tensor(rng.standard_normal((4, 3))))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 0.6), st.floats(0.0, 0.6))
def test_aam_margin_monotone(seed, m1, m2):
    rng = np.random.default_rng(seed)
    emb, w = Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal((3, 4)))
    labels = rng.integers(0, 3, 5)
    lo, hi = sorted((m1, m2))
    assert aam_loss(emb, labels, w, hi).item() >= aam_loss(emb, labels, w, lo).item() - 1e-12
    assert aam_loss(emb, labels, w, lo).item() >= 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(1e-3, 1e3))
def test_aam_scale_invariant_embeddings(seed, k):
    rng = np.random.default_rng(seed)
    emb, w = rng.standard_normal((4, 6)), Tensor(rng.standard_normal((3, 6)))
    labels = rng.integers(0, 3, 4)
    a = aam_loss(Tensor(emb), labels, w).item()
    b = aam_loss(Tensor(emb * k), labels, w).item()
    assert abs(a - b) < 1e-10


@pytest.mark.parametrize("seed", SEEDS)
def test_aam_gradients(seed):
    rng = np.random.default_rng(seed)
    emb, head = leaf(rng, 6, 5), AamHead(4, 5, rng)
    labels = rng.integers(0, 4, 6)
    err = grad_check(lambda: head(emb, labels), [emb, head.weight], rng=rng)
    assert err < 1e-4, err


# -- AP -----------------------------------------------------------------------------------------
def test_ap_separable_limit():
    pairs = np.array([[[1.0, 0.0], [2.0, 0.0]], [[0.0, 1.0], [0.0, 3.0]]])
    loss = ap_loss(Tensor(pairs), Tensor(np.array([1000.0])), Tensor(np.array([0.0]))).item()
    assert 0 <= loss < 1e-12


@pytest.mark.parametrize("w,b", [(10.0, -5.0), (0.5, 3.0), (-4.0, 0.0)])
def test_ap_identical_prototypes_give_log_speakers(rng, w, b):
    pairs = np.empty((5, 2, 4))
    pairs[:, 0] = rng.standard_normal((5, 4))
    pairs[:, 1] = rng.standard_normal(4)
    loss = ap_loss(Tensor(pairs), Tensor(np.array([w])), Tensor(np.array([b]))).item()
    assert abs(loss - math.log(5)) < 1e-12


def test_ap_direct_formula(rng):
    pairs = rng.standard_normal((6, 2, 5))
    cos = unit_rows(pairs[:, 0]) @ unit_rows(pairs[:, 1]).T
    loss = ap_loss(Tensor(pairs), Tensor(np.array([7.0])), Tensor(np.array([-2.0]))).item()
    assert abs(loss - softmax_ce(7 * cos - 2, np.arange(6))) < 1e-12
    clamped = ap_loss(Tensor(pairs), Tensor(np.array([-1.0])), Tensor(np.array([0.0]))).item()
    assert abs(clamped - softmax_ce(1e-6 * cos, np.arange(6))) < 1e-12


@pytest.mark.parametrize("shape", [(1, 2, 4), (3, 3, 4), (6, 4)])
def test_ap_shape_contract(rng, shape):
    with pytest.raises(ContractError):
        ApHead()(Tensor(rng.standard_normal(shape)))


@pytest.mark.parametrize("seed", SEEDS)
def test_ap_gradients(seed):
    rng = np.random.default_rng(seed)
    pairs, head = leaf(rng, 4, 2, 5), ApHead(rng.uniform(1, 10), rng.uniform(-5, 5))
    err = grad_check(lambda: head(pairs), [pairs, head.w, head.b], rng=rng)
    assert err < 1e-4, err


# -- combined -------------------------------------------------------------------------------------
def test_combined_is_sum_of_parts(rng):
    emb = Tensor(rng.standard_normal((8, 5)))
    labels = np.array([0, 0, 2, 2, 1, 1, 3, 3])
    aam, ap = AamHead(4, 5, rng), ApHead()
    total = combined_loss(emb, labels, aam, ap).item()
    parts = aam(emb, labels).item() + ap(Tensor(emb.data.reshape(4, 2, 5))).item()
    assert total == parts
    cos = unit_rows(emb.data) @ unit_rows(aam.weight.data).T
    pairs = emb.data.reshape(4, 2, 5)
    oracle = (softmax_ce(30 * np.where(np.eye(4)[labels] > 0, np.cos(np.arccos(cos) + 0.2), cos), labels)
              + softmax_ce(10 * unit_rows(pairs[:, 0]) @ unit_rows(pairs[:, 1]).T - 5, np.arange(4)))
    assert abs(total - oracle) < 1e-9


def test_combined_requires_pairs(rng):
    aam, ap = AamHead(3, 4, rng), ApHead()
    with pytest.raises(ContractError):
        combined_loss(Tensor(rng.standard_normal((5, 4))), np.zeros(5, int), aam, ap)
    with pytest.raises(ContractError):
        combined_loss(Tensor(rng.standard_normal((4, 4))), np.array([0, 1, 2, 2]), aam, ap)


# -- Adam -----------------------------------------------------------------------------------------
def _adam(value, decay=0.0):
    p = Tensor(np.array(value, dtype=float), requires_grad=True)
    return p, Adam([("p", p)], weight_decay=decay)


def test_adam_zero_gradient_is_still():
    p, opt = _adam([1.0, -2.0])
    p.grad = np.zeros(2)
    for _ in range(5):
        opt.step(1e-2)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_closed_form():
    g = np.array([0.3, -2.0, 1e-3])
    p, opt = _adam(np.zeros(3))
    p.grad = g
    opt.step(1e-3)
    np.testing.assert_allclose(p.data, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_constant_gradient_limit():
    p, opt = _adam(np.zeros(2))
    p.grad = np.array([0.5, -3.0])
    for _ in range(3000):
        before = p.data.copy()
        opt.step(1e-3)
    np.testing.assert_allclose(before - p.data, 1e-3 * np.sign(p.grad), rtol=1e-6)


def test_adam_decoupled_decay():
    p, opt = _adam([2.0, -4.0], decay=2e-5)
    p.grad = np.zeros(2)
    opt.step(0.1)
    np.testing.assert_allclose(p.data, np.array([2.0, -4.0]) * (1 - 0.1 * 2e-5), rtol=1e-15)


def test_adam_functional_matches_class_and_state_roundtrip(rng):
    p, opt = _adam(rng.standard_normal(4), decay=2e-5)
    params, state = {"p": p.data.copy()}, None
    for _ in range(4):
        g = rng.standard_normal(4)
        p.grad = g
        opt.step(1e-2)
        params, state = adam_step(params, {"p": g}, state, 1e-2)
    np.testing.assert_allclose(p.data, params["p"], rtol=1e-14)
    saved = {k: v.copy() for k, v in opt.state_dict().items()}
    q, other = _adam(p.data.copy(), decay=2e-5)
    other.load_state_dict(saved)
    p.grad = q.grad = np.ones(4)
    opt.step(1e-2)
    other.step(1e-2)
    np.testing.assert_array_equal(p.data, q.data)


# -- schedule -------------------------------------------------------------------------------------
def test_schedule_landmarks():
    s = LrSchedule(steps_per_epoch=4)
    assert lr_at(s, 0, 0) == 1e-8
    assert abs(lr_at(s, 1, 0) - 1e-3) < 1e-18
    assert abs(lr_at(s, 26, 0) - 0.8e-3) < 1e-18
    assert abs(lr_at(s, 51, 0) - 0.64e-3) < 1e-18
    assert abs(lr_at(s, 0, 2) - (1e-8 + (1e-3 - 1e-8) / 2)) < 1e-18


def test_schedule_cosine_midpoint():
    s = LrSchedule()
    for epoch in (5, 13, 24):
        progress = (epoch - 1) / 24
        expected = 1e-8 + (1e-3 - 1e-8) * (1 + math.cos(math.pi * progress)) / 2
        assert abs(s.lr_at(epoch) - expected) < 1e-18


def test_schedule_continuous_positive_and_periodic():
    s = LrSchedule(steps_per_epoch=50)
    lrs = np.array([s.lr_at(e, k) for e in range(25) for k in range(50)])
    assert np.all(lrs > 0)
    assert np.max(np.abs(np.diff(lrs))) < 1e-3 / 40
    nxt = np.array([s.lr_at(e + 25, k) for e in range(25) for k in range(50)])
    shape = (lrs - 1e-8) / (1e-3 - 1e-8)
    np.testing.assert_allclose((nxt - 1e-8) / (0.8e-3 - 1e-8), shape, rtol=1e-9, atol=1e-15)


@pytest.mark.parametrize("kwargs", [dict(warmup_epochs=25), dict(max_lr=0.0), dict(steps_per_epoch=0)])
def test_schedule_rejects(kwargs):
    with pytest.raises(ContractError):
        LrSchedule(**kwargs)
    with pytest.raises(ContractError):
        LrSchedule().lr_at(-1)
