import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fairshift.errors import ContractError
from fairshift.fairlosses import (
    CFAIR_HEADS,
    DOMAIN_HEAD,
    LAFTR_HEAD,
    GroupedBatch,
    cfair_from_outputs,
    cfair_loss,
    classification_from_logits,
    classification_loss,
    dann_domain_loss,
    dann_from_outputs,
    laftr_fairness_loss,
    laftr_from_outputs,
    standard_consistency_from_outputs,
    standard_consistency_loss,
)
from fairshift.neuralcore import CLASSIFIER, Network


def _fd(fn, z, h=1e-6):
    g = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        old = z[idx]
        z[idx] = old + h
        fp = fn(z)
        z[idx] = old - h
        fm = fn(z)
        z[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def _close(a, b, tol=1e-6):
    return np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-7)) <= tol


def _batch(rng, n=24, d=4):
    y = np.arange(n) % 2
    a = (np.arange(n) // 2) % 2
    return GroupedBatch(rng.normal(size=(n, d)), y, a)


def _net(d=4, seed=0):
    return Network.build(
        d, [6], 2, seed=seed, adversaries={LAFTR_HEAD: ([5], 1), CFAIR_HEADS[0]: ([5], 2), CFAIR_HEADS[1]: ([5], 2), DOMAIN_HEAD: ([5], 2)}
    )


def test_classification_examples():
    y = np.array([0, 1, 1, 0])
    sat = np.where(np.eye(2)[y] > 0, 30.0, -30.0)
    assert classification_from_logits(sat, y)[0] <= 1e-6
    assert abs(classification_from_logits(np.zeros((4, 2)), y)[0] - math.log(2)) <= 1e-15
    z = np.random.default_rng(0).normal(size=(4, 2))
    per = [-(z[i, y[i]] - np.log(np.exp(z[i]).sum())) for i in range(4)]
    assert abs(classification_from_logits(z, y)[0] - np.mean(per)) <= 1e-14
    with pytest.raises(ContractError):
        classification_from_logits(np.zeros((0, 2)), np.zeros(0, int))


def test_laftr_examples():
    y = np.array([0, 0, 1, 1])
    a = np.array([0, 1, 0, 1])
    half = np.zeros((4, 1))
    assert abs(laftr_from_outputs(half, y, a)[0] - 2.0) <= 1e-15
    exact = np.where(a == 1, 800.0, -800.0)[:, None]
    assert laftr_from_outputs(exact, y, a)[0] == 0.0
    # groups (1,0) and (1,1) absent
    loss, grad = laftr_from_outputs(half[:2], y[:2], a[:2])
    assert abs(loss - 1.0) <= 1e-15


def test_laftr_empty_group_warns(caplog):
    with caplog.at_level("WARNING"):
        laftr_from_outputs(np.zeros((2, 1)), np.array([0, 0]), np.array([0, 1]))
    assert "empty" in caplog.text


@given(st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_laftr_symmetries(seed):
    rng = np.random.default_rng(seed)
    n = 20
    y, a = rng.integers(0, 2, n), rng.integers(0, 2, n)
    z = rng.normal(size=(n, 1)) * 3
    loss = laftr_from_outputs(z, y, a)[0]
    assert loss >= 0
    # complementing the adversary output matches swapping the encoding
    assert abs(loss - laftr_from_outputs(-z, y, 1 - a)[0]) <= 1e-12
    perm = np.arange(n)
    for g in range(4):
        idx = np.flatnonzero(2 * y + a == g)
        perm[idx] = rng.permutation(idx)
    assert abs(loss - laftr_from_outputs(z[perm], y, a)[0]) <= 1e-12


def test_cfair_examples():
    rng = np.random.default_rng(1)
    # balanced: plain mean CE per head
    y = np.array([0, 0, 1, 1] * 3)
    a = np.array([0, 1, 0, 1] * 3)
    outs = (rng.normal(size=(12, 2)), rng.normal(size=(12, 2)))
    loss, _ = cfair_from_outputs(outs, y, a)
    ref = sum(classification_from_logits(outs[k][y == k], a[y == k])[0] for k in (0, 1))
    assert abs(loss - ref) <= 1e-14
    # proportions 0.9 / 0.1 in class 0 give weights 1/1.8 and 1/0.2
    y = np.zeros(10, int)
    a = np.array([0] * 9 + [1])
    z = (rng.normal(size=(10, 2)), np.zeros((10, 2)))
    loss, _ = cfair_from_outputs(z, y, a)
    ce = [-(z[0][i, a[i]] - np.log(np.exp(z[0][i]).sum())) for i in range(10)]
    w = np.where(a == 0, 1 / 1.8, 1 / 0.2)
    assert abs(loss - np.mean(w * ce)) <= 1e-14
    sat = np.where(np.eye(2)[a] > 0, 40.0, -40.0)
    assert cfair_from_outputs((sat, sat), y, a)[0] <= 1e-6


def test_dann_examples():
    d = np.array([0, 1] * 5)
    assert abs(dann_from_outputs(np.zeros((10, 2)), d)[0] - math.log(2)) <= 1e-15
    sat = np.where(np.eye(2)[d] > 0, 30.0, -30.0)
    assert dann_from_outputs(sat, d)[0] <= 1e-6
    with pytest.raises(ContractError):
        dann_from_outputs(np.zeros((3, 2)), np.zeros(3, int))


def test_output_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    n = 16
    y, a = rng.integers(0, 2, n), rng.integers(0, 2, n)
    y[:4], a[:4] = [0, 0, 1, 1], [0, 1, 0, 1]
    z = rng.normal(size=(n, 2))
    assert _close(classification_from_logits(z, y)[1], _fd(lambda t: classification_from_logits(t, y)[0], z))
    h = rng.normal(size=(n, 1))
    assert _close(laftr_from_outputs(h, y, a)[1], _fd(lambda t: laftr_from_outputs(t, y, a)[0], h))
    z2 = rng.normal(size=(n, 2))
    _, (g0, g1) = cfair_from_outputs((z, z2), y, a)
    assert _close(g0, _fd(lambda t: cfair_from_outputs((t, z2), y, a)[0], z))
    assert _close(g1, _fd(lambda t: cfair_from_outputs((z, t), y, a)[0], z2))
    mask = rng.random(n) < 0.5
    pseudo = rng.integers(0, 2, n)
    assert _close(
        standard_consistency_from_outputs(z, pseudo, mask)[1], _fd(lambda t: standard_consistency_from_outputs(t, pseudo, mask)[0], z)
    )


def test_network_level_gradients_for_head_parameters():
    rng = np.random.default_rng(3)
    net = _net()
    batch = _batch(rng)
    params = net.parameters()
    for loss_fn, heads in (
        (laftr_fairness_loss, [LAFTR_HEAD]),
        (cfair_loss, list(CFAIR_HEADS)),
        (lambda n, b: dann_domain_loss(n, b.features, b.sensitive), [DOMAIN_HEAD]),
        (classification_loss, [CLASSIFIER]),
    ):
        _, grads = loss_fn(net, batch)
        for name in grads:
            if name.split(".")[0] not in heads:
                continue
            p = params[name]
            fn = lambda t, p=p: (p.__setitem__(Ellipsis, t), loss_fn(net, batch)[0])[1]
            orig = p.copy()
            assert _close(grads[name], _fd(fn, p.copy()), tol=1e-5), name
            p[...] = orig


def test_classification_encoder_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    net = _net()
    batch = _batch(rng)
    _, grads = classification_loss(net, batch)
    p = net.parameters()["encoder.0.W"]
    orig = p.copy()
    fd = _fd(lambda t: (p.__setitem__(Ellipsis, t), classification_loss(net, batch)[0])[1], p.copy())
    p[...] = orig
    assert _close(grads["encoder.0.W"], fd, tol=1e-5)


def test_adversary_encoder_gradient_is_reversed():
    rng = np.random.default_rng(5)
    net = _net()
    batch = _batch(rng)
    _, grads = laftr_fairness_loss(net, batch)
    p = net.parameters()["encoder.0.b"]
    orig = p.copy()
    fd = _fd(lambda t: (p.__setitem__(Ellipsis, t), laftr_fairness_loss(net, batch)[0])[1], p.copy())
    p[...] = orig
    assert _close(grads["encoder.0.b"], -fd, tol=1e-5)


def test_standard_consistency_examples():
    rng = np.random.default_rng(6)
    net, teacher = _net(seed=1), _net(seed=2)
    x = rng.normal(size=(12, 4))
    xt = x + 0.3 * rng.normal(size=x.shape)
    loss, grads, count = standard_consistency_loss(net, teacher, x, xt, 1.0)
    assert loss == 0.0 and count == 0 and all(np.all(g == 0) for g in grads.values())
    loss, _, count = standard_consistency_loss(net, teacher, x, xt, 0.0)
    pseudo = np.argmax(teacher.logits(x), axis=1)
    assert count == 12 and abs(loss - classification_from_logits(net.logits(xt), pseudo)[0]) <= 1e-14
    with pytest.raises(ContractError):
        standard_consistency_loss(net, teacher, x, xt, 1.5)


def test_self_agreement_with_saturated_outputs():
    net = _net()
    net.classifier[0].weights *= 1e4
    x = np.random.default_rng(7).normal(size=(10, 4)) + 3.0
    loss, _, count = standard_consistency_loss(net, net.copy(), x, x, 0.95)
    assert count == 10 and loss <= 1e-6


@given(st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_losses_are_nonnegative(seed):
    rng = np.random.default_rng(seed)
    n = 12
    y, a = rng.integers(0, 2, n), rng.integers(0, 2, n)
    z = rng.normal(size=(n, 2)) * 5
    assert classification_from_logits(z, y)[0] >= 0
    assert laftr_from_outputs(z[:, :1], y, a)[0] >= 0
    assert cfair_from_outputs((z, -z), y, a)[0] >= 0
    assert standard_consistency_from_outputs(z, y, a.astype(bool))[0] >= 0


def test_teacher_receives_no_gradient():
    rng = np.random.default_rng(8)
    net, teacher = _net(seed=1), _net(seed=2)
    before = {k: v.copy() for k, v in teacher.parameters().items()}
    x = rng.normal(size=(8, 4))
    standard_consistency_loss(net, teacher, x, x, 0.0)
    assert all(np.array_equal(before[k], v) for k, v in teacher.parameters().items())


def test_grouped_batch_length_check():
    with pytest.raises(ContractError):
        GroupedBatch(np.zeros((3, 2)), [0, 1], [0, 1, 0])
