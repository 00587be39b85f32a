import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autometa import tensor as T
from autometa.nn import BNStats, LayerKind, Mode, OptimState, forward, grad_check, step
from autometa.tensor import NumericError, Tensor
from layer_cases import layer_case


# ---------------------------------------------------------------- forward examples

def test_identity_returns_input_exactly():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 4)))
    assert forward(LayerKind.IDENTITY, [x]) is x


def test_batchnorm_constant_channels_give_zero():
    x = np.zeros((4, 3, 5, 5)) + np.array([1.5, -2.0, 7.0])[None, :, None, None]
    out = forward(LayerKind.BATCH_NORM, [Tensor(x)], [Tensor(np.ones(3)), Tensor(np.zeros(3))], Mode.TRAIN)
    np.testing.assert_array_equal(out.data, 0.0)


def test_center_tap_conv_is_identity():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 1, 5, 5))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = forward(LayerKind.CONV3X3, [Tensor(x)], [Tensor(w), Tensor(np.zeros(1))])
    np.testing.assert_allclose(out.data, x, rtol=0, atol=1e-15)


def test_maxpool_small_grid():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = forward(LayerKind.MAX_POOL3X3, [Tensor(x)])
    np.testing.assert_array_equal(out.data, [[[[4, 4], [4, 4]]]])


def test_avgpool_excludes_padding():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    out = forward(LayerKind.AVG_POOL3X3, [Tensor(x)]).data[0, 0]
    # corner window covers {0,1,3,4}; center covers everything
    assert out[0, 0] == pytest.approx((0 + 1 + 3 + 4) / 4)
    assert out[1, 1] == pytest.approx(4.0)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 4, 5))
    w = rng.normal(size=(2, 3, 3, 3))
    b = rng.normal(size=2)
    out = forward(LayerKind.CONV3X3, [Tensor(x)], [Tensor(w), Tensor(b)]).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 2, 4, 5))
    for n in range(2):
        for o in range(2):
            for i in range(4):
                for j in range(5):
                    ref[n, o, i, j] = (xp[n, :, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("kind", [LayerKind.CONV3X3, LayerKind.FACTORIZED_CONV5X5, LayerKind.IDENTITY,
                                  LayerKind.AVG_POOL3X3, LayerKind.MAX_POOL3X3])
def test_block_ops_preserve_spatial_shape(kind):
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 4, 7, 6)))
    params = {LayerKind.CONV3X3: [rng.normal(size=(4, 4, 3, 3)), np.zeros(4)],
              LayerKind.FACTORIZED_CONV5X5: [rng.normal(size=(4, 4, 1, 5)), np.zeros(4),
                                             rng.normal(size=(4, 4, 5, 1)), np.zeros(4)]}.get(kind, [])
    out = forward(kind, [x], [Tensor(p) for p in params])
    assert out.shape == x.shape


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        forward(LayerKind.CONV3X3, [Tensor(np.zeros((1, 2, 4, 4)))],
                [Tensor(np.zeros((3, 5, 3, 3))), Tensor(np.zeros(3))])
    with pytest.raises(ValueError):
        forward(LayerKind.ADD, [Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 3)))])


def test_nan_is_a_hard_error():
    with pytest.raises(NumericError):
        T.relu(Tensor(np.array([np.nan, 1.0])))


# ---------------------------------------------------------------- backward examples

def test_bilinear_gradient_is_x():
    rng = np.random.default_rng(4)
    x = rng.normal(size=7)
    w = Tensor(rng.normal(size=7), requires_grad=True)
    g = T.backward(T.sum_all(T.mul(w, Tensor(x))), [w])[w]
    np.testing.assert_array_equal(g, x)


def test_uniform_logits_gradient():
    b, c = 3, 5
    logits = Tensor(np.zeros((b, c)), requires_grad=True)
    labels = np.array([0, 3, 4])
    g = T.backward(T.softmax_xent(logits, labels), [logits])[logits]
    expected = (np.full((b, c), 1 / c) - np.eye(c)[labels]) / b
    np.testing.assert_allclose(g, expected, atol=1e-15)


def test_unused_parameter_gets_zero_gradient():
    a = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    grads = T.backward(T.sum_all(a), [a, unused])
    np.testing.assert_array_equal(grads[unused], np.zeros((2, 2)))


def test_backward_rejects_non_scalar_and_untracked():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(T.mul(a, 2.0))
    with pytest.raises(ValueError):
        T.backward(Tensor(1.0))


def test_shared_subexpression_accumulates():
    a = Tensor(np.array([2.0]), requires_grad=True)
    b = T.mul(a, a)  # used twice below
    loss = T.sum_all(T.add(b, b))
    np.testing.assert_allclose(T.backward(loss, [a])[a], [8.0])


# ---------------------------------------------------------------- softmax cross-entropy

def test_softmax_xent_values():
    assert T.softmax_xent(Tensor(np.zeros((1, 5))), [2]).item() == pytest.approx(math.log(5), abs=1e-12)
    big = np.zeros((1, 4))
    big[0, 1] = 1000.0
    assert T.softmax_xent(Tensor(big), [1]).item() < 1e-9
    assert T.softmax_xent(Tensor(np.array([[1.0, 2.0]])), [1]).item() == pytest.approx(
        math.log1p(math.exp(-1.0)), abs=1e-12)


def test_softmax_xent_label_range():
    with pytest.raises(ValueError):
        T.softmax_xent(Tensor(np.zeros((2, 3))), [0, 3])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_softmax_xent_translation_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, 6)) * 3
    labels = rng.integers(0, 6, size=4)
    a = T.softmax_xent(Tensor(logits), labels).item()
    b = T.softmax_xent(Tensor(logits + shift), labels).item()
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


# ---------------------------------------------------------------- optimizers

def test_sgd_step():
    (p,) = step(OptimState("sgd", 0.1), [np.array(1.0)], [np.array(2.0)])
    assert p == pytest.approx(0.8)


@pytest.mark.parametrize("g", [1e-3, -0.5, 3.0, -1e4])
def test_adam_first_step_moves_by_lr(g):
    lr = 0.01
    opt = OptimState("adam", lr)
    (p,) = step(opt, [np.array(0.0)], [np.array(g)])
    # m_hat = g, v_hat = g^2, so |dp| = lr * |g| / (|g| + eps)
    assert abs(abs(p) - lr * abs(g) / (abs(g) + 1e-8)) < 1e-15
    assert abs(abs(p) - lr) < 1e-6
    assert opt.step_count == 1


def test_adam_zero_gradient_keeps_params():
    opt = OptimState("adam", 0.01)
    params = [np.array([1.0, -2.0])]
    for _ in range(5):
        params = step(opt, params, [np.zeros(2)])
    np.testing.assert_array_equal(params[0], [1.0, -2.0])
    assert opt.step_count == 5


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(5)
    p0 = rng.normal(size=3)
    gs = rng.normal(size=(4, 3))
    opt = OptimState("adam", 0.05)
    p = [p0]
    for g in gs:
        p = step(opt, p, [g])
    m = v = np.zeros(3)
    ref = p0.copy()
    for t, g in enumerate(gs, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p[0], ref, rtol=1e-14)


def test_optimizers_are_bitwise_deterministic():
    rng = np.random.default_rng(6)
    params = [rng.normal(size=(3, 3))]
    grads = [rng.normal(size=(3, 3))]
    for kind in ("adam", "sgd"):
        a = step(OptimState(kind, 0.1), params, grads)[0]
        b = step(OptimState(kind, 0.1), params, grads)[0]
        assert a.tobytes() == b.tobytes()


def test_step_shape_mismatch():
    with pytest.raises(ValueError):
        step(OptimState("sgd", 0.1), [np.zeros(3)], [np.zeros(4)])


# ---------------------------------------------------------------- gradient checks

def test_grad_check_identity_is_exact():
    x = Tensor(np.random.default_rng(7).normal(size=(1, 2, 3, 3)), requires_grad=True)
    proj = Tensor(np.random.default_rng(8).normal(size=(1, 2, 3, 3)))
    report = grad_check(lambda: T.sum_all(T.mul(forward(LayerKind.IDENTITY, [x]), proj)), {"x": x})
    assert report.passed


@pytest.mark.parametrize("kind", list(LayerKind))
def test_every_layer_kind_passes_grad_check(kind):
    params, loss_fn = layer_case(kind, np.random.default_rng(11))
    report = grad_check(loss_fn, params, tolerance=1e-4, h=1e-3)
    assert report.passed, report.errors
    assert report.skipped_kinks == 0


@pytest.mark.parametrize("mode", [Mode.EVAL_RUNNING, Mode.EVAL_TRANSDUCTION])
def test_batchnorm_eval_modes_grad_check(mode):
    rng = np.random.default_rng(12)
    x = Tensor(rng.normal(size=(8, 3, 3, 3)), requires_grad=True)
    gamma = Tensor(1 + rng.normal(size=3) * 0.2, requires_grad=True)
    beta = Tensor(rng.normal(size=3), requires_grad=True)
    stats = BNStats(rng.normal(size=3), 0.5 + rng.random(3))
    proj = Tensor(rng.normal(size=(8, 3, 3, 3)))
    report = grad_check(
        lambda: T.sum_all(T.mul(forward(LayerKind.BATCH_NORM, [x], [gamma, beta], mode, stats), proj)),
        {"x": x, "gamma": gamma, "beta": beta})
    assert report.passed, report.errors


def test_grad_check_flags_wrong_gradient():
    x = Tensor(np.array([0.3, -0.7]), requires_grad=True)

    def bad_square(t):
        return T._result(t.data ** 2, (t,), lambda g: (g * t.data,), "bad")  # should be 2*t

    report = grad_check(lambda: T.sum_all(bad_square(x)), {"x": x})
    assert not report.passed


def test_kinks_are_skipped_not_compared():
    x = Tensor(np.array([0.0004, 0.5]), requires_grad=True)
    report = grad_check(lambda: T.sum_all(T.relu(x)), {"x": x})
    assert report.skipped_kinks == 1
    assert report.passed


# ---------------------------------------------------------------- batch norm properties

def _bn(x, mode, stats):
    c = x.shape[1]
    return forward(LayerKind.BATCH_NORM, [Tensor(x)], [Tensor(np.full(c, 1.3)), Tensor(np.full(c, 0.2))],
                   mode, stats).data


def test_running_mode_is_per_example():
    rng = np.random.default_rng(13)
    stats = BNStats(rng.normal(size=3), 0.5 + rng.random(3))
    batch = rng.normal(size=(6, 3, 4, 4))
    other = rng.normal(size=(6, 3, 4, 4)) * 5
    alone = _bn(batch[:1], Mode.EVAL_RUNNING, stats)
    mixed = _bn(np.concatenate([batch[:1], other]), Mode.EVAL_RUNNING, stats)[:1]
    assert np.max(np.abs(alone - mixed)) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_batch_stat_modes_are_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 2, 3, 3))
    perm = rng.permutation(5)
    for mode in (Mode.TRAIN, Mode.EVAL_TRANSDUCTION):
        a = _bn(x, mode, BNStats.fresh(2))[perm]
        b = _bn(x[perm], mode, BNStats.fresh(2))
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_train_mode_updates_running_stats_by_ema():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(4, 2, 3, 3)) * 2 + 3
    stats = BNStats.fresh(2)
    _bn(x, Mode.TRAIN, stats)
    m = x.shape[0] * 9
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3)) * m / (m - 1)
    np.testing.assert_allclose(stats.mean, 0.1 * mu, rtol=1e-12)
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * var, rtol=1e-12)
    before = (stats.mean.copy(), stats.var.copy())
    _bn(x, Mode.EVAL_TRANSDUCTION, stats)
    _bn(x, Mode.EVAL_RUNNING, stats)
    np.testing.assert_array_equal(stats.mean, before[0])
    np.testing.assert_array_equal(stats.var, before[1])
