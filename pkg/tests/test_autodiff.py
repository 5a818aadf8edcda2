"""Finite-difference checks of every autodiff op's backward pass."""

import numpy as np
import pytest

from rsvlm import autodiff as ad
from rsvlm.errors import ShapeError
from rsvlm.numerics import Rng, compare_gradients, finite_diff_gradient


def _check_op(build, *shapes, seed=0, tol=1e-6):
    """Compare analytic input gradients of a scalarized op against central
    differences for each input slot."""
    rng = Rng(seed)
    values = [rng.normal(s) for s in shapes]
    for slot in range(len(values)):
        leaves = [ad.param(v.copy()) for v in values]
        out = ad.sum_all(build(*leaves))
        ad.backward(out)
        analytic = leaves[slot].grad

        def f(flat):
            args = [ad.const(v.copy()) for v in values]
            args[slot] = ad.const(flat.reshape(shapes[slot]))
            return float(ad.sum_all(build(*args)).value)

        numeric = finite_diff_gradient(f, values[slot].reshape(-1)).reshape(shapes[slot])
        report = compare_gradients(analytic, numeric)
        assert report.max_relative_error < tol, (slot, report)


def test_add_with_broadcast():
    _check_op(lambda a, b: ad.add(a, b), (3, 4), (1, 4))
    _check_op(lambda a, b: ad.add(a, b), (3, 4), (3, 4))


def test_mul_with_broadcast():
    _check_op(lambda a, b: ad.mul(a, b), (3, 4), (3, 1))
    _check_op(lambda a, b: ad.mul(a, b), (2, 5), (1, 1))


def test_matmul_and_transpose():
    _check_op(lambda a, b: ad.matmul(a, ad.transpose(b)), (3, 4), (5, 4))


def test_concat_and_narrow():
    _check_op(lambda a, b: ad.narrow(ad.concat([a, b], axis=0), 0, 1, 3), (2, 3), (4, 3))
    _check_op(lambda a, b: ad.concat([a, b], axis=1), (3, 2), (3, 4))


def test_softmax_rows_backward():
    _check_op(lambda a, b: ad.mul(ad.softmax_rows(a), b), (4, 5), (4, 5))


def test_layer_norm_backward():
    _check_op(lambda a, b: ad.mul(ad.layer_norm_rows(a), b), (4, 6), (4, 6))


def test_silu_tanh_exp_backward():
    _check_op(lambda a: ad.silu(a), (3, 5))
    _check_op(lambda a: ad.tanh(a), (3, 5))
    _check_op(lambda a: ad.exp(a), (2, 4), seed=3)


def test_l2_normalize_backward():
    _check_op(lambda a, b: ad.mul(ad.l2_normalize_rows(a), b), (4, 5), (4, 5))


def test_scale_neg_mean():
    _check_op(lambda a: ad.scale(ad.neg(a), 2.5), (3, 3))
    _check_op(lambda a: ad.mean_all(a), (4, 6))


def test_embedding_backward_with_repeats():
    rng = Rng(4)
    table_v = rng.normal((7, 3))
    ids = np.array([1, 4, 1, 6, 1])
    weights = rng.normal((5, 3))
    table = ad.param(table_v.copy())
    out = ad.sum_all(ad.mul(ad.embedding(table, ids), ad.const(weights)))
    ad.backward(out)

    def f(flat):
        emb = flat.reshape(7, 3)[ids]
        return float((emb * weights).sum())

    numeric = finite_diff_gradient(f, table_v.reshape(-1)).reshape(7, 3)
    assert compare_gradients(table.grad, numeric).max_relative_error < 1e-6


def test_cross_entropy_backward_with_ignored_rows():
    rng = Rng(5)
    logits_v = rng.normal((6, 9))
    targets = np.array([2, -1, 4, -1, 0, 8])
    logits = ad.param(logits_v.copy())
    loss = ad.cross_entropy(logits, targets)
    ad.backward(loss)

    def f(flat):
        rows = flat.reshape(6, 9)[targets >= 0]
        tgt = targets[targets >= 0]
        mx = rows.max(axis=1, keepdims=True)
        lse = mx[:, 0] + np.log(np.exp(rows - mx).sum(axis=1))
        return float((lse - rows[np.arange(len(tgt)), tgt]).mean())

    numeric = finite_diff_gradient(f, logits_v.reshape(-1)).reshape(6, 9)
    assert compare_gradients(logits.grad, numeric).max_relative_error < 1e-6
    # ignored rows receive no gradient
    assert np.array_equal(logits.grad[1], np.zeros(9))


def test_cross_entropy_validates_targets():
    logits = ad.const(np.zeros((3, 4)))
    with pytest.raises(ShapeError):
        ad.cross_entropy(logits, np.array([0, 1]))
    with pytest.raises(ShapeError):
        ad.cross_entropy(logits, np.array([-1, -1, -1]))


def test_grad_accumulates_over_shared_subexpression():
    x = ad.param(np.array([[2.0]]))
    y = ad.add(ad.mul(x, x), x)  # d/dx (x^2 + x) = 2x + 1
    ad.backward(ad.sum_all(y))
    assert x.grad[0, 0] == pytest.approx(5.0)


def test_backward_requires_scalar():
    x = ad.param(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        ad.backward(ad.add(x, x))


def test_check_gradients_harness_probes_every_param():
    rng = Rng(9)
    a = ad.param(rng.normal((3, 4)))
    b = ad.param(rng.normal((4, 2)))

    def build():
        return ad.sum_all(ad.tanh(ad.matmul(a, b)))

    report = ad.check_gradients(build, [("a", a), ("b", b)], n_probes=10, rng=Rng(1))
    assert report.ok(1e-4)
    assert report.max_relative_error < 1e-6
