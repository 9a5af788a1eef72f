import gc
import weakref

import numpy as np
import pytest

from dsnerf import autodiff as ad
from dsnerf.errors import UsageError


def numeric_check(build, shapes, seed=0, eps=1e-6, positive=()):
    rng = np.random.default_rng(seed)
    xs = [rng.standard_normal(s) for s in shapes]
    for i in positive:
        xs[i] = np.abs(xs[i]) + 0.1

    def run(vals):
        t = ad.Tape()
        vs = [t.var(v) for v in vals]
        return t, vs, build(vs)

    tape, vs, out = run(xs)
    w = rng.standard_normal(out.shape)
    grads = tape.backward(out, seed=w)
    worst = 0.0
    for i, x in enumerate(xs):
        num = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            hi = [a.copy() for a in xs]
            lo = [a.copy() for a in xs]
            hi[i][idx] += eps
            lo[i][idx] -= eps
            num[idx] = ((run(hi)[2].value - run(lo)[2].value) * w).sum() / (2 * eps)
        worst = max(worst, np.abs(num - grads[vs[i]]).max() / max(1.0, np.abs(num).max()))
    return worst


CASES = {
    "add": (lambda v: ad.add(v[0], v[1]), [(3, 4), (1, 4)]),
    "sub": (lambda v: ad.sub(v[0], v[1]), [(3, 4), (3, 4)]),
    "mul": (lambda v: ad.mul(v[0], v[1]), [(3, 4), (3, 1)]),
    "operators": (lambda v: 2.0 - v[0] * v[1] + (-v[0]), [(2, 3), (2, 3)]),
    "square": (lambda v: ad.square(v[0]), [(3, 2)]),
    "exp": (lambda v: ad.exp(v[0]), [(3, 2)]),
    "sin_cos": (lambda v: ad.mul(ad.sin(v[0]), ad.cos(v[0])), [(3, 2)]),
    "relu": (lambda v: ad.relu(v[0]), [(3, 4)]),
    "softplus": (lambda v: ad.softplus(v[0]), [(3, 4)]),
    "sigmoid": (lambda v: ad.sigmoid(v[0]), [(3, 4)]),
    "sum_all": (lambda v: ad.sum_all(v[0]), [(3, 4)]),
    "sum_rows": (lambda v: ad.sum_rows(v[0]), [(4, 3)]),
    "mean_all": (lambda v: ad.mean_all(v[0]), [(4, 3)]),
    "linear": (lambda v: ad.linear(v[0], v[1], v[2]), [(5, 3), (3, 4), (4,)]),
    "concat": (lambda v: ad.concat([v[0], v[1]]), [(5, 3), (5, 2)]),
    "broadcast_rows": (lambda v: ad.broadcast_rows(v[0], 5), [(1, 3)]),
    "take_row": (lambda v: ad.take_row(v[0], 2), [(4, 3)]),
    "scatter_rows": (lambda v: ad.scatter_rows(v[0], np.array([3, 0]), 5), [(2, 3)]),
    "reshape": (lambda v: ad.reshape(v[0], (6, 2)), [(3, 4)]),
    "normalize_rows": (lambda v: ad.normalize_rows(v[0]), [(4, 3)]),
    "positional_encoding": (lambda v: ad.positional_encoding(v[0], 3, True), [(4, 3)]),
    "positional_encoding_no_input": (lambda v: ad.positional_encoding(v[0], 2, False), [(4, 3)]),
    "mse_loss": (lambda v: ad.mse_loss(v[0], np.ones((4, 3))), [(4, 3)]),
    "composite": (
        lambda v: ad.composite(ad.softplus(v[0]), ad.sigmoid(v[1]), np.full((2, 6), 0.3), np.array([0.2, 0.5, 0.9])),
        [(2, 6), (2, 6, 3)],
    ),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_finite_differences(name):
    build, shapes = CASES[name]
    assert numeric_check(build, shapes) < 1e-6


def test_fan_out_accumulates():
    t = ad.Tape()
    x = t.var(np.array([2.0]))
    y = ad.sum_all(x * x + x)
    assert np.allclose(t.backward(y)[x], [5.0])


def test_scalar_root_required_without_seed():
    t = ad.Tape()
    x = t.var(np.ones(3))
    with pytest.raises(UsageError):
        t.backward(ad.sigmoid(x))


def test_wrt_restricts_leaves():
    t = ad.Tape()
    a, b = t.var(np.ones(2)), t.var(np.ones(2))
    g = t.backward(ad.sum_all(a * b), wrt=[a])
    assert a in g and b not in g


def test_constants_get_no_gradient():
    t = ad.Tape()
    a, c = t.var(np.ones(2)), t.const(np.full(2, 3.0))
    g = t.backward(ad.sum_all(a * c))
    assert np.allclose(g[a], 3.0) and c not in g


def test_repeated_backward_on_one_recording():
    t = ad.Tape()
    x = t.var(np.array([[0.3, -0.2]]))
    y = ad.sum_all(ad.softplus(x))
    first = t.backward(y)[x]
    assert np.array_equal(first, t.backward(y)[x])


def test_mixing_tapes_rejected():
    a, b = ad.Tape(), ad.Tape()
    with pytest.raises(UsageError):
        ad.add(a.var(np.ones(1)), b.var(np.ones(1)))


def test_dropped_tape_is_freed():
    t = ad.Tape()
    x = t.var(np.ones((3, 3)))
    ad.sigmoid(x)
    ref = weakref.ref(t)
    del t
    gc.collect()
    assert ref() is None
    with pytest.raises(UsageError):
        x.tape


def test_composite_matches_closed_form():
    t = ad.Tape()
    sigma = t.var(np.array([[1.0, 2.0]]))
    color = t.var(np.array([[[1.0, 0, 0], [0, 1.0, 0]]]))
    delta = np.array([[0.5, 0.25]])
    bg = np.array([0.0, 0.0, 1.0])
    out = ad.composite(sigma, color, delta, bg).value[0]
    t1 = np.exp(-0.5)
    assert np.allclose(out, [1 - t1, t1 * (1 - np.exp(-0.5)), t1 * np.exp(-0.5)])
