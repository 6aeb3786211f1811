import numpy as np
import pytest

from fedsplat.optim import Adam


def reference_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    """Textbook Adam(W) loop, one parameter vector."""
    p = p.copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        p = p - lr * wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


@pytest.mark.parametrize("wd", [0.0, 0.1])
def test_matches_reference(rng, wd):
    p0 = rng.normal(size=7)
    grads = [rng.normal(size=7) for _ in range(5)]
    opt = Adam()
    p = p0.copy()
    opt.add("p", p, 0.01, wd)
    for g in grads:
        opt.step({"p": g})
    np.testing.assert_allclose(p, reference_adam(p0, grads, 0.01, wd=wd), rtol=1e-12, atol=1e-15)


def test_first_step_moves_by_lr(rng):
    # with bias correction the first update is lr * sign(g) (up to eps)
    p = np.zeros(4)
    opt = Adam()
    opt.add("p", p, 0.1)
    opt.step({"p": np.array([3.0, -0.2, 1e-3, -50.0])})
    np.testing.assert_allclose(p, [-0.1, 0.1, -0.1, 0.1], rtol=1e-4)


def test_groups_count_their_own_steps(rng):
    a, b = np.zeros(2), np.zeros(2)
    opt = Adam()
    opt.add("a", a, 0.1)
    opt.step({"a": np.ones(2)})
    opt.step({"a": np.ones(2)})
    opt.add("b", b, 0.1)
    opt.step({"a": np.ones(2), "b": np.ones(2), "unknown": np.ones(3)})
    assert opt.groups["a"].step == 3 and opt.groups["b"].step == 1
    np.testing.assert_allclose(b, -0.1, rtol=1e-6)


def test_minimises_quadratic():
    target = np.array([1.0, -2.0, 0.5])
    x = np.zeros(3)
    opt = Adam()
    opt.add("x", x, 0.05)
    for _ in range(2000):
        opt.step({"x": 2 * (x - target)})
    np.testing.assert_allclose(x, target, atol=1e-3)


def test_rejects_bad_input():
    opt = Adam()
    with pytest.raises(ValueError):
        opt.add("x", np.zeros((3, 3))[:, 0], 0.1)  # strided view
    opt.add("x", np.zeros(3), 0.1)
    with pytest.raises(ValueError):
        opt.step({"x": np.zeros(4)})


def test_remap_rows_keeps_and_zeroes_moments():
    p = np.arange(3.0)
    opt = Adam()
    opt.add("p", p, 0.1)
    opt.step({"p": np.array([1.0, 2.0, 3.0])})
    m_old = opt.groups["p"].m.copy()
    opt.remap_rows(["p"], {"p": np.array([10.0, 20.0, 30.0])}, np.array([2, -1, 0]))
    grp = opt.groups["p"]
    np.testing.assert_array_equal(grp.param, [10.0, 20.0, 30.0])
    np.testing.assert_array_equal(grp.m, [m_old[2], 0.0, m_old[0]])
    assert grp.v[1] == 0.0
    with pytest.raises(ValueError):
        opt.remap_rows(["p"], {"p": np.zeros(2)}, np.array([0, 1, 2]))


def test_reset_moments():
    opt = Adam()
    opt.add("p", np.zeros(2), 0.1)
    opt.step({"p": np.ones(2)})
    opt.reset_moments("p")
    assert not opt.groups["p"].m.any() and not opt.groups["p"].v.any()
