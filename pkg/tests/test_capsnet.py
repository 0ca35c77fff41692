import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from icaps import ops
from icaps.capsnet import (
    ClassCapsules,
    MarginLossParams,
    PrimaryCapsules,
    dynamic_routing,
    margin_loss,
    reconstruction_loss,
    squash,
)
from icaps.gradcheck import grad_check
from icaps.ops import ShapeError
from icaps.tensor import Tensor, precision


def _squash_oracle(s):
    n2 = float(s @ s)
    return s * np.sqrt(n2) / (1 + n2)


def test_squash_gradient(rng):
    probe = rng.normal(size=(3, 4))
    rep = grad_check(lambda t: ops.sum(squash(t) * probe), rng.normal(size=(3, 4)))
    assert rep.passed, rep.max_rel_error


def test_squash_zero_and_unit():
    np.testing.assert_array_equal(squash(Tensor(np.zeros(4))).data, np.zeros(4))
    v = np.array([0.6, 0.8, 0.0])
    assert np.isclose(np.linalg.norm(squash(Tensor(v)).data), 0.5)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-10, 10)))
def test_squash_norm_identity(v):
    with precision(np.float64):
        out = squash(Tensor(v)).data
    n2 = v @ v
    assert abs(np.linalg.norm(out) - n2 / (1 + n2)) < 1e-6
    assert np.linalg.norm(out) < 1


def _unrolled_routing(u, w, iterations):
    # u: [d], w: [k, L, d] -- a single primary capsule, written out by hand
    u_hat = [w[j] @ u for j in range(w.shape[0])]
    b = [0.0] * len(u_hat)
    for _ in range(iterations):
        e = [np.exp(bj) for bj in b]
        c = [ej / sum(e) for ej in e]
        v = [_squash_oracle(c[j] * u_hat[j]) for j in range(len(u_hat))]
        b = [b[j] + float(u_hat[j] @ v[j]) for j in range(len(u_hat))]
    return np.stack(v), np.array(c)


def test_routing_matches_hand_unrolled_oracle(rng):
    u = rng.normal(size=3)
    w = rng.normal(size=(2, 4, 3))
    with precision(np.float64):
        out = dynamic_routing(Tensor(u[None]), Tensor(w[None]), iterations=3)
    v_ref, c_ref = _unrolled_routing(u, w, 3)
    assert np.max(np.abs(out.capsules.data - v_ref)) < 1e-6
    assert np.max(np.abs(out.couplings[-1][0] - c_ref)) < 1e-6


def test_single_iteration_routing_is_uniform(rng):
    out = dynamic_routing(Tensor(rng.normal(size=(2, 10, 8))), Tensor(rng.normal(size=(10, 3, 4, 8))), 1)
    np.testing.assert_allclose(out.couplings[0], 1.0 / 3)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_couplings_are_distributions(iterations, seed):
    r = np.random.default_rng(seed)
    out = dynamic_routing(Tensor(r.normal(size=(2, 6, 4))), Tensor(r.normal(size=(6, 3, 4, 4))), iterations)
    assert len(out.couplings) == iterations
    for c in out.couplings:
        assert np.all(np.abs(c.sum(axis=2) - 1) <= 1e-6)
        assert np.all(c >= 0)


def test_routing_rejects_bad_shapes(rng):
    with pytest.raises(ShapeError):
        dynamic_routing(Tensor(rng.normal(size=(2, 5, 4))), Tensor(rng.normal(size=(6, 2, 4, 4))))
    with pytest.raises(ValueError):
        dynamic_routing(Tensor(rng.normal(size=(2, 6, 4))), Tensor(rng.normal(size=(6, 2, 4, 4))), 0)


def test_routing_gradient_single_iteration(rng):
    # with one iteration the couplings are constant, so the gradient is exact
    u = rng.normal(size=(2, 5, 3))
    w = rng.normal(size=(5, 2, 4, 3))
    probe = Tensor(rng.normal(size=(2, 2, 4)))
    rep = grad_check(lambda t: ops.sum(dynamic_routing(Tensor(u), t, 1).capsules * probe), w)
    assert rep.passed, rep.max_rel_error
    rep = grad_check(lambda t: ops.sum(dynamic_routing(t, Tensor(w), 1).capsules * probe), u)
    assert rep.passed, rep.max_rel_error


def test_routing_gradient_treats_couplings_as_constants(rng):
    u = rng.normal(size=(2, 5, 3))
    w = rng.normal(size=(5, 2, 4, 3))
    probe = Tensor(rng.normal(size=(2, 2, 4)))
    with precision(np.float64):
        frozen = dynamic_routing(Tensor(u), Tensor(w), 3).couplings[-1]

    def fixed(t):
        u_hat = ops.sum(t * Tensor(u[:, :, None, None, :]), axis=-1)
        return ops.sum(squash(ops.sum(Tensor(frozen[..., None]) * u_hat, axis=1)) * probe)

    with precision(np.float64):
        wt = Tensor(w, requires_grad=True)
        ops.sum(dynamic_routing(Tensor(u), wt, 3).capsules * probe).backward()
        wf = Tensor(w, requires_grad=True)
        fixed(wf).backward()
    np.testing.assert_allclose(wt.grad, wf.grad, rtol=1e-10, atol=1e-12)


def _caps_with_norms(norms, dim=4):
    caps = np.zeros((len(norms), dim))
    caps[:, 0] = norms
    return Tensor(caps)


def test_margin_loss_examples():
    assert margin_loss(_caps_with_norms([0.9, 0.1]), [0]).item() == pytest.approx(0.0, abs=1e-7)
    assert margin_loss(_caps_with_norms([0.0, 0.0]), [0]).item() == pytest.approx(0.81, abs=1e-6)
    val = margin_loss(_caps_with_norms([0.5, 0.6, 0.0]), [0]).item()
    assert val == pytest.approx(0.285, abs=1e-6)


def test_margin_loss_params_validated():
    with pytest.raises(ValueError):
        MarginLossParams(m_plus=0.1, m_minus=0.9)
    with pytest.raises(ValueError):
        margin_loss(_caps_with_norms([0.5, 0.5]), [2])


def test_margin_loss_gradient(rng):
    labels = np.array([0, 2, 1])
    rep = grad_check(lambda t: margin_loss(t, labels), rng.normal(scale=0.5, size=(3, 3, 4)))
    assert rep.passed, rep.max_rel_error


def test_reconstruction_loss_examples(rng):
    x = rng.random((3, 1, 4, 4))
    assert reconstruction_loss(Tensor(x), Tensor(x)).item() == 0.0
    assert reconstruction_loss(Tensor(np.zeros((1, 2, 2))), Tensor(np.ones((1, 2, 2)))).item() == 4.0
    a, b = rng.random((5, 1, 3, 3)), rng.random((5, 1, 3, 3))
    expected = sum(((a[n] - b[n]) ** 2).sum() for n in range(5)) / 5 * 0.5
    with precision(np.float64):
        assert reconstruction_loss(Tensor(a), Tensor(b), 0.5).item() == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ShapeError):
        reconstruction_loss(Tensor(a), Tensor(b[:, :, :2]))


def test_reconstruction_loss_gradient(rng):
    x = Tensor(rng.random((2, 1, 3, 3)))
    rep = grad_check(lambda t: reconstruction_loss(t, x, 0.5), rng.random((2, 1, 3, 3)))
    assert rep.passed


def test_capsule_layers_shapes(rng):
    primary = PrimaryCapsules(rng, 4, n_types=2, dim=8, kernel=3, stride=2)
    caps = primary(Tensor(rng.normal(size=(3, 4, 7, 7))))
    assert caps.shape == (3, 2 * 3 * 3, 8)
    assert np.all(np.linalg.norm(caps.data, axis=-1) < 1)
    layer = ClassCapsules(rng, 18, 8, k=2, dim=4)
    out = layer(caps)
    assert out.capsules.shape == (3, 2, 4)
    assert out.predictions().shape == (3,)
