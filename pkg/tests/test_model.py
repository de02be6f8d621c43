import numpy as np
import pytest

from oracles import naive_forward
from subspace_triplet.errors import ConfigError, DimensionError, LabelError, NumericalError, TraceError
from subspace_triplet.model import (
    GradCheckBatch,
    ModelParams,
    SoftmaxHead,
    backward,
    forward,
    forward_batch,
    grad_check,
    init_head,
    init_params,
    joint_loss,
    joint_objective,
    lookahead,
    nag_init,
    nag_step,
    relative_error,
    softmax_backward,
    softmax_loss,
    triplet_backward,
    triplet_loss,
)


def test_forward_matches_naive_loops(rng):
    params = init_params(7, 5, (9, 6), rng)
    X = rng.normal(size=(20, 7))
    E, _ = forward_batch(params, X)
    for x, e in zip(X, E):
        assert np.allclose(e, naive_forward(params.layers, x), atol=1e-12)
    assert np.allclose(np.linalg.norm(E, axis=1), 1.0, atol=1e-12)


def test_forward_single_vector_and_dimension_checks(rng):
    params = init_params(4, 3, (5,), rng)
    e, trace = forward(params, np.ones(4))
    assert e.shape == (3,) and len(trace) == 1
    with pytest.raises(DimensionError):
        forward(params, np.ones(5))
    with pytest.raises(DimensionError):
        forward(params, np.ones((2, 4)))


def test_zero_output_raises():
    params = ModelParams(((np.zeros((2, 3)), np.zeros(2)),))
    with pytest.raises(NumericalError):
        forward(params, np.ones(3))


def test_params_are_immutable(rng):
    params = init_params(3, 2, (), rng)
    with pytest.raises(ValueError):
        params.layers[0][0][0, 0] = 1.0


def test_triplet_loss_examples():
    a, p, n = np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.array([0.0, 1.0])
    # d_ap = 0, d_an = 2: satisfied by far more than the margin
    assert triplet_loss(a, p, n, 0.4) == 0.0
    # swap roles: d_ap = 2, d_an = 0
    assert triplet_loss(a, n, p, 0.4) == pytest.approx(2.4)
    # exactly at the margin the hinge is zero
    assert triplet_loss(a, p, a, 0.0) == 0.0
    with pytest.raises(DimensionError):
        triplet_loss(a, p, np.zeros(3), 0.4)


def test_softmax_loss_uniform_head():
    head = SoftmaxHead(np.zeros((4, 3)), np.zeros(4))
    assert softmax_loss(head, np.array([1.0, 0, 0]), 2) == pytest.approx(np.log(4))
    with pytest.raises(LabelError):
        softmax_loss(head, np.array([1.0, 0, 0]), 4)
    with pytest.raises(LabelError):
        softmax_loss(head, np.array([1.0, 0, 0]), -1)


def test_softmax_backward_matches_finite_differences(rng):
    head = init_head(5, 4, rng, scale=3.0)
    e = rng.normal(size=4)
    dW, db, de = softmax_backward(head, e, 2)
    h = 1e-6
    num = np.zeros(4)
    for i in range(4):
        up, dn = e.copy(), e.copy()
        up[i] += h
        dn[i] -= h
        num[i] = (softmax_loss(head, up, 2) - softmax_loss(head, dn, 2)) / (2 * h)
    assert relative_error(de, num) < 1e-6
    assert np.isclose(db.sum(), 0.0)


def test_joint_loss_weighting():
    assert joint_loss([1.0, 3.0], [0.5, 1.5], 2.0) == pytest.approx(2.0 + 2.0 * 1.0)
    assert joint_loss([], [1.0], 1.0) == 1.0
    with pytest.raises(ConfigError):
        joint_loss([1.0], [1.0], -0.1)


@pytest.mark.parametrize("hidden", [(), (6,), (6, 5)])
def test_grad_check_joint_objective(rng, hidden):
    params = init_params(5, 4, hidden, rng)
    head = init_head(3, 4, rng, scale=2.0)
    X = rng.normal(size=(6, 5))
    triplets = np.array([[0, 1, 2], [3, 4, 5], [1, 0, 5]])
    # push the hinge well inside its active region so no coordinate sits on a kink
    batch = GradCheckBatch(X, triplets, np.array([0, 0, 1, 2, 2, 1]), head, alpha=4.5, lam=0.7)
    assert grad_check(params, batch) < 1e-5


def test_grad_check_rejects_bad_step(rng):
    params = init_params(2, 2, (), rng)
    with pytest.raises(ConfigError):
        grad_check(params, GradCheckBatch(rng.normal(size=(3, 2))), h=0.0)


def test_inactive_triplets_have_zero_gradient(rng):
    params = init_params(4, 3, (5,), rng)
    X = rng.normal(size=(3, 4))
    _, grads, _, report = joint_objective(params, None, X, np.array([[0, 0, 1]]), alpha=1e-9)
    # d_ap = 0 and d_an > alpha: inactive
    assert report.active_triplets == 0
    assert all(np.all(g == 0) for g in grads)


def test_backward_rejects_foreign_trace(rng):
    p1 = init_params(3, 2, (4,), rng)
    p2 = init_params(3, 2, (4,), rng)
    _, trace = forward_batch(p1, rng.normal(size=(2, 3)))
    with pytest.raises(TraceError):
        backward(trace, np.ones((2, 2)), p2)
    _, t2 = forward_batch(p2, rng.normal(size=(1, 3)))
    with pytest.raises(TraceError):
        triplet_backward(trace.rows(0), trace.rows(1), t2, 0.4)


def test_nag_zero_momentum_is_sgd():
    theta = [np.array([1.0, -2.0])]
    state = nag_init(theta, momentum=0.0, learning_rate=0.1)
    new, state = nag_step(theta, [np.array([0.5, 1.0])], state)
    assert np.allclose(new[0], [0.95, -2.1])


def test_nag_quadratic_first_step():
    # f(theta) = theta^2 / 2, theta0 = 1, v0 = 0, mu = 0.9, lr = 0.1:
    # gradient at the lookahead point is 1, so v1 = -0.1 and theta1 = 0.9
    theta = [np.array([1.0])]
    state = nag_init(theta, 0.9, 0.1)
    la = lookahead(theta, state)
    theta, state = nag_step(theta, [la[0]], state)
    assert np.allclose(state.velocity[0], -0.1)
    assert np.allclose(theta[0], 0.9)


def test_nag_converges_on_quadratic():
    theta = [np.array([3.0, -4.0])]
    state = nag_init(theta, 0.9, 0.05)
    for _ in range(200):
        la = lookahead(theta, state)
        theta, state = nag_step(theta, [la[0]], state)
    assert np.linalg.norm(theta[0]) < 1e-3


def test_nag_validation():
    with pytest.raises(ConfigError):
        nag_init([np.zeros(2)], momentum=1.0)
    with pytest.raises(ConfigError):
        nag_init([np.zeros(2)], learning_rate=0.0)
    state = nag_init([np.zeros(2)])
    with pytest.raises(DimensionError):
        nag_step([np.zeros(2)], [np.zeros(3)], state)
    with pytest.raises(NumericalError):
        nag_step([np.zeros(2)], [np.array([np.inf, 0.0])], state)


def test_head_requires_two_classes():
    with pytest.raises(ConfigError):
        init_head(1, 3)
