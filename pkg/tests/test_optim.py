"""Optimizer updates against closed forms and a reference recomputation."""

import numpy as np
import pytest

from metafew.errors import ContractError, DimensionError
from metafew.optim import Adam, OptimizerState, Sgd, adam_step, sgd_step
from metafew.tensor import Tensor

from oracles import adam_step_ref, sgd_step_ref


def params_and_grads(seed=0, n=3):
    rng = np.random.default_rng(seed)
    params = [Tensor(rng.standard_normal((2, 3)).astype(np.float32), requires_grad=True)
              for _ in range(n)]
    grads = [rng.standard_normal((2, 3)).astype(np.float32) for _ in range(n)]
    return params, grads


def test_sgd_plain_step_closed_form():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    g = np.array([0.5, 0.25], dtype=np.float32)
    sgd_step([p], [g], OptimizerState("sgd", 0.1))
    np.testing.assert_allclose(p.data, [1.0 - 0.05, -2.0 - 0.025], atol=1e-7)


def test_sgd_weight_decay_is_coupled():
    p = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
    sgd_step([p], [np.zeros(1, dtype=np.float32)], OptimizerState("sgd", 0.1, weight_decay=0.5))
    # zero gradient still shrinks the weight: p - lr*wd*p = 2 - 0.1*0.5*2
    np.testing.assert_allclose(p.data, [1.9], atol=1e-7)


def test_sgd_momentum_matches_reference():
    state = OptimizerState("sgd", 0.05, weight_decay=0.01, momentum=0.9)
    p = Tensor(np.array([1.0, -1.0], dtype=np.float32), requires_grad=True)
    ref_p = p.data.astype(np.float64).copy()
    buf = np.zeros(2)
    rng = np.random.default_rng(3)
    for _ in range(5):
        g = rng.standard_normal(2).astype(np.float32)
        sgd_step([p], [g], state)
        ref_p, buf = sgd_step_ref(ref_p, g.astype(np.float64), buf, 0.05, 0.9, 0.01)
    np.testing.assert_allclose(p.data, ref_p, atol=1e-5)


def test_adam_first_step_closed_form():
    # with m = (1-b1)g, v = (1-b2)g^2 and bias correction, step 1 moves by
    # lr * g / (|g| + eps') with eps' = eps * sqrt(1-b2); eps is negligible here
    p = Tensor(np.array([0.0, 10.0], dtype=np.float32), requires_grad=True)
    g = np.array([3.0, -0.25], dtype=np.float32)
    adam_step([p], [g], OptimizerState("adam", 0.01))
    np.testing.assert_allclose(p.data, [-0.01, 10.01], atol=1e-6)


def test_adam_decay_only_closed_form():
    # zero gradient: pure decoupled decay, p <- p - lr*wd*p, exactly once
    p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    adam_step([p], [None], OptimizerState("adam", 0.01, weight_decay=0.1))
    np.testing.assert_allclose(p.data, [1.0 - 1e-3], atol=1e-9)


def test_adam_trajectory_matches_reference():
    state = OptimizerState("adam", 0.02, weight_decay=0.05)
    params, _ = params_and_grads(seed=1, n=2)
    refs = [p.data.astype(np.float64).copy() for p in params]
    ms = [np.zeros_like(r) for r in refs]
    vs = [np.zeros_like(r) for r in refs]
    rng = np.random.default_rng(11)
    for t in range(1, 8):
        grads = [rng.standard_normal(p.shape).astype(np.float32) for p in params]
        adam_step(params, grads, state)
        for i in range(len(params)):
            refs[i], ms[i], vs[i] = adam_step_ref(
                refs[i], grads[i].astype(np.float64), ms[i], vs[i],
                t, 0.02, 0.9, 0.999, 1e-8, 0.05)
    for p, r in zip(params, refs):
        np.testing.assert_allclose(p.data, r, atol=1e-5)
    assert state.t == 7


def test_step_counter_advances_once_per_call():
    params, grads = params_and_grads(n=4)
    state = OptimizerState("adam", 1e-3)
    adam_step(params, grads, state)
    assert state.t == 1
    adam_step(params, grads, state)
    assert state.t == 2


def test_none_gradients_leave_plain_sgd_params_alone():
    params, _ = params_and_grads(n=2)
    before = [p.data.copy() for p in params]
    sgd_step(params, [None, None], OptimizerState("sgd", 0.5))
    for p, b in zip(params, before):
        assert np.array_equal(p.data, b)


def test_wrapper_classes_read_grad_and_zero_it():
    p = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    opt = Sgd([p], learning_rate=0.1)
    p.grad = np.ones(3, dtype=np.float32)
    opt.step()
    np.testing.assert_allclose(p.data, 0.9 * np.ones(3), atol=1e-7)
    opt.zero_grad()
    assert p.grad is None
    q = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    aopt = Adam([q], learning_rate=0.5)
    q.grad = np.array([1.0, -1.0], dtype=np.float32)
    aopt.step()
    np.testing.assert_allclose(q.data, [0.5, 1.5], atol=1e-5)


def test_optimizer_state_validation():
    with pytest.raises(ContractError):
        OptimizerState("adagrad", 0.1)
    with pytest.raises(ContractError):
        OptimizerState("sgd", -0.1)
    params, grads = params_and_grads(n=2)
    with pytest.raises(ContractError):
        sgd_step(params, grads, OptimizerState("adam", 0.1))
    with pytest.raises(DimensionError):
        sgd_step(params, grads[:1], OptimizerState("sgd", 0.1))
    with pytest.raises(DimensionError):
        adam_step(params, [np.zeros((9, 9), dtype=np.float32)] * 2, OptimizerState("adam", 0.1))


def test_slots_are_per_parameter():
    params, grads = params_and_grads(n=2)
    state = OptimizerState("adam", 1e-2)
    adam_step(params, [grads[0], None], state)
    assert not np.array_equal(state.slots[0]["m"], state.slots[1]["m"])
    assert np.array_equal(state.slots[1]["m"], np.zeros_like(params[1].data))
