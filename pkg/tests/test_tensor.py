"""Values, error paths, and tape mechanics for the tensor core."""

import numpy as np
import pytest

from metafew.errors import ContractError, DimensionError
from metafew.tensor import (
    Tape,
    Tensor,
    absolute,
    broadcast_to,
    concat,
    constant,
    conv2d,
    cross_entropy,
    exp,
    getitem,
    log,
    matmul,
    max_pool2,
    mul,
    pair_differences,
    power,
    relu,
    reshape,
    softmax,
    symmetric_from_pairs,
    tmean,
    tsum,
)

from oracles import (
    conv2d_loops,
    cross_entropy_ref,
    max_pool2_loops,
    softmax_rows_ref,
)


def rand(*shape, seed=0, scale=1.0):
    return (np.random.default_rng(seed).standard_normal(shape) * scale).astype(np.float32)


# -- construction --------------------------------------------------------------


def test_tensor_defaults_to_float32():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32
    assert t.shape == (3,)


def test_tensor_float64_is_opt_in():
    assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float32
    assert Tensor(np.zeros(2), dtype=np.float64).dtype == np.float64


def test_tensor_rejects_nan_and_inf():
    with pytest.raises(ValueError):
        Tensor([1.0, np.nan])
    with pytest.raises(ValueError):
        Tensor([np.inf])


def test_item_and_len():
    assert Tensor([[2.5]]).item() == 2.5
    assert len(Tensor(3.0)) == 1          # scalars are stored as shape (1,)
    with pytest.raises(ContractError):
        Tensor([1.0, 2.0]).item()
    with pytest.raises(DimensionError):
        len(tsum(Tensor([1.0, 2.0])))     # full reductions are genuinely 0-d


def test_detach_shares_data_copy_does_not():
    t = Tensor([1.0, 2.0], requires_grad=True)
    d = t.detach()
    assert d.data is t.data and not d.requires_grad
    c = t.copy()
    assert c.data is not t.data and c.requires_grad
    assert not t.copy(requires_grad=False).requires_grad


# -- elementwise and shape values ----------------------------------------------


def test_arithmetic_matches_numpy():
    a = rand(3, 4, seed=1)
    b = rand(3, 4, seed=2)
    assert np.array_equal((Tensor(a) + Tensor(b)).data, a + b)
    assert np.array_equal((Tensor(a) - Tensor(b)).data, a - b)
    assert np.array_equal((Tensor(a) * Tensor(b)).data, a * b)
    assert np.array_equal((-Tensor(a)).data, -a)
    assert np.array_equal((Tensor(a) + 2.0).data, a + 2.0)
    assert np.array_equal((3.0 * Tensor(a)).data, 3.0 * a)
    assert np.array_equal((1.0 - Tensor(a)).data, 1.0 - a)


def test_arithmetic_broadcasts():
    a = rand(2, 3, seed=3)
    row = rand(3, seed=4)
    assert np.array_equal((Tensor(a) + Tensor(row)).data, a + row)


def test_unary_ops_match_numpy():
    a = rand(5, seed=5)
    assert np.allclose(exp(Tensor(a)).data, np.exp(a))
    assert np.allclose(log(Tensor(np.abs(a) + 1.0)).data, np.log(np.abs(a) + 1.0))
    assert np.array_equal(absolute(Tensor(a)).data, np.abs(a))
    assert np.array_equal(relu(Tensor(a)).data, np.maximum(a, 0))
    assert np.allclose(power(Tensor(np.abs(a)), 1.5).data, np.abs(a) ** 1.5)


def test_reshape_and_errors():
    a = rand(2, 6, seed=6)
    assert reshape(Tensor(a), (3, 4)).shape == (3, 4)
    assert Tensor(a).reshape(12).shape == (12,)
    with pytest.raises(DimensionError):
        reshape(Tensor(a), (5, 5))


def test_broadcast_to_and_errors():
    a = rand(1, 4, seed=7)
    assert broadcast_to(Tensor(a), (3, 4)).shape == (3, 4)
    with pytest.raises(DimensionError):
        broadcast_to(Tensor(a), (3, 5))


def test_getitem_slices():
    a = rand(4, 5, seed=8)
    assert np.array_equal(getitem(Tensor(a), (slice(1, 3), slice(None))).data, a[1:3])
    assert np.array_equal(Tensor(a)[2].data, a[2])


def test_concat_values_and_empty_error():
    a, b = rand(2, 3, seed=9), rand(4, 3, seed=10)
    assert np.array_equal(concat([Tensor(a), Tensor(b)], axis=0).data, np.concatenate([a, b]))
    with pytest.raises(DimensionError):
        concat([])


def test_reductions_match_numpy():
    a = rand(3, 4, seed=11)
    assert np.allclose(tsum(Tensor(a)).data, a.sum())
    assert np.allclose(tsum(Tensor(a), axis=1).data, a.sum(axis=1))
    assert np.allclose(tmean(Tensor(a), axis=0, keepdims=True).data, a.mean(axis=0, keepdims=True))
    assert Tensor(a).sum(axis=1).shape == (3,)
    assert Tensor(a).mean().shape == ()


# -- matmul ----------------------------------------------------------------------


def test_matmul_2d_value():
    a, b = rand(3, 4, seed=12), rand(4, 5, seed=13)
    assert np.allclose(matmul(Tensor(a), Tensor(b)).data, a @ b, atol=1e-6)


def test_matmul_batched_value_matches_numpy():
    a, b = rand(2, 3, 4, seed=14), rand(4, 5, seed=15)
    assert np.allclose(matmul(Tensor(a), Tensor(b)).data, np.matmul(a, b), atol=1e-6)
    c = rand(2, 5, 3, seed=16)
    assert np.allclose(matmul(Tensor(c), Tensor(a)).data, np.matmul(c, a), atol=1e-6)


def test_matmul_rejects_vectors_and_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor([1.0, 2.0]), Tensor(np.eye(2)))
    with pytest.raises(DimensionError):
        matmul(Tensor(rand(3, 4)), Tensor(rand(5, 2)))


# -- convolution and pooling -----------------------------------------------------


def test_conv2d_hand_example():
    x = Tensor([[[1.0, 2.0], [3.0, 4.0]]])                # [1,2,2]
    k = Tensor([[[[1.0, 0.0], [0.0, 1.0]]]])              # [1,1,2,2]
    out = conv2d(x, k)
    assert out.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == 5.0                       # 1*1 + 4*1


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
def test_conv2d_matches_loop_oracle(stride, padding):
    x = rand(2, 3, 7, 6, seed=17)
    k = rand(4, 3, 3, 3, seed=18)
    got = conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding).data
    want = conv2d_loops(x, k, stride, padding)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)


def test_conv2d_single_image_matches_batched():
    x = rand(3, 8, 8, seed=19)
    k = rand(2, 3, 3, 3, seed=20)
    single = conv2d(Tensor(x), Tensor(k), padding=1).data
    batched = conv2d(Tensor(x[None]), Tensor(k), padding=1).data
    assert np.array_equal(single, batched[0])


def test_conv2d_errors():
    x, k = Tensor(rand(3, 8, 8)), Tensor(rand(2, 4, 3, 3))
    with pytest.raises(DimensionError):
        conv2d(x, k)                                      # channel mismatch
    with pytest.raises(DimensionError):
        conv2d(Tensor(rand(3, 2, 2)), Tensor(rand(2, 3, 5, 5)))   # kernel too big
    with pytest.raises(DimensionError):
        conv2d(x, Tensor(rand(2, 3, 3, 3)), stride=0)
    with pytest.raises(DimensionError):
        conv2d(x, Tensor(rand(3, 3, 3)))                  # kernels not 4-d
    with pytest.raises(DimensionError):
        conv2d(Tensor(rand(8, 8)), Tensor(rand(2, 3, 3, 3)))


def test_max_pool2_matches_loop_oracle():
    x = rand(2, 3, 6, 8, seed=21)
    assert np.array_equal(max_pool2(Tensor(x)).data, max_pool2_loops(x))


def test_max_pool2_drops_odd_edges():
    x = rand(1, 1, 5, 7, seed=22)
    out = max_pool2(Tensor(x)).data
    assert out.shape == (1, 1, 2, 3)
    assert np.array_equal(out, max_pool2_loops(x[:, :, :4, :6]))


def test_max_pool2_tie_gradient_goes_first_row_major():
    x = Tensor(np.full((1, 1, 2, 2), 7.0, dtype=np.float32), requires_grad=True)
    with Tape() as tape:
        loss = tsum(max_pool2(x))
    tape.backward(loss)
    assert np.array_equal(x.grad, np.array([[[[1.0, 0.0], [0.0, 0.0]]]], dtype=np.float32))


def test_max_pool2_errors():
    with pytest.raises(DimensionError):
        max_pool2(Tensor(rand(1, 1, 1, 4)))
    with pytest.raises(DimensionError):
        max_pool2(Tensor(rand(4, 4)))


# -- softmax and cross entropy ----------------------------------------------------


def test_softmax_matches_reference_and_shift_invariance():
    z = rand(4, 6, seed=23, scale=3.0)
    got = softmax(Tensor(z)).data
    np.testing.assert_allclose(got, softmax_rows_ref(z), rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(got.sum(axis=1), 1.0, atol=1e-6)
    shifted = softmax(Tensor(z + 100.0)).data
    np.testing.assert_allclose(got, shifted, atol=1e-6)


def test_cross_entropy_value_1d_and_2d():
    z = rand(3, 5, seed=24, scale=2.0)
    labels = np.array([1, 4, 0])
    got = cross_entropy(Tensor(z), labels).item()
    assert got == pytest.approx(cross_entropy_ref(z, labels), rel=1e-5)
    one = cross_entropy(Tensor(z[0]), 1).item()
    assert one == pytest.approx(cross_entropy_ref(z[0], [1]), rel=1e-5)


def test_cross_entropy_is_stable_for_large_logits():
    z = np.array([[1000.0, 0.0], [0.0, 1000.0]], dtype=np.float32)
    got = cross_entropy(Tensor(z), np.array([0, 1])).item()
    assert got == pytest.approx(0.0, abs=1e-6)


def test_cross_entropy_errors():
    z = Tensor(rand(2, 3, seed=25))
    with pytest.raises(IndexError):
        cross_entropy(z, np.array([0, 3]))
    with pytest.raises(IndexError):
        cross_entropy(z, np.array([-1, 0]))
    with pytest.raises(ContractError):
        cross_entropy(z, np.array([0.0, 1.0]))
    with pytest.raises(DimensionError):
        cross_entropy(z, np.array([0]))
    with pytest.raises(DimensionError):
        cross_entropy(Tensor(rand(2, 2, 2, seed=26)), np.array([0, 1]))
    bad = Tensor.__new__(Tensor)
    bad.data = np.array([[np.nan, 0.0]])
    bad.requires_grad = False
    bad.grad = None
    with pytest.raises(ValueError):
        cross_entropy(bad, np.array([0]))


# -- graph helpers ------------------------------------------------------------------


def _pair_index(v):
    idx_i, idx_j = np.triu_indices(v, k=1)
    scatter = np.zeros((v, idx_i.shape[0]), dtype=np.float32)
    scatter[idx_i, np.arange(idx_i.shape[0])] = 1.0
    scatter[idx_j, np.arange(idx_j.shape[0])] = -1.0
    return idx_i, idx_j, scatter


def test_pair_differences_value():
    v, d = 5, 3
    x = rand(v, d, seed=27)
    idx_i, idx_j, scatter = _pair_index(v)
    got = pair_differences(Tensor(x), idx_i, idx_j, scatter).data
    for p in range(idx_i.shape[0]):
        assert np.array_equal(got[p], x[idx_i[p]] - x[idx_j[p]])


def test_symmetric_from_pairs_value_and_symmetry():
    v = 4
    idx_i, idx_j, _ = _pair_index(v)
    vals = rand(idx_i.shape[0], seed=28)
    m = symmetric_from_pairs(Tensor(vals), v, idx_i, idx_j).data
    assert np.array_equal(m, m.T)
    assert np.array_equal(np.diag(m), np.zeros(v, dtype=np.float32))
    for p in range(idx_i.shape[0]):
        assert m[idx_i[p], idx_j[p]] == vals[p]


# -- tape mechanics ------------------------------------------------------------------


def test_backward_requires_scalar_tensor_from_this_tape():
    x = Tensor(rand(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)                     # not scalar
    with pytest.raises(ContractError):
        tape.backward(np.float32(1.0))       # not a Tensor
    with Tape() as tape_a:
        loss = tsum(x * 2.0)
    with Tape() as tape_b:
        tsum(x)
    with pytest.raises(ContractError):
        tape_b.backward(loss)                # produced on tape_a


def test_tapes_must_unwind_in_order():
    outer, inner = Tape(), Tape()
    outer.__enter__()
    inner.__enter__()
    with pytest.raises(ContractError):
        outer.__exit__(None, None, None)
    outer.__exit__(None, None, None)      # the failed exit already popped inner


def test_gradient_flows_to_leaves_only():
    x = Tensor(rand(3), requires_grad=True)
    c = constant(rand(3, seed=1))
    with Tape() as tape:
        mid = x * c
        loss = tsum(mid)
    tape.backward(loss)
    assert np.array_equal(x.grad, c.data)
    assert mid.grad is None
    assert c.grad is None


def test_leaf_used_twice_sums_both_paths():
    x = Tensor(np.array([3.0], dtype=np.float32), requires_grad=True)
    with Tape() as tape:
        loss = tsum(mul(x, x))
    tape.backward(loss)
    assert np.array_equal(x.grad, np.array([6.0], dtype=np.float32))


def test_double_backward_accumulates_exactly_twice():
    x = Tensor(rand(4, seed=29), requires_grad=True)

    def run():
        with Tape() as tape:
            loss = tsum(relu(x) * 3.0)
        tape.backward(loss)

    run()
    once = x.grad.copy()
    run()
    assert np.array_equal(x.grad, once + once)


def test_untracked_forward_records_nothing():
    x = Tensor(rand(3))          # requires_grad False
    with Tape() as tape:
        tsum(x * 2.0)
    assert tape.nodes == []


def test_dropped_tape_frees_by_refcount_alone():
    # Long evaluation loops rely on this: outputs never reference the
    # tape, so the graph cannot form cycles and dies without the gc.
    import gc
    import weakref

    x = Tensor(rand(4, 4), requires_grad=True)
    gc.disable()
    try:
        with Tape() as tape:
            loss = tsum(relu(x) * 2.0)
        tape.backward(loss)
        ref = weakref.ref(tape)
        del tape
        assert ref() is None, "a surviving output kept the dropped tape alive"
    finally:
        gc.enable()


def test_ops_outside_tape_record_nothing():
    x = Tensor(rand(3), requires_grad=True)
    y = tsum(x * 2.0)
    with Tape() as tape:
        pass
    assert tape.nodes == []
    with pytest.raises(ContractError):
        tape.backward(y)  # produced off-tape, so no tape owns it
