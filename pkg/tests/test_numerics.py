from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from errors import ContractError, DegenerateBatchError, NonFiniteError, ShapeError
from numerics import Tape, Tensor, active_tape, grad_check, no_grad
from numerics import ops


def rand(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def test_add_broadcasts_leading_dims_only():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.arange(3.0))
    assert ops.add(a, b).data.tolist() == [[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]
    with pytest.raises(ShapeError):
        ops.add(a, Tensor(np.ones(2)))


def test_matmul_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\[2, 3\] @ \[4, 5\]"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_mul_gradient_matches_other_operand():
    a = Tensor([2.0, 3.0], requires_grad=True)
    b = Tensor([5.0, 7.0], requires_grad=True)
    with Tape():
        loss = ops.sum(ops.mul(a, b))
    loss.backward()
    assert a.grad.tolist() == [5.0, 7.0]
    assert b.grad.tolist() == [2.0, 3.0]


def test_backward_twice_accumulates_grads():
    w = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with Tape():
            loss = ops.sum(ops.scale(w, 3.0))
        loss.backward()
    assert w.grad.tolist() == [6.0, 6.0]


def test_tape_gradients_leave_grad_slots_untouched():
    w = Tensor(rand((3,)), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.mul(w, w))
        (g,) = tape.gradients(loss, [w])
    assert w.grad is None
    np.testing.assert_allclose(g, 2 * w.data)


def test_backward_needs_scalar_loss():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        out = ops.scale(w, 2.0)
    with pytest.raises(ContractError):
        out.backward()


def test_backward_outside_tape_is_a_contract_error():
    w = Tensor(np.ones(3), requires_grad=True)
    loss = ops.sum(w)
    with pytest.raises(ContractError):
        loss.backward()


def test_no_grad_records_nothing():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with no_grad():
            out = ops.sum(ops.exp(w))
    assert not out.requires_grad
    assert len(tape) == 0


def test_log_of_zero_raises_non_finite():
    with pytest.raises(NonFiniteError, match="log"):
        ops.log(Tensor([1.0, 0.0]))


def test_log_sigmoid_is_finite_for_large_inputs():
    out = ops.log_sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(-1000.0)
    assert out[1] == pytest.approx(np.log(0.5))
    assert out[2] == pytest.approx(0.0)


def test_log_softmax_rows_normalize():
    out = ops.log_softmax(Tensor(rand((4, 7)))).data
    np.testing.assert_allclose(np.exp(out).sum(axis=-1), 1.0, atol=1e-12)


def test_masked_mean_over_empty_mask_is_degenerate():
    with pytest.raises(DegenerateBatchError):
        ops.sum_masked(Tensor(np.ones((2, 3))), np.zeros((2, 3)), mean=True)


def test_sum_masked_with_normalizer_divides_by_it():
    out = ops.sum_masked(Tensor(np.ones((2, 3))), np.array([[1, 1, 0], [1, 0, 0]]), normalizer=6.0)
    assert out.item() == pytest.approx(0.5)


def test_gather_picks_k_entries_per_row():
    x = Tensor(np.arange(12.0).reshape(2, 6))
    out = ops.gather(x, np.array([[5, 0], [1, 2]]))
    assert out.data.tolist() == [[5.0, 0.0], [7.0, 8.0]]


@pytest.mark.parametrize("name, fn, shape", [
    ("softmax", lambda x: ops.sum(ops.mul(ops.softmax(x), Tensor(rand((3, 5), 1)))), (3, 5)),
    ("log_softmax", lambda x: ops.sum(ops.mul(ops.log_softmax(x), Tensor(rand((3, 5), 2)))), (3, 5)),
    ("gelu", lambda x: ops.sum(ops.gelu(x)), (4,)),
    ("layernorm", lambda x: ops.sum(ops.mul(ops.layernorm(x, Tensor(rand((5,), 3)), Tensor(rand((5,), 4))),
                                            Tensor(rand((2, 5), 5)))), (2, 5)),
    ("matmul", lambda x: ops.sum(ops.matmul(x, Tensor(rand((4, 2), 6)))), (3, 4)),
    ("log_sigmoid", lambda x: ops.sum(ops.log_sigmoid(x)), (6,)),
    ("gather", lambda x: ops.sum(ops.gather(ops.log_softmax(x), np.array([1, 0, 3]))), (3, 4)),
    ("transpose_reshape", lambda x: ops.sum(ops.mul(ops.reshape(ops.transpose(x, (1, 0)), (6,)),
                                                    Tensor(np.arange(6.0)))), (2, 3)),
])
def test_grad_check_within_tolerance(name, fn, shape):
    assert grad_check(fn, Tensor(rand(shape, 7))) < 1e-4


def test_tapes_are_per_thread():
    def work(seed):
        assert active_tape() is None
        w = Tensor(rand((4,), seed), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum(ops.mul(w, w))
            (g,) = tape.gradients(loss, [w])
        return np.allclose(g, 2 * w.data)

    with Tape():
        with ThreadPoolExecutor(max_workers=4) as pool:
            assert all(pool.map(work, range(8)))


def test_softmax_of_huge_logit_gap_stays_finite():
    out = ops.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


def test_matmul_matches_triple_loop():
    a, b = rand((3, 4), 11), rand((4, 5), 12)
    expected = np.zeros((3, 5))
    for i in range(3):
        for j in range(5):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).data, expected, atol=1e-12)


def test_shared_input_accumulates_gradient_over_both_paths():
    x = Tensor([1.5, -2.0, 0.25], requires_grad=True)
    with Tape():
        loss = ops.sum(ops.add(ops.mul(x, x), ops.scale(x, 3.0)))
    loss.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_layernorm_of_constant_row_is_zero():
    out = ops.layernorm(Tensor(np.full((2, 6), 4.2)), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_gelu_of_zero_is_zero():
    assert ops.gelu(Tensor([0.0])).data[0] == 0.0
