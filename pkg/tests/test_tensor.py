import threading

import numpy as np
import pytest

from koalanet import ops
from koalanet.gradcheck import check_gradients, relative_error
from koalanet.tensor import Tape, Tensor, backward, grad_enabled, no_grad


def test_integer_data_becomes_float32():
    t = Tensor(np.arange(4))
    assert t.dtype == np.float32
    assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64


def test_sum_of_leaf_gives_ones(rng):
    w = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    with Tape() as tape:
        tape.backward(ops.total(w))
    np.testing.assert_array_equal(w.grad, np.ones(w.shape))


def test_gradients_accumulate_until_zeroed(rng):
    w = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    for _ in range(3):
        with Tape() as tape:
            tape.backward(ops.total(ops.mul(w, 2.0)))
    np.testing.assert_array_equal(w.grad, np.full((3, 3), 6.0))
    w.zero_grad()
    with Tape() as tape:
        tape.backward(ops.total(w))
    np.testing.assert_array_equal(w.grad, np.ones((3, 3)))


def test_non_scalar_loss_rejected(rng):
    w = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ops.mul(w, w)
        with pytest.raises(ValueError):
            tape.backward(y)


def test_clear_frees_nodes_keeps_leaves(rng):
    w = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    tape = Tape()
    with tape:
        loss = ops.total(ops.mul(w, w))
        tape.backward(loss)
    assert len(tape) == 2
    g = w.grad.copy()
    tape.clear()
    assert len(tape) == 0
    np.testing.assert_array_equal(w.grad, g)
    np.testing.assert_array_equal(w.grad, 2 * w.data)


def test_shared_subexpression_gets_summed_gradient(rng):
    x = Tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
    with Tape() as tape:
        y = ops.relu(x)
        tape.backward(ops.total(ops.add(ops.mul(y, 3.0), y)))
    np.testing.assert_array_equal(x.grad, 4.0 * (x.data > 0))


def test_no_grad_records_nothing(rng):
    w = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    with Tape() as tape:
        with no_grad():
            assert not grad_enabled()
            y = ops.mul(w, w)
        assert grad_enabled()
    assert len(tape) == 0 and not y.requires_grad


def test_module_level_backward(rng):
    w = Tensor(rng.standard_normal((4,)), requires_grad=True)
    with Tape():
        loss = ops.l1_loss(w, np.zeros(4))
    backward(loss)
    np.testing.assert_allclose(w.grad, np.sign(w.data) / 4)


def test_operators_route_to_ops(rng):
    a = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = (a * b + 1.0 - b).sum()
        tape.backward(y)
    np.testing.assert_allclose(a.grad, b.data)
    np.testing.assert_allclose(b.grad, a.data - 1)


def test_tapes_are_per_thread(rng):
    errors = []

    def work(seed):
        try:
            r = np.random.default_rng(seed)
            w = Tensor(r.standard_normal((8, 8)), requires_grad=True)
            for _ in range(20):
                w.zero_grad()
                with Tape() as tape:
                    tape.backward(ops.total(ops.mul(w, w)))
                np.testing.assert_allclose(w.grad, 2 * w.data)
        except Exception as exc:  # pragma: no cover - reported below
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


def test_identical_runs_are_bit_identical():
    def run():
        r = np.random.default_rng(5)
        x = Tensor(r.standard_normal((2, 3, 8, 8)).astype(np.float32))
        w = Tensor(r.standard_normal((4, 3, 3, 3)).astype(np.float32), requires_grad=True)
        f = Tensor(r.standard_normal((2, 9, 8, 8)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            loss = ops.l1_loss(ops.local_filter(ops.relu(ops.conv2d(x, w)), f, 3), np.zeros((2, 4, 8, 8)))
            tape.backward(loss)
        return loss.data.tobytes(), w.grad.tobytes(), f.grad.tobytes()

    assert run() == run()


def test_composite_net_gradients(rng):
    # conv -> relu -> local_filter -> l1, every parameter against central differences
    x = Tensor(rng.standard_normal((1, 2, 6, 6)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
    f = Tensor(rng.standard_normal((1, 9, 6, 6)), requires_grad=True)
    target = rng.standard_normal((1, 3, 6, 6))

    def fn():
        return ops.l1_loss(ops.local_filter(ops.relu(ops.conv2d(x, w, b)), f, 3), target)

    errs = check_gradients(fn, [w, b, f])
    assert max(errs) < 1e-3


def test_gradcheck_rejects_float32():
    t = Tensor(np.ones((2,), dtype=np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        check_gradients(lambda: ops.total(t), [t])


def test_relative_error_ignores_unprobed_entries():
    a = np.array([1.0, 2.0, 3.0])
    b = np.array([1.0, np.nan, 3.0])
    assert relative_error(a, b) == 0.0
