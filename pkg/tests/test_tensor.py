import threading

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from module.ops import add, mul, reduce_sum, scale
from module.tensor import Graph, Tensor, active_graph, backward
from utils.errors import ShapeError


def test_tensor_data_is_read_only_copy():
    src = np.ones((1, 2, 3, 3))
    t = Tensor(src)
    src[0, 0, 0, 0] = 5.0
    assert t.data[0, 0, 0, 0] == 1.0
    with pytest.raises(ValueError):
        t.data[0, 0, 0, 0] = 2.0


def test_tensor_rejects_unsupported_dtype_and_empty_dims():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 2), dtype=np.float16), dtype=np.float16)
    with pytest.raises(ShapeError):
        Tensor(np.ones((1, 0, 2, 2)))


def test_integer_input_becomes_float64_and_scalar_becomes_4d():
    assert Tensor(np.arange(4)).dtype == np.float64
    assert Tensor(3.0).shape == (1, 1, 1, 1)


def test_outside_graph_nothing_is_recorded():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True, name="x")
    y = add(x, x)
    assert y.is_leaf
    assert not y.requires_grad


def test_graph_records_only_when_inputs_require_grad():
    a = Tensor(np.ones((1, 1, 2, 2)))
    b = Tensor(np.ones((1, 1, 2, 2)))
    with Graph() as g:
        add(a, b)
    assert len(g) == 0


def test_backward_accumulates_shared_inputs():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True, name="x")
    with Graph() as g:
        loss = reduce_sum(mul(x, x))
    grads = g.backward(loss)
    assert_array_equal(grads["x"].data, [2.0, 4.0])
    assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_runs_in_reverse_recording_order():
    x = Tensor(np.full((1, 1, 1, 2), 3.0), requires_grad=True, name="x")
    with Graph() as g:
        y = scale(x, 2.0)
        z = mul(y, x)
        loss = reduce_sum(z)
    ops = [node.op for node in g]
    assert ops == ["scale", "mul", "reduce_sum"]
    # d(2x·x)/dx = 4x
    assert_array_equal(g.backward(loss)["x"].data, np.full((1, 1, 1, 2), 12.0))


def test_unused_registered_parameter_gets_zero_gradient():
    used = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    unused = Tensor(np.ones((3,)), requires_grad=True)
    with Graph(parameters={"used": used, "unused": unused}) as g:
        loss = reduce_sum(used)
    grads = g.backward(loss)
    assert_array_equal(grads["unused"].data, np.zeros(3))
    assert_array_equal(grads["used"].data, np.ones((1, 1, 2, 2)))


def test_module_level_backward_uses_recording_graph():
    x = Tensor(np.array([1.0, -1.0]), requires_grad=True, name="x")
    with Graph():
        loss = reduce_sum(scale(x, 3.0))
    assert_array_equal(backward(loss)["x"].data, [3.0, 3.0])


def test_backward_rejects_foreign_or_non_scalar_loss():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True, name="x")
    with Graph() as g1:
        loss = reduce_sum(x)
        not_scalar = add(x, x)
    with Graph() as g2:
        pass
    with pytest.raises(ShapeError):
        g2.backward(loss)
    with pytest.raises(ShapeError):
        g1.backward(not_scalar)
    with pytest.raises(ShapeError):
        backward(Tensor(1.0))


def test_watch_rejects_duplicate_names():
    g = Graph()
    g.watch("w", Tensor(np.ones(2), requires_grad=True))
    with pytest.raises(ShapeError):
        g.watch("w", Tensor(np.ones(2), requires_grad=True))


def test_mixed_dtypes_inside_graph_are_rejected():
    a = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32), requires_grad=True)
    b = Tensor(np.ones((1, 1, 2, 2), dtype=np.float64))
    with Graph():
        with pytest.raises(ShapeError):
            add(a, b)


def test_active_graph_is_thread_local():
    seen = []
    with Graph() as g:
        assert active_graph() is g
        worker = threading.Thread(target=lambda: seen.append(active_graph()))
        worker.start()
        worker.join()
    assert seen == [None]
    assert active_graph() is None
