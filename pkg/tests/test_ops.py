import math

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from module.gradcheck import grad_check
from module.ops import (
    activation,
    avg_pool2d,
    conv2d,
    elementwise,
    mul,
    ordered_mean,
    reduce_sum,
    relu,
    sigmoid,
    softmax_cross_entropy,
    upsample_nearest,
)
from module.tensor import Tensor
from utils.errors import DataError, ShapeError


# ===== 逐元素循环的参考实现（累加顺序与内核一致） =====
def conv_oracle(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, oc, ho, wo))
    for bi in range(n):
        for o in range(oc):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                s += xp[bi, ci, i * stride + di, j * stride + dj] * w[o, ci, di, dj]
                    out[bi, o, i, j] = s + b[o] if b is not None else s
    return out


def pool_oracle(x, hp, wp):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // hp, w // wp))
    for bi in range(n):
        for ci in range(c):
            for i in range(h // hp):
                for j in range(w // wp):
                    pivot = x[bi, ci, i * hp, j * wp]
                    s = 0.0
                    for di in range(hp):
                        for dj in range(wp):
                            s += x[bi, ci, i * hp + di, j * wp + dj] - pivot
                    out[bi, ci, i, j] = pivot + s / (hp * wp)
    return out


def ce_oracle(logits, labels):
    n, k, h, w = logits.shape
    total, count = 0.0, 0
    for bi in range(n):
        for i in range(h):
            for j in range(w):
                z = logits[bi, :, i, j]
                m = max(z)
                lse = m + math.log(sum(math.exp(v - m) for v in z))
                total += lse - z[labels[bi, i, j]]
                count += 1
    return total / count


@pytest.mark.parametrize("case", range(100))
def test_conv2d_matches_loop_oracle_exactly(case):
    rng = np.random.default_rng(case)
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    n, c, oc = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h, w = int(rng.integers(k, 7)), int(rng.integers(k, 7))
    x = rng.standard_normal((n, c, h, w))
    wt = rng.standard_normal((oc, c, k, k))
    b = rng.standard_normal(oc) if case % 2 else None
    got = conv2d(Tensor(x), Tensor(wt), None if b is None else Tensor(b), stride=stride, pad=pad)
    assert_array_equal(got.data, conv_oracle(x, wt, b, stride, pad))


@pytest.mark.parametrize("case", range(100))
def test_avg_pool_matches_loop_oracle_exactly(case):
    rng = np.random.default_rng(1000 + case)
    hp, wp = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 3)), hp * int(rng.integers(1, 4)), wp * int(rng.integers(1, 4))))
    assert_array_equal(avg_pool2d(Tensor(x), (hp, wp)).data, pool_oracle(x, hp, wp))


@pytest.mark.parametrize("case", range(100))
def test_cross_entropy_matches_loop_oracle(case):
    rng = np.random.default_rng(2000 + case)
    k = int(rng.integers(2, 7))
    logits = 3 * rng.standard_normal((int(rng.integers(1, 3)), k, int(rng.integers(1, 5)), int(rng.integers(1, 5))))
    labels = rng.integers(0, k, size=(logits.shape[0],) + logits.shape[2:])
    got = softmax_cross_entropy(Tensor(logits), labels).item()
    assert abs(got - ce_oracle(logits, labels)) < 1e-10


def test_cross_entropy_at_zero_logits_is_exactly_ln_k():
    logits = Tensor(np.zeros((2, 6, 8, 8)))
    labels = np.random.default_rng(0).integers(0, 6, size=(2, 8, 8))
    assert softmax_cross_entropy(logits, labels).item() == pytest.approx(math.log(6), abs=1e-15)


def test_cross_entropy_ignores_label_and_flip_consistency(rng):
    logits = rng.standard_normal((1, 4, 6, 6))
    labels = rng.integers(0, 4, size=(1, 6, 6))
    labels[0, 0, :] = 255
    base = softmax_cross_entropy(Tensor(logits), labels, ignore_label=255).item()
    flipped = softmax_cross_entropy(Tensor(logits[..., ::-1]), labels[..., ::-1], ignore_label=255).item()
    assert abs(base - flipped) < 1e-12
    kept = labels[0, 1:, :][None]
    assert abs(base - softmax_cross_entropy(Tensor(logits[:, :, 1:, :]), kept).item()) < 1e-12


def test_cross_entropy_errors_name_the_bad_pixel():
    labels = np.zeros((1, 2, 2), dtype=np.int64)
    labels[0, 1, 0] = 9
    with pytest.raises(DataError, match=r"\(0, 1, 0\)"):
        softmax_cross_entropy(Tensor(np.zeros((1, 6, 2, 2))), labels)
    with pytest.raises(DataError):
        softmax_cross_entropy(Tensor(np.zeros((1, 6, 2, 2))), np.full((1, 2, 2), 3), ignore_label=3)


@pytest.mark.parametrize("case", range(100))
def test_pool_of_upsample_is_identity(case):
    rng = np.random.default_rng(3000 + case)
    x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5))))
    fh, fw = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    back = avg_pool2d(upsample_nearest(Tensor(x), fh, fw), (fh, fw))
    assert_array_equal(back.data, x)


def test_ordered_mean_of_constant_is_exact():
    assert ordered_mean(np.full(1000, 0.1)) == 0.1


def test_conv_channel_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 3, 4, 4\).*\(2, 2, 3, 3\)"):
        conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))


def test_kernel_and_divisibility_errors():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 5, 5))))
    with pytest.raises(ShapeError):
        avg_pool2d(Tensor(np.zeros((1, 1, 5, 4))), (2, 2))
    with pytest.raises(ShapeError):
        mul(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 1))))


def test_conv_gradients_pass_finite_differences(rng):
    inputs = {
        "x": rng.standard_normal((2, 3, 5, 5)),
        "w": rng.standard_normal((4, 3, 3, 3)),
        "b": rng.standard_normal(4),
    }
    proj = Tensor(rng.standard_normal((2, 4, 3, 3)))

    def forward(t):
        return reduce_sum(mul(conv2d(t["x"], t["w"], t["b"], stride=2, pad=1), proj))

    assert grad_check(forward, inputs) < 1e-5


def test_pool_upsample_activation_gradients(rng):
    inputs = {"x": rng.standard_normal((1, 2, 4, 6))}
    proj = Tensor(rng.standard_normal((1, 2, 4, 6)))

    def forward(t):
        y = upsample_nearest(avg_pool2d(sigmoid(t["x"]), (2, 3)), 2, 3)
        return reduce_sum(mul(relu(y), proj))

    assert grad_check(forward, inputs) < 1e-5


def test_cross_entropy_gradient(rng):
    labels = rng.integers(0, 5, size=(2, 3, 3))
    labels[0, 0, 0] = 7
    inputs = {"z": rng.standard_normal((2, 5, 3, 3))}
    assert grad_check(lambda t: softmax_cross_entropy(t["z"], labels, ignore_label=7), inputs) < 1e-5


def test_conv2d_identity_and_bias_only_cases(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    eye = np.eye(3).reshape(3, 3, 1, 1)
    assert_array_equal(conv2d(Tensor(x), Tensor(eye)).data, x)

    b = np.array([0.5, -2.0])
    out = conv2d(Tensor(x), Tensor(np.zeros((2, 3, 3, 3))), Tensor(b), pad=1).data
    assert out.shape == (2, 2, 4, 5)
    assert_array_equal(out, np.broadcast_to(b[None, :, None, None], out.shape))


def test_upsample_replicates_each_pixel():
    x = Tensor(np.array([1.0, 2.0]).reshape(1, 1, 1, 2))
    assert_array_equal(upsample_nearest(x, 2, 2).data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2]])
    assert_array_equal(upsample_nearest(x, 1, 1).data, x.data)


def test_activation_values():
    assert sigmoid(Tensor(np.zeros((1, 1, 1, 1)))).item() == 0.5
    out = relu(Tensor(np.array([-3.0, 3.0]).reshape(1, 1, 1, 2))).data.ravel()
    assert_array_equal(out, [0.0, 3.0])
    x = Tensor(np.array([-1.0, 2.0]).reshape(1, 1, 1, 2))
    assert_array_equal(activation(x, "relu").data, relu(x).data)
    assert_array_equal(elementwise(x, x, "mul").data, x.data * x.data)
    with pytest.raises(ValueError):
        activation(x, "tanh")


def test_sigmoid_gradient_matches_central_differences(rng):
    inputs = {"x": np.clip(rng.standard_normal((1, 2, 3, 3)), -3.0, 3.0)}
    assert grad_check(lambda t: reduce_sum(sigmoid(t["x"])), inputs) < 1e-6


def test_cross_entropy_is_flip_invariant_over_generated_cases():
    rng = np.random.default_rng(4000)
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        shape = (int(rng.integers(1, 3)), k, int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        logits = 3 * rng.standard_normal(shape)
        labels = rng.integers(0, k, size=(shape[0],) + shape[2:])
        base = softmax_cross_entropy(Tensor(logits), labels).item()
        for axis in (-1, -2):
            flipped = softmax_cross_entropy(Tensor(np.flip(logits, axis)), np.flip(labels, axis)).item()
            assert abs(base - flipped) < 1e-12


def test_stride_one_conv_commutes_with_flip_given_mirrored_kernel():
    rng = np.random.default_rng(5000)
    for _ in range(1000):
        c, oc = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = rng.standard_normal((1, c, int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        w = rng.standard_normal((oc, c, 3, 3))
        b = Tensor(rng.standard_normal(oc))
        out = conv2d(Tensor(x), Tensor(w), b, pad=1).data
        mirrored = conv2d(Tensor(np.flip(x, -1)), Tensor(np.flip(w, -1)), b, pad=1).data
        np.testing.assert_allclose(mirrored, np.flip(out, -1), rtol=0, atol=1e-12)
