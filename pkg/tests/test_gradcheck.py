import numpy as np
import pytest

from module.gradcheck import GRADCHECK_TARGETS, grad_check, run_named_check
from module.ops import mul, reduce_sum
from module.tensor import Tensor
from utils.errors import ConfigError, GradCheckError, ShapeError


def sum_of_squares(t):
    return reduce_sum(mul(t["x"], t["x"]))


def test_sum_of_squares_gradient_is_exact_enough():
    assert grad_check(sum_of_squares, {"x": np.array([1.0, 2.0])}) < 1e-9


def test_non_finite_forward_is_reported():
    with pytest.raises(GradCheckError):
        grad_check(sum_of_squares, {"x": np.array([1.0, np.nan])})


def test_only_float64_inputs_are_accepted():
    with pytest.raises(ShapeError, match="float64"):
        grad_check(sum_of_squares, {"x": np.array([1.0, 2.0], dtype=np.float32)})


def test_max_coords_limits_evaluations():
    calls = []

    def forward(t):
        calls.append(1)
        return sum_of_squares(t)

    grad_check(forward, {"x": np.arange(1.0, 11.0)}, max_coords=3)
    # 一次解析前向 + 每个坐标两次扰动
    assert len(calls) == 1 + 2 * 3


def test_missing_gradient_path_is_detected():
    # 第二个因子绕过了计算图：解析梯度 x，数值梯度 2x
    def forward(t):
        return reduce_sum(mul(t["x"], Tensor(t["x"].data)))

    assert grad_check(forward, {"x": np.array([1.0, 3.0])}) == pytest.approx(0.5, rel=1e-6)
    assert set(GRADCHECK_TARGETS) == {"pam", "aem", "model"}


def test_unknown_target():
    with pytest.raises(ConfigError, match="pam"):
        run_named_check("conv")
