"""
有限差分梯度检验（float64）

数值梯度用中心差分 (f(x+eps) − f(x−eps)) / (2·eps)，
相对误差 = |a − n| / max(|a|, |n|, 1e-12)。
"""
from __future__ import annotations

import math
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from module.attention import AemConfig, AemParams, PamConfig, PamParams, aem_forward, pam_forward
from module.network import ArchConfig, build_variant
from module.ops import mul, reduce_sum
from module.tensor import Graph, Tensor
from utils.errors import ConfigError, GradCheckError, ShapeError
from utils.logger import make_logger

_write_log = make_logger("gradcheck")

ForwardFn = Callable[[Mapping[str, Tensor]], Tensor]

GRADCHECK_TARGETS = ("pam", "aem", "model")
DEFAULT_TOLERANCE = 1e-4


def _coords(shape: Tuple[int, ...], max_coords: Optional[int], rng: np.random.Generator):
    size = int(np.prod(shape))
    if max_coords is None or max_coords >= size:
        flat = np.arange(size)
    else:
        flat = np.sort(rng.choice(size, size=max_coords, replace=False))
    return [np.unravel_index(int(i), shape) for i in flat]


def _scalar(forward: ForwardFn, tensors: Mapping[str, Tensor], name: str, coord) -> float:
    value = forward(tensors).item()
    if not math.isfinite(value):
        raise GradCheckError(name, coord, f"前向输出非有限值 {value}")
    return value


def grad_check(
    forward: ForwardFn,
    inputs: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    对 forward 的每个输入做梯度检验

    :param forward: 接收 {名称: Tensor}，返回标量 Tensor
    :param inputs: {名称: float64 数组}
    :param max_coords: 每个输入最多检验的坐标数（None 表示全部）
    :return: 最大相对误差
    """
    for name, arr in inputs.items():
        if np.asarray(arr).dtype != np.float64:
            raise ShapeError(f"梯度检验只接受 float64 输入，{name} 的 dtype 为 {np.asarray(arr).dtype}")

    leaves = {name: Tensor(arr, requires_grad=True, name=name) for name, arr in inputs.items()}
    with Graph(parameters=leaves) as graph:
        loss = forward(leaves)
    if not math.isfinite(loss.item()):
        raise GradCheckError("loss", None, f"前向输出非有限值 {loss.item()}")
    analytic = graph.backward(loss)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in inputs.items():
        base = np.array(arr, dtype=np.float64)
        grad = analytic[name].data
        input_worst = 0.0
        for coord in _coords(base.shape, max_coords, rng):
            a = float(grad[coord])
            if not math.isfinite(a):
                raise GradCheckError(name, tuple(int(c) for c in coord), f"解析梯度非有限值 {a}")
            values = {}
            for sign in (1, -1):
                shifted = base.copy()
                shifted[coord] += sign * eps
                shifted_inputs = {k: Tensor(v) for k, v in inputs.items() if k != name}
                shifted_inputs[name] = Tensor(shifted)
                values[sign] = _scalar(forward, shifted_inputs, name, tuple(int(c) for c in coord))
            n = (values[1] - values[-1]) / (2 * eps)
            err = abs(a - n) / max(abs(a), abs(n), 1e-12)
            input_worst = max(input_worst, err)
        _write_log(f"{name}: 最大相对误差 {input_worst:.3e}")
        worst = max(worst, input_worst)
    return worst


# ===== 具名检验目标 =====
def _pam_target(rng: np.random.Generator) -> Tuple[ForwardFn, Dict[str, np.ndarray], Optional[int]]:
    cfg = PamConfig(channels=8, patch=(2, 2), reduction=2, min_reduced=2)
    shapes = PamParams.shapes(cfg)
    inputs = {"x": rng.standard_normal((2, 8, 4, 6))}
    inputs.update({f"pam.{k}": 0.5 * rng.standard_normal(s) for k, s in shapes.items()})
    proj = Tensor(rng.standard_normal((2, 8, 4, 6)))

    def forward(t: Mapping[str, Tensor]) -> Tensor:
        return reduce_sum(mul(pam_forward(t["x"], PamParams.from_store(t, "pam"), cfg), proj))

    return forward, inputs, None


def _aem_target(rng: np.random.Generator) -> Tuple[ForwardFn, Dict[str, np.ndarray], Optional[int]]:
    cfg = AemConfig(c_high=8, c_low=4, high_patch=(2, 2), upsample=(8, 8), reduction=2, min_reduced=2)
    shapes = AemParams.shapes(cfg)
    inputs = {"x_low": rng.standard_normal((1, 4, 16, 16)), "x_high": rng.standard_normal((1, 8, 4, 4))}
    inputs.update({f"aem.{k}": 0.5 * rng.standard_normal(s) for k, s in shapes.items()})
    proj = Tensor(rng.standard_normal((1, 4, 16, 16)))

    def forward(t: Mapping[str, Tensor]) -> Tensor:
        out = aem_forward(t["x_low"], t["x_high"], AemParams.from_store(t, "aem"), cfg)
        return reduce_sum(mul(out, proj))

    return forward, inputs, None


def tiny_arch() -> ArchConfig:
    return ArchConfig(in_channels=4, widths=(8, 16, 24, 32), head_width=16, pam_high_patch=(4, 4), pam_low_patch=(8, 8))


def _model_target(
    rng: np.random.Generator, variant: str = "lanet"
) -> Tuple[ForwardFn, Dict[str, np.ndarray], Optional[int]]:
    from module.trainer import compute_loss

    arch = tiny_arch()
    base = build_variant(variant, arch, seed=0, dtype=np.float64)
    inputs: Dict[str, np.ndarray] = {}
    for name, tensor in base.tensors.items():
        value = np.array(tensor.data)
        if ".cls." in name or name.endswith(".bias"):
            # 随机非零分类层与偏置，使所有参数都有梯度
            value = 0.1 * rng.standard_normal(value.shape)
        inputs[name] = value
    image = Tensor(rng.uniform(0.0, 1.0, size=(1, arch.in_channels, 64, 64)))
    labels = rng.integers(0, arch.num_classes, size=(1, 64, 64))

    def forward(t: Mapping[str, Tensor]) -> Tensor:
        loss, _ = compute_loss(base.with_tensors(t), image, labels)
        return loss

    return forward, inputs, 3


_TARGETS = {"pam": _pam_target, "aem": _aem_target, "model": _model_target}


def run_named_check(
    target: str,
    eps: float = 1e-5,
    seed: int = 0,
    max_coords: Optional[int] = None,
    variant: str = "lanet",
) -> float:
    """执行具名检验（pam / aem / model），返回最大相对误差；variant 只对 model 生效"""
    if target not in _TARGETS:
        raise ConfigError(f"未知检验目标 {target!r}，可选 {', '.join(GRADCHECK_TARGETS)}")
    rng = np.random.default_rng(seed)
    if target == "model":
        forward, inputs, default_coords = _model_target(rng, variant)
    else:
        forward, inputs, default_coords = _TARGETS[target](rng)
    coords = max_coords if max_coords is not None else default_coords
    _write_log(f"开始梯度检验 target={target} variant={variant} eps={eps} 输入数={len(inputs)} max_coords={coords}")
    err = grad_check(forward, inputs, eps=eps, max_coords=coords, seed=seed)
    _write_log(f"梯度检验 target={target} 最大相对误差 {err:.3e}")
    return err
