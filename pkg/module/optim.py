"""
优化器：带动量与权重衰减的 SGD，以及阶梯式学习率衰减
"""
from __future__ import annotations

from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from module.tensor import Tensor
from utils.errors import ConfigError, ShapeError


def step_decay_lr(base_lr: float, step: int, decay_steps: int, gamma: float) -> float:
    """lr_t = base_lr · gamma^floor(step / decay_steps)；decay_steps = 0 表示不衰减"""
    if decay_steps <= 0:
        return float(base_lr)
    return float(base_lr * gamma ** (step // decay_steps))


def _check_hyper(lr: float, momentum: float, weight_decay: float):
    if lr < 0:
        raise ConfigError(f"学习率不能为负：{lr}")
    if not 0 <= momentum < 1:
        raise ConfigError(f"动量必须在 [0, 1) 内：{momentum}")
    if weight_decay < 0:
        raise ConfigError(f"权重衰减不能为负：{weight_decay}")


def sgd_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    velocity: Optional[Dict[str, np.ndarray]] = None,
) -> Tuple[Dict[str, Tensor], Dict[str, np.ndarray]]:
    """
    一步 SGD 更新

    v ← momentum·v + grad + weight_decay·param
    param ← param − lr·v

    :param velocity: 上一步的动量缓存（None 表示从零开始）
    :return: (新参数, 新动量缓存)
    """
    _check_hyper(lr, momentum, weight_decay)
    missing = [name for name in params if name not in grads]
    if missing:
        raise ShapeError(f"缺少参数的梯度：{', '.join(missing)}")
    velocity = {} if velocity is None else velocity

    new_params: Dict[str, Tensor] = {}
    new_velocity: Dict[str, np.ndarray] = {}
    for name, param in params.items():
        p = param.data
        g = grads[name].data
        if g.shape != p.shape:
            raise ShapeError(f"参数 {name} 形状 {p.shape} 与梯度形状 {g.shape} 不一致")
        v = g + weight_decay * p
        prev = velocity.get(name)
        if prev is not None and momentum:
            v = momentum * prev + v
        v = v.astype(p.dtype, copy=False)
        new_velocity[name] = v
        updated = (p - lr * v).astype(p.dtype, copy=False)
        new_params[name] = Tensor.wrap(updated, requires_grad=param.requires_grad, name=param.name or name)
    return new_params, new_velocity


class SGD:
    """持有动量缓存的 SGD，训练循环里逐步调用 step()"""

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        _check_hyper(lr, momentum, weight_decay)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, Tensor], lr: Optional[float] = None) -> Dict[str, Tensor]:
        use_lr = self.lr if lr is None else lr
        new_params, self.velocity = sgd_step(
            params, grads, use_lr, self.momentum, self.weight_decay, self.velocity
        )
        return new_params
