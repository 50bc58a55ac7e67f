"""
局部注意力模块

- PAM（patch attention）：按 patch 计算通道描述子，经瓶颈门控得到注意力，残差增强
- AEM（attention embedding）：由高层特征的 patch 描述子生成低层特征的注意力
- SE：全局描述子版本，PAM 取单个全尺寸 patch 时退化为 x + SE(x)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Tuple

import numpy as np

from module.ops import add, avg_pool2d, conv2d, mul, relu, sigmoid, upsample_nearest
from module.tensor import Tensor
from utils.errors import ShapeError


def reduced_width(channels: int, reduction: int, min_reduced: int = 4) -> int:
    """瓶颈宽度 = max(c // r, min_reduced)"""
    return max(channels // reduction, min_reduced)


@dataclass(frozen=True)
class PamConfig:
    channels: int
    patch: Tuple[int, int] = (4, 4)
    reduction: int = 16
    min_reduced: int = 4

    @property
    def reduced(self) -> int:
        return reduced_width(self.channels, self.reduction, self.min_reduced)

    def descriptor_grid(self, h: int, w: int) -> Tuple[int, int]:
        hp, wp = self.patch
        if h % hp or w % wp:
            raise ShapeError(f"PAM: 特征图 {h}×{w} 不能被 patch {hp}×{wp} 整除")
        return h // hp, w // wp


@dataclass(frozen=True)
class PamParams:
    w_reduce: Tensor
    b_reduce: Tensor
    w_increase: Tensor
    b_increase: Tensor

    @classmethod
    def from_store(cls, store: Mapping[str, Tensor], prefix: str) -> "PamParams":
        return cls(
            store[f"{prefix}.reduce.weight"], store[f"{prefix}.reduce.bias"],
            store[f"{prefix}.increase.weight"], store[f"{prefix}.increase.bias"],
        )

    @classmethod
    def zeros(cls, cfg: PamConfig, dtype=np.float32) -> "PamParams":
        c, r = cfg.channels, cfg.reduced
        return cls(
            Tensor(np.zeros((r, c, 1, 1)), dtype=dtype), Tensor(np.zeros(r), dtype=dtype),
            Tensor(np.zeros((c, r, 1, 1)), dtype=dtype), Tensor(np.zeros(c), dtype=dtype),
        )

    @staticmethod
    def shapes(cfg: PamConfig) -> Dict[str, Tuple[int, ...]]:
        c, r = cfg.channels, cfg.reduced
        return {
            "reduce.weight": (r, c, 1, 1), "reduce.bias": (r,),
            "increase.weight": (c, r, 1, 1), "increase.bias": (c,),
        }

    def as_dict(self, prefix: str) -> Dict[str, Tensor]:
        return {
            f"{prefix}.reduce.weight": self.w_reduce, f"{prefix}.reduce.bias": self.b_reduce,
            f"{prefix}.increase.weight": self.w_increase, f"{prefix}.increase.bias": self.b_increase,
        }


@dataclass(frozen=True)
class AemConfig:
    c_high: int
    c_low: int
    high_patch: Tuple[int, int] = (2, 2)
    upsample: Tuple[int, int] = (8, 8)
    reduction: int = 16
    min_reduced: int = 4

    @property
    def reduced(self) -> int:
        return reduced_width(self.c_high, self.reduction, self.min_reduced)


@dataclass(frozen=True)
class AemParams:
    w_reduce: Tensor
    b_reduce: Tensor
    w_project: Tensor
    b_project: Tensor

    @classmethod
    def from_store(cls, store: Mapping[str, Tensor], prefix: str = "aem") -> "AemParams":
        return cls(
            store[f"{prefix}.reduce.weight"], store[f"{prefix}.reduce.bias"],
            store[f"{prefix}.project.weight"], store[f"{prefix}.project.bias"],
        )

    @classmethod
    def zeros(cls, cfg: AemConfig, dtype=np.float32) -> "AemParams":
        r = cfg.reduced
        return cls(
            Tensor(np.zeros((r, cfg.c_high, 1, 1)), dtype=dtype), Tensor(np.zeros(r), dtype=dtype),
            Tensor(np.zeros((cfg.c_low, r, 1, 1)), dtype=dtype), Tensor(np.zeros(cfg.c_low), dtype=dtype),
        )

    @staticmethod
    def shapes(cfg: AemConfig) -> Dict[str, Tuple[int, ...]]:
        r = cfg.reduced
        return {
            "reduce.weight": (r, cfg.c_high, 1, 1), "reduce.bias": (r,),
            "project.weight": (cfg.c_low, r, 1, 1), "project.bias": (cfg.c_low,),
        }

    def as_dict(self, prefix: str = "aem") -> Dict[str, Tensor]:
        return {
            f"{prefix}.reduce.weight": self.w_reduce, f"{prefix}.reduce.bias": self.b_reduce,
            f"{prefix}.project.weight": self.w_project, f"{prefix}.project.bias": self.b_project,
        }


def _gate(z: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """瓶颈门控：1×1 降维 → ReLU → 1×1 升维/投影 → Sigmoid"""
    return sigmoid(conv2d(relu(conv2d(z, w1, b1)), w2, b2))


def _check_channels(name: str, x: Tensor, expected: int, weight: Tensor):
    if x.ndim != 4:
        raise ShapeError(f"{name}: 需要 4 维输入，实际形状 {x.shape}")
    if x.shape[1] != expected or weight.shape[1] != expected:
        raise ShapeError(
            f"{name}: 输入通道 {x.shape[1]} 与配置通道 {expected} / 权重形状 {weight.shape} 不匹配"
        )


def pam_attention(x: Tensor, params: PamParams, cfg: PamConfig) -> Tensor:
    """PAM 注意力图 A（与 x 同形状，取值在 (0, 1)）"""
    _check_channels("PAM", x, cfg.channels, params.w_reduce)
    cfg.descriptor_grid(x.shape[2], x.shape[3])
    z = avg_pool2d(x, cfg.patch)
    gate = _gate(z, params.w_reduce, params.b_reduce, params.w_increase, params.b_increase)
    return upsample_nearest(gate, *cfg.patch)


def pam_forward(x: Tensor, params: PamParams, cfg: PamConfig) -> Tensor:
    """x + x ⊙ A，形状不变"""
    a = pam_attention(x, params, cfg)
    return add(x, mul(x, a))


def aem_attention(x_high: Tensor, params: AemParams, cfg: AemConfig, low_hw: Tuple[int, int]) -> Tensor:
    """由高层特征生成低层注意力图 A_l"""
    _check_channels("AEM", x_high, cfg.c_high, params.w_reduce)
    hp, wp = cfg.high_patch
    hh, wh = x_high.shape[2], x_high.shape[3]
    if hh % hp or wh % wp:
        raise ShapeError(f"AEM: 高层特征 {hh}×{wh} 不能被 patch {hp}×{wp} 整除")
    fh, fw = cfg.upsample
    computed = ((hh // hp) * fh, (wh // wp) * fw)
    if computed != tuple(low_hw):
        raise ShapeError(
            f"AEM: 描述子网格 {hh // hp}×{wh // wp} 经上采样 {fh}×{fw} 得到 {computed[0]}×{computed[1]}，"
            f"而低层特征要求 {low_hw[0]}×{low_hw[1]}"
        )
    z = avg_pool2d(x_high, cfg.high_patch)
    gate = _gate(z, params.w_reduce, params.b_reduce, params.w_project, params.b_project)
    return upsample_nearest(gate, fh, fw)


def aem_forward(x_low: Tensor, x_high: Tensor, params: AemParams, cfg: AemConfig) -> Tensor:
    """X_l + X_l ⊙ A_l，输出形状与 x_low 相同"""
    if x_low.ndim != 4 or x_low.shape[1] != cfg.c_low or params.w_project.shape[0] != cfg.c_low:
        raise ShapeError(
            f"AEM: 低层输入形状 {x_low.shape} 与配置 c_low={cfg.c_low} / 投影权重 {params.w_project.shape} 不匹配"
        )
    if x_high.ndim == 4 and x_low.shape[0] != x_high.shape[0]:
        raise ShapeError(f"AEM: 批大小不一致 {x_low.shape} vs {x_high.shape}")
    a = aem_attention(x_high, params, cfg, (x_low.shape[2], x_low.shape[3]))
    return add(x_low, mul(x_low, a))


def se_forward(x: Tensor, params: PamParams) -> Tensor:
    """SE 基线：全局描述子 → 门控 → 通道缩放（无残差）"""
    c = params.w_reduce.shape[1]
    _check_channels("SE", x, c, params.w_reduce)
    h, w = x.shape[2], x.shape[3]
    z = avg_pool2d(x, (h, w))
    gate = _gate(z, params.w_reduce, params.b_reduce, params.w_increase, params.b_increase)
    return mul(x, upsample_nearest(gate, h, w))
