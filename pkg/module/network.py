"""
网络组装：卷积主干 + 高/低层两个分支 + 注意力模块 + 分支分类器（逐元素相加融合）

变体：
    fcn           只有高层分支
    fcn-pam       两个分支，各自加 PAM
    fcn-aem       两个分支，低层分支加 AEM（由原始高层特征驱动）
    lanet         PAM(高) → 分支 1；PAM(低) → AEM(低, 高) → 分支 2
    fcn-low       两个普通分支（低层特征对照组）
    fcn-pam-high  只有高层分支，加 PAM
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np

from module.attention import AemConfig, AemParams, PamConfig, PamParams, aem_forward, pam_forward
from module.ops import add, conv2d, relu, upsample_nearest
from module.tensor import Tensor
from utils.errors import ConfigError, ShapeError

HIGH_STRIDE = 16
LOW_STRIDE = 4
LOW_STAGE = 2
NUM_STAGES = 4


@dataclass(frozen=True)
class VariantLayout:
    has_low: bool
    pam_high: bool
    pam_low: bool
    aem: bool


VARIANT_LAYOUTS: Dict[str, VariantLayout] = {
    "fcn": VariantLayout(has_low=False, pam_high=False, pam_low=False, aem=False),
    "fcn-pam": VariantLayout(has_low=True, pam_high=True, pam_low=True, aem=False),
    "fcn-aem": VariantLayout(has_low=True, pam_high=False, pam_low=False, aem=True),
    "lanet": VariantLayout(has_low=True, pam_high=True, pam_low=True, aem=True),
    "fcn-low": VariantLayout(has_low=True, pam_high=False, pam_low=False, aem=False),
    "fcn-pam-high": VariantLayout(has_low=False, pam_high=True, pam_low=False, aem=False),
}
VARIANTS: Tuple[str, ...] = tuple(VARIANT_LAYOUTS)
ABLATION_VARIANTS: Tuple[str, ...] = VARIANTS[:4]


def layout_of(variant: str) -> VariantLayout:
    try:
        return VARIANT_LAYOUTS[variant]
    except KeyError:
        raise ConfigError(f"未知变体 {variant!r}，可选：{', '.join(VARIANTS)}") from None


def logit_stride(variant: str) -> int:
    """最细一路 logits 的步长：fused 在每个 stride×stride 块内为常数"""
    return LOW_STRIDE if layout_of(variant).has_low else HIGH_STRIDE


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 4
    num_classes: int = 6
    widths: Tuple[int, ...] = (32, 64, 96, 128)
    head_width: int = 64
    pam_high_patch: Tuple[int, int] = (4, 4)
    pam_low_patch: Tuple[int, int] = (8, 8)
    aem_patch: Tuple[int, int] = (2, 2)
    reduction: int = 16
    min_reduced: int = 4
    aux_weight: float = 0.4

    def __post_init__(self):
        if self.in_channels not in (3, 4, 5):
            raise ConfigError(f"in_channels 只能是 3 / 4 / 5，实际 {self.in_channels}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes 至少为 2，实际 {self.num_classes}")
        if len(self.widths) != NUM_STAGES or any(w < 1 for w in self.widths):
            raise ConfigError(f"widths 必须是 {NUM_STAGES} 个正整数，实际 {self.widths}")
        if self.head_width < 1 or self.reduction < 1 or self.min_reduced < 1:
            raise ConfigError("head_width / reduction / min_reduced 必须为正")
        if self.aux_weight < 0:
            raise ConfigError(f"aux_weight 不能为负：{self.aux_weight}")

    @classmethod
    def from_run_config(cls, rc: Mapping[str, Any]) -> "ArchConfig":
        return cls(
            in_channels=rc["in_channels"], num_classes=rc["num_classes"], widths=tuple(rc["widths"]),
            head_width=rc["head_width"], pam_high_patch=tuple(rc["pam_high_patch"]),
            pam_low_patch=tuple(rc["pam_low_patch"]), aem_patch=tuple(rc["aem_patch"]),
            reduction=rc["reduction"], min_reduced=rc["min_reduced"], aux_weight=rc["aux_weight"],
        )

    @property
    def c_low(self) -> int:
        return self.widths[LOW_STAGE - 1]

    @property
    def c_high(self) -> int:
        return self.widths[-1]

    def pam_high(self) -> PamConfig:
        return PamConfig(self.c_high, self.pam_high_patch, self.reduction, self.min_reduced)

    def pam_low(self) -> PamConfig:
        return PamConfig(self.c_low, self.pam_low_patch, self.reduction, self.min_reduced)

    def aem(self) -> AemConfig:
        factor = HIGH_STRIDE // LOW_STRIDE
        ph, pw = self.aem_patch
        return AemConfig(
            self.c_high, self.c_low, self.aem_patch, (ph * factor, pw * factor),
            self.reduction, self.min_reduced,
        )

    def unit(self, variant: Optional[str] = None) -> Tuple[int, int]:
        """输入边长必须整除的单位（按轴）；variant 为 None 时取所有模块的最小公倍数"""
        lay = VARIANT_LAYOUTS["lanet"] if variant is None else layout_of(variant)
        units_h, units_w = [HIGH_STRIDE], [HIGH_STRIDE]
        if lay.pam_high:
            units_h.append(HIGH_STRIDE * self.pam_high_patch[0])
            units_w.append(HIGH_STRIDE * self.pam_high_patch[1])
        if lay.pam_low:
            units_h.append(LOW_STRIDE * self.pam_low_patch[0])
            units_w.append(LOW_STRIDE * self.pam_low_patch[1])
        if lay.aem:
            units_h.append(HIGH_STRIDE * self.aem_patch[0])
            units_w.append(HIGH_STRIDE * self.aem_patch[1])
        return int(np.lcm.reduce(units_h)), int(np.lcm.reduce(units_w))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "in_channels": self.in_channels, "num_classes": self.num_classes, "widths": self.widths,
            "head_width": self.head_width, "pam_high_patch": self.pam_high_patch,
            "pam_low_patch": self.pam_low_patch, "aem_patch": self.aem_patch,
            "reduction": self.reduction, "min_reduced": self.min_reduced, "aux_weight": self.aux_weight,
        }


# ===== 参数表 =====
def _conv_spec(prefix: str, out_c: int, in_c: int, k: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(f"{prefix}.weight", (out_c, in_c, k, k)), (f"{prefix}.bias", (out_c,))]


def param_specs(variant: str, arch: ArchConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """(名称, 形状) 列表，完全由 (arch, variant) 决定"""
    lay = layout_of(variant)
    specs = _conv_spec("backbone.stem", arch.widths[0], arch.in_channels, 3)
    prev = arch.widths[0]
    for s, width in enumerate(arch.widths, 1):
        specs += _conv_spec(f"backbone.stage{s}.conv1", width, prev, 3)
        specs += _conv_spec(f"backbone.stage{s}.conv2", width, width, 3)
        prev = width
    if lay.pam_high:
        specs += [(f"pam_high.{k}", v) for k, v in PamParams.shapes(arch.pam_high()).items()]
    if lay.pam_low:
        specs += [(f"pam_low.{k}", v) for k, v in PamParams.shapes(arch.pam_low()).items()]
    if lay.aem:
        specs += [(f"aem.{k}", v) for k, v in AemParams.shapes(arch.aem()).items()]
    branches = [("head_high", arch.c_high)] + ([("head_low", arch.c_low)] if lay.has_low else [])
    for head, c in branches:
        specs += _conv_spec(f"{head}.conv", arch.head_width, c, 3)
        specs += _conv_spec(f"{head}.cls", arch.num_classes, arch.head_width, 1)
    return specs


def init_tensor(name: str, shape: Tuple[int, ...], seed: int, dtype=np.float32) -> np.ndarray:
    """每个参数独立的随机流 (seed, crc32(name))；同名参数在不同变体中取值相同"""
    if name.endswith(".bias") or ".cls." in name:
        return np.zeros(shape, dtype=dtype)
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    rng = np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass(frozen=True)
class ModelParams:
    """命名参数表 + 变体标签"""
    variant: str
    arch: ArchConfig
    tensors: Dict[str, Tensor] = field(repr=False)

    def __post_init__(self):
        expected = param_specs(self.variant, self.arch)
        names = [name for name, _ in expected]
        if list(self.tensors) != names:
            missing = sorted(set(names) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(names))
            raise ShapeError(f"变体 {self.variant} 的参数表不匹配：缺少 {missing}，多余 {extra}")
        for name, shape in expected:
            if self.tensors[name].shape != shape:
                raise ShapeError(f"参数 {name} 形状应为 {shape}，实际 {self.tensors[name].shape}")

    @property
    def layout(self) -> VariantLayout:
        return VARIANT_LAYOUTS[self.variant]

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(self.tensors)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def count(self) -> int:
        """标量参数总数"""
        return sum(t.size for t in self.tensors.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def with_tensors(self, tensors: Mapping[str, Tensor]) -> "ModelParams":
        """按原顺序替换参数（优化器一步更新后使用）"""
        return ModelParams(self.variant, self.arch, {name: tensors[name] for name in self.tensors})

    def astype(self, dtype) -> "ModelParams":
        return self.with_tensors({n: t.astype(dtype) for n, t in self.tensors.items()})

    def pam_high(self) -> Optional[PamParams]:
        return PamParams.from_store(self.tensors, "pam_high") if self.layout.pam_high else None

    def pam_low(self) -> Optional[PamParams]:
        return PamParams.from_store(self.tensors, "pam_low") if self.layout.pam_low else None

    def aem(self) -> Optional[AemParams]:
        return AemParams.from_store(self.tensors, "aem") if self.layout.aem else None


def build_variant(variant: str, arch: ArchConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """按变体构建参数：卷积权重 Kaiming 均匀初始化，偏置为零，分类层为零"""
    tensors = {
        name: Tensor.wrap(init_tensor(name, shape, seed, dtype), requires_grad=True, name=name)
        for name, shape in param_specs(variant, arch)
    }
    return ModelParams(variant, arch, tensors)


# ===== 前向 =====
class ModelOutput(NamedTuple):
    fused: Tensor
    high: Tensor
    low: Optional[Tensor]


def _conv(x: Tensor, params: Mapping[str, Tensor], prefix: str, stride: int = 1, pad: int = 1) -> Tensor:
    return conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], stride=stride, pad=pad)


def _check_image(image: Tensor, params: ModelParams, unit: Tuple[int, int]):
    if image.ndim != 4:
        raise ShapeError(f"输入图像必须是 (n, b, H, W)，实际形状 {image.shape}")
    if image.shape[1] != params.arch.in_channels:
        raise ShapeError(f"输入波段数 {image.shape[1]} 与模型 in_channels={params.arch.in_channels} 不符")
    h, w = image.shape[2], image.shape[3]
    if h % unit[0] or w % unit[1]:
        raise ShapeError(f"输入尺寸 {h}×{w} 必须能被 {unit[0]}×{unit[1]} 整除（变体 {params.variant}）")


def backbone_forward(image: Tensor, params: ModelParams) -> Tuple[Tensor, Tensor]:
    """
    主干：3×3 stem（stride 1）+ 四个 stride 2 阶段 [conv3×3 → relu → conv3×3 → relu]

    :return: (低层特征 stride 4, 高层特征 stride 16)
    """
    _check_image(image, params, (HIGH_STRIDE, HIGH_STRIDE))
    store = params.tensors
    x = relu(_conv(image, store, "backbone.stem"))
    low = None
    for s in range(1, NUM_STAGES + 1):
        x = relu(_conv(x, store, f"backbone.stage{s}.conv1", stride=2))
        x = relu(_conv(x, store, f"backbone.stage{s}.conv2"))
        if s == LOW_STAGE:
            low = x
    return low, x


def _head(x: Tensor, store: Mapping[str, Tensor], prefix: str, factor: int) -> Tensor:
    y = relu(_conv(x, store, f"{prefix}.conv"))
    y = _conv(y, store, f"{prefix}.cls", pad=0)
    return upsample_nearest(y, factor, factor)


def model_forward(image: Tensor, params: ModelParams) -> ModelOutput:
    """各分支 logits 上采样到输入尺寸后逐元素相加；单分支变体 fused 即该分支"""
    _check_image(image, params, params.arch.unit(params.variant))
    lay = params.layout
    arch = params.arch
    store = params.tensors
    low, high = backbone_forward(image, params)

    if lay.pam_high:
        high = pam_forward(high, params.pam_high(), arch.pam_high())
    logits_high = _head(high, store, "head_high", HIGH_STRIDE)
    if not lay.has_low:
        return ModelOutput(logits_high, logits_high, None)

    if lay.pam_low:
        low = pam_forward(low, params.pam_low(), arch.pam_low())
    if lay.aem:
        # lanet 中 high 已经过 PAM 增强；fcn-aem 中为原始高层特征
        low = aem_forward(low, high, params.aem(), arch.aem())
    logits_low = _head(low, store, "head_low", LOW_STRIDE)
    return ModelOutput(add(logits_high, logits_low), logits_high, logits_low)


def select_branch(output: ModelOutput, branch: str) -> Tensor:
    if branch == "fused":
        return output.fused
    if branch == "high":
        return output.high
    if branch == "low":
        if output.low is None:
            raise ConfigError("单分支变体没有低层分支输出，可选 fused / high")
        return output.low
    raise ConfigError(f"未知分支 {branch!r}，可选 fused / high / low")
