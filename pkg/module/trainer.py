"""
训练循环

损失 = (CE(fused) + λ·Σ CE(分支)) / (1 + λ·分支数)，分支项只在双分支变体中出现；
零初始化分类层时每一项都等于 ln K，第 0 步损失恰为 ln K。
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import xlogy

from module.dataset import RasterSample, augment, crop_sample
from module.network import ArchConfig, ModelParams, build_variant, logit_stride, model_forward
from module.ops import add, scale, softmax_cross_entropy
from module.optim import SGD, step_decay_lr
from module.tensor import Graph, Tensor
from utils.errors import ConfigError, DataError, TrainingDivergedError
from utils.logger import make_logger

_write_log = make_logger("train")

LogEntry = Tuple[int, float, float]


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    steps: int = 2000
    batch: int = 2
    crop: int = 512
    seed: int = 0
    dtype: str = "float32"
    lr_decay_steps: int = 0
    lr_decay_gamma: float = 0.1
    ignore_label: Optional[int] = None
    log_every: int = 10
    augment: bool = True

    @classmethod
    def from_run_config(cls, rc: Mapping[str, Any]) -> "TrainHyper":
        return cls(
            lr=rc["lr"], momentum=rc["momentum"], weight_decay=rc["weight_decay"], steps=rc["steps"],
            batch=rc["batch"], crop=rc["crop"], seed=rc["seed"], dtype=rc["dtype"],
            lr_decay_steps=rc["lr_decay_steps"], lr_decay_gamma=rc["lr_decay_gamma"],
            ignore_label=rc["ignore_label"], log_every=rc["log_every"], augment=rc["augment"],
        )


@dataclass
class TrainResult:
    params: ModelParams
    log: List[LogEntry] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [loss for _, loss, _ in self.log]


def compute_loss(
    params: ModelParams,
    images: Tensor,
    labels: np.ndarray,
    ignore_label: Optional[int] = None,
) -> Tuple[Tensor, Dict[str, float]]:
    """
    训练损失（归一化加权均值）

    :return: (标量损失张量, 各项交叉熵数值)
    """
    out = model_forward(images, params)
    ce_fused = softmax_cross_entropy(out.fused, labels, ignore_label)
    parts = {"fused": ce_fused.item()}
    if out.low is None:
        return ce_fused, parts

    lam = params.arch.aux_weight
    ce_high = softmax_cross_entropy(out.high, labels, ignore_label)
    ce_low = softmax_cross_entropy(out.low, labels, ignore_label)
    parts["high"] = ce_high.item()
    parts["low"] = ce_low.item()
    total = add(ce_fused, scale(add(ce_high, ce_low), lam))
    return scale(total, 1.0 / (1.0 + 2.0 * lam)), parts


def resolution_floor(
    labels: np.ndarray,
    stride: int,
    num_classes: int,
    ignore_label: Optional[int] = None,
) -> float:
    """
    logits 在 stride×stride 块内为常数时可达到的最小平均交叉熵

    块内最优预测就是块内类别频率，下界 = Σ_块 (块内有效像素数 × 块内类别熵) / 有效像素总数；
    标签边界与块网格对齐时为 0。

    :param labels: (H, W) 或 (n, H, W) 标签图，边长须为 stride 的整数倍
    """
    lab = np.asarray(labels, dtype=np.int64)
    if lab.ndim == 2:
        lab = lab[None]
    n, h, w = lab.shape
    if h % stride or w % stride:
        raise DataError(f"标签尺寸 {h}×{w} 不是块边长 {stride} 的整数倍")
    blocks = lab.reshape(n, h // stride, stride, w // stride, stride).transpose(0, 1, 3, 2, 4)
    blocks = blocks.reshape(-1, stride * stride)
    valid = np.ones(blocks.shape, dtype=bool) if ignore_label is None else blocks != ignore_label
    if np.any(blocks[valid] >= num_classes) or np.any(blocks[valid] < 0):
        raise DataError(f"标签取值超出 [0, {num_classes})")
    rows = np.broadcast_to(np.arange(blocks.shape[0])[:, None], blocks.shape)
    counts = np.bincount(
        rows[valid] * num_classes + blocks[valid], minlength=blocks.shape[0] * num_classes
    ).reshape(-1, num_classes).astype(np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    freq = counts / np.maximum(counts.sum(axis=1, keepdims=True), 1.0)
    return float(-xlogy(counts, freq).sum() / total)


def _prepare(sample: RasterSample, hyper: "TrainHyper", rng: np.random.Generator) -> RasterSample:
    if hyper.augment:
        return augment(sample, hyper.crop, rng)
    return crop_sample(sample, 0, 0, hyper.crop)


def _stack_batch(samples: Sequence[RasterSample], dtype) -> Tuple[Tensor, np.ndarray]:
    images = np.concatenate([s.image.data for s in samples], axis=0).astype(dtype, copy=False)
    labels = np.stack([s.labels for s in samples], axis=0)
    return Tensor.wrap(images), labels


def _check_setup(samples: Sequence[RasterSample], arch: ArchConfig, variant: str, hyper: TrainHyper):
    if not samples:
        raise DataError("训练集为空")
    if hyper.steps < 1 or hyper.batch < 1:
        raise ConfigError(f"steps / batch 必须为正：steps={hyper.steps}, batch={hyper.batch}")
    uh, uw = arch.unit(variant)
    if hyper.crop % uh or hyper.crop % uw:
        raise ConfigError(f"crop={hyper.crop} 必须能被 {uh}×{uw} 整除（变体 {variant}）")
    bands = {s.image.shape[1] for s in samples}
    if bands != {arch.in_channels}:
        raise DataError(f"样本波段数 {sorted(bands)} 与 in_channels={arch.in_channels} 不符")


def train(
    samples: Sequence[RasterSample],
    arch: ArchConfig,
    variant: str,
    hyper: TrainHyper,
    init: Optional[ModelParams] = None,
    progress: Optional[Callable[[int, float, float], None]] = None,
) -> TrainResult:
    """
    SGD + 动量训练；固定种子下逐位可复现

    每步从训练集中有放回地抽取 batch 个样本，各自随机裁剪 + 翻转；
    augment=False 时固定取左上角 crop×crop，不翻转。
    """
    _check_setup(samples, arch, variant, hyper)
    dtype = np.dtype(hyper.dtype)
    params = init if init is not None else build_variant(variant, arch, seed=hyper.seed, dtype=dtype)
    rng = np.random.default_rng(hyper.seed)
    opt = SGD(hyper.lr, hyper.momentum, hyper.weight_decay)
    result = TrainResult(params)

    _write_log(
        f"开始训练 variant={variant} 参数量={params.count()} steps={hyper.steps} "
        f"batch={hyper.batch} crop={hyper.crop} seed={hyper.seed} dtype={dtype} augment={hyper.augment}"
    )
    stride = logit_stride(variant)
    whole = [s.labels for s in samples if s.labels.shape[0] % stride == 0 and s.labels.shape[1] % stride == 0]
    if whole:
        floors = [resolution_floor(lab, stride, arch.num_classes, hyper.ignore_label) for lab in whole]
        _write_log(f"分辨率损失下界（整图、{stride}×{stride} 块）：{float(np.mean(floors)):.4f}")
    for step in range(hyper.steps):
        lr = step_decay_lr(hyper.lr, step, hyper.lr_decay_steps, hyper.lr_decay_gamma)
        picks = rng.integers(0, len(samples), size=hyper.batch)
        batch = [_prepare(samples[int(i)], hyper, rng) for i in picks]
        images, labels = _stack_batch(batch, dtype)

        with Graph(parameters=params.tensors) as graph:
            loss, _ = compute_loss(params, images, labels, hyper.ignore_label)
        value = loss.item()
        if not math.isfinite(value):
            _write_log(f"第 {step} 步损失非有限：{value}", 'error')
            raise TrainingDivergedError(step, value)

        grads = graph.backward(loss)
        params = params.with_tensors(opt.step(params.tensors, grads, lr))
        result.log.append((step, value, lr))

        if progress is not None:
            progress(step, value, lr)
        if step % max(hyper.log_every, 1) == 0 or step == hyper.steps - 1:
            _write_log(f"step {step}\tloss {value:.6f}\tlr {lr:g}")

    result.params = params
    _write_log(f"训练结束：最终损失 {result.log[-1][1]:.6f}")
    return result


# ===== 训练日志与曲线 =====
def trainlog_path(checkpoint_path: Path) -> Path:
    path = Path(checkpoint_path)
    return path.with_name(path.name + ".trainlog")


def write_trainlog(path: Path, log: Sequence[LogEntry]):
    """每步一行：step<TAB>loss<TAB>lr"""
    lines = [f"{step}\t{loss!r}\t{lr!r}\n" for step, loss, lr in log]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_trainlog(path: Path) -> List[LogEntry]:
    entries: List[LogEntry] = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"无法读取训练日志 {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: 训练日志格式错误：{line!r}")
        entries.append((int(parts[0]), float(parts[1]), float(parts[2])))
    return entries


def plot_loss_curve(log: Sequence[LogEntry], path: Path, title: Optional[str] = None):
    """把逐步损失画成 PNG（Agg 后端，不依赖显示环境）"""
    from matplotlib.backends.backend_agg import FigureCanvasAgg
    from matplotlib.figure import Figure

    if not log:
        raise DataError("训练日志为空，无法绘制损失曲线")
    steps = [entry[0] for entry in log]
    losses = [entry[1] for entry in log]

    fig = Figure(figsize=(8, 5), dpi=100)
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(111)
    ax.plot(steps, losses, color="#1f77b4", linewidth=1.2, label="loss")
    ax.axhline(math.log(6), color="#999999", linestyle="--", linewidth=0.8, label="ln 6")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title or "training loss")
    ax.grid(True, linestyle="--", alpha=0.6)
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(str(path))
    _write_log(f"损失曲线已保存：{path}")
