"""
评估指标：混淆矩阵、总体精度（OA）、逐类 F1 与平均 F1
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import CLASS_NAMES
from utils.errors import DataError, ShapeError


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[ref][pred]，非负整数"""
    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int = len(CLASS_NAMES)) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ShapeError(f"混淆矩阵尺寸不一致：{self.counts.shape} vs {other.counts.shape}")
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, ref: np.ndarray, ignore: Optional[int] = None) -> ConfusionMatrix:
    """把一对类别图（预测 / 参考）计入混淆矩阵，ignore 类的参考像素不计"""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ShapeError(f"预测图 {pred.shape} 与参考图 {ref.shape} 尺寸不一致")
    k = cm.num_classes
    p = pred.reshape(-1).astype(np.int64)
    r = ref.reshape(-1).astype(np.int64)
    if ignore is not None:
        keep = r != ignore
        p, r = p[keep], r[keep]
    for name, arr in (("预测", p), ("参考", r)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise DataError(f"{name}类别越界：取值范围 [{arr.min()}, {arr.max()}] 不在 [0, {k}) 内")
    counts = np.bincount(r * k + p, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(cm.counts + counts)


def merge_all(matrices: Iterable[ConfusionMatrix]) -> ConfusionMatrix:
    result = None
    for cm in matrices:
        result = cm if result is None else result.merge(cm)
    if result is None:
        raise DataError("没有可合并的混淆矩阵")
    return result


def overall_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    if total == 0:
        raise DataError("混淆矩阵为空，无法计算 OA")
    return float(np.trace(cm.counts)) / total


def f1_scores(cm: ConfusionMatrix, exclude: Sequence[int] = ()) -> Tuple[np.ndarray, float]:
    """
    逐类 F1 与平均 F1

    precision = cm[k][k] / 列和，recall = cm[k][k] / 行和，P + R = 0 时 F1 = 0；
    平均值跳过参考中不存在的类（行和为 0）以及 exclude 指定的类。
    """
    if cm.total == 0:
        raise DataError("混淆矩阵为空，无法计算 F1")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(cols > 0, tp / cols, 0.0)
        recall = np.where(rows > 0, tp / rows, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    included = [k for k in range(cm.num_classes) if rows[k] > 0 and k not in set(exclude)]
    mean = float(np.mean(f1[included])) if included else 0.0
    return f1, mean


def report_frame(cm: ConfusionMatrix, class_names: Sequence[str] = CLASS_NAMES, exclude: Sequence[int] = ()) -> pd.DataFrame:
    """报告表：每类一行 F1，再加 mean_f1 与 overall_accuracy 两行"""
    f1, mean = f1_scores(cm, exclude)
    names = list(class_names)[: cm.num_classes]
    rows = [(name, float(v)) for name, v in zip(names, f1)]
    rows += [("mean_f1", mean), ("overall_accuracy", overall_accuracy(cm))]
    return pd.DataFrame(rows, columns=["class", "f1"])


def report_text(frame: pd.DataFrame) -> str:
    """对齐的文本表"""
    return frame.to_string(index=False, float_format=lambda v: f"{v:.4f}")


def report_csv(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, lineterminator="\n", float_format="%.6f")
