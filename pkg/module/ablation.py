"""
消融实验：每个种子依次训练各变体，在测试集上评估 OA 与平均 F1，
汇总为 均值 ± 半极差 表，并判定趋势（lanet 相对 fcn 的提升）。
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from module.dataset import RasterSample
from module.metrics import f1_scores, overall_accuracy
from module.network import ABLATION_VARIANTS, ArchConfig, layout_of
from module.predictor import evaluate_samples
from module.trainer import TrainHyper, train
from utils.errors import DataError
from utils.logger import make_logger

_write_log = make_logger("ablate")

PASS, FAIL, INCONCLUSIVE = "PASS", "FAIL", "INCONCLUSIVE"

# 相对 fcn 的最小提升（OA，比例）
MIN_GAIN = {"lanet": 0.01, "fcn-pam": 0.003, "fcn-aem": 0.003}
CHANCE_MARGIN = 0.02


@dataclass
class AblationResult:
    runs: pd.DataFrame      # variant, seed, oa, mean_f1
    summary: pd.DataFrame   # variant, oa_mean, oa_half_range, f1_mean, f1_half_range
    majority_share: float
    verdict: str
    reasons: List[str]

    def table_text(self) -> str:
        shown = pd.DataFrame({
            "variant": self.summary["variant"],
            "mean F1 (%)": [f"{m * 100:.2f} ± {r * 100:.2f}" for m, r in zip(self.summary["f1_mean"], self.summary["f1_half_range"])],
            "OA (%)": [f"{m * 100:.2f} ± {r * 100:.2f}" for m, r in zip(self.summary["oa_mean"], self.summary["oa_half_range"])],
        })
        return shown.to_string(index=False)


def majority_share(samples: Sequence[RasterSample], num_classes: int) -> float:
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        counts += np.bincount(s.labels.reshape(-1).astype(np.int64), minlength=num_classes)[:num_classes]
    total = counts.sum()
    if total == 0:
        raise DataError("测试集没有任何像素")
    return float(counts.max()) / float(total)


def summarize(runs: pd.DataFrame, variants: Sequence[str]) -> pd.DataFrame:
    grouped = runs.groupby("variant", sort=False)
    summary = pd.DataFrame({
        "oa_mean": grouped["oa"].mean(),
        "oa_half_range": (grouped["oa"].max() - grouped["oa"].min()) / 2,
        "f1_mean": grouped["mean_f1"].mean(),
        "f1_half_range": (grouped["mean_f1"].max() - grouped["mean_f1"].min()) / 2,
    })
    summary = summary.reindex([v for v in variants if v in summary.index])
    return summary.reset_index().rename(columns={"index": "variant"})


def trend_verdict(summary: pd.DataFrame, share: float):
    """
    趋势判定

    所有变体的平均 OA 都低于 多数类占比 + 2 个百分点 时视为接近随机水平，结论为 INCONCLUSIVE；
    否则要求 lanet 比 fcn 高至少 1 个百分点、fcn-pam / fcn-aem 各高至少 0.3 个百分点。
    """
    oa = dict(zip(summary["variant"], summary["oa_mean"]))
    if all(v < share + CHANCE_MARGIN for v in oa.values()):
        return INCONCLUSIVE, [f"所有变体 OA 低于多数类占比 {share:.4f} + {CHANCE_MARGIN}（接近随机水平）"]
    if "fcn" not in oa:
        return INCONCLUSIVE, ["缺少 fcn 基线，无法判定趋势"]
    reasons = []
    ok = True
    for variant, gain in MIN_GAIN.items():
        if variant not in oa:
            continue
        delta = oa[variant] - oa["fcn"]
        passed = delta >= gain
        ok &= passed
        reasons.append(f"{variant} − fcn = {delta * 100:+.2f} 点（要求 ≥ {gain * 100:.1f}）{'通过' if passed else '未通过'}")
    return (PASS if ok else FAIL), reasons


def run_ablation(
    train_samples: Sequence[RasterSample],
    test_samples: Sequence[RasterSample],
    arch: ArchConfig,
    hyper: TrainHyper,
    seeds: Sequence[int],
    variants: Sequence[str] = ABLATION_VARIANTS,
    tile: int = 512,
    overlap: int = 64,
    workers: int = 1,
    exclude: Sequence[int] = (),
    progress: Optional[Callable[[str], None]] = None,
) -> AblationResult:
    """按 种子 × 变体 顺序训练并评估（顺序执行，保证可复现）"""
    if not test_samples:
        raise DataError("测试集为空")
    for v in variants:
        layout_of(v)
    records: List[Dict] = []
    for seed in seeds:
        for variant in variants:
            result = train(train_samples, arch, variant, replace(hyper, seed=seed))
            cm = evaluate_samples(result.params, test_samples, tile, overlap, workers, hyper.ignore_label)
            oa = overall_accuracy(cm)
            _, mean_f1 = f1_scores(cm, exclude)
            records.append({"variant": variant, "seed": seed, "oa": oa, "mean_f1": mean_f1})
            line = f"seed={seed} variant={variant} OA={oa:.4f} meanF1={mean_f1:.4f}"
            _write_log(line)
            if progress is not None:
                progress(line)

    runs = pd.DataFrame(records, columns=["variant", "seed", "oa", "mean_f1"])
    summary = summarize(runs, variants)
    share = majority_share(test_samples, arch.num_classes)
    verdict, reasons = trend_verdict(summary, share)
    _write_log(f"消融结论 {verdict}: " + "；".join(reasons))
    return AblationResult(runs, summary, share, verdict, reasons)
