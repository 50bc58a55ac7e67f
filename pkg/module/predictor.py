"""
分块推理与拼接

- 块起点按 step = tile − overlap 排列，最后补一个与边界对齐的块
- 相邻块的写入分界取重叠区中点，每个像素只写一次
- 各块在冻结参数下相互独立，可多线程并行，拼接结果与顺序执行一致
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np

from module.metrics import ConfusionMatrix, accumulate
from module.network import HIGH_STRIDE, ModelParams, model_forward, select_branch
from module.tensor import Tensor
from utils.errors import ConfigError, DataError
from utils.logger import make_logger

_write_log = make_logger("predict")

MIN_OVERLAP = 2 * HIGH_STRIDE


def tile_starts(length: int, tile: int, overlap: int) -> List[int]:
    """一维块起点；length ≤ tile 时只有一个块"""
    if length <= tile:
        return [0]
    step = tile - overlap
    starts = list(range(0, length - tile + 1, step))
    if starts[-1] + tile < length:
        starts.append(length - tile)
    return starts


def write_bounds(starts: Sequence[int], tile: int, length: int) -> List[Tuple[int, int]]:
    """每个块负责写入的区间 [lo, hi)，分界在相邻重叠区的中点"""
    bounds = []
    for i, start in enumerate(starts):
        lo = 0 if i == 0 else (start + starts[i - 1] + tile) // 2
        hi = length if i == len(starts) - 1 else (starts[i + 1] + start + tile) // 2
        bounds.append((lo, min(hi, length)))
    return bounds


def _reflect_pad(x: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """在下边和右边反射补齐到目标尺寸"""
    ph, pw = target_h - x.shape[-2], target_w - x.shape[-1]
    if ph <= 0 and pw <= 0:
        return x
    pad = [(0, 0)] * (x.ndim - 2) + [(0, max(ph, 0)), (0, max(pw, 0))]
    mode = "reflect" if min(x.shape[-2:]) > 1 else "edge"
    return np.pad(x, pad, mode=mode)


def _as_raster(params: ModelParams, raster) -> np.ndarray:
    data = raster.data if isinstance(raster, Tensor) else np.asarray(raster)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4 or data.shape[0] != 1:
        raise DataError(f"影像形状应为 (b, H, W) 或 (1, b, H, W)，实际 {data.shape}")
    if data.shape[1] != params.arch.in_channels:
        raise DataError(f"影像波段数 {data.shape[1]} 与检查点 in_channels={params.arch.in_channels} 不符")
    return data.astype(params.dtype, copy=False)


def _argmax_labels(params: ModelParams, image: np.ndarray, branch: str) -> np.ndarray:
    logits = select_branch(model_forward(Tensor.wrap(np.ascontiguousarray(image)), params), branch)
    return np.argmax(logits.data[0], axis=0).astype(np.uint8)


def predict_whole(params: ModelParams, raster, branch: str = "fused") -> np.ndarray:
    """整幅影像一次前向（反射补齐到输入单位后裁回）"""
    data = _as_raster(params, raster)
    h, w = data.shape[2:]
    uh, uw = params.arch.unit(params.variant)
    padded = _reflect_pad(data, -(-h // uh) * uh, -(-w // uw) * uw)
    return _argmax_labels(params, padded, branch)[:h, :w]


def check_tiling(params: ModelParams, tile: int, overlap: int):
    uh, uw = params.arch.unit(params.variant)
    if tile % uh or tile % uw:
        raise ConfigError(f"tile={tile} 必须能被 {uh}×{uw} 整除（变体 {params.variant}）")
    if overlap < MIN_OVERLAP:
        raise ConfigError(f"overlap={overlap} 必须 ≥ {MIN_OVERLAP}（2 × 高层步长）")
    if overlap >= tile:
        raise ConfigError(f"overlap={overlap} 必须小于 tile={tile}")


def predict_tiled(
    params: ModelParams,
    raster,
    tile: int = 512,
    overlap: int = 64,
    workers: int = 1,
    branch: str = "fused",
) -> np.ndarray:
    """
    分块推理

    :param raster: (b, H, W) 或 (1, b, H, W) 影像
    :param tile: 块边长；0 表示整幅推理
    :param overlap: 相邻块重叠宽度（≥ 32）
    :param workers: 并行线程数
    :return: H×W uint8 类别图
    """
    if tile == 0:
        return predict_whole(params, raster, branch)
    check_tiling(params, tile, overlap)
    data = _as_raster(params, raster)
    h, w = data.shape[2:]
    padded = _reflect_pad(data, max(h, tile), max(w, tile))

    rows = tile_starts(h, tile, overlap)
    cols = tile_starts(w, tile, overlap)
    row_bounds = write_bounds(rows, tile, h)
    col_bounds = write_bounds(cols, tile, w)
    jobs = [(r, c) for r in range(len(rows)) for c in range(len(cols))]
    _write_log(f"分块推理 {h}×{w}：tile={tile} overlap={overlap} 共 {len(jobs)} 块 workers={workers} branch={branch}")

    def _run(job: Tuple[int, int]) -> np.ndarray:
        r, c = job
        y0, x0 = rows[r], cols[c]
        return _argmax_labels(params, padded[:, :, y0:y0 + tile, x0:x0 + tile], branch)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run, jobs))
    else:
        results = [_run(job) for job in jobs]

    out = np.zeros((h, w), dtype=np.uint8)
    for (r, c), labels in zip(jobs, results):
        (lo_y, hi_y), (lo_x, hi_x) = row_bounds[r], col_bounds[c]
        y0, x0 = rows[r], cols[c]
        out[lo_y:hi_y, lo_x:hi_x] = labels[lo_y - y0:hi_y - y0, lo_x - x0:hi_x - x0]
    return out


def pixel_agreement(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise DataError(f"两幅类别图尺寸不一致：{a.shape} vs {b.shape}")
    return float(np.mean(a == b))


def evaluate_samples(
    params: ModelParams,
    samples,
    tile: int = 512,
    overlap: int = 64,
    workers: int = 1,
    ignore_label: Optional[int] = None,
) -> ConfusionMatrix:
    """对一组样本做分块推理并累积混淆矩阵"""
    cm = ConfusionMatrix.empty(params.arch.num_classes)
    for sample in samples:
        pred = predict_tiled(params, sample.image, tile, overlap, workers)
        cm = accumulate(cm, pred, sample.labels, ignore_label)
        _write_log(f"已评估样本 {sample.id}")
    return cm
