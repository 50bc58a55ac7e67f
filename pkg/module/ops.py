"""
张量算子：卷积、平均池化、最近邻上采样、激活、逐元素运算、softmax 交叉熵

约定：
- 不做隐式广播，形状对齐必须显式通过 upsample_nearest 完成
- 所有归约按固定的从左到右顺序累加，相同输入得到逐位相同的结果
"""
from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from module.tensor import BackwardFn, Tensor, active_graph
from utils.errors import DataError, ShapeError


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """包装输出；处于 Graph 上下文且有输入需要梯度时记录节点"""
    out = Tensor.wrap(data)
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.record(op, inputs, out, backward_fn)
    return out


def _require_4d(op: str, x: Tensor):
    if x.ndim != 4:
        raise ShapeError(f"{op}: 需要 4 维张量 (n, c, h, w)，实际形状 {x.shape}")


def _same_dtype(op: str, *tensors: Tensor):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: dtype 不一致 {sorted(str(d) for d in dtypes)}")


def ordered_mean(values: np.ndarray) -> np.ndarray:
    """
    以首元素为基准的顺序均值：m = x0 + Σ(x_k − x0) / N

    累加严格从左到右（cumsum），常数序列的结果与该常数逐位相等。
    """
    flat = np.asarray(values).reshape(-1)
    pivot = flat[0]
    total = np.cumsum(flat - pivot)[-1]
    return pivot + total / flat.size


# ===== 卷积 =====
def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """
    二维互相关

    :param x: (n, in_c, h, w)
    :param weight: (out_c, in_c, kh, kw)，kh、kw ∈ {1, 3}
    :param bias: (out_c,) 或 None
    :param stride: 步长（正整数）
    :param pad: 四周补零宽度
    """
    _require_4d("conv2d", x)
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: 权重必须是 4 维，实际形状 {weight.shape}")
    out_c, in_c, kh, kw = weight.shape
    n, c, h, w = x.shape
    if c != in_c:
        raise ShapeError(f"conv2d: 输入形状 {x.shape} 与权重形状 {weight.shape} 的通道数不匹配")
    if kh not in (1, 3) or kw not in (1, 3):
        raise ShapeError(f"conv2d: 只支持 1×1 / 3×3 卷积核，实际 {kh}×{kw}")
    if bias is not None and bias.shape != (out_c,):
        raise ShapeError(f"conv2d: 偏置形状 {bias.shape} 与权重形状 {weight.shape} 不匹配")
    if int(stride) != stride or stride < 1 or int(pad) != pad or pad < 0:
        raise ShapeError(f"conv2d: 非法的 stride={stride} / pad={pad}")
    stride, pad = int(stride), int(pad)
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: 输入 {x.shape} 经 {kh}×{kw} / stride {stride} / pad {pad} 后输出为空")
    inputs = (x, weight) if bias is None else (x, weight, bias)
    _same_dtype("conv2d", *inputs)

    xd = x.data
    wd = weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1

    # 累加顺序：输入通道 → 核行 → 核列，偏置最后加
    out = np.zeros((n, out_c, ho, wo), dtype=xd.dtype)
    for ci in range(in_c):
        for i in range(kh):
            for j in range(kw):
                tap = xp[:, ci:ci + 1, i:i + span_h:stride, j:j + span_w:stride]
                out += tap * wd[:, ci, i, j].reshape(1, out_c, 1, 1)
    if bias is not None:
        out += bias.data.reshape(1, out_c, 1, 1)

    def _backward(g: np.ndarray):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.zeros_like(wd)
            for i in range(kh):
                for j in range(kw):
                    taps = xp[:, :, i:i + span_h:stride, j:j + span_w:stride]
                    gw[:, :, i, j] = np.tensordot(g, taps, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(wd[:, :, i, j], g, axes=([0], [1]))  # (in_c, n, ho, wo)
                    gxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += contrib.transpose(1, 0, 2, 3)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _emit("conv2d", out, inputs, _backward)


# ===== 池化与上采样 =====
def avg_pool2d(x: Tensor, window: Tuple[int, int]) -> Tensor:
    """
    不重叠平均池化（stride = window）

    每个窗口输出其算术平均；要求 h、w 能被窗口整除。
    """
    _require_4d("avg_pool2d", x)
    hp, wp = (int(window[0]), int(window[1]))
    n, c, h, w = x.shape
    if hp < 1 or wp < 1:
        raise ShapeError(f"avg_pool2d: 非法窗口 {window}")
    if h % hp or w % wp:
        raise ShapeError(f"avg_pool2d: 空间尺寸 {h}×{w} 不能被窗口 {hp}×{wp} 整除")

    xd = x.data
    pivot = xd[:, :, 0::hp, 0::wp]
    acc = np.zeros_like(pivot)
    for di in range(hp):
        for dj in range(wp):
            acc += xd[:, :, di::hp, dj::wp] - pivot
    count = hp * wp
    out = pivot + acc / count

    def _backward(g: np.ndarray):
        spread = np.repeat(np.repeat(g, hp, axis=2), wp, axis=3)
        return (spread / count,)

    return _emit("avg_pool2d", out, (x,), _backward)


def upsample_nearest(x: Tensor, factor_h: int, factor_w: int) -> Tensor:
    """最近邻上采样：每个像素复制成 factor_h × factor_w 的块"""
    _require_4d("upsample_nearest", x)
    if int(factor_h) != factor_h or int(factor_w) != factor_w or factor_h < 1 or factor_w < 1:
        raise ShapeError(f"upsample_nearest: 放大倍数必须为正整数，实际 {factor_h}×{factor_w}")
    fh, fw = int(factor_h), int(factor_w)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, fh, axis=2), fw, axis=3)

    def _backward(g: np.ndarray):
        return (g.reshape(n, c, h, fh, w, fw).sum(axis=(3, 5)),)

    return _emit("upsample_nearest", out, (x,), _backward)


# ===== 激活 =====
def activation(x: Tensor, kind: str) -> Tensor:
    """逐元素激活，kind ∈ {relu, sigmoid}"""
    xd = x.data
    if kind == "relu":
        out = np.maximum(xd, 0).astype(xd.dtype, copy=False)

        def _backward(g: np.ndarray):
            return (g * (xd > 0),)
    elif kind == "sigmoid":
        out = expit(xd).astype(xd.dtype, copy=False)

        def _backward(g: np.ndarray):
            return (g * out * (1 - out),)
    else:
        raise ValueError(f"未知激活类型 {kind!r}，可选 relu / sigmoid")
    return _emit(kind, out, (x,), _backward)


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


# ===== 逐元素运算 =====
def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """逐元素 add / mul，两侧形状必须完全一致"""
    if a.shape != b.shape:
        raise ShapeError(f"elementwise {kind}: 形状不一致 {a.shape} vs {b.shape}")
    _same_dtype(f"elementwise {kind}", a, b)
    ad, bd = a.data, b.data
    if kind == "add":
        out = ad + bd

        def _backward(g: np.ndarray):
            return g, g
    elif kind == "mul":
        out = ad * bd

        def _backward(g: np.ndarray):
            return g * bd, g * ad
    else:
        raise ValueError(f"未知逐元素运算 {kind!r}，可选 add / mul")
    return _emit(kind, out, (a, b), _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    """乘以常数标量"""
    out = (x.data * factor).astype(x.dtype, copy=False)

    def _backward(g: np.ndarray):
        return ((g * factor).astype(x.dtype, copy=False),)

    return _emit("scale", out, (x,), _backward)


def reduce_sum(x: Tensor) -> Tensor:
    """全部元素求和，输出 1×1×1×1"""
    out = np.cumsum(x.data.reshape(-1))[-1].reshape(1, 1, 1, 1)

    def _backward(g: np.ndarray):
        return (np.full(x.shape, g.reshape(-1)[0], dtype=x.dtype),)

    return _emit("reduce_sum", out, (x,), _backward)


# ===== 损失 =====
def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_label: Optional[int] = None) -> Tensor:
    """
    逐像素 softmax 交叉熵，对未忽略像素取平均

    :param logits: (n, K, h, w)
    :param labels: (n, h, w) 整数类别图
    :param ignore_label: 忽略的类别编号（可选）
    :return: 1×1×1×1 标量张量
    """
    _require_4d("softmax_cross_entropy", logits)
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"softmax_cross_entropy: 标签形状 {labels.shape} 与 logits 形状 {logits.shape} 不匹配")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError(f"softmax_cross_entropy: 标签必须是整数类型，实际 {labels.dtype}")
    labels = labels.astype(np.int64)

    valid = np.ones(labels.shape, dtype=bool) if ignore_label is None else labels != ignore_label
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        where = tuple(int(v) for v in np.argwhere(bad)[0])
        raise DataError(f"标签越界：像素 (n, i, j) = {where} 的类别 {labels[where]} 不在 [0, {k}) 内")
    count = int(valid.sum())
    if count == 0:
        raise DataError("所有像素都被忽略，无法计算损失")

    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e.sum(axis=1, keepdims=True)
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(shifted, safe[:, None, :, :], axis=1)
    per_pixel = (np.log(s) - picked)[:, 0][valid]
    out = np.asarray(ordered_mean(per_pixel), dtype=z.dtype).reshape(1, 1, 1, 1)

    def _backward(g: np.ndarray):
        grad = e / s
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, safe[:, None, :, :], 1.0, axis=1)
        grad = (grad - onehot) * valid[:, None, :, :]
        grad = grad * (g.reshape(-1)[0] / count)
        return (grad.astype(z.dtype, copy=False),)

    return _emit("softmax_cross_entropy", out, (logits,), _backward)
