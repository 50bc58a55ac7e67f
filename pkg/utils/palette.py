"""
类别颜色表（标签 PNG 的调色板）
"""
from typing import List, Tuple

import numpy as np
from PIL import Image

from config import CLASS_NAMES

# 顺序与 CLASS_NAMES 一致
CLASS_COLORS: Tuple[Tuple[int, int, int], ...] = (
    (255, 255, 255),  # impervious 白
    (0, 0, 255),      # building 蓝
    (0, 255, 255),    # low_vegetation 青
    (0, 255, 0),      # tree 绿
    (255, 255, 0),    # car 黄
    (255, 0, 0),      # clutter 红
)


def flat_palette() -> List[int]:
    """PIL 需要的 768 项平铺调色板，未用到的条目填 0"""
    flat = [v for rgb in CLASS_COLORS for v in rgb]
    return flat + [0] * (768 - len(flat))


def label_image(labels: np.ndarray) -> Image.Image:
    # L 图像调用 putpalette 后即为 P 模式
    img = Image.fromarray(np.ascontiguousarray(labels, dtype=np.uint8))
    img.putpalette(flat_palette())
    return img


def palette_lines() -> List[str]:
    return [f"{i}\t{name}\t#{r:02x}{g:02x}{b:02x}" for i, (name, (r, g, b)) in enumerate(zip(CLASS_NAMES, CLASS_COLORS))]
