"""
合成航拍数据集：生成、读写、增强

目录结构：
    manifest.txt            key = value 行（版本、种子、波段数、类别、划分、校验和）
    images/<id>_bN.png      第 N 个波段（8 位灰度）
    labels/<id>.png         类别图（调色板 PNG）
    meta/<id>.txt           样本元信息（id / seed / size / bands）

tree 与 low_vegetation 共用同一套光谱纹理，只能依靠上下文区分：
树木成簇分布在公园里，低矮植被呈细长条带。
"""
from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from config import CLASS_NAMES
from module.tensor import Tensor
from utils.errors import ConfigError, DataError
from utils.logger import make_logger
from utils.palette import label_image

_write_log = make_logger("data")

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.txt"
SPLITS = ("train", "val", "test")

IMPERVIOUS, BUILDING, LOW_VEG, TREE, CAR, CLUTTER = range(6)


@dataclass(frozen=True)
class SampleMeta:
    id: str
    seed: int
    size: int


@dataclass(frozen=True)
class RasterSample:
    """image: Tensor (1, b, H, W) 取值 [0, 1]；labels: (H, W) uint8"""
    image: Tensor
    labels: np.ndarray
    meta: SampleMeta

    @property
    def id(self) -> str:
        return self.meta.id

    @property
    def bands(self) -> int:
        return self.image.shape[1]


def sample_id(index: int) -> str:
    return f"scene_{index:04d}"


def band_checksum(band: np.ndarray) -> str:
    """单个波段 uint8 字节的 sha256"""
    return hashlib.sha256(np.ascontiguousarray(band, dtype=np.uint8).tobytes()).hexdigest()


def _to_bytes(image: Tensor) -> np.ndarray:
    return np.clip(np.rint(image.data[0] * 255.0), 0, 255).astype(np.uint8)


def _from_bytes(bands_u8: np.ndarray) -> Tensor:
    return Tensor.wrap((bands_u8.astype(np.float32) / np.float32(255.0))[None])


# ===== 场景合成 =====
def _smooth(rng: np.random.Generator, shape: Tuple[int, int], sigma: float) -> np.ndarray:
    """零均值、单位方差的平滑噪声场"""
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="reflect")
    std = field_.std()
    return field_ / std if std > 0 else field_


def _rect(rng: np.random.Generator, size: int, lo: float, hi: float) -> Tuple[int, int, int, int]:
    h = max(int(rng.uniform(lo, hi) * size), 2)
    w = max(int(rng.uniform(lo, hi) * size), 2)
    top = int(rng.integers(0, size - h + 1))
    left = int(rng.integers(0, size - w + 1))
    return top, left, h, w


def _paint_layout(rng: np.random.Generator, size: int):
    """
    生成类别布局

    :return: (labels, 路面掩码, 建筑列表, 车辆列表, 杂物列表)
    """
    u = max(size // 64, 1)
    labels = np.full((size, size), IMPERVIOUS, dtype=np.uint8)

    # 低矮植被：细长条带
    for _ in range(int(rng.integers(1, 4))):
        width = int(rng.integers(2 * u, 4 * u + 1))
        length = int(rng.uniform(0.5, 0.9) * size)
        offset = int(rng.integers(0, size - length + 1))
        pos = int(rng.integers(0, size - width + 1))
        if rng.random() < 0.5:
            labels[pos:pos + width, offset:offset + length] = LOW_VEG
        else:
            labels[offset:offset + length, pos:pos + width] = LOW_VEG

    # 公园：矩形区域里成簇的树
    for _ in range(int(rng.integers(1, 3))):
        top, left, h, w = _rect(rng, size, 0.2, 0.35)
        blob = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=2 * u)
        clusters = blob >= np.quantile(blob, 0.4)
        region = labels[top:top + h, left:left + w]
        region[clusters] = TREE

    buildings = []
    for _ in range(int(rng.integers(2, 6))):
        top, left, h, w = _rect(rng, size, 0.08, 0.18)
        labels[top:top + h, left:left + w] = BUILDING
        buildings.append((top, left, h, w))

    # 道路走廊（横 + 竖）
    road = np.zeros((size, size), dtype=bool)
    for axis in (0, 1):
        for _ in range(int(rng.integers(1, 3))):
            width = int(rng.integers(3 * u, 5 * u + 1))
            pos = int(rng.integers(0, size - width + 1))
            if axis == 0:
                road[pos:pos + width, :] = True
            else:
                road[:, pos:pos + width] = True
    labels[road] = IMPERVIOUS

    # 车辆只出现在路面上
    cars = []
    car = 2 * u
    road_pixels = np.argwhere(road)
    wanted = int(rng.integers(1, 5))
    for _ in range(50 * wanted):
        if len(cars) >= wanted:
            break
        y, x = road_pixels[int(rng.integers(0, len(road_pixels)))]
        if y + car <= size and x + car <= size and road[y:y + car, x:x + car].all():
            labels[y:y + car, x:x + car] = CAR
            cars.append((int(y), int(x), car, car))

    clutter = []
    wanted = int(rng.integers(2, 6))
    for _ in range(50 * wanted):
        if len(clutter) >= wanted:
            break
        h = int(rng.integers(u, 3 * u + 1))
        w = int(rng.integers(u, 3 * u + 1))
        top = int(rng.integers(0, size - h + 1))
        left = int(rng.integers(0, size - w + 1))
        if not road[top:top + h, left:left + w].any():
            labels[top:top + h, left:left + w] = CLUTTER
            clutter.append((top, left, h, w))
    return labels, road, buildings, cars, clutter


def _render(rng: np.random.Generator, labels: np.ndarray, road: np.ndarray, buildings, cars, clutter, bands: int) -> np.ndarray:
    """按布局渲染各波段（浮点，[0, 1]）"""
    size = labels.shape[0]
    u = max(size // 64, 1)
    img = np.zeros((bands, size, size), dtype=np.float64)

    imp = 0.5 + 0.05 * _smooth(rng, (size, size), u)
    for c in range(3):
        img[c] = imp
    img[:3, road] = 0.32

    # 两类植被共用同一纹理场
    veg_tex = 0.06 * _smooth(rng, (size, size), 1.5 * u)
    veg = (labels == LOW_VEG) | (labels == TREE)
    for c, base in enumerate((0.22, 0.42, 0.18)):
        img[c][veg] = (base + veg_tex)[veg]

    stripes = 0.04 * np.sin(np.arange(size) * (np.pi / (2 * u)))
    for top, left, h, w in buildings:
        tone = rng.uniform(0.45, 0.7)
        mask = np.zeros_like(veg)
        mask[top:top + h, left:left + w] = True
        mask &= labels == BUILDING
        for c, k in enumerate((1.0, 0.6, 0.5)):
            img[c][mask] = (tone * k + stripes[:, None] * np.ones((1, size)))[mask]

    for group, cls in ((cars, CAR), (clutter, CLUTTER)):
        for top, left, h, w in group:
            color = rng.uniform(0.1, 0.95, size=3)
            region = labels[top:top + h, left:left + w] == cls
            for c in range(3):
                img[c, top:top + h, left:left + w][region] = color[c]

    if bands >= 4:
        # 高程：建筑最高，树冠次之
        elev = 0.05 + 0.01 * _smooth(rng, (size, size), u)
        for top, left, h, w in buildings:
            mask = np.zeros_like(veg)
            mask[top:top + h, left:left + w] = True
            elev[mask & (labels == BUILDING)] = rng.uniform(0.55, 0.9)
        canopy = 0.25 + 0.1 * np.abs(_smooth(rng, (size, size), 2 * u))
        tree = labels == TREE
        elev[tree] = canopy[tree]
        elev[labels == CAR] = 0.1
        img[3] = elev
    if bands >= 5:
        # 类近红外波段：植被明亮
        nir = 0.25 + 0.02 * _smooth(rng, (size, size), u)
        nir[veg] = (0.7 + 0.05 * _smooth(rng, (size, size), 1.5 * u))[veg]
        nir[labels == BUILDING] = 0.35
        img[4] = nir

    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_scene(seed: int, index: int, size: int, bands: int = 4) -> RasterSample:
    """单个场景，随机流由 (seed, index) 决定"""
    rng = np.random.default_rng([seed, index])
    labels, road, buildings, cars, clutter = _paint_layout(rng, size)
    img = _render(rng, labels, road, buildings, cars, clutter, bands)
    u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return RasterSample(_from_bytes(u8), labels, SampleMeta(sample_id(index), seed, size))


def split_ids(ids: Sequence[str]) -> Dict[str, Tuple[str, ...]]:
    """按 id 顺序划分 70/10/20"""
    n = len(ids)
    n_test = int(n * 0.2)
    n_val = int(n * 0.1)
    n_train = n - n_val - n_test
    return {
        "train": tuple(ids[:n_train]),
        "val": tuple(ids[n_train:n_train + n_val]),
        "test": tuple(ids[n_train + n_val:]),
    }


# ===== 清单 =====
@dataclass
class DatasetManifest:
    root: Path
    seed: int
    bands: int
    size: int
    splits: Dict[str, Tuple[str, ...]]
    checksums: Dict[str, str] = field(default_factory=dict)
    class_names: Tuple[str, ...] = CLASS_NAMES
    version: int = MANIFEST_VERSION

    @property
    def ids(self) -> Tuple[str, ...]:
        return tuple(i for split in SPLITS for i in self.splits.get(split, ()))

    def split(self, name: str) -> Tuple[str, ...]:
        if name not in SPLITS:
            raise ConfigError(f"未知划分 {name!r}，可选 {', '.join(SPLITS)}")
        return self.splits.get(name, ())

    def to_text(self) -> str:
        lines = [
            f"version = {self.version}",
            f"seed = {self.seed}",
            f"bands = {self.bands}",
            f"size = {self.size}",
            f"classes = {','.join(self.class_names)}",
        ]
        lines += [f"split.{name} = {','.join(self.splits.get(name, ()))}" for name in SPLITS]
        lines += [f"checksum.{i} = {self.checksums[i]}" for i in self.ids if i in self.checksums]
        return "\n".join(lines) + "\n"

    def write(self):
        (Path(self.root) / MANIFEST_NAME).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, root: Path) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST_NAME
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise DataError(f"无法读取数据集清单 {path}: {e}") from e

        entries: Dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: 缺少 '='：{line!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            entries[key] = value
        try:
            version = int(entries["version"])
            if version != MANIFEST_VERSION:
                raise DataError(f"{path}: 清单版本 {version} 与当前版本 {MANIFEST_VERSION} 不一致")
            manifest = cls(
                root=root,
                seed=int(entries["seed"]),
                bands=int(entries["bands"]),
                size=int(entries["size"]),
                splits={s: tuple(i for i in entries.get(f"split.{s}", "").split(",") if i) for s in SPLITS},
                checksums={k[len("checksum."):]: v for k, v in entries.items() if k.startswith("checksum.")},
                class_names=tuple(entries["classes"].split(",")),
                version=version,
            )
        except KeyError as e:
            raise DataError(f"{path}: 缺少字段 {e.args[0]}") from e
        except ValueError as e:
            raise DataError(f"{path}: 字段取值非法：{e}") from e
        manifest.validate()
        return manifest

    def validate(self):
        ids = self.ids
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"清单中 id 重复：{dup}")
        for i in ids:
            for path in sample_paths(self.root, i, self.bands):
                if not path.exists():
                    raise DataError(f"样本 {i} 缺少文件 {path}")


def sample_paths(root: Path, sid: str, bands: int) -> List[Path]:
    root = Path(root)
    return (
        [root / "images" / f"{sid}_b{n}.png" for n in range(bands)]
        + [root / "labels" / f"{sid}.png", root / "meta" / f"{sid}.txt"]
    )


# ===== 读写 =====
def save_sample(sample: RasterSample, root: Path) -> str:
    """
    写出一个样本

    :return: 波段 0 的校验和
    """
    root = Path(root)
    u8 = _to_bytes(sample.image)
    try:
        for sub in ("images", "labels", "meta"):
            (root / sub).mkdir(parents=True, exist_ok=True)
        for n in range(u8.shape[0]):
            Image.fromarray(u8[n]).save(root / "images" / f"{sample.id}_b{n}.png")
        label_image(sample.labels).save(root / "labels" / f"{sample.id}.png")
        meta = sample.meta
        (root / "meta" / f"{sample.id}.txt").write_text(
            f"id = {meta.id}\nseed = {meta.seed}\nsize = {meta.size}\nbands = {u8.shape[0]}\n",
            encoding="utf-8",
        )
    except OSError as e:
        raise DataError(f"无法写入样本 {sample.id} 到 {root}: {e}") from e
    return band_checksum(u8[0])


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            return np.array(img)
    except FileNotFoundError as e:
        raise DataError(f"文件不存在：{path}") from e
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise DataError(f"文件损坏或无法解析：{path}: {e}") from e


def _read_meta(path: Path) -> SampleMeta:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"无法读取元信息 {path}: {e}") from e
    values = {}
    for line in text.splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    try:
        return SampleMeta(values["id"], int(values["seed"]), int(values["size"]))
    except (KeyError, ValueError) as e:
        raise DataError(f"元信息文件损坏：{path}") from e


def load_sample(manifest: DatasetManifest, sid: str) -> RasterSample:
    if sid not in manifest.ids:
        raise DataError(f"样本 id {sid!r} 不在清单中（共 {len(manifest.ids)} 个样本）")
    root = Path(manifest.root)
    extra = root / "images" / f"{sid}_b{manifest.bands}.png"
    if extra.exists():
        raise DataError(f"样本 {sid} 的波段数多于清单记录的 {manifest.bands}：发现 {extra}")

    bands = [_read_png(root / "images" / f"{sid}_b{n}.png") for n in range(manifest.bands)]
    shapes = {b.shape for b in bands}
    if len(shapes) != 1 or bands[0].ndim != 2 or any(b.dtype != np.uint8 for b in bands):
        raise DataError(f"样本 {sid} 的波段文件尺寸/类型不一致：{sorted(shapes)}")
    u8 = np.stack(bands, axis=0)

    label_path = root / "labels" / f"{sid}.png"
    labels = _read_png(label_path).astype(np.uint8)
    if labels.shape != u8.shape[1:]:
        raise DataError(f"{label_path}: 标签尺寸 {labels.shape} 与影像 {u8.shape[1:]} 不符")
    if labels.max() >= len(manifest.class_names):
        raise DataError(f"{label_path}: 标签取值 {int(labels.max())} 超出类别数 {len(manifest.class_names)}")

    expected = manifest.checksums.get(sid)
    if expected is not None and band_checksum(u8[0]) != expected:
        raise DataError(f"样本 {sid} 波段 0 校验和与清单不符（文件可能被修改）")

    meta = _read_meta(root / "meta" / f"{sid}.txt")
    return RasterSample(_from_bytes(u8), labels, meta)


def load_split(manifest: DatasetManifest, split: str) -> List[RasterSample]:
    return [load_sample(manifest, sid) for sid in manifest.split(split)]


def synth_generate(
    seed: int,
    count: int,
    out_dir: Path,
    size: int = 512,
    bands: int = 4,
    workers: int = 1,
) -> DatasetManifest:
    """生成 count 个场景并写入 out_dir；多线程生成与顺序生成结果完全一致"""
    if count < 1:
        raise ConfigError(f"count 必须 ≥ 1，实际 {count}")
    if size < 16 or size % 16:
        raise ConfigError(f"size 必须是 16 的正整数倍，实际 {size}")
    if bands not in (3, 4, 5):
        raise ConfigError(f"bands 只能是 3 / 4 / 5，实际 {bands}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"无法创建输出目录 {out_dir}: {e}") from e

    _write_log(f"开始生成数据集 seed={seed} count={count} size={size} bands={bands} -> {out_dir}")

    def _one(index: int) -> Tuple[str, str]:
        sample = synth_scene(seed, index, size, bands)
        return sample.id, save_sample(sample, out_dir)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one, range(count)))
    else:
        results = [_one(i) for i in range(count)]

    ids = [sid for sid, _ in results]
    manifest = DatasetManifest(
        root=out_dir, seed=seed, bands=bands, size=size,
        splits=split_ids(ids), checksums=dict(results),
    )
    try:
        manifest.write()
    except OSError as e:
        raise DataError(f"无法写入清单 {out_dir / MANIFEST_NAME}: {e}") from e
    _write_log(f"数据集生成完成：{count} 个样本，划分 " + ", ".join(f"{k}={len(v)}" for k, v in manifest.splits.items()))
    return manifest


# ===== 增强 =====
def flip_sample(sample: RasterSample, horizontal: bool, vertical: bool) -> RasterSample:
    img = sample.image.data
    lab = sample.labels
    if horizontal:
        img, lab = img[:, :, :, ::-1], lab[:, ::-1]
    if vertical:
        img, lab = img[:, :, ::-1, :], lab[::-1, :]
    return RasterSample(Tensor.wrap(np.ascontiguousarray(img)), np.ascontiguousarray(lab), sample.meta)


def crop_sample(sample: RasterSample, top: int, left: int, size: int) -> RasterSample:
    h, w = sample.labels.shape
    if size > h or size > w:
        raise DataError(f"裁剪尺寸 {size} 大于样本 {sample.id} 的尺寸 {h}×{w}")
    if not (0 <= top <= h - size and 0 <= left <= w - size):
        raise DataError(f"裁剪窗口 ({top}, {left}, {size}) 超出样本 {sample.id} 的范围 {h}×{w}")
    img = sample.image.data[:, :, top:top + size, left:left + size]
    lab = sample.labels[top:top + size, left:left + size]
    return RasterSample(Tensor.wrap(np.ascontiguousarray(img)), np.ascontiguousarray(lab), sample.meta)


def augment(sample: RasterSample, crop: int, rng: np.random.Generator) -> RasterSample:
    """随机裁剪 crop×crop，再以各 0.5 的概率独立做水平 / 垂直翻转"""
    h, w = sample.labels.shape
    if crop > h or crop > w:
        raise DataError(f"裁剪尺寸 {crop} 大于样本 {sample.id} 的尺寸 {h}×{w}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    horizontal = bool(rng.random() < 0.5)
    vertical = bool(rng.random() < 0.5)
    return flip_sample(crop_sample(sample, top, left, crop), horizontal, vertical)
