"""
检查点读写（版本化二进制格式，全部小端）

    magic        8 字节 b"LANETCKP"
    version      u32
    config       u32 长度 + UTF-8 规范配置文本（key = value）
    count        u32 记录数
    记录 × count:
        name     u16 长度 + UTF-8
        dtype    1 字节：b"f" float32 / b"d" float64
        ndim     u8，随后 ndim 个 u32 维度
        payload  小端标量数据
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Tuple

import numpy as np

from module.network import ArchConfig, ModelParams
from module.tensor import Tensor
from utils.errors import CheckpointError, CheckpointVersionError, ConfigError, ShapeError
from utils.logger import make_logger
from utils.run_config import RunConfig

_write_log = make_logger("train", prefix="checkpoint")

MAGIC = b"LANETCKP"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): b"f", np.dtype(np.float64): b"d"}
_TAG_DTYPES = {tag: dtype.newbyteorder("<") for dtype, tag in _DTYPE_TAGS.items()}


def _embedded_config(params: ModelParams, rc: RunConfig) -> RunConfig:
    rc = rc.with_overrides({"variant": params.variant})
    if ArchConfig.from_run_config(rc) != params.arch:
        raise ConfigError("配置中的网络结构与待保存参数不一致")
    return rc


def save_checkpoint(path: Path, params: ModelParams, rc: RunConfig) -> str:
    """
    保存参数与生效配置

    :return: 文件 sha256 摘要
    """
    text = _embedded_config(params, rc).to_text().encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text,
              struct.pack("<I", len(params.tensors))]
    for name, tensor in params.tensors.items():
        raw = name.encode("utf-8")
        chunks += [
            struct.pack("<H", len(raw)), raw,
            _DTYPE_TAGS[tensor.dtype],
            struct.pack("<B", tensor.ndim),
            struct.pack(f"<{tensor.ndim}I", *tensor.shape),
            tensor.data.astype(tensor.dtype.newbyteorder("<"), copy=False).tobytes(order="C"),
        ]
    blob = b"".join(chunks)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as e:
        raise CheckpointError(f"无法写入检查点 {path}: {e}") from e
    digest = hashlib.sha256(blob).hexdigest()
    _write_log(f"检查点已保存 {path} variant={params.variant} 记录数={len(params.tensors)} sha256={digest}")
    return digest


class _Reader:
    def __init__(self, stream: BinaryIO, path: Path):
        self.stream = stream
        self.path = path

    def take(self, n: int) -> bytes:
        data = self.stream.read(n)
        if len(data) != n:
            raise CheckpointError(f"检查点 {self.path} 被截断（需要 {n} 字节，只剩 {len(data)}）")
        return data

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: Path) -> Tuple[ModelParams, RunConfig]:
    """读取检查点；版本不符时抛 CheckpointVersionError，绝不按新格式解释旧数据"""
    path = Path(path)
    try:
        stream = open(path, "rb")
    except OSError as e:
        raise CheckpointError(f"无法打开检查点 {path}: {e}") from e
    with stream:
        reader = _Reader(stream, path)
        magic = reader.take(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path} 不是检查点文件（magic = {magic!r}）")
        (version,) = reader.unpack("<I")
        if version != VERSION:
            raise CheckpointVersionError(version, VERSION)
        (text_len,) = reader.unpack("<I")
        try:
            text = reader.take(text_len).decode("utf-8")
            rc = RunConfig.from_text(text, origin=f"{path}:config")
            arch = ArchConfig.from_run_config(rc)
        except (UnicodeDecodeError, ConfigError) as e:
            raise CheckpointError(f"检查点 {path} 的配置段损坏：{e}") from e

        (count,) = reader.unpack("<I")
        tensors: Dict[str, Tensor] = {}
        for _ in range(count):
            (name_len,) = reader.unpack("<H")
            name = reader.take(name_len).decode("utf-8", errors="replace")
            tag = reader.take(1)
            if tag not in _TAG_DTYPES:
                raise CheckpointError(f"检查点 {path} 中参数 {name} 的 dtype 标记 {tag!r} 未知")
            dtype = _TAG_DTYPES[tag]
            (ndim,) = reader.unpack("<B")
            shape = reader.unpack(f"<{ndim}I")
            size = int(np.prod(shape)) if ndim else 1
            payload = reader.take(size * dtype.itemsize)
            arr = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
            if name in tensors:
                raise CheckpointError(f"检查点 {path} 中参数名重复：{name}")
            tensors[name] = Tensor.wrap(arr, requires_grad=True, name=name)
        if stream.read(1):
            raise CheckpointError(f"检查点 {path} 末尾有多余数据")

    try:
        params = ModelParams(rc["variant"], arch, tensors)
    except (ShapeError, ConfigError) as e:
        raise CheckpointError(f"检查点 {path} 的参数与变体不符：{e}") from e
    _write_log(f"已加载检查点 {path} variant={params.variant}")
    return params, rc


def file_digest(path: Path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as e:
        raise CheckpointError(f"无法读取 {path}: {e}") from e
