"""
运行配置 RunConfig

优先级（后者覆盖前者）：内置默认值 → config.json → --config 文本文件（key = value）→ 命令行参数
未知的键一律拒绝；合并结果可还原为规范文本，写入日志和检查点。
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

from config import CLASS_NAMES, DEFAULT_CONFIG_FILE
from utils.errors import ConfigError
from utils.logger import make_logger

_write_log = make_logger("cli")


# ===== 取值解析 / 格式化 =====
def _parse_patch(text: str) -> Tuple[int, int]:
    parts = text.lower().replace(" ", "").split("x")
    if len(parts) != 2:
        raise ValueError(f"patch 格式应为 HxW，实际 {text!r}")
    h, w = int(parts[0]), int(parts[1])
    if h < 1 or w < 1:
        raise ValueError(f"patch 尺寸必须为正：{text!r}")
    return h, w


def _parse_int_list(text: str) -> Tuple[int, ...]:
    values = tuple(int(p) for p in text.replace(" ", "").split(",") if p)
    if not values or any(v < 1 for v in values):
        raise ValueError(f"宽度列表必须为正整数：{text!r}")
    return values


def _parse_optional_int(text: str) -> Optional[int]:
    if text.strip().lower() in ("", "none"):
        return None
    return int(text)


def _parse_names(text: str) -> Tuple[str, ...]:
    names = tuple(p for p in text.replace(" ", "").split(",") if p and p.lower() != "none")
    unknown = [n for n in names if n not in CLASS_NAMES]
    if unknown:
        raise ValueError(f"未知类别 {unknown}，可选 {', '.join(CLASS_NAMES)}")
    return names


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"布尔值只能是 true / false，实际 {text!r}")


def _parse_dtype(text: str) -> str:
    if text not in ("float32", "float64"):
        raise ValueError(f"dtype 只能是 float32 / float64，实际 {text!r}")
    return text


_PATCH_KEYS = ("pam_high_patch", "pam_low_patch", "aem_patch")


def _format(key: str, value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if key in _PATCH_KEYS:
        return f"{value[0]}x{value[1]}"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


# key: (解析函数, 默认值, 所属分节)
_SPEC: Dict[str, Tuple[Callable[[str], Any], Any, str]] = {
    # 网络结构
    "in_channels": (int, 4, "arch"),
    "num_classes": (int, 6, "arch"),
    "widths": (_parse_int_list, (32, 64, 96, 128), "arch"),
    "head_width": (int, 64, "arch"),
    "pam_high_patch": (_parse_patch, (4, 4), "arch"),
    "pam_low_patch": (_parse_patch, (8, 8), "arch"),
    "aem_patch": (_parse_patch, (2, 2), "arch"),
    "reduction": (int, 16, "arch"),
    "min_reduced": (int, 4, "arch"),
    "variant": (str, "lanet", "arch"),
    # 训练
    "aux_weight": (float, 0.4, "train"),
    "lr": (float, 0.01, "train"),
    "momentum": (float, 0.9, "train"),
    "weight_decay": (float, 1e-4, "train"),
    "lr_decay_steps": (int, 0, "train"),
    "lr_decay_gamma": (float, 0.1, "train"),
    "steps": (int, 2000, "train"),
    "batch": (int, 2, "train"),
    "crop": (int, 512, "train"),
    "seed": (int, 0, "train"),
    "dtype": (_parse_dtype, "float32", "train"),
    "log_every": (int, 10, "train"),
    "augment": (_parse_bool, True, "train"),
    # 推理
    "tile": (int, 512, "predict"),
    "overlap": (int, 64, "predict"),
    "workers": (int, 1, "predict"),
    # 评估
    "ignore_label": (_parse_optional_int, None, "eval"),
    "f1_exclude": (_parse_names, (), "eval"),
}

DEFAULTS: Dict[str, Any] = {key: spec[1] for key, spec in _SPEC.items()}
SECTIONS = ("arch", "train", "predict", "eval")


def _parse_value(key: str, raw: Any, origin: str) -> Any:
    if key not in _SPEC:
        raise ConfigError(f"{origin}: 未知配置项 {key!r}，可用配置项：{', '.join(sorted(_SPEC))}")
    parser = _SPEC[key][0]
    text = _json_to_text(key, raw) if not isinstance(raw, str) else raw.strip()
    try:
        return parser(text)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{origin}: 配置项 {key} 的取值 {raw!r} 非法：{e}") from e


def _json_to_text(key: str, value: Any) -> str:
    if isinstance(value, (list, tuple)):
        if key in _PATCH_KEYS:
            return "x".join(str(v) for v in value)
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


class RunConfig(Mapping[str, Any]):
    """完整解析后的运行配置（只读映射）"""

    def __init__(self, values: Mapping[str, Any]):
        unknown = set(values) - set(_SPEC)
        if unknown:
            raise ConfigError(f"未知配置项：{', '.join(sorted(unknown))}")
        merged = dict(DEFAULTS)
        merged.update(values)
        self._values = merged

    # ---- Mapping 接口 ----
    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    # ---- 构造 ----
    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({})

    @classmethod
    def from_json_file(cls, path: Path = DEFAULT_CONFIG_FILE, base: Optional["RunConfig"] = None) -> "RunConfig":
        """读取 config.json（按分节组织）；文件不存在时使用内置默认值"""
        base = base or cls.defaults()
        path = Path(path)
        if not path.exists():
            _write_log(f"配置文件 {path} 不存在，使用内置默认值", 'warning')
            return base
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"无法解析配置文件 {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"配置文件 {path} 顶层必须是对象")
        values = dict(base)
        for section, entries in data.items():
            if section not in SECTIONS:
                raise ConfigError(f"{path}: 未知分节 {section!r}，可选 {', '.join(SECTIONS)}")
            if not isinstance(entries, dict):
                raise ConfigError(f"{path}: 分节 {section} 必须是对象")
            for key, raw in entries.items():
                value = _parse_value(key, raw, f"{path}[{section}]")
                if _SPEC[key][2] != section:
                    raise ConfigError(f"{path}: 配置项 {key} 应放在分节 {_SPEC[key][2]!r}，而不是 {section!r}")
                values[key] = value
        return cls(values)

    @classmethod
    def parse_text(cls, text: str, origin: str = "<text>") -> Dict[str, Any]:
        """解析 key = value 文本，返回仅包含文本中出现的键"""
        values: Dict[str, Any] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{origin}:{lineno}: 缺少 '='：{line!r}")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            values[key] = _parse_value(key, raw, f"{origin}:{lineno}")
        return values

    @classmethod
    def from_text(cls, text: str, origin: str = "<text>") -> "RunConfig":
        return cls(cls.parse_text(text, origin))

    @classmethod
    def load(
        cls,
        config_file: Optional[Path] = None,
        overrides: Optional[Mapping[str, Any]] = None,
        json_file: Path = DEFAULT_CONFIG_FILE,
    ) -> "RunConfig":
        """按优先级合并：默认值 → config.json → 配置文本文件 → 覆盖项（None 表示未指定）"""
        rc = cls.from_json_file(json_file)
        values = dict(rc)
        if config_file is not None:
            path = Path(config_file)
            try:
                text = path.read_text(encoding="utf-8")
            except OSError as e:
                raise ConfigError(f"无法读取配置文件 {path}: {e}") from e
            values.update(cls.parse_text(text, str(path)))
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            values[key] = _parse_value(key, value, "命令行") if isinstance(value, str) else _check_known(key, value)
        return cls(values)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        values = dict(self)
        values.update({k: _check_known(k, v) for k, v in overrides.items()})
        return RunConfig(values)

    # ---- 输出 ----
    def to_text(self) -> str:
        """规范文本：按键名排序的 key = value 行"""
        return "".join(f"{key} = {_format(key, self._values[key])}\n" for key in sorted(self._values))

    def log(self, command: str):
        """把完整配置原样写入 cli 日志"""
        _write_log(f"[{command}] 生效配置:\n{self.to_text()}")


def _check_known(key: str, value: Any) -> Any:
    if key not in _SPEC:
        raise ConfigError(f"未知配置项 {key!r}")
    return value
