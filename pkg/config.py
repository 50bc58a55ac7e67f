"""
项目常量配置
"""
import os
from pathlib import Path

# 项目根目录
PROJECT_DIR = Path(__file__).parent.absolute()

# 默认运行配置（JSON，按 arch / train / predict / eval 分节）
DEFAULT_CONFIG_FILE = PROJECT_DIR / "config.json"


def get_log_dir() -> Path:
    """日志根目录，可用环境变量 LANET_LOG_DIR 重定向（测试时指向临时目录）"""
    override = os.environ.get("LANET_LOG_DIR")
    if override:
        return Path(override)
    return PROJECT_DIR / "logs"


# 类别表（顺序即类别编号，与 ISPRS 标注一致）
CLASS_NAMES = (
    "impervious",
    "building",
    "low_vegetation",
    "tree",
    "car",
    "clutter",
)

# 进程退出码
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
