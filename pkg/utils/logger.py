# utils/logger.py
import os
from datetime import datetime
from typing import Callable, Optional

from config import get_log_dir

# 全局默认配置
_DEFAULT_SUBDIR = "app"
_DEFAULT_PREFIX = "app"

def write_log(
    message: str,
    log_dir: Optional[str] = None,
    prefix: Optional[str] = None
):
    """
    写入日志到按日期命名的日志文件

    :param message: 日志内容
    :param log_dir: 日志目录（可选），默认为 <LOG_DIR>/app
    :param prefix: 日志文件前缀（可选），默认为 'app'
    """
    use_log_dir = log_dir or os.path.join(get_log_dir(), _DEFAULT_SUBDIR)
    use_prefix = prefix or _DEFAULT_PREFIX

    # 确保日志目录存在
    try:
        os.makedirs(use_log_dir, exist_ok=True)
    except OSError as e:
        print(f"[Logger Error] 无法创建日志目录 {use_log_dir}: {e}")
        return

    # 生成日志文件路径：{prefix}_YYYYMMDD.log
    log_file = os.path.join(use_log_dir, f"{use_prefix}_{datetime.now().strftime('%Y%m%d')}.log")

    try:
        with open(log_file, "a", encoding="utf-8") as f:
            timestamp = datetime.now().strftime("%H:%M:%S")
            f.write(f"[{timestamp}] {message}\n")
    except Exception as e:
        # 日志失败不能影响训练/推理流程
        print(f"[Logger Error] 无法写入日志: {str(e)}")


def make_logger(subdir: str, prefix: Optional[str] = None) -> Callable[..., None]:
    """
    生成子系统专用的 _write_log(message, level='info')

    :param subdir: LOG_DIR 下的子目录，例如 'train'
    :param prefix: 日志文件前缀，默认与子目录同名
    """
    use_prefix = prefix or subdir

    def _write_log(message: str, level: str = 'info'):
        full_message = f"{level.upper():<8} {message}"
        # 每次调用时解析目录，环境变量变化（测试）立即生效
        write_log(full_message, log_dir=os.path.join(get_log_dir(), subdir), prefix=use_prefix)

    return _write_log
