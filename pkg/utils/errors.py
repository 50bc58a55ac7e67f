"""
统一异常定义：CLI 根据异常类型映射退出码
"""
from typing import Optional, Tuple


class LANetError(Exception):
    """所有可预期错误的基类"""


class ShapeError(LANetError, ValueError):
    """形状 / dtype / 整除关系不满足"""


class ConfigError(LANetError, ValueError):
    """配置键未知、取值非法、变体名未知（退出码 1）"""


class DataError(LANetError):
    """数据文件缺失或损坏、样本 id 未知、波段数不符、标签越界（退出码 2）"""


class CheckpointError(DataError):
    """检查点文件格式错误"""


class CheckpointVersionError(CheckpointError):
    """检查点版本与当前程序不一致，拒绝按新格式解释旧数据"""

    def __init__(self, found: int, expected: int):
        super().__init__(f"检查点版本 {found} 与当前版本 {expected} 不一致")
        self.found = found
        self.expected = expected


class NumericError(LANetError, ArithmeticError):
    """出现 NaN/Inf 等数值故障（退出码 3）"""


class TrainingDivergedError(NumericError):
    """训练损失变为非有限值"""

    def __init__(self, step: int, loss: float):
        super().__init__(f"训练在第 {step} 步发散：loss = {loss}")
        self.step = step
        self.loss = loss


class GradCheckError(NumericError):
    """梯度检验时遇到非有限值"""

    def __init__(self, input_name: str, coord: Optional[Tuple[int, ...]], detail: str):
        where = f"{input_name}{list(coord)}" if coord is not None else input_name
        super().__init__(f"梯度检验失败于 {where}: {detail}")
        self.input_name = input_name
        self.coord = coord
