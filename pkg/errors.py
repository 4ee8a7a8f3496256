"""
异常定义模块 - 所有模块共用的错误类型及命令行退出码
"""


class FactorBcError(Exception):
    """工具包异常基类"""

    exit_code = 1


class ValidationError(FactorBcError):
    """输入或配置校验失败"""

    exit_code = 2

    def __init__(self, message, field=None):
        """
        Args:
            message: 错误描述
            field: 出错的字段名（可选）
        """
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class NumericalError(FactorBcError):
    """数值计算失败"""

    exit_code = 3


class RankError(NumericalError):
    """有效秩不足"""


class SingularityError(NumericalError):
    """矩阵奇异"""

    def __init__(self, message, pivot=None):
        self.pivot = pivot
        if pivot is not None:
            message = f"{message} (主元列: {pivot})"
        super().__init__(message)


class ConditioningError(NumericalError):
    """条件数过大"""

    def __init__(self, message, cond=None):
        self.cond = cond
        if cond is not None:
            message = f"{message} (条件数: {cond:.3e})"
        super().__init__(message)


class DegeneracyError(NumericalError):
    """特征值退化，旋转矩阵不唯一"""


class ReplicationDropError(FactorBcError):
    """蒙特卡洛重复中丢弃的比例超过上限"""

    exit_code = 4

    def __init__(self, message, dropped=0, total=0):
        self.dropped = dropped
        self.total = total
        super().__init__(message)
