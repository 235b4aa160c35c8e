"""
hilma 异常体系

库函数统一抛出 HilmaError 的子类，由 CLI 在最外层映射为退出码。
"""


class HilmaError(Exception):
    """所有 hilma 异常的基类"""

    exit_code = 1


class DomainError(HilmaError):
    """参数或缺失值超出定义域/支撑集"""

    exit_code = 2

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class DataError(HilmaError):
    """数据格式错误或与模型不一致"""

    exit_code = 2

    def __init__(self, message, line=None):
        if line is not None:
            message = f"第 {line} 行: {message}"
        super().__init__(message)
        self.line = line


class ConvergenceError(HilmaError):
    """迭代未收敛，保留最后一次迭代值与梯度范数"""

    exit_code = 3

    def __init__(self, message, last_iterate=None, grad_norm=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.grad_norm = grad_norm


class BoundaryError(ConvergenceError):
    """迭代发散到参数空间边界"""


class RankError(HilmaError):
    """信息矩阵奇异，direction 为近似平坦方向"""

    def __init__(self, message, direction=None):
        super().__init__(message)
        self.direction = direction


class CurvatureError(HilmaError):
    """众数处曲率矩阵非正定"""


class UnsupportedError(HilmaError):
    """模型未提供所需功能"""


class UsageError(HilmaError):
    """调用方式错误（尺度不匹配、配置非法等）"""


class SimulationError(HilmaError):
    """失败的重复次数超过上限"""

    exit_code = 3

    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = failures or []
