from hilma.config import Config
from hilma.utils.logger import setup_logging

__version__ = '0.1.0'


def create_app(out_dir=None, log_dir=None, verbose=False):
    """配置日志并创建输出目录，CLI 在执行任何任务前调用"""
    setup_logging(log_dir=log_dir, verbose=verbose)
    Config.init_app(out_dir)
    return Config
