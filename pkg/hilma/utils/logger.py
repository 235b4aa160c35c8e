import glob
import logging
import logging.handlers
import os
import sys
from datetime import datetime

from hilma.config import Config

LOG_PREFIX = 'hilma_'
LOG_FORMAT = '[%(asctime)s] %(levelname)s %(module)s:%(lineno)d - %(message)s'

# 逐次重复的进度行只写文件
PROGRESS_MARKERS = ['[重复 ', '[外层 ', '[内层 ']


class MessageFilter(logging.Filter):
    def __init__(self, excluded_markers):
        super().__init__()
        self.excluded_markers = excluded_markers

    def filter(self, record):
        msg = record.getMessage()
        for marker in self.excluded_markers:
            if marker in msg:
                return False
        return True


def cleanup_old_logs(log_dir, current_log_file, limit=10):
    """
    清理旧日志文件，保留最新的limit个文件。
    """
    try:
        files = sorted(glob.glob(os.path.join(log_dir, f"{LOG_PREFIX}*.log")))
        # 当前文件尚未创建时为它留一个名额
        target_count = limit if current_log_file in files else limit - 1
        for old in files[:max(0, len(files) - target_count)]:
            if old != current_log_file:
                try:
                    os.remove(old)
                except OSError as e:
                    print(f"Error removing file {old}: {e}")
    except Exception as e:
        print(f"Error during log cleanup: {e}")


def _log_filename(log_dir, now):
    # 5 秒内重复启动（如 start.sh 连续调用）复用同一文件
    files = sorted(glob.glob(os.path.join(log_dir, f"{LOG_PREFIX}*.log")))
    if files:
        basename = os.path.basename(files[-1])
        try:
            file_time = datetime.strptime(basename[len(LOG_PREFIX):-4], "%Y-%m-%d_%H-%M-%S")
            if 0 <= (now - file_time).total_seconds() < 5:
                return basename
        except ValueError:
            pass
    return f"{LOG_PREFIX}{now.strftime('%Y-%m-%d_%H-%M-%S')}.log"


def setup_logging(log_dir=None, level=None, verbose=False):
    """
    配置根日志记录器：轮转文件 + 控制台

    Args:
        log_dir: 日志目录，缺省为 Config.LOG_DIR
        level: 日志级别名，缺省为 Config.LOG_LEVEL
        verbose: 为 True 时控制台也输出逐次重复的进度行
    """
    log_dir = log_dir or Config.LOG_DIR
    level = getattr(logging, (level or Config.LOG_LEVEL).upper(), logging.INFO)
    formatter = logging.Formatter(LOG_FORMAT)

    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    if root_logger.hasHandlers():
        root_logger.handlers.clear()

    try:
        os.makedirs(log_dir, exist_ok=True)
        log_filepath = os.path.join(log_dir, _log_filename(log_dir, datetime.now()))
        cleanup_old_logs(log_dir, log_filepath, limit=10)
        handler = logging.handlers.RotatingFileHandler(
            log_filepath,
            maxBytes=10 * 1024 * 1024,  # 10MB
            backupCount=5,
            encoding='utf-8'
        )
        handler.setFormatter(formatter)
        root_logger.addHandler(handler)
    except OSError as e:
        # 无法写日志目录时只保留控制台输出
        print(f"Failed to create log directory: {e}")

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(formatter)
    if not verbose:
        console_handler.addFilter(MessageFilter(PROGRESS_MARKERS))
    root_logger.addHandler(console_handler)

    return logging.getLogger('hilma')
