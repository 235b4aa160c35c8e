import os
from dotenv import load_dotenv

load_dotenv()


def _int_env(name, default):
    value = os.getenv(name)
    if value is None or value.strip() == '':
        return default
    return int(value)


class Config:
    # Base directory is the parent of the 'hilma' directory
    BASE_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))

    # 并行线程数上限（蒙特卡洛重复、多起点）
    THREADS = max(1, _int_env('HILMA_THREADS', os.cpu_count() or 1))

    LOG_DIR = os.getenv('HILMA_LOG_DIR', os.path.join(os.getcwd(), 'logs'))
    LOG_LEVEL = os.getenv('HILMA_LOG_LEVEL', 'INFO').upper()

    OUTPUT_FOLDER = os.getenv('HILMA_OUT_DIR', os.path.join(BASE_DIR, 'output'))

    # reproduce 缺省重复次数
    REPRODUCE_REPS = _int_env('HILMA_REPRODUCE_REPS', 2000)

    ALLOWED_DATA_EXTENSIONS = {'csv'}

    # Ensure directories exist
    @staticmethod
    def init_app(out_dir=None):
        os.makedirs(out_dir or Config.OUTPUT_FOLDER, exist_ok=True)
        os.makedirs(Config.LOG_DIR, exist_ok=True)
