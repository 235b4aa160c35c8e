import logging
import os
import re

import numpy as np
import pandas as pd

from hilma.config import Config
from hilma.services.hlik_service import Dataset
from hilma.utils.errors import DataError

logger = logging.getLogger(__name__)


def allowed_data_file(filename):
    return '.' in filename and filename.rsplit('.', 1)[1].lower() in Config.ALLOWED_DATA_EXTENSIONS


def read_csv_frame(path):
    """
    读取 CSV 为字符串表，空字段即缺失

    保留原始文本，输出时原样写回原有列。空行按一行缺失处理（单列文件的缺失值即空行）。
    """
    if not allowed_data_file(os.path.basename(path)):
        raise DataError(f"不支持的数据文件类型: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[''],
                            skip_blank_lines=False, encoding='utf-8')
    except pd.errors.ParserError as e:
        # pandas 报告的是文件行号（表头为第 1 行）
        match = re.search(r'line (\d+)', str(e))
        raise DataError(f"CSV 格式错误: {e}", line=int(match.group(1)) if match else None) from e
    except pd.errors.EmptyDataError as e:
        raise DataError(f"CSV 文件为空: {path}") from e
    return frame


def _numeric_column(frame, name):
    col = frame[name]
    coerced = pd.to_numeric(col, errors='coerce')
    bad = col.notna() & coerced.isna()
    if bad.any():
        idx = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"列 {name} 的值 {col.iloc[idx]!r} 不是数值", line=idx + 2)
    # Python float 解析保证往返精确
    return np.array([np.nan if pd.isna(v) else float(v) for v in col], dtype=float)


def dataset_from_frame(frame, response='y', covariates=None) -> Dataset:
    if response not in frame.columns:
        raise DataError(f"CSV 缺少响应列 {response}，现有列: {list(frame.columns)}")
    if covariates is None:
        covariates = [c for c in frame.columns if c != response]
    missing = [c for c in covariates if c not in frame.columns]
    if missing:
        raise DataError(f"CSV 缺少协变量列: {missing}")

    y = _numeric_column(frame, response)
    x = np.column_stack([_numeric_column(frame, c) for c in covariates]) if covariates \
        else np.zeros((len(frame), 0))
    if x.size:
        bad_rows = np.flatnonzero(np.isnan(x).any(axis=1))
        if bad_rows.size:
            raise DataError("协变量不能缺失", line=int(bad_rows[0]) + 2)
    if len(frame) == 0:
        raise DataError("CSV 没有数据行")
    if np.all(np.isnan(y)):
        raise DataError("响应全部缺失，无法估计")
    return Dataset.from_arrays(x, y, covariate_names=tuple(covariates), response_name=response)


def load_dataset_csv(path, response='y', covariates=None):
    """
    读取 CSV 数据集

    Returns:
        (Dataset, 原始字符串表)
    """
    frame = read_csv_frame(path)
    data = dataset_from_frame(frame, response, covariates)
    logger.info(f"读取数据 {path}: n={data.n} n_obs={data.n_obs} n_mis={data.n_mis}")
    return data, frame


def dataset_to_frame(data: Dataset) -> pd.DataFrame:
    """按原始行序还原为数值表"""
    n = data.n
    pos = np.empty(n, dtype=int)
    pos[data.row_order] = np.arange(n)
    columns = {name: data.covariates[pos, j] for j, name in enumerate(data.covariate_names)}
    columns[data.response_name] = data.response[pos]
    return pd.DataFrame(columns)


def save_dataset_csv(data: Dataset, path):
    """缺失写为空字段，浮点按 repr 写出以保证往返精确"""
    dataset_to_frame(data).to_csv(path, index=False, na_rep='', encoding='utf-8')
    return path
