#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
文件读写与命令行测试
CSV 往返、数据错误行号、各子命令的输出文件与退出码、日志过滤
"""

import json
import logging
import os
import sys

import numpy as np
import pandas as pd
import pytest
from scipy.stats import norm

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from hilma.cli import REPRODUCE_ALIASES, REPRODUCE_TARGETS, main
from hilma.config import Config
from hilma.models import build_censored_exponential
from hilma.services import hlik_service as hs
from hilma.utils.errors import DataError
from hilma.utils.file_utils import load_dataset_csv, save_dataset_csv
from hilma.utils.logger import PROGRESS_MARKERS, MessageFilter, setup_logging

NORMAL_CSV = """x,y
0.0,1.2
0.1,1.1
0.2,
0.3,1.9
0.4,1.5
0.5,
0.6,2.4
0.7,2.2
0.8,2.9
0.9,
"""


@pytest.fixture(autouse=True)
def log_dir(tmp_path, monkeypatch):
    logs = tmp_path / 'logs'
    monkeypatch.setattr(Config, 'LOG_DIR', str(logs))
    return logs


def write(path, text):
    path.write_text(text, encoding='utf-8')
    return str(path)


def test_csv_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    y = rng.normal(size=12)
    y[[2, 5, 11]] = np.nan
    data = hs.Dataset.from_arrays(rng.uniform(-1, 1, size=(12, 2)), y, covariate_names=('x', 'z'))
    path = save_dataset_csv(data, str(tmp_path / 'data.csv'))
    loaded, frame = load_dataset_csv(path, response='y')
    assert list(frame.columns) == ['x', 'z', 'y']
    np.testing.assert_array_equal(loaded.y_obs, data.y_obs)
    np.testing.assert_array_equal(loaded.covariates, data.covariates)
    np.testing.assert_array_equal(loaded.row_order, data.row_order)


def test_non_numeric_cell_reports_line(tmp_path):
    path = write(tmp_path / 'bad.csv', "x,y\n1,2\n2,abc\n3,4\n")
    with pytest.raises(DataError) as info:
        load_dataset_csv(path)
    assert info.value.line == 3


def test_wrong_field_count_reports_line(tmp_path):
    path = write(tmp_path / 'bad.csv', "x,y\n1,2\n3,4,5\n")
    with pytest.raises(DataError) as info:
        load_dataset_csv(path)
    assert info.value.line == 3


def test_data_errors(tmp_path):
    with pytest.raises(DataError):
        load_dataset_csv(write(tmp_path / 'empty.csv', "x,y\n1,\n2,\n"))
    with pytest.raises(DataError):
        load_dataset_csv(write(tmp_path / 'noresp.csv', "x,z\n1,2\n"))
    with pytest.raises(DataError):
        load_dataset_csv(write(tmp_path / 'nocov.csv', "x,y\n,2\n1,3\n"))
    with pytest.raises(DataError):
        load_dataset_csv(write(tmp_path / 'data.txt', "x,y\n1,2\n"))


def test_impute_normal_regression(tmp_path):
    path = write(tmp_path / 'normal.csv', NORMAL_CSV)
    out = tmp_path / 'out'
    assert main(['impute', path, '--model', 'normal_reg', '--out-dir', str(out)]) == 0

    result = pd.read_csv(out / 'normal_imputed.csv')
    source = pd.read_csv(path)
    observed = source['y'].notna().to_numpy()
    X = np.column_stack([np.ones(len(source)), source['x']])
    beta, *_ = np.linalg.lstsq(X[observed], source['y'][observed], rcond=None)
    sigma2 = np.mean((source['y'][observed] - X[observed] @ beta) ** 2)
    cov = sigma2 * np.linalg.inv(X[observed].T @ X[observed])
    missing = ~observed
    se = np.sqrt(sigma2 + np.einsum('ij,jk,ik->i', X[missing], cov, X[missing]))

    np.testing.assert_array_equal(result['x'], source['x'])
    np.testing.assert_array_equal(result['imputed_flag'], missing.astype(int))
    np.testing.assert_allclose(result['y_imputed'][missing], X[missing] @ beta, atol=1e-7)
    np.testing.assert_allclose(result['y_imputed'][observed], source['y'][observed])
    np.testing.assert_allclose(result['se_prediction'][missing], se, rtol=1e-6)
    assert result['se_prediction'][observed].isna().all()
    half = norm.ppf(0.975) * se
    np.testing.assert_allclose(result['pi_upper'][missing] - result['pi_lower'][missing], 2 * half, rtol=1e-6)

    report = json.loads((out / 'normal_fit.json').read_text(encoding='utf-8'))
    assert report['param_names'] == ['beta0', 'beta1', 'sigma2']
    np.testing.assert_allclose(report['psi_hat'], [beta[0], beta[1], sigma2], atol=1e-7)
    assert report['n_mis'] == 3


def test_impute_censored(tmp_path):
    path = write(tmp_path / 'cens.csv', "y\n1.0\n\n2.5\n0.5\n\n")
    out = tmp_path / 'out'
    assert main(['impute', path, '--model', 'censored_exp', '--c', '3', '--out-dir', str(out)]) == 0
    result = pd.read_csv(out / 'cens_imputed.csv')
    data, _ = load_dataset_csv(path)
    theta = build_censored_exponential(c=3.0).mle_oracle(data)[0]
    np.testing.assert_allclose(result['y_imputed'][result['imputed_flag'] == 1], theta + 3.0, atol=1e-7)


def test_fit_with_em_has_no_standard_errors(tmp_path):
    path = write(tmp_path / 'normal.csv', NORMAL_CSV)
    out = tmp_path / 'out'
    assert main(['fit', path, '--model', 'normal_reg', '--method', 'em', '--out-dir', str(out)]) == 0
    report = json.loads((out / 'normal_fit.json').read_text(encoding='utf-8'))
    assert report['se_psi'] is None
    assert report['method'] == 'em'


def test_impute_rejects_em(tmp_path):
    path = write(tmp_path / 'normal.csv', NORMAL_CSV)
    code = main(['impute', path, '--model', 'normal_reg', '--method', 'em', '--out-dir', str(tmp_path)])
    assert code == 1


def test_bad_csv_exit_code(tmp_path):
    path = write(tmp_path / 'bad.csv', "x,y\n1,2\n2,abc\n")
    assert main(['fit', path, '--model', 'normal_reg', '--out-dir', str(tmp_path)]) == 2


def test_simulate_from_config_file(tmp_path):
    config = write(tmp_path / 'sim.env', "model=censored_exp\nparams=2\nc=3\nn=50\nreps=5\nseed=1\n")
    out = tmp_path / 'out'
    assert main(['simulate', '--config', config, '--threads', '2', '--out-dir', str(out)]) == 0
    summary = json.loads((out / 'censored_exp_n50_summary.json').read_text(encoding='utf-8'))
    assert summary['reps'] == 5
    assert set(summary['estimators']) == {'y_com', 'y_obs', 'y_ML'}
    assert (out / 'censored_exp_n50_boxplot.csv').exists()
    assert (out / 'censored_exp_n50_quartiles.csv').exists()


def test_reproduce_small_run(tmp_path):
    out = tmp_path / 'out'
    assert main(['reproduce', 'example51', '--reps', '3', '--docx', '--out-dir', str(out)]) == 0
    summary = json.loads((out / 'example51_n200_summary.json').read_text(encoding='utf-8'))
    assert set(summary['estimators']) == {'y_com', 'y_obs', 'y_ML', 'em'}
    assert (out / 'example51_report.docx').exists()


def test_reproduce_targets_and_aliases():
    assert set(REPRODUCE_TARGETS) == {'figure2', 'figure3', 'figure4', 'figure5', 'example51'}
    assert set(REPRODUCE_ALIASES.values()) == set(REPRODUCE_TARGETS)
    assert REPRODUCE_TARGETS['figure5']['model'] == 'tobit'
    assert REPRODUCE_TARGETS['figure4']['model'] == 'exp_reg'


def test_reproduce_alias_writes_contract_name(tmp_path):
    by_name = tmp_path / 'by_name'
    by_alias = tmp_path / 'by_alias'
    assert main(['reproduce', 'example51', '--reps', '2', '--seed', '4', '--out-dir', str(by_name)]) == 0
    assert main(['reproduce', 'censored_em', '--reps', '2', '--seed', '4', '--out-dir', str(by_alias)]) == 0
    first = (by_name / 'example51_n200_summary.json').read_text(encoding='utf-8')
    second = (by_alias / 'example51_n200_summary.json').read_text(encoding='utf-8')
    assert first == second
    assert not (by_alias / 'censored_em_n200_summary.json').exists()


def test_unknown_reproduce_target_exits():
    with pytest.raises(SystemExit):
        main(['reproduce', 'figure9'])


def test_check_bartlett_command(tmp_path):
    out = tmp_path / 'out'
    assert main(['check-bartlett', '--model', 'exp_mean', '--params', '2', '--n-draws', '1000',
                 '--out-dir', str(out)]) == 0
    result = json.loads((out / 'bartlett_exp_mean.json').read_text(encoding='utf-8'))
    assert result['n_draws'] == 1000


def test_missing_model_flag_exits():
    with pytest.raises(SystemExit):
        main(['fit', 'data.csv'])


def test_logging_writes_file_and_filters_progress(tmp_path):
    log_dir = tmp_path / 'run_logs'
    setup_logging(log_dir=str(log_dir))
    logger = logging.getLogger('hilma.tests')
    logger.info('[重复 3] 完成')
    logger.info('模拟完成')
    for handler in logging.getLogger().handlers:
        handler.flush()
    files = list(log_dir.glob('hilma_*.log'))
    assert len(files) == 1
    text = files[0].read_text(encoding='utf-8')
    assert '[重复 3]' in text and '模拟完成' in text

    log_filter = MessageFilter(PROGRESS_MARKERS)
    progress = logging.LogRecord('hilma', logging.INFO, __file__, 1, '[重复 3] 完成', None, None)
    plain = logging.LogRecord('hilma', logging.INFO, __file__, 1, '模拟完成', None, None)
    assert not log_filter.filter(progress)
    assert log_filter.filter(plain)


if __name__ == '__main__':
    pytest.main([__file__])
