"""
报告输出：拟合 JSON、插补 CSV、箱线图数据与 Word 汇总
"""
import json
import logging
import os

import numpy as np
import pandas as pd
from docx import Document
from docx.enum.text import WD_ALIGN_PARAGRAPH
from docx.shared import Pt

from hilma.services import hlik_service as hs
from hilma.services.inference_service import var_fixed, var_random
from hilma.services.simulation_service import SummaryTable

logger = logging.getLogger(__name__)

IMPUTED_COLUMNS = ('imputed_flag', 'y_imputed', 'se_prediction', 'pi_lower', 'pi_upper')


def save_json(obj, path):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(obj, f, indent=2, ensure_ascii=False)
    return path


def _floats(values):
    return [float(v) for v in np.asarray(values, dtype=float).reshape(-1)]


def fit_report(model, fit, method='hlik'):
    """
    h-似然或 Laplace 拟合的 JSON 报告

    loglik 为 ψ̂ 处的闭式边际对数似然；模型没有闭式时取极大化目标的值。
    """
    data = fit.data
    se = None
    if fit.blocks is not None:
        se = _floats(np.sqrt(np.diag(var_fixed(fit.blocks))))
    if model.closed_marginal_loglik is not None:
        loglik = float(model.closed_marginal_loglik(fit.psi_hat, data))
    else:
        loglik = float(fit.h_value)
    return {
        'model': model.tag,
        'method': method,
        'param_names': list(model.param_names),
        'psi_hat': _floats(fit.psi_hat),
        'se_psi': se,
        'loglik': loglik,
        'h_value': float(fit.h_value),
        'converged': bool(fit.converged),
        'iterations': int(fit.iterations),
        'grad_norm': float(fit.grad_norm),
        'scale': fit.scale_kind.value,
        'n_obs': data.n_obs,
        'n_mis': data.n_mis,
    }


def em_report(model, em, data):
    """EM 只给点估计，se_psi 为 null"""
    loglik = em.loglik_trace[-1] if em.loglik_trace else np.nan
    return {
        'model': model.tag,
        'method': 'em',
        'param_names': list(model.param_names),
        'psi_hat': _floats(em.psi_hat),
        'se_psi': None,
        'loglik': None if np.isnan(loglik) else float(loglik),
        'converged': True,
        'iterations': int(em.iterations),
        'scale': 'em',
        'n_obs': data.n_obs,
        'n_mis': data.n_mis,
    }


def imputed_frame(frame: pd.DataFrame, data: hs.Dataset, fit, level=0.95) -> pd.DataFrame:
    """
    在原始表后追加插补列

    观测行 imputed_flag=0、y_imputed=y，标准误与区间留空；行序与输入文件一致。
    """
    n = data.n
    flag = np.zeros(n, dtype=int)
    y_imp = np.full(n, np.nan)
    se = np.full(n, np.nan)
    lower = np.full(n, np.nan)
    upper = np.full(n, np.nan)

    obs_rows = data.row_order[:data.n_obs]
    mis_rows = data.row_order[data.n_obs:]
    y_imp[obs_rows] = data.y_obs
    if data.n_mis:
        report = var_random(fit.blocks, var_fixed(fit.blocks), level)
        flag[mis_rows] = 1
        y_imp[mis_rows] = fit.y_mis_hat
        se[mis_rows] = report.se_prediction
        lower[mis_rows] = report.lower
        upper[mis_rows] = report.upper

    out = frame.copy()
    out['imputed_flag'] = flag
    out['y_imputed'] = y_imp
    out['se_prediction'] = se
    out['pi_lower'] = lower
    out['pi_upper'] = upper
    return out


def save_imputed_csv(frame, data, fit, path, level=0.95):
    imputed_frame(frame, data, fit, level).to_csv(path, index=False, na_rep='', encoding='utf-8')
    logger.info(f"插补结果已保存: {path}")
    return path


def boxplot_frames(table: SummaryTable):
    """长格式重复值表与四分位数表"""
    long_rows = []
    quartile_rows = []
    for name, row in table.rows.items():
        long_rows.extend({'estimator': name, 'rep': rep, 'value': v} for rep, v in enumerate(row.values))
        q1, q2, q3 = row.quartiles
        quartile_rows.append({'estimator': name, 'q1': q1, 'median': q2, 'q3': q3,
                              'min': min(row.values), 'max': max(row.values)})
    return (pd.DataFrame(long_rows, columns=['estimator', 'rep', 'value']),
            pd.DataFrame(quartile_rows, columns=['estimator', 'q1', 'median', 'q3', 'min', 'max']))


def export_boxplot_data(table: SummaryTable, path):
    """
    导出箱线图数据

    Args:
        table: SummaryTable
        path: 输出前缀，写出 <path>_boxplot.csv 与 <path>_quartiles.csv

    Returns:
        (boxplot 路径, quartiles 路径)
    """
    long_df, quartile_df = boxplot_frames(table)
    box_path = f"{path}_boxplot.csv"
    quart_path = f"{path}_quartiles.csv"
    long_df.to_csv(box_path, index=False, encoding='utf-8')
    quartile_df.to_csv(quart_path, index=False, encoding='utf-8')
    logger.info(f"箱线图数据已导出: {box_path}, {quart_path}")
    return box_path, quart_path


def save_summary(table: SummaryTable, path):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(table.to_json())
    return path


class ReportGenerator:
    def generate_word_report(self, tables, output_path, title='ML 插补模拟报告'):
        """
        生成Word格式的模拟汇总报告

        Args:
            tables: {面板名: SummaryTable}
            output_path: 输出 .docx 路径
        """
        doc = Document()

        heading = doc.add_heading(title, 0)
        heading.alignment = WD_ALIGN_PARAGRAPH.CENTER

        for idx, (panel, table) in enumerate(tables.items(), start=1):
            doc.add_heading(f"{idx}. {panel}", level=1)
            info = doc.add_paragraph()
            run = info.add_run(f"模型 {table.model_tag}，n={table.n}，重复 {table.reps} 次，"
                               f"种子 {table.seed}，真值 η={table.eta_true:.6f}")
            run.font.size = Pt(10)

            grid = doc.add_table(rows=1, cols=6)
            grid.style = 'Table Grid'
            hdr_cells = grid.rows[0].cells
            for cell, text in zip(hdr_cells, ('估计量', '均值', '偏差', '标准差', 'RMSE', 'MC 标准误')):
                cell.text = text
            # 仅加粗表头
            for cell in hdr_cells:
                for paragraph in cell.paragraphs:
                    for run in paragraph.runs:
                        run.bold = True

            for name, row in table.rows.items():
                cells = grid.add_row().cells
                cells[0].text = name
                for cell, value in zip(cells[1:], (row.mean, row.bias, row.sd, row.rmse, row.mc_se)):
                    cell.text = f"{value:.4f}"

            if table.coverage is not None:
                doc.add_paragraph(f"{table.interval_level:.0%} 预测区间覆盖率: {table.coverage:.4f}")
            if table.failures:
                doc.add_paragraph(f"失败重复 {len(table.failures)} 次（已从汇总中剔除）",
                                  style='List Bullet')
            doc.add_paragraph()

        os.makedirs(os.path.dirname(os.path.abspath(output_path)), exist_ok=True)
        doc.save(output_path)
        logger.info(f"Word 报告已生成: {output_path}")
        return output_path
