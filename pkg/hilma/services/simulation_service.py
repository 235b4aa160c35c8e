"""
蒙特卡洛模拟

每次重复：生成数据 → h-似然拟合（可选 Laplace 与 EM）→ 计算各估计量与预测区间覆盖 → 汇总。
第 r 次重复的随机流由 SeedSequence([seed, r]) 派生，串行与并行结果一致。
"""
import concurrent.futures
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from hilma.config import Config
from hilma.models import build_model, simulate
from hilma.models.mechanisms import MissingnessMechanism
from hilma.services import hlik_service as hs
from hilma.services.em_service import E_STEPS, conditional_mean, em_fit
from hilma.services.inference_service import var_fixed, var_random
from hilma.services.laplace_service import approx_mle
from hilma.services.solver_service import FitResult, SolveOptions, joint_maximize
from hilma.utils.errors import HilmaError, SimulationError, UsageError

logger = logging.getLogger(__name__)

ESTIMATORS = ('y_com', 'y_obs', 'y_ML', 'y_ML_lap', 'em')
MAX_FAILURE_RATE = 0.05


@dataclass
class SimConfig:
    model_tag: str
    true_params: tuple
    mechanism: Optional[MissingnessMechanism] = None
    n: int = 100
    reps: int = 100
    seed: int = 0
    estimators: tuple = ('y_com', 'y_obs', 'y_ML')
    interval_level: float = 0.95
    model_kwargs: Dict = field(default_factory=dict)
    threads: Optional[int] = None

    def build(self):
        """校验配置并构造模型"""
        if self.reps < 1:
            raise UsageError(f"reps 必须 ≥ 1: {self.reps}")
        if self.n < 1:
            raise UsageError(f"n 必须 ≥ 1: {self.n}")
        if not self.estimators:
            raise UsageError("估计量集合不能为空")
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise UsageError(f"未知估计量: {unknown}，可选 {ESTIMATORS}")
        if not 0 < self.interval_level < 1:
            raise UsageError(f"区间水平必须在 (0,1) 内: {self.interval_level}")
        model = build_model(self.model_tag, **self.model_kwargs)
        if 'y_ML_lap' in self.estimators and model.b_scale is None:
            raise UsageError(f"模型 {model.tag} 没有弱典则尺度，不能使用 y_ML_lap")
        if 'em' in self.estimators and model.tag not in E_STEPS:
            raise UsageError(f"模型 {model.tag} 没有 EM 基线")
        hs.check_psi(model, self.true_params)
        return model


@dataclass
class EstimatorSummary:
    mean: float
    bias: float
    sd: float
    rmse: float
    mc_se: float
    quartiles: List[float]
    values: List[float]

    @classmethod
    def from_values(cls, values, eta_true):
        v = np.asarray(values, dtype=float)
        mean = float(np.mean(v))
        # 总体标准差（ddof=0），使 RMSE² = bias² + SD²
        sd = float(np.std(v))
        return cls(mean=mean, bias=mean - eta_true, sd=sd,
                   rmse=float(np.sqrt(np.mean((v - eta_true) ** 2))),
                   mc_se=sd / np.sqrt(v.size),
                   quartiles=[float(q) for q in np.percentile(v, [25, 50, 75])],
                   values=[float(x) for x in v])


@dataclass
class SummaryTable:
    model_tag: str
    n: int
    reps: int
    seed: int
    eta_true: float
    rows: Dict[str, EstimatorSummary]
    coverage: Optional[float] = None
    interval_level: float = 0.95
    failures: List[Dict] = field(default_factory=list)

    def to_dict(self):
        return {
            'model': self.model_tag,
            'n': self.n,
            'reps': self.reps,
            'seed': self.seed,
            'eta_true': self.eta_true,
            'coverage': self.coverage,
            'interval_level': self.interval_level,
            'estimators': {name: vars(row) for name, row in self.rows.items()},
            'failures': self.failures,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False)


def estimator_y_ML(fit: FitResult, data: hs.Dataset) -> float:
    """ȳ_ML = n⁻¹(Σ y_obs + Σ ŷ_mis)"""
    imputed = np.asarray(fit.y_mis_hat, dtype=float) if data.n_mis else np.zeros(0)
    return float((np.sum(data.y_obs) + np.sum(imputed)) / data.n)


def _coverage(fit, truth, level):
    if fit.blocks is None or fit.blocks.I_vv.size == 0:
        return 0, 0
    report = var_random(fit.blocks, var_fixed(fit.blocks), level)
    truth = np.asarray(truth, dtype=float)
    hits = int(np.sum((truth >= report.lower) & (truth <= report.upper)))
    return hits, int(truth.size)


def run_replication(model, config: SimConfig, rep: int) -> Dict:
    """单次重复，返回 {'rep', 'success', 'values', 'coverage', 'error'}"""
    try:
        sim = simulate(model, config.true_params, config.mechanism, config.n,
                       np.random.SeedSequence([config.seed, rep]))
        data = sim.dataset
        values = {}
        coverage = (0, 0)
        if 'y_com' in config.estimators:
            values['y_com'] = float(np.mean(sim.y_com))
        if 'y_obs' in config.estimators:
            values['y_obs'] = float(np.mean(data.y_obs))
        if 'y_ML' in config.estimators:
            fit = joint_maximize(model, data, SolveOptions())
            values['y_ML'] = estimator_y_ML(fit, data)
            coverage = _coverage(fit, sim.y_mis_true, config.interval_level)
        if 'y_ML_lap' in config.estimators:
            lap = approx_mle(model, data, blocks=False)
            values['y_ML_lap'] = estimator_y_ML(lap, data)
        if 'em' in config.estimators:
            em = em_fit(model, data)
            filled = conditional_mean(model, em.psi_hat, data)
            values['em'] = float((np.sum(data.y_obs) + np.sum(filled)) / data.n)
        logger.info(f"[重复 {rep}] 完成 n_obs={data.n_obs} n_mis={data.n_mis}")
        return {'rep': rep, 'success': True, 'values': values, 'coverage': coverage, 'error': None}
    # sklearn 与 numpy 在退化样本上抛 ValueError / FloatingPointError，同样记为失败的重复
    except (HilmaError, np.linalg.LinAlgError, ValueError, FloatingPointError) as e:
        logger.warning(f"[重复 {rep}] 失败: {type(e).__name__}: {e}")
        return {'rep': rep, 'success': False, 'values': {}, 'coverage': (0, 0),
                'error': f"{type(e).__name__}: {e}"}


def run_simulation(config: SimConfig) -> SummaryTable:
    """
    运行蒙特卡洛模拟

    失败的重复记录 rep 与错误并排除在汇总之外；失败率超过 5% 时抛 SimulationError。
    """
    model = config.build()
    threads = config.threads or Config.THREADS
    eta_true = float(model.population_mean(np.asarray(config.true_params, dtype=float), config.n))
    logger.info(f"开始模拟: 模型={model.tag} n={config.n} reps={config.reps} seed={config.seed} "
                f"估计量={','.join(config.estimators)} 线程={threads}")

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        records = list(pool.map(lambda r: run_replication(model, config, r), range(config.reps)))
    records.sort(key=lambda rec: rec['rep'])

    failures = [{'rep': rec['rep'], 'error': rec['error']} for rec in records if not rec['success']]
    if len(failures) > MAX_FAILURE_RATE * config.reps:
        raise SimulationError(f"失败重复 {len(failures)}/{config.reps} 超过 {MAX_FAILURE_RATE:.0%}",
                              failures=failures)
    good = [rec for rec in records if rec['success']]
    if not good:
        raise SimulationError("没有成功的重复", failures=failures)

    rows = {}
    for name in config.estimators:
        rows[name] = EstimatorSummary.from_values([rec['values'][name] for rec in good], eta_true)
    coverage = None
    if 'y_ML' in config.estimators:
        hits = sum(rec['coverage'][0] for rec in good)
        total = sum(rec['coverage'][1] for rec in good)
        coverage = hits / total if total else None

    table = SummaryTable(model_tag=model.tag, n=config.n, reps=config.reps, seed=config.seed,
                         eta_true=eta_true, rows=rows, coverage=coverage,
                         interval_level=config.interval_level, failures=failures)
    logger.info(f"模拟完成: 模型={model.tag} 成功 {len(good)}/{config.reps}"
                + (f"，覆盖率 {coverage:.4f}" if coverage is not None else ""))
    return table
