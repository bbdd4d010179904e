"""Test-set evaluation: normalized RMSE, pairwise forecast-comparison
testing, the missingness-probability grid runner, and sensitivity sweeps
over the number of learned subsets.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ._util import derive_seed
from .dataio import Dataset, RawSeries, build_supervised, split_sequential
from .exceptions import CapacityError, ConfigError, DomainError, SizeError
from .missingness import (
    MissingnessConfig,
    MissingPattern,
    column_means,
    expand_obs_mask,
    impute_persistence,
    patterns_to_matrix,
    simulate_markov,
)
from .models import Architecture, ModelParams, predict
from .partition import FixedPartition, Partition, predict_deployed_rows, predict_fixed_rows
from .training import TrainConfig, train_nominal

METHOD_IMP_PERSISTENCE = "imp-persistence"
METHOD_IMP_MEAN = "imp-mean"
METHOD_RF_FIXED = "rf-fixed"
METHOD_RF_LEARNED = "rf-learned"
METHOD_ARF_FIXED = "arf-fixed"
METHOD_ARF_LEARNED = "arf-learned"
METHOD_RETRAIN_ORACLE = "retrain-oracle"
ALL_METHODS = (
    METHOD_IMP_PERSISTENCE,
    METHOD_IMP_MEAN,
    METHOD_RF_FIXED,
    METHOD_RF_LEARNED,
    METHOD_ARF_FIXED,
    METHOD_ARF_LEARNED,
    METHOD_RETRAIN_ORACLE,
)

ORACLE_MASKABLE_LIMIT = 10


def nrmse(preds: np.ndarray, actuals: np.ndarray) -> float:
    """Root mean squared error divided by the mean of the actuals, in percent."""
    preds = np.asarray(preds, dtype=np.float64)
    actuals = np.asarray(actuals, dtype=np.float64)
    if preds.shape != actuals.shape or preds.size == 0:
        raise SizeError("prediction and actual series must share a non-zero length")
    denom = actuals.mean()
    if denom <= 0:
        raise DomainError("mean of actuals must be positive for normalization")
    return 100.0 * math.sqrt(float(np.mean((preds - actuals) ** 2))) / float(denom)


class DMResult(NamedTuple):
    statistic: float
    p_value: float
    degenerate: bool


def dm_test(loss_a: np.ndarray, loss_b: np.ndarray, lag: int = 4) -> DMResult:
    """Forecast-comparison test on two per-observation loss series.

    The statistic is the mean loss differential over its HAC standard error
    (Bartlett weights up to `lag`), with a two-sided normal p-value. A
    positive statistic means loss_a is larger. When the differential has
    (near) zero variance the result is flagged degenerate with p = 1.
    """
    a = np.asarray(loss_a, dtype=np.float64)
    b = np.asarray(loss_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise SizeError("loss series must be equal-length vectors")
    n = a.size
    if n < 30:
        raise SizeError("forecast-comparison test needs at least 30 observations")
    d = a - b
    mean_d = d.mean()
    centered = d - mean_d
    gamma0 = float(np.mean(centered**2))
    variance = gamma0
    for k in range(1, min(lag, n - 1) + 1):
        gamma_k = float(np.mean(centered[k:] * centered[:-k]))
        variance += 2.0 * (1.0 - k / (lag + 1.0)) * gamma_k
    if variance <= 1e-300 * max(1.0, mean_d**2):
        return DMResult(statistic=0.0, p_value=1.0, degenerate=True)
    stat = mean_d / math.sqrt(variance / n)
    p = math.erfc(abs(stat) / math.sqrt(2.0))
    return DMResult(statistic=float(stat), p_value=float(p), degenerate=False)


@dataclass(frozen=True)
class GridSpec:
    p01_list: tuple[float, ...]
    p11_list: tuple[float, ...]
    horizons: tuple[int, ...]
    methods: tuple[str, ...]
    runs: int
    base_seed: int

    def __post_init__(self):
        if not self.p01_list or not self.p11_list or not self.horizons or not self.methods:
            raise ConfigError("grid lists must be non-empty")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        for m in self.methods:
            if m not in ALL_METHODS:
                raise ConfigError(f"unknown method {m!r}")


@dataclass
class CellResult:
    method: str
    horizon: int
    p01: float
    p11: float
    run: int
    nrmse: float
    sq_errors: np.ndarray


@dataclass
class EvalResult:
    records: list[CellResult] = field(default_factory=list)

    def get(self, method: str, horizon: int, p01: float, p11: float, run: int) -> CellResult:
        for rec in self.records:
            if (
                rec.method == method
                and rec.horizon == horizon
                and rec.p01 == p01
                and rec.p11 == p11
                and rec.run == run
            ):
                return rec
        raise KeyError((method, horizon, p01, p11, run))

    def cell_nrmse(self, method: str, horizon: int, p01: float, p11: float) -> list[float]:
        return [
            rec.nrmse
            for rec in self.records
            if rec.method == method
            and rec.horizon == horizon
            and rec.p01 == p01
            and rec.p11 == p11
        ]


@dataclass
class HorizonData:
    """Everything evaluation needs for one forecast horizon."""

    raw: RawSeries
    dataset: Dataset
    train: Dataset
    val: Dataset
    test: Dataset
    test_start: int
    train_means: np.ndarray
    target_plant: int

    @classmethod
    def build(
        cls,
        raw: RawSeries,
        target_plant: int,
        max_lag: int,
        horizon: int,
        train_frac: float,
        val_frac: float,
    ) -> "HorizonData":
        ds = build_supervised(raw, target_plant, max_lag, horizon)
        train, val, test = split_sequential(ds, train_frac, val_frac)
        return cls(
            raw=raw,
            dataset=ds,
            train=train,
            val=val,
            test=test,
            test_start=train.n + val.n,
            train_means=column_means(train),
            target_plant=target_plant,
        )


class RetrainOracle:
    """Dedicated model per realized pattern, trained on demand and cached.

    Each pattern's training seed is derived from the pattern itself, so the
    cache contents do not depend on encounter order. Guarded to small
    maskable sets; the pattern space grows exponentially.
    """

    def __init__(
        self,
        train: Dataset,
        val: Dataset,
        cfg: TrainConfig,
        arch: Architecture,
        family: str,
        adaptive: bool,
    ):
        if len(train.maskable) > ORACLE_MASKABLE_LIMIT:
            raise CapacityError(
                f"retrain oracle limited to {ORACLE_MASKABLE_LIMIT} maskable features"
            )
        self.train = train
        self.val = val
        self.cfg = cfg
        self.arch = arch
        self.family = family
        self.adaptive = adaptive
        self._cache: dict[bytes, ModelParams] = {}

    def params_for(self, pattern: MissingPattern) -> ModelParams:
        key = pattern.key()
        if key not in self._cache:
            seed = derive_seed(self.cfg.seed, "oracle", *pattern.missing_indices())
            cfg = replace(self.cfg, seed=seed)
            res = train_nominal(
                self.train, self.val, pattern, cfg, self.arch, self.family, self.adaptive
            )
            self._cache[key] = res.params
        return self._cache[key]

    def predict_rows(self, X: np.ndarray, patterns: list[MissingPattern]) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        preds = np.empty(X.shape[0])
        groups: dict[bytes, list[int]] = {}
        for i, pat in enumerate(patterns):
            groups.setdefault(pat.key(), []).append(i)
        for key, rows in groups.items():
            pat = patterns[rows[0]]
            params = self.params_for(pat)
            preds[rows] = predict(params, X[rows], pat.bits)
        return preds


def predict_method(
    method: str,
    artifact,
    hd: HorizonData,
    mask,
    test_patterns: list[MissingPattern],
) -> np.ndarray:
    """Predictions of one method on the test rows under a realized mask."""
    x_test = hd.test.X
    if method == METHOD_IMP_PERSISTENCE:
        filled_values = impute_persistence(hd.raw.values, mask)
        filled_raw = RawSeries(
            timestamps=hd.raw.timestamps,
            values=filled_values,
            capacities=hd.raw.capacities,
            weather=hd.raw.weather,
        )
        filled_ds = build_supervised(
            filled_raw, hd.target_plant, hd.dataset.max_lag, hd.dataset.horizon
        )
        x_filled = filled_ds.X[hd.test_start : hd.test_start + hd.test.n]
        zero = np.zeros(hd.test.p, dtype=np.uint8)
        return predict(artifact, x_filled, zero)
    if method == METHOD_IMP_MEAN:
        bits = patterns_to_matrix(test_patterns).astype(np.float64)
        x_filled = x_test * (1.0 - bits) + hd.train_means * bits
        zero = np.zeros(hd.test.p, dtype=np.uint8)
        return predict(artifact, x_filled, zero)
    if method in (METHOD_RF_LEARNED, METHOD_ARF_LEARNED):
        if not isinstance(artifact, Partition):
            raise ConfigError(f"method {method} needs a learned partition artifact")
        return predict_deployed_rows(artifact, x_test, test_patterns)
    if method in (METHOD_RF_FIXED, METHOD_ARF_FIXED):
        if not isinstance(artifact, FixedPartition):
            raise ConfigError(f"method {method} needs a fixed partition artifact")
        return predict_fixed_rows(artifact, x_test, test_patterns)
    if method == METHOD_RETRAIN_ORACLE:
        if not isinstance(artifact, RetrainOracle):
            raise ConfigError("retrain-oracle needs its trainer context")
        return artifact.predict_rows(x_test, test_patterns)
    raise ConfigError(f"unknown method {method!r}")


def _evaluate_cell(args) -> list[CellResult]:
    spec, hds, artifacts, i01, i11, run = args
    p01 = spec.p01_list[i01]
    p11 = spec.p11_list[i11]
    seed = derive_seed(spec.base_seed, "grid", i01, i11, run)
    records = []
    any_hd = next(iter(hds.values()))
    mask = simulate_markov(
        MissingnessConfig(p01=p01, p11=p11, seed=seed),
        any_hd.raw.n_periods,
        any_hd.raw.n_plants,
    )
    for h in spec.horizons:
        hd = hds[h]
        patterns = expand_obs_mask(mask, hd.dataset)
        test_patterns = patterns[hd.test_start : hd.test_start + hd.test.n]
        for method in spec.methods:
            artifact = artifacts[(method, h)]
            preds = predict_method(method, artifact, hd, mask, test_patterns)
            err = (preds - hd.test.y) ** 2
            records.append(
                CellResult(
                    method=method,
                    horizon=h,
                    p01=p01,
                    p11=p11,
                    run=run,
                    nrmse=nrmse(preds, hd.test.y),
                    sq_errors=err,
                )
            )
    return records


def run_grid(
    spec: GridSpec,
    hds: dict[int, HorizonData],
    artifacts: dict[tuple[str, int], object],
    jobs: int = 1,
) -> EvalResult:
    """Score every (cell, run, horizon, method) combination.

    One mask is simulated per (cell, run) from a seed derived from the base
    seed and the cell/run indices, then shared by all horizons and methods.
    Results are keyed records, so parallel execution (jobs > 1) returns the
    same output as sequential.
    """
    for h in spec.horizons:
        if h not in hds:
            raise ConfigError(f"no data prepared for horizon {h}")
        for method in spec.methods:
            if (method, h) not in artifacts:
                raise ConfigError(f"missing artifact for method {method!r} at horizon {h}")
    tasks = [
        (spec, hds, artifacts, i01, i11, run)
        for i01 in range(len(spec.p01_list))
        for i11 in range(len(spec.p11_list))
        for run in range(spec.runs)
    ]
    result = EvalResult()
    if jobs > 1 and len(tasks) > 1:
        import concurrent.futures as cf

        with cf.ProcessPoolExecutor(max_workers=jobs) as pool:
            for records in pool.map(_evaluate_cell, tasks):
                result.records.extend(records)
    else:
        for task in tasks:
            result.records.extend(_evaluate_cell(task))
    result.records.sort(
        key=lambda r: (
            spec.methods.index(r.method),
            spec.horizons.index(r.horizon),
            spec.p01_list.index(r.p01),
            spec.p11_list.index(r.p11),
            r.run,
        )
    )
    return result


@dataclass
class QSweepRow:
    n_subsets: int
    mean_nrmse: float
    max_relgap: float


def q_sweep(
    partitions: dict[int, Partition],
    method: str,
    horizon: int,
    p01: float,
    p11: float,
    runs: int,
    base_seed: int,
    hds: dict[int, HorizonData],
    jobs: int = 1,
) -> list[QSweepRow]:
    """Mean test nrmse and max leaf relative gap per subset count, at one
    missingness cell, averaged over seeded runs. Rows are ordered by count."""
    rows = []
    for q in sorted(partitions):
        spec = GridSpec(
            p01_list=(p01,),
            p11_list=(p11,),
            horizons=(horizon,),
            methods=(method,),
            runs=runs,
            base_seed=base_seed,
        )
        res = run_grid(spec, hds, {(method, horizon): partitions[q]}, jobs=jobs)
        values = res.cell_nrmse(method, horizon, p01, p11)
        rows.append(
            QSweepRow(
                n_subsets=q,
                mean_nrmse=float(np.mean(values)),
                max_relgap=partitions[q].max_relgap(),
            )
        )
    return rows


def emit_report(
    result: EvalResult,
    out_dir: str | Path,
    qsweep_rows: list[QSweepRow] | None = None,
) -> list[Path]:
    """Write grid.csv (long format), summary.csv (per-cell mean/std), and
    qsweep.csv when sweep rows are given. Output is a pure function of the
    inputs, so re-runs are byte-identical."""
    out_dir = Path(out_dir)
    if not result.records:
        raise SizeError("nothing to report")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    grid_path = out_dir / "grid.csv"
    lines = ["method,h,p01,p11,run,nrmse"]
    for rec in result.records:
        lines.append(
            f"{rec.method},{rec.horizon},{rec.p01!r},{rec.p11!r},{rec.run},{rec.nrmse!r}"
        )
    grid_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(grid_path)

    summary_path = out_dir / "summary.csv"
    lines = ["method,h,p01,p11,mean_nrmse,std_nrmse,runs"]
    seen: list[tuple] = []
    for rec in result.records:
        cell = (rec.method, rec.horizon, rec.p01, rec.p11)
        if cell not in seen:
            seen.append(cell)
    for method, h, p01, p11 in seen:
        values = result.cell_nrmse(method, h, p01, p11)
        mean = float(np.mean(values))
        std = float(np.std(values))
        lines.append(f"{method},{h},{p01!r},{p11!r},{mean!r},{std!r},{len(values)}")
    summary_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(summary_path)

    if qsweep_rows is not None:
        qsweep_path = out_dir / "qsweep.csv"
        lines = ["Q,mean_nrmse,max_relgap"]
        for row in qsweep_rows:
            lines.append(f"{row.n_subsets},{row.mean_nrmse!r},{row.max_relgap!r}")
        qsweep_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(qsweep_path)
    return written
