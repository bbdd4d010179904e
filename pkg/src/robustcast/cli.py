"""Subcommand front-end: synth, train, evaluate, report.

All knobs live in one JSON run config; flags only override the seed, the
output directory, and the worker count. Exit codes: 0 success, 2 config
error, 3 data error, 4 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ._util import derive_seed
from .dataio import RawSeries, SynthConfig, gen_synthetic, load_csv, save_csv
from .evaluation import (
    ALL_METHODS,
    METHOD_ARF_FIXED,
    METHOD_ARF_LEARNED,
    METHOD_IMP_MEAN,
    METHOD_IMP_PERSISTENCE,
    METHOD_RETRAIN_ORACLE,
    METHOD_RF_FIXED,
    METHOD_RF_LEARNED,
    EvalResult,
    GridSpec,
    HorizonData,
    RetrainOracle,
    emit_report,
    q_sweep,
    run_grid,
)
from .exceptions import ConfigError, DataError, RobustcastError
from .models import Architecture
from .partition import (
    PartitionConfig,
    UncertaintySet,
    bounds_table,
    fixed_partition,
    learn_partition,
    load_artifact,
    save_artifact,
)
from .training import TrainConfig

DEFAULT_HIDDEN = (50, 50, 50, 50)


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out_dir: str
    csv_path: str | None
    synth: SynthConfig | None
    target_plant: int
    max_lag: int
    horizons: tuple[int, ...]
    family: str
    adaptive: bool
    hidden: tuple[int, ...]
    train_frac: float
    val_frac: float
    train: TrainConfig
    partition_mode: str
    partition: PartitionConfig
    budget: int | None
    has_grid: bool
    grid_p01: tuple[float, ...]
    grid_p11: tuple[float, ...]
    grid_methods: tuple[str, ...]
    grid_runs: int
    qsweep_list: tuple[int, ...] | None
    qsweep_p01: float
    qsweep_p11: float
    qsweep_method: str


def parse_run_config(obj: dict) -> RunConfig:
    try:
        data = obj.get("data", {})
        csv_path = data.get("csv")
        synth = None
        if "synth" in data:
            s = data["synth"]
            synth = SynthConfig(
                n_plants=s["n_plants"],
                n_periods=s["n_periods"],
                ar_coefficient=s.get("ar_coefficient", 0.97),
                cross_plant_correlation=s.get("cross_plant_correlation", 0.5),
                noise_std=s.get("noise_std", 0.2),
                seed=s.get("seed", obj.get("seed", 0)),
            )
        if (csv_path is None) == (synth is None):
            raise ConfigError("config must name exactly one data source: data.csv or data.synth")

        family = obj.get("family", "lr")
        if family not in ("lr", "nn"):
            raise ConfigError(f"family must be 'lr' or 'nn', got {family!r}")
        tr = obj.get("train", {})
        default_decay = 1e-5 if family == "nn" else 0.0
        train_cfg = TrainConfig(
            learning_rate=tr.get("learning_rate", 1e-3),
            max_iters=tr.get("max_iters", 1000),
            patience=tr.get("patience", 20),
            batch_size=tr.get("batch_size", 512),
            weight_decay=tr.get("weight_decay", default_decay),
            seed=obj.get("seed", 0),
            shuffle=tr.get("shuffle", False),
        )
        part = obj.get("partition", {})
        mode = part.get("mode", "learned")
        if mode not in ("learned", "fixed", "nominal"):
            raise ConfigError(f"partition.mode must be learned|fixed|nominal, got {mode!r}")
        grid = obj.get("grid", {})
        qs = obj.get("q_sweep")
        split = obj.get("split", {})
        return RunConfig(
            seed=obj.get("seed", 0),
            out_dir=obj.get("out_dir", "runs/out"),
            csv_path=csv_path,
            synth=synth,
            target_plant=obj.get("target_plant", 0),
            max_lag=obj.get("max_lag", 2),
            horizons=tuple(obj.get("horizons", [1])),
            family=family,
            adaptive=obj.get("adaptive", True),
            hidden=tuple(obj.get("hidden", DEFAULT_HIDDEN)),
            train_frac=split.get("train_frac", 0.5),
            val_frac=split.get("val_frac", 0.15),
            train=train_cfg,
            partition_mode=mode,
            partition=PartitionConfig(
                max_subsets=part.get("q_max", 10), epsilon=part.get("epsilon", 0.001)
            ),
            budget=part.get("budget"),
            has_grid="grid" in obj,
            grid_p01=tuple(grid.get("p01", [0.05, 0.1, 0.2])),
            grid_p11=tuple(grid.get("p11", [0.0, 0.8, 0.9])),
            grid_methods=tuple(grid.get("methods", [METHOD_IMP_PERSISTENCE, METHOD_ARF_LEARNED])),
            grid_runs=grid.get("runs", 10),
            qsweep_list=tuple(qs["q_list"]) if qs else None,
            qsweep_p01=qs.get("p01", 0.2) if qs else 0.2,
            qsweep_p11=qs.get("p11", 0.9) if qs else 0.9,
            qsweep_method=qs.get("method", METHOD_ARF_LEARNED) if qs else METHOD_ARF_LEARNED,
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed run config: {exc}") from exc


def load_run_config(path: str, seed_override: int | None, out_override: str | None) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    cfg = parse_run_config(obj)
    if seed_override is not None:
        cfg = replace(
            cfg,
            seed=seed_override,
            train=replace(cfg.train, seed=seed_override),
            synth=None
            if cfg.synth is None
            else replace(cfg.synth, seed=seed_override),
        )
    if out_override is not None:
        cfg = replace(cfg, out_dir=out_override)
    return cfg


def _load_raw(cfg: RunConfig) -> RawSeries:
    if cfg.csv_path is not None:
        return load_csv(cfg.csv_path)
    return gen_synthetic(cfg.synth)


def _horizon_data(cfg: RunConfig, raw: RawSeries) -> dict[int, HorizonData]:
    return {
        h: HorizonData.build(
            raw, cfg.target_plant, cfg.max_lag, h, cfg.train_frac, cfg.val_frac
        )
        for h in cfg.horizons
    }


def _arch_for(cfg: RunConfig, hd: HorizonData) -> Architecture:
    hidden = cfg.hidden if cfg.family == "nn" else ()
    return Architecture(input_dim=hd.dataset.p, hidden=hidden, bias_index=hd.dataset.bias_index)


def _uset_for(cfg: RunConfig, hd: HorizonData) -> UncertaintySet:
    budget = cfg.budget if cfg.budget is not None else len(hd.dataset.maskable)
    return UncertaintySet(
        n_features=hd.dataset.p, maskable=hd.dataset.maskable, budget=budget
    )


def _artifact_path(out_dir: str, name: str, horizon: int) -> Path:
    return Path(out_dir) / f"{name}_h{horizon}.json"


def _methods_to_train(cfg: RunConfig) -> tuple[str, ...]:
    if cfg.has_grid:
        return cfg.grid_methods
    # no grid block: train the artifact named by the partition mode
    if cfg.partition_mode == "learned":
        return (METHOD_ARF_LEARNED if cfg.adaptive else METHOD_RF_LEARNED,)
    if cfg.partition_mode == "fixed":
        return (METHOD_ARF_FIXED if cfg.adaptive else METHOD_RF_FIXED,)
    return ()


def cmd_synth(cfg: RunConfig) -> int:
    if cfg.synth is None:
        raise ConfigError("synth subcommand needs a data.synth block")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = gen_synthetic(cfg.synth)
    path = out_dir / "synthetic.csv"
    save_csv(raw, path)
    print(f"wrote {path} ({raw.n_periods} periods, {raw.n_plants} plants)")
    return 0


def _train_one_method(method, cfg, hd, arch, uset, h, jobs, out_dir, base_params_path):
    seed = derive_seed(cfg.seed, "train", method, h)
    adaptive = method in (METHOD_ARF_LEARNED, METHOD_ARF_FIXED)
    tcfg = replace(cfg.train, seed=seed)
    if method in (METHOD_RF_LEARNED, METHOD_ARF_LEARNED):
        part = learn_partition(
            hd.train, hd.val, uset, cfg.partition, tcfg, arch, cfg.family, adaptive
        )
        path = _artifact_path(out_dir, method, h)
        save_artifact(part, path)
        table = bounds_table(part)
        (Path(out_dir) / f"bounds_{method}_h{h}.txt").write_text(table, encoding="utf-8")
        print(f"[h={h}] {method}: {len(part.leaf_ids)} subsets, "
              f"max relgap {part.max_relgap():.4%}")
        print(table, end="")
        return path
    if method in (METHOD_RF_FIXED, METHOD_ARF_FIXED):
        part = fixed_partition(
            hd.train, hd.val, uset, tcfg, arch, cfg.family, adaptive, jobs=jobs
        )
        path = _artifact_path(out_dir, method, h)
        save_artifact(part, path)
        print(f"[h={h}] {method}: {len(part.subsets)} equality subsets")
        return path
    return base_params_path


def cmd_train(cfg: RunConfig, jobs: int = 1) -> int:
    from .missingness import MissingPattern
    from .training import train_nominal

    raw = _load_raw(cfg)
    hds = _horizon_data(cfg, raw)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    methods = _methods_to_train(cfg)

    for h, hd in hds.items():
        arch = _arch_for(cfg, hd)
        uset = _uset_for(cfg, hd)
        base_cfg = replace(cfg.train, seed=derive_seed(cfg.seed, "train", "base", h))
        base = train_nominal(
            hd.train,
            hd.val,
            MissingPattern.zeros(hd.dataset.p),
            base_cfg,
            arch,
            cfg.family,
            adaptive=False,
        )
        base_path = _artifact_path(cfg.out_dir, "base", h)
        save_artifact(base.params, base_path)
        print(f"[h={h}] base model: validation loss {base.val_loss:.6e}")
        for method in methods:
            if method in (METHOD_IMP_PERSISTENCE, METHOD_IMP_MEAN, METHOD_RETRAIN_ORACLE):
                continue
            try:
                _train_one_method(
                    method, cfg, hd, arch, uset, h, jobs, cfg.out_dir, base_path
                )
            except RobustcastError as exc:
                raise RobustcastError(f"training {method} at h={h} failed: {exc}") from exc
        if cfg.qsweep_list:
            for q in cfg.qsweep_list:
                seed = derive_seed(cfg.seed, "train", cfg.qsweep_method, h)
                adaptive = cfg.qsweep_method in (METHOD_ARF_LEARNED,)
                tcfg = replace(cfg.train, seed=seed)
                part = learn_partition(
                    hd.train,
                    hd.val,
                    uset,
                    PartitionConfig(max_subsets=q, epsilon=cfg.partition.epsilon),
                    tcfg,
                    arch,
                    cfg.family,
                    adaptive,
                )
                save_artifact(part, Path(cfg.out_dir) / f"{cfg.qsweep_method}_q{q}_h{h}.json")
                print(f"[h={h}] {cfg.qsweep_method} Q={q}: max relgap {part.max_relgap():.4%}")
    return 0


def _load_artifacts(cfg: RunConfig, hds: dict[int, HorizonData]) -> dict:
    artifacts: dict[tuple[str, int], object] = {}
    for h, hd in hds.items():
        for method in cfg.grid_methods:
            if method in (METHOD_IMP_PERSISTENCE, METHOD_IMP_MEAN):
                path = _artifact_path(cfg.out_dir, "base", h)
                if not path.exists():
                    raise ConfigError(f"missing artifact {path}; run the train subcommand first")
                params = load_artifact(path)
                if params.n_features != hd.dataset.p:
                    raise ConfigError(
                        f"artifact {path} was trained for p={params.n_features}, "
                        f"data has p={hd.dataset.p}"
                    )
                artifacts[(method, h)] = params
            elif method == METHOD_RETRAIN_ORACLE:
                seed = derive_seed(cfg.seed, "train", method, h)
                artifacts[(method, h)] = RetrainOracle(
                    hd.train,
                    hd.val,
                    replace(cfg.train, seed=seed),
                    _arch_for(cfg, hd),
                    cfg.family,
                    cfg.adaptive,
                )
            else:
                path = _artifact_path(cfg.out_dir, method, h)
                if not path.exists():
                    raise ConfigError(f"missing artifact {path}; run the train subcommand first")
                artifact = load_artifact(path)
                expect_p = getattr(artifact, "uncertainty", None)
                if expect_p is not None and expect_p.n_features != hd.dataset.p:
                    raise ConfigError(
                        f"artifact {path} was trained for p={expect_p.n_features}, "
                        f"data has p={hd.dataset.p}"
                    )
                artifacts[(method, h)] = artifact
    return artifacts


def cmd_evaluate(cfg: RunConfig, jobs: int = 1) -> int:
    if not cfg.has_grid:
        raise ConfigError("the evaluate subcommand needs a grid block in the config")
    raw = _load_raw(cfg)
    hds = _horizon_data(cfg, raw)
    artifacts = _load_artifacts(cfg, hds)
    spec = GridSpec(
        p01_list=cfg.grid_p01,
        p11_list=cfg.grid_p11,
        horizons=cfg.horizons,
        methods=cfg.grid_methods,
        runs=cfg.grid_runs,
        base_seed=cfg.seed,
    )
    result = run_grid(spec, hds, artifacts, jobs=jobs)

    qrows = None
    if cfg.qsweep_list:
        h = cfg.horizons[0]
        partitions = {}
        for q in cfg.qsweep_list:
            path = Path(cfg.out_dir) / f"{cfg.qsweep_method}_q{q}_h{h}.json"
            if not path.exists():
                raise ConfigError(f"missing sweep artifact {path}; run the train subcommand first")
            partitions[q] = load_artifact(path)
        qrows = q_sweep(
            partitions,
            cfg.qsweep_method,
            h,
            cfg.qsweep_p01,
            cfg.qsweep_p11,
            cfg.grid_runs,
            cfg.seed,
            hds,
            jobs=jobs,
        )
    written = emit_report(result, cfg.out_dir, qrows)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_report(cfg: RunConfig) -> int:
    """Recompute summary.csv from an existing grid.csv and print it."""
    grid_path = Path(cfg.out_dir) / "grid.csv"
    if not grid_path.exists():
        raise DataError(f"no grid.csv in {cfg.out_dir}; run the evaluate subcommand first")
    rows = grid_path.read_text(encoding="utf-8").strip().split("\n")[1:]
    cells: dict[tuple, list[float]] = {}
    order: list[tuple] = []
    for row in rows:
        method, h, p01, p11, run, value = row.split(",")
        key = (method, h, p01, p11)
        if key not in cells:
            cells[key] = []
            order.append(key)
        cells[key].append(float(value))
    lines = ["method,h,p01,p11,mean_nrmse,std_nrmse,runs"]
    for key in order:
        values = cells[key]
        mean = float(np.mean(values))
        std = float(np.std(values))
        lines.append(f"{','.join(key)},{mean!r},{std!r},{len(values)}")
    out = "\n".join(lines) + "\n"
    (Path(cfg.out_dir) / "summary.csv").write_text(out, encoding="utf-8")
    print(out, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robustcast",
        description="Train and evaluate forecasting models that stay accurate "
        "when input features go missing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "train", "evaluate", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config path")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers")
        p.add_argument("--out", default=None, help="override output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.seed, args.out)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg, jobs=args.jobs)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, jobs=args.jobs)
        if args.command == "report":
            return cmd_report(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (RobustcastError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
