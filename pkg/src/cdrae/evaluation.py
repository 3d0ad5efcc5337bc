"""Metrics, the global-mean baseline, repeated-split experiments and ablations."""
from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import cacdr, lfacdr
from .config import CacdrConfig, LfacdrConfig, ModelConfig
from .data import DomainPair, RatingMatrix, SplitPlan, SyntheticSpec, apply_cold_start, make_split

METHODS = ("cacdr", "lfacdr", "baseline")
DEFAULT_DIMS = (8, 32, 64, 128, 256)


def rmse_mae(pred, truth, mask) -> Tuple[float, float]:
    """Pooled RMSE and MAE over the entries selected by ``mask``."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != truth.shape or mask.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape}, {truth.shape}, {mask.shape}")
    if not mask.any():
        raise ValueError("cannot score an empty mask")
    diff = (pred - truth)[mask]
    return float(np.sqrt(np.mean(diff * diff))), float(np.mean(np.abs(diff)))


@dataclass(frozen=True)
class GlobalMean:
    value: float

    def predict(self, n_rows: int, n_cols: int) -> np.ndarray:
        return np.full((n_rows, n_cols), self.value)


def baseline_global_mean(train_target: RatingMatrix) -> GlobalMean:
    """Predict the mean observed training rating everywhere."""
    return GlobalMean(train_target.mean_rating())


def default_config(method: str) -> Optional[ModelConfig]:
    if method == "cacdr":
        return CacdrConfig()
    if method == "lfacdr":
        return LfacdrConfig()
    if method == "baseline":
        return None
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def repeat_seed(seed: int, repeat: int) -> int:
    """Model seed for one repeat, derived from the run seed."""
    return int(np.random.SeedSequence([seed, repeat]).generate_state(1)[0])


# --------------------------------------------------------------------------- reports


@dataclass
class EvalReport:
    method: str
    rmse: List[float]
    mae: List[float]
    config: dict = field(default_factory=dict)
    variant: str = ""
    seconds: float = 0.0
    models: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if len(self.rmse) != len(self.mae):
            raise ValueError("rmse and mae must have one value per repeat")

    @property
    def repeats(self) -> int:
        return len(self.rmse)

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.rmse))

    @property
    def std_rmse(self) -> float:
        return float(np.std(self.rmse))

    @property
    def mean_mae(self) -> float:
        return float(np.mean(self.mae))

    @property
    def std_mae(self) -> float:
        return float(np.std(self.mae))

    def to_dict(self, timing: bool = False) -> dict:
        d = {
            "method": self.method,
            "variant": self.variant,
            "repeats": [{"repeat": i, "rmse": r, "mae": a}
                        for i, (r, a) in enumerate(zip(self.rmse, self.mae))],
            "mean": {"rmse": self.mean_rmse, "mae": self.mean_mae},
            "std": {"rmse": self.std_rmse, "mae": self.std_mae},
            "config": self.config,
        }
        if timing:
            d["seconds"] = self.seconds
        return d

    def table(self) -> str:
        rows = [[str(i), f"{r:.4f}", f"{a:.4f}"] for i, (r, a) in enumerate(zip(self.rmse, self.mae))]
        rows.append(["mean", f"{self.mean_rmse:.4f}", f"{self.mean_mae:.4f}"])
        rows.append(["std", f"{self.std_rmse:.4f}", f"{self.std_mae:.4f}"])
        title = f"{self.method}" + (f" ({self.variant})" if self.variant else "")
        return title + "\n" + format_table(["repeat", "RMSE", "MAE"], rows)


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(c).rjust(w) for c, w in zip(r, widths)) for r in [header, *rows]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------- one repeat


def predict_target_rows(method: str, model, source_rows) -> np.ndarray:
    """Cold-start predictions along the shared axis (one row per source row)."""
    if method == "cacdr":
        return cacdr.predict_cold_start(model, source_rows)
    return lfacdr.predict_shared_rows(model, source_rows)


def score_model(method: str, model, train_pair: DomainPair, test_view: RatingMatrix,
                plan: SplitPlan) -> Tuple[float, float]:
    """Score predictions for the held-out entities against their withheld ratings."""
    truth = test_view.rows(train_pair.shared_axis, plan.test)
    mask = truth > 0
    if method == "baseline":
        pred = model.predict(*truth.shape)
    else:
        pred = predict_target_rows(method, model, train_pair.source_rows(plan.test))
    return rmse_mae(pred, truth, mask)


def _module(method):
    return cacdr if method == "cacdr" else lfacdr


def _run_repeat(args):
    """Train and score one split; returns {variant: (rmse, mae)} and the final model.

    ``variants`` selects what is scored: "init_only" (after the initialization
    stage), "full" (after both stages), "no_init" (coupled stage from the
    seeded initialization).
    """
    method, pair, plan, config, seed, variants = args
    train_pair, test_view = apply_cold_start(pair, plan)
    out: Dict[str, Tuple[float, float]] = {}
    model = None
    if method == "baseline":
        model = baseline_global_mean(train_pair.target)
        score = score_model(method, model, train_pair, test_view, plan)
        return {v: score for v in variants}, model
    mod = _module(method)
    if "init_only" in variants or "full" in variants:
        model = mod.build_model(train_pair, config, seed)
        mod.init_stage(train_pair, plan.train, config, seed, model)
        if "init_only" in variants:
            out["init_only"] = score_model(method, model, train_pair, test_view, plan)
        if "full" in variants:
            mod.coupled_stage(model, train_pair, plan.train, config, seed)
            out["full"] = score_model(method, model, train_pair, test_view, plan)
    if "no_init" in variants:
        bare = mod.train(train_pair, plan.train, config, seed, use_init=False)
        out["no_init"] = score_model(method, bare, train_pair, test_view, plan)
        model = model or bare
    return out, model


def _map(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def _variant_for(use_init: bool, use_coupled: bool) -> str:
    if use_init and use_coupled:
        return "full"
    if use_init:
        return "init_only"
    if use_coupled:
        return "no_init"
    raise ValueError("at least one training stage must be enabled")


def _echo(method, config, ratio, seed, repeats, extra=None) -> dict:
    d = {"method": method, "ratio": ratio, "seed": seed, "repeats": repeats}
    if config is not None:
        d["model"] = config.to_dict()
    if extra:
        d.update(extra)
    return d


def _run_variants(method, pair, config, repeats, seed, ratio, variants, jobs, keep_models=False,
                  echo=None):
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if config is None:
        config = default_config(method)
    plans = [make_split(pair.n_shared, ratio, seed, r) for r in range(repeats)]
    tasks = [(method, pair, plan, config, repeat_seed(seed, plan.repeat), tuple(variants))
             for plan in plans]
    start = time.perf_counter()
    results = _map(_run_repeat, tasks, jobs)
    seconds = time.perf_counter() - start
    reports = {}
    for v in variants:
        reports[v] = EvalReport(
            method=method,
            rmse=[r[0][v][0] for r in results],
            mae=[r[0][v][1] for r in results],
            config=_echo(method, config, ratio, seed, repeats, echo),
            variant=v,
            seconds=seconds,
            models=[r[1] for r in results] if keep_models else [],
        )
    return reports


def run_experiment(
    method: str,
    pair: DomainPair,
    config: Optional[ModelConfig] = None,
    repeats: int = 10,
    seed: int = 0,
    ratio: float = 0.8,
    use_init: bool = True,
    use_coupled: bool = True,
    jobs: int = 1,
    keep_models: bool = False,
    echo: Optional[dict] = None,
) -> EvalReport:
    """Repeated cold-start evaluation: split, mask, train, predict, score.

    ``echo`` adds entries (e.g. data provenance) to the report's config echo.
    """
    variant = "full" if method == "baseline" else _variant_for(use_init, use_coupled)
    return _run_variants(method, pair, config, repeats, seed, ratio, [variant], jobs,
                         keep_models, echo)[variant]


# --------------------------------------------------------------------------- ablations


@dataclass(frozen=True)
class AblationGrid:
    kind: str  # "coupled", "init" or "latent"
    dims: Tuple[int, ...] = DEFAULT_DIMS

    def __post_init__(self):
        if self.kind not in ("coupled", "init", "latent"):
            raise ValueError(f"unknown ablation {self.kind!r}")
        if self.kind == "latent" and (not self.dims or min(self.dims) < 1):
            raise ValueError("latent ablation needs a non-empty list of positive dims")


@dataclass
class AblationResult:
    grid: AblationGrid
    method: str
    rows: List[Tuple[str, EvalReport]]
    label: str = "data"

    def to_dict(self, timing: bool = False) -> dict:
        return {
            "grid": self.grid.kind,
            "method": self.method,
            "cells": [{"label": k, "report": r.to_dict(timing)} for k, r in self.rows],
        }

    def table(self) -> str:
        if self.grid.kind == "latent":
            header = ["k", "RMSE", "MAE"]
            rows = [[k, f"{r.mean_rmse:.4f}", f"{r.mean_mae:.4f}"] for k, r in self.rows]
        else:
            header = [self.label]
            row = [self.method]
            for k, r in self.rows:
                header += [f"{k} RMSE", f"{k} MAE"]
                row += [f"{r.mean_rmse:.4f}", f"{r.mean_mae:.4f}"]
            rows = [row]
        return format_table(header, rows)

    def report(self, label: str) -> EvalReport:
        return dict(self.rows)[label]


def run_ablation(
    grid: AblationGrid,
    method: str,
    pair: DomainPair,
    config: Optional[ModelConfig] = None,
    repeats: int = 5,
    seed: int = 0,
    ratio: float = 0.8,
    jobs: int = 1,
    echo: Optional[dict] = None,
) -> AblationResult:
    """One report per grid cell.

    The coupled ablation scores the same models before and after the coupled
    stage; since each stage draws from its own seeded stream this equals two
    separate runs.
    """
    if method == "baseline":
        raise ValueError("ablations apply to cacdr and lfacdr only")
    if config is None:
        config = default_config(method)
    if grid.kind == "coupled":
        r = _run_variants(method, pair, config, repeats, seed, ratio, ["init_only", "full"], jobs,
                          echo=echo)
        rows = [("without", r["init_only"]), ("with", r["full"])]
    elif grid.kind == "init":
        r = _run_variants(method, pair, config, repeats, seed, ratio, ["no_init", "full"], jobs,
                          echo=echo)
        rows = [("without", r["no_init"]), ("with", r["full"])]
    else:
        rows = []
        for k in grid.dims:
            cfg = config.with_latent_dim(int(k))
            rows.append((str(k), _run_variants(method, pair, cfg, repeats, seed, ratio, ["full"],
                                               jobs, echo=echo)["full"]))
    return AblationResult(grid, method, rows)


# --------------------------------------------------------------------------- reference config


def load_reference() -> dict:
    """The pinned synthetic benchmark and its split protocol (versioned package data)."""
    from importlib import resources

    return json.loads(resources.files("cdrae").joinpath("reference.json").read_text("utf-8"))


def reference_spec() -> SyntheticSpec:
    return SyntheticSpec(**load_reference()["synthetic"])
