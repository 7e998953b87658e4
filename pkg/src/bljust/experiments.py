"""Experiment configuration and runners behind the ``bljust`` command.

A config is a nested mapping (YAML or JSON on disk) with the sections below;
anything omitted falls back to :data:`DEFAULTS`.  Dotted ``--set`` overrides
are applied last, so flags win over the file.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import time
import traceback
from dataclasses import fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .analytic import SolverConfig, check_penalty_threshold, make_affine_projection_problem, solve_penalized
from .data import GeneratorSpec, generate, generate_eval
from .engine import (
    MetricRecord,
    PenaltySchedule,
    TrainConfig,
    TrainState,
    evaluate_ctc,
    evaluate_ter,
    train_bljust,
    train_ptft,
    train_supervised,
)
from .model import EncoderConfig, save_checkpoint

__all__ = [
    "MODES",
    "DEFAULTS",
    "ConfigError",
    "load_config",
    "apply_overrides",
    "resolve",
    "run_strategy",
    "run_experiment",
    "efficiency_ratio",
]

MODES = ("bljust", "ptft", "supervised", "analytic", "sweep", "compare")
STRATEGIES = ("bljust", "ptft", "supervised")

# The synthetic task's prototype scale is the difficulty dial: with unit-scale
# prototypes every strategy decodes perfectly and nothing can be compared.
DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "data": {
        "vocab_size": 5,
        "feature_dim": 8,
        "frames_per_symbol": [2, 4],
        "label_length": [2, 8],
        "noise_sigma": 0.1,
        "prototype_scale": 0.15,
        "labeled_count": 500,
        "unlabeled_count": 4000,
        "valid_count": 100,
        "test_count": 200,
        "disjoint": True,
    },
    "model": {"hidden_dim": 16, "context_dim": 16, "num_layers": 1, "prediction_offsets": [1, 2]},
    # single-loop run
    "train": {"alpha": 5e-3, "beta": 5e-4, "epochs": 100, "optimizer": "adamw"},
    "penalty": {"initial_gamma": 0.0, "growth_rate": 0.002, "mode": "linear"},
    # two-stage baseline; "finetune" also drives the supervised-only run
    "pretrain": {"alpha": 5e-3, "beta": 5e-3},
    "finetune": {"alpha": 5e-4, "beta": 5e-4},
    "checkpoint_every": 0,
    "analytic": {
        "A": [[1.0, 1.0]],
        "b": [1.0],
        "c": [0.0, 0.0],
        "gamma": None,  # None -> 10x the empirical penalty threshold for delta
        "delta": 1e-4,
        "K": 100000,
        "step_scale": 0.5,
        "seed": 0,
    },
    "sweep": {"strategy": "bljust", "alpha": [5e-3], "beta": [5e-4], "growth_rate": [0.0, 0.002, 0.004], "seeds": None},
    "compare": {"strategies": ["bljust", "ptft"]},
}

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
_SECTION_KEYS = {
    "data": {f.name for f in fields(GeneratorSpec)} - {"seed"},
    "model": {"hidden_dim", "context_dim", "num_layers", "prediction_offsets"},
    "train": _TRAIN_KEYS,
    "pretrain": _TRAIN_KEYS,
    "finetune": _TRAIN_KEYS,
    "penalty": {f.name for f in fields(PenaltySchedule)},
    "analytic": set(DEFAULTS["analytic"]),
    "sweep": set(DEFAULTS["sweep"]),
    "compare": set(DEFAULTS["compare"]),
}


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted key at fault."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(message if field is None else f"{field}: {message}")


# -- config handling ---------------------------------------------------------------


def _merge(base: dict, extra: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        where = f"{path}{key}"
        if key not in base and key not in _SECTION_KEYS.get(path.rstrip("."), ()):
            raise ConfigError("unknown key", where)
        if isinstance(base.get(key), dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where + ".")
        elif isinstance(base.get(key), dict):
            raise ConfigError("expected a mapping", where)
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    """Parse a YAML/JSON config file into a (partial) nested mapping."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else None
        raise ConfigError(f"cannot parse config: {getattr(exc, 'problem', exc)}", where) from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at top level")
    return data


def apply_overrides(cfg: dict, assignments: list[str]) -> dict:
    """Apply ``a.b=value`` strings; values are parsed as YAML scalars/lists."""
    out = copy.deepcopy(cfg)
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError("cannot descend into a scalar", key)
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def resolve(partial: dict | None = None) -> dict:
    """Merge onto :data:`DEFAULTS` and validate every section."""
    cfg = _merge(DEFAULTS, partial or {})
    for section, allowed in _SECTION_KEYS.items():
        extra = set(cfg[section]) - allowed
        if extra:
            raise ConfigError(f"unknown key(s) {sorted(extra)}", section)
    # build each object once so bad values surface with their section name
    for section, build in (
        ("data", lambda: data_spec(cfg)),
        ("model", lambda: model_config(cfg)),
        ("train", lambda: train_config(cfg, "train")),
        ("pretrain", lambda: train_config(cfg, "pretrain")),
        ("finetune", lambda: train_config(cfg, "finetune")),
        ("penalty", lambda: PenaltySchedule(**cfg["penalty"])),
    ):
        try:
            build()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), section) from exc
    sweep = cfg["sweep"]
    if sweep["strategy"] not in STRATEGIES:
        raise ConfigError(f"must be one of {STRATEGIES}", "sweep.strategy")
    for key in ("alpha", "beta", "growth_rate"):
        if not isinstance(sweep[key], list) or not sweep[key]:
            raise ConfigError("grid must be a nonempty list", f"sweep.{key}")
    for s in cfg["compare"]["strategies"]:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}", "compare.strategies")
    if not isinstance(cfg["checkpoint_every"], int) or cfg["checkpoint_every"] < 0:
        raise ConfigError("must be a nonnegative integer", "checkpoint_every")
    return cfg


def data_spec(cfg: dict, seed: int | None = None) -> GeneratorSpec:
    d = dict(cfg["data"])
    d["frames_per_symbol"] = tuple(d["frames_per_symbol"])
    d["label_length"] = tuple(d["label_length"])
    return GeneratorSpec(seed=cfg["seed"] if seed is None else seed, **d)


def model_config(cfg: dict) -> EncoderConfig:
    m = cfg["model"]
    return EncoderConfig(
        feature_dim=cfg["data"]["feature_dim"],
        vocab_size=cfg["data"]["vocab_size"],
        hidden_dim=m["hidden_dim"],
        context_dim=m["context_dim"],
        num_layers=m["num_layers"],
        prediction_offsets=tuple(m["prediction_offsets"]),
    )


def train_config(cfg: dict, section: str, seed: int | None = None, **over) -> TrainConfig:
    base = dict(cfg["train"])
    if section != "train":
        base.update(cfg[section])
    base.update(over)
    return TrainConfig(seed=cfg["seed"] if seed is None else seed, **base)


# -- artifacts ---------------------------------------------------------------------


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict() if isinstance(rec, MetricRecord) else rec, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _checkpointer(out: Path | None, every: int, phase: str):
    if out is None or not every:
        return None

    def hook(state: TrainState) -> None:
        if state.epoch % every == 0:
            ckpt = out / "checkpoints"
            ckpt.mkdir(exist_ok=True)
            save_checkpoint(ckpt / f"{phase}_epoch{state.epoch:04d}.bin", state.params, {"epoch": state.epoch, "k": state.k})

    return hook


def _last(history: list[MetricRecord], attr: str):
    for rec in reversed(history):
        value = getattr(rec, attr)
        if value is not None:
            return value
    return None


def run_strategy(cfg: dict, strategy: str, seed: int | None = None, out: Path | None = None, **train_over) -> dict:
    """Train one strategy on the configured synthetic task.

    Returns a result dict holding the history, epoch logs, final parameters
    and summary numbers; writes ``metrics.jsonl``, ``epochs.jsonl``,
    ``checkpoint.bin`` and ``summary.json`` when ``out`` is given.
    """
    seed = cfg["seed"] if seed is None else seed
    spec = data_spec(cfg, seed)
    labeled, unlabeled = generate(spec)
    valid, test = generate_eval(spec)
    mcfg = model_config(cfg)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    every = cfg["checkpoint_every"]

    if strategy == "bljust":
        tcfg = train_config(cfg, "train", seed, **train_over)
        sched = PenaltySchedule(**cfg["penalty"])
        params, history, state = train_bljust(
            mcfg, labeled, unlabeled, tcfg, sched, valid=valid, on_epoch=_checkpointer(out, every, "bljust")
        )
        epoch_log = state.epoch_log
        total = state.elapsed()
    elif strategy == "supervised":
        tcfg = train_config(cfg, "finetune", seed, **train_over)
        params, history, state = train_supervised(
            mcfg, labeled, tcfg, valid=valid, on_epoch=_checkpointer(out, every, "supervised")
        )
        epoch_log = state.epoch_log
        total = state.elapsed()
    elif strategy == "ptft":
        cfg_pt = train_config(cfg, "pretrain", seed)
        cfg_ft = train_config(cfg, "finetune", seed, **train_over)
        params, h_pt, h_ft, s_pt, s_ft = train_ptft(
            mcfg, unlabeled, labeled, cfg_pt, cfg_ft, valid=valid, on_epoch=_checkpointer(out, every, "ptft")
        )
        history = h_pt + h_ft
        for entry in s_ft.epoch_log:
            entry["phase"] = "finetune"
        epoch_log = s_pt.epoch_log + s_ft.epoch_log
        total = s_ft.elapsed()
    else:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")

    last = history[-1] if history else None
    summary = {
        "strategy": strategy,
        "seed": seed,
        "steps": len(history),
        "epochs": len(epoch_log),
        "final_ctc_loss": _last(history, "ctc_loss"),
        "final_nce_loss": last.nce_loss if last is not None else None,
        "final_objective": last.objective if last is not None else None,
        "final_gamma": last.gamma if last is not None else None,
        "valid_ctc_loss": evaluate_ctc(params, valid, mcfg),
        "test_ctc_loss": evaluate_ctc(params, test, mcfg),
        "test_ter": evaluate_ter(params, test, mcfg),
        "valid_ter": evaluate_ter(params, valid, mcfg),
        "wall_clock_seconds": total,
    }
    if out is not None:
        _write_jsonl(out / "metrics.jsonl", history)
        _write_jsonl(out / "epochs.jsonl", epoch_log)
        save_checkpoint(out / "checkpoint.bin", params, {"strategy": strategy, "seed": seed})
        _write_json(out / "summary.json", summary)
    return {"summary": summary, "history": history, "epoch_log": epoch_log, "params": params}


# -- modes ---------------------------------------------------------------------------


def run_analytic(cfg: dict, out: Path | None = None) -> dict:
    a = cfg["analytic"]
    problem = make_affine_projection_problem(a["A"], a["b"], a["c"])
    delta = float(a["delta"])
    threshold = check_penalty_threshold(problem, delta, seed=a["seed"])
    gamma = 10.0 * threshold if a["gamma"] is None else float(a["gamma"])
    report = solve_penalized(
        problem,
        PenaltySchedule(initial_gamma=gamma, growth_rate=0.0, mode="constant"),
        SolverConfig(K=int(a["K"]), step_scale=float(a["step_scale"]), seed=a["seed"]),
    )
    report.extras.update({"gamma": gamma, "penalty_threshold": threshold, "delta": delta})
    summary = {
        "mode": "analytic",
        "gamma": gamma,
        "penalty_threshold": threshold,
        "delta": delta,
        "slope": report.slope,
        "distance_to_solution": report.distance_to_solution,
        "lower_gap": report.lower_gap,
        "upper_value": report.upper_value,
        "upper_value_star": report.upper_value_star,
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        report.to_json(out / "convergence.json")
        report.to_csv(out / "convergence.csv")
        _write_json(out / "summary.json", summary)
    return {"summary": summary, "report": report}


def run_sweep(cfg: dict, out: Path | None = None) -> dict:
    """Grid over (alpha, beta, growth_rate); median test TER over seeds per point."""
    sw = cfg["sweep"]
    seeds = sw["seeds"] or [cfg["seed"]]
    rows = []
    for i, (alpha, beta, rate) in enumerate(
        (a, b, r) for a in sw["alpha"] for b in sw["beta"] for r in sw["growth_rate"]
    ):
        point = copy.deepcopy(cfg)
        point["penalty"]["growth_rate"] = rate
        ters, ctcs = [], []
        for seed in seeds:
            sub = None if out is None else out / f"point{i:03d}" / f"seed{seed}"
            over = {"alpha": alpha, "beta": beta}
            res = run_strategy(point, sw["strategy"], seed, sub, **over)
            ters.append(res["summary"]["test_ter"])
            ctcs.append(res["summary"]["final_ctc_loss"])
        rows.append(
            {
                "point": i,
                "alpha": alpha,
                "beta": beta,
                "growth_rate": rate,
                "median_test_ter": float(np.median(ters)),
                "median_final_ctc_loss": float(np.median(ctcs)),
                "test_ter_per_seed": ters,
            }
        )
    best = min(rows, key=lambda r: (r["median_test_ter"], r["point"]))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["point", "alpha", "beta", "growth_rate", "median_test_ter", "median_final_ctc_loss", "best"])
            for r in rows:
                w.writerow(
                    [r["point"], r["alpha"], r["beta"], r["growth_rate"], r["median_test_ter"], r["median_final_ctc_loss"], int(r is best)]
                )
        _write_json(out / "summary.json", {"mode": "sweep", "seeds": seeds, "rows": rows, "best": best})
    return {"rows": rows, "best": best}


def loss_curve(result: dict) -> list[tuple[float, float]]:
    """(cumulative wall-clock, epoch-mean training CTC loss) at each supervised epoch end.

    Pre-training epochs carry no supervised loss and only advance the clock.
    """
    per_epoch: dict[int, list[float]] = {}
    for rec in result["history"]:
        if rec.phase != "pretrain" and rec.ctc_loss is not None:
            per_epoch.setdefault(rec.epoch, []).append(rec.ctc_loss)
    return [
        (entry["wall_clock_seconds"], float(np.mean(per_epoch[entry["epoch"]])))
        for entry in result["epoch_log"]
        if entry.get("phase") != "pretrain" and entry["epoch"] in per_epoch
    ]


def efficiency_ratio(fast: list[tuple[float, float]], slow: list[tuple[float, float]]) -> float:
    """Time ``fast`` needs to reach ``slow``'s final loss, over ``slow``'s total time.

    ``inf`` when ``fast`` never gets there.
    """
    if not slow:
        raise ValueError("empty reference curve")
    budget, target = slow[-1]
    for t, loss in fast:
        if loss <= target:
            return t / budget
    return math.inf


def run_compare(cfg: dict, out: Path | None = None) -> dict:
    curves = {}
    summaries = {}
    for strategy in cfg["compare"]["strategies"]:
        sub = None if out is None else out / strategy
        res = run_strategy(cfg, strategy, out=sub)
        curves[strategy] = loss_curve(res)
        summaries[strategy] = res["summary"]
    result = {"mode": "compare", "strategies": summaries}
    if "bljust" in curves and "ptft" in curves:
        result["bljust_time_to_ptft_final_loss_ratio"] = efficiency_ratio(curves["bljust"], curves["ptft"])
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "compare.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["strategy", "wall_clock_seconds", "ctc_loss"])
            for strategy, curve in curves.items():
                for t, loss in curve:
                    w.writerow([strategy, repr(t), repr(loss)])
        for strategy, curve in curves.items():
            with open(out / f"compare_{strategy}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["wall_clock_seconds", "ctc_loss"])
                w.writerows((repr(t), repr(loss)) for t, loss in curve)
        _write_json(out / "summary.json", result)
    result["curves"] = curves
    return result


def run_experiment(mode: str, cfg: dict, out: Path | None = None) -> dict:
    """Dispatch ``mode``; on failure leave an ``error.json`` next to partial artifacts."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; valid modes: {', '.join(MODES)}", "mode")
    start = time.perf_counter()
    try:
        if mode in STRATEGIES:
            return run_strategy(cfg, mode, out=out)
        if mode == "analytic":
            return run_analytic(cfg, out)
        if mode == "sweep":
            return run_sweep(cfg, out)
        return run_compare(cfg, out)
    except Exception as exc:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            _write_json(
                out / "error.json",
                {
                    "mode": mode,
                    "type": type(exc).__name__,
                    "message": str(exc),
                    "step": getattr(exc, "step", None),
                    "term": getattr(exc, "term", None),
                    "elapsed_seconds": time.perf_counter() - start,
                    "traceback": traceback.format_exc(),
                },
            )
        raise

