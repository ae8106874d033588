"""Greedy category-by-category hyperparameter sweep.

Categories are evaluated in plan order. Within a category every candidate is
applied on top of the current best configuration; the best candidate is
adopted only when it strictly beats the incumbent's averaged score, and an
adopted setting persists into all later categories.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .trainer import _MODEL_FILE_KEYS, train_config_from_dict

SCORE_ORDER = (
    "ate_val",
    "joint_val",
    "ate_test",
    "joint_test",
    "ate_restaurant",
    "ate_laptop",
    "aec_affect",
)

INTERNAL_SCORES = SCORE_ORDER[:4]
EXTERNAL_SCORES = SCORE_ORDER[4:]


@dataclass(frozen=True)
class ScoreVector:
    """Seven F1 percentages: four internal (ATE/joint on validation and test)
    and three external validation scores, which are None when the optional
    adapter datasets are not supplied."""

    ate_val: float
    joint_val: float
    ate_test: float
    joint_test: float
    ate_restaurant: float | None = None
    ate_laptop: float | None = None
    aec_affect: float | None = None

    def __post_init__(self) -> None:
        for name in SCORE_ORDER:
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 100.0):
                raise ValueError(f"{name} must lie in [0, 100], got {v}")

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in SCORE_ORDER}


def averaged_performance(scores: ScoreVector, allow_missing_external: bool = False) -> float:
    """Arithmetic mean of the seven scores. Missing external entries are an
    error unless explicitly allowed, in which case they are zero-filled."""
    values = []
    for name in SCORE_ORDER:
        v = getattr(scores, name)
        if v is None:
            if not allow_missing_external:
                raise ValueError(
                    f"score {name!r} is missing; pass allow_missing_external=True "
                    "to zero-fill external entries"
                )
            v = 0.0
        values.append(v)
    return sum(values) / len(values)


def internal_performance(scores: ScoreVector) -> float:
    """Mean of the four internal scores (the objective when no external
    validation data is plugged in)."""
    return sum(getattr(scores, name) for name in INTERNAL_SCORES) / len(INTERNAL_SCORES)


@dataclass(frozen=True)
class Category:
    name: str
    candidates: tuple[dict, ...]


@dataclass(frozen=True)
class SweepPlan:
    categories: tuple[Category, ...]


_VALID_PREFIXES = ("model.", "train.")


def _validate_delta(delta: dict) -> None:
    for key in delta:
        if not key.startswith(_VALID_PREFIXES):
            raise ValueError(f"delta key {key!r} must start with 'model.' or 'train.'")
    # round-trip through the config parsers so typos fail at plan load time
    model_d = {k[len("model."):]: v for k, v in delta.items() if k.startswith("model.")}
    unknown = set(model_d) - set(_MODEL_FILE_KEYS)
    if unknown:
        raise ValueError(f"unknown model keys in delta: {sorted(unknown)}")
    train_d = {k[len("train."):]: v for k, v in delta.items() if k.startswith("train.")}
    train_config_from_dict(train_d)


def load_plan(path: str | Path) -> SweepPlan:
    with Path(path).open(encoding="utf-8") as fh:
        obj = json.load(fh)
    cats = []
    for c in obj.get("categories", []):
        candidates = tuple(dict(d) for d in c["candidates"])
        for d in candidates:
            _validate_delta(d)
        cats.append(Category(name=str(c["name"]), candidates=candidates))
    if not cats:
        raise ValueError("sweep plan has no categories")
    return SweepPlan(categories=tuple(cats))


def apply_delta(config: dict, delta: dict) -> dict:
    """New {"model": ..., "train": ...} config dict with the delta applied."""
    out = {"model": dict(config.get("model", {})), "train": dict(config.get("train", {}))}
    for key, value in delta.items():
        section, field_name = key.split(".", 1)
        out[section][field_name] = value
    return out


def greedy_sweep(
    plan: SweepPlan,
    base_config: dict,
    evaluator: Callable[[dict], ScoreVector],
    use_external: bool = True,
) -> tuple[dict, list[dict]]:
    """Sweep the plan, returning (best config, log). The objective is the
    seven-score average, or the internal four-score mean when external
    datasets are not in play."""
    if not plan.categories:
        raise ValueError("empty sweep plan")

    objective_name = "averaged_performance_7" if use_external else "internal_mean_4"

    def objective(scores: ScoreVector) -> float:
        if use_external:
            return averaged_performance(scores)
        return internal_performance(scores)

    incumbent = {"model": dict(base_config.get("model", {})), "train": dict(base_config.get("train", {}))}
    inc_scores = evaluator(incumbent)
    inc_avg = objective(inc_scores)
    log = [
        {
            "category": "<base>",
            "delta": {},
            "scores": inc_scores.to_dict(),
            "average": inc_avg,
            "adopted": True,
            "objective": objective_name,
        }
    ]
    for category in plan.categories:
        best_delta = None
        best_avg = None
        cat_entries = []
        for delta in category.candidates:
            cfg = apply_delta(incumbent, delta)
            scores = evaluator(cfg)
            avg = objective(scores)
            cat_entries.append(
                {
                    "category": category.name,
                    "delta": dict(delta),
                    "scores": scores.to_dict(),
                    "average": avg,
                    "adopted": False,
                    "objective": objective_name,
                }
            )
            if best_avg is None or avg > best_avg:
                best_delta, best_avg = delta, avg
        if best_delta is not None and best_avg > inc_avg:
            incumbent = apply_delta(incumbent, best_delta)
            inc_avg = best_avg
            for e in cat_entries:
                if e["delta"] == dict(best_delta):
                    e["adopted"] = True
                    break
        log.extend(cat_entries)
    return incumbent, log


def write_sweep_log(path: str | Path, entries: Sequence[dict]) -> None:
    from .ioutil import atomic_write_text

    lines = [json.dumps(e, sort_keys=True) for e in entries]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))
