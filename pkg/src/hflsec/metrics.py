"""Misclassification rate, targeted attack success rate, per-round reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np


class EmptyEvalSetError(ValueError):
    pass


class EmptyAfterFilterError(EmptyEvalSetError):
    """Every example was already labelled with the attack target."""


def _predictions(model, x) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    return np.argmax(np.atleast_2d(model.predict_proba(x)), axis=1)


def misclassification_rate(model, x, y) -> float:
    """Fraction of inputs whose predicted class differs from ``y``."""
    y = np.asarray(y)
    if y.size == 0:
        raise EmptyEvalSetError("misclassification rate of an empty set")
    return float(np.mean(_predictions(model, x) != y))


def tasr(model, x_adv, y_true, target: int) -> float:
    """Fraction of triggered inputs, truly not of class ``target``, predicted as ``target``."""
    y_true = np.asarray(y_true)
    keep = y_true != target
    if not keep.any():
        raise EmptyAfterFilterError(f"no examples left after removing true class {target}")
    pred = _predictions(model, np.asarray(x_adv)[keep])
    return float(np.mean(pred == target))


@dataclass
class RoundRecord:
    round: int
    clean_mr: float
    adv_mr: float | None = None
    tasr: float | None = None


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


@dataclass
class MetricsReport:
    run_id: str
    config_digest: str
    seed: int
    rounds: list[RoundRecord] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def validate(self) -> None:
        for i, r in enumerate(self.rounds, start=1):
            if r.round != i:
                raise ValueError(f"round numbers must run 1..T, found {r.round} at position {i}")
            for v in (r.clean_mr, r.adv_mr, r.tasr):
                if v is not None and not 0.0 <= v <= 1.0:
                    raise ValueError(f"round {r.round}: metric {v} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "rounds": [asdict(r) for r in self.rounds],
            "summary": self.summary,
        }

    def to_json(self) -> str:
        return json.dumps(_finite(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "clean_mr", "adv_mr", "tasr"])
        for r in self.rounds:
            w.writerow([r.round, _fmt(r.clean_mr), _fmt(r.adv_mr), _fmt(r.tasr)])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            d["run_id"],
            d["config_digest"],
            d["seed"],
            [RoundRecord(**r) for r in d["rounds"]],
            d.get("summary", {}),
        )


def _finite(obj):
    """Replace non-finite floats with strings so the JSON stays standard."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj
