import json

import numpy as np
import pytest

from hflsec.metrics import (
    EmptyAfterFilterError,
    EmptyEvalSetError,
    MetricsReport,
    RoundRecord,
    misclassification_rate,
    tasr,
)


class TableModel:
    """Returns a fixed probability row per input, looked up by x[0]."""

    def __init__(self, probs):
        self.probs = np.asarray(probs)

    def predict_proba(self, x):
        idx = np.asarray(x)[:, 0].astype(int)
        return self.probs[idx]


def _fixture(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 40))
    k = int(rng.integers(2, 6))
    probs = rng.random((n, k))
    if seed % 5 == 0:
        probs[:, :2] = probs[:, :1]  # ties between class 0 and 1
    x = np.arange(n, dtype=float)[:, None]
    y = rng.integers(0, k, n)
    return TableModel(probs), x, y, k


def _brute_pred(row):
    best = 0
    for j in range(1, len(row)):
        if row[j] > row[best]:
            best = j
    return best


@pytest.mark.parametrize("seed", range(50))
def test_mr_and_tasr_match_brute_force(seed):
    model, x, y, k = _fixture(seed)
    preds = [_brute_pred(model.probs[i]) for i in range(len(y))]
    wrong = sum(1 for p, t in zip(preds, y) if p != t)
    assert misclassification_rate(model, x, y) == wrong / len(y)
    target = seed % k
    kept = [i for i in range(len(y)) if y[i] != target]
    if not kept:
        with pytest.raises(EmptyAfterFilterError):
            tasr(model, x, y, target)
        return
    hits = sum(1 for i in kept if preds[i] == target)
    assert tasr(model, x, y, target) == hits / len(kept)


def test_tasr_filter_excludes_target_class():
    probs = np.array([[0.9, 0.1], [0.9, 0.1], [0.2, 0.8], [0.7, 0.3]])
    model = TableModel(probs)
    x = np.arange(4, dtype=float)[:, None]
    y = np.array([0, 0, 1, 1])
    # examples 0 and 1 are truly class 0 and are dropped; of the rest one hits
    assert tasr(model, x, y, 0) == 0.5


def test_empty_inputs_raise():
    model = TableModel(np.array([[1.0, 0.0]]))
    with pytest.raises(EmptyEvalSetError):
        misclassification_rate(model, np.zeros((0, 1)), np.zeros(0, dtype=int))
    with pytest.raises(EmptyAfterFilterError):
        tasr(model, np.zeros((1, 1)), np.array([0]), 0)


def test_report_round_trip_and_csv():
    rep = MetricsReport("abc", "d" * 8, 3, [RoundRecord(1, 0.5), RoundRecord(2, 0.25, 0.75, 0.1)], {"x": float("inf")})
    rep.validate()
    d = json.loads(rep.to_json())
    assert d["summary"]["x"] == "inf"
    back = MetricsReport.from_dict(d)
    assert back.rounds == rep.rounds
    lines = rep.to_csv().splitlines()
    assert lines[0] == "round,clean_mr,adv_mr,tasr"
    assert lines[1] == "1,0.5,,"
    assert lines[2] == "2,0.25,0.75,0.1"


def test_report_validation():
    with pytest.raises(ValueError):
        MetricsReport("a", "b", 0, [RoundRecord(2, 0.1)]).validate()
    with pytest.raises(ValueError):
        MetricsReport("a", "b", 0, [RoundRecord(1, 1.5)]).validate()
