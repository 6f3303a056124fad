import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hflsec.datasets import synth_dataset
from hflsec.defenses import (
    MAD_CONSISTENCY,
    AtConfig,
    ReversedTrigger,
    adversarial_count,
    adversarial_training_hook,
    detect_backdoor,
    reverse_trigger,
    unlearn_backdoor,
)
from hflsec.learner import Classifier, TrainingHyper, client_update, dense_spec, init_params

SHAPE = (4, 4, 1)


def _triggers(norms):
    return [ReversedTrigger(k, np.zeros(SHAPE), np.zeros(SHAPE), float(v)) for k, v in enumerate(norms)]


def test_detect_single_small_outlier():
    rep = detect_backdoor(_triggers([10, 10, 10, 10, 1]))
    assert rep.flagged == [4]
    assert rep.median == 10 and rep.mad == 0
    assert math.isinf(rep.anomaly_index[4]) and rep.anomaly_index[0] == 0


def test_detect_worked_example():
    rep = detect_backdoor(_triggers([10, 12, 9, 11, 2]))
    assert rep.mad == pytest.approx(MAD_CONSISTENCY)
    assert rep.anomaly_index[4] == pytest.approx(8 / MAD_CONSISTENCY)
    assert rep.flagged == [4]


def test_large_norms_never_flagged():
    assert detect_backdoor(_triggers([10, 10, 12, 11, 30])).flagged == []


def test_all_equal_flags_nothing():
    assert detect_backdoor(_triggers([5, 5, 5, 5])).flagged == []


def test_detect_needs_three_classes():
    with pytest.raises(ValueError):
        detect_backdoor(_triggers([1, 2]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 100), min_size=3, max_size=8), st.randoms(use_true_random=False))
def test_detect_permutation_equivariant(norms, rnd):
    perm = list(range(len(norms)))
    rnd.shuffle(perm)
    base = detect_backdoor(_triggers(norms))
    moved = detect_backdoor(_triggers([norms[perm[i]] for i in range(len(norms))]))
    assert sorted(perm[i] for i in moved.flagged) == base.flagged


def _trained(seed=0):
    data = synth_dataset(3, 30, SHAPE, 0.1, seed)
    spec = dense_spec(SHAPE, 3, 8)
    w = client_update(spec, init_params(spec, seed), data, TrainingHyper(8, 5, 0.02), seed)
    return spec, w, data


def test_reverse_trigger_zero_steps_returns_initial():
    spec, w, data = _trained()
    t = reverse_trigger(Classifier(spec, w), data.x[:10], 1, steps=0, seed=3)
    again = reverse_trigger(Classifier(spec, w), data.x[:10], 1, steps=0, seed=3)
    assert np.array_equal(t.mask, again.mask)
    assert len(t.objective_history) == 1


def test_reverse_trigger_bounds_and_monotone_objective():
    spec, w, data = _trained(1)
    t = reverse_trigger(Classifier(spec, w), data.x[:20], 2, lam=0.01, steps=60, seed=0)
    assert t.mask.min() >= 0 and t.mask.max() <= 1
    assert t.pattern.min() >= 0 and t.pattern.max() <= 1
    objs = [o for _, o in t.objective_history]
    assert all(b <= a for a, b in zip(objs, objs[1:]))
    assert t.l1_mask_norm == pytest.approx(t.mask.sum())
    assert 0 <= t.success <= 1


def test_unlearn_zero_epochs_identity():
    spec, w, data = _trained()
    trig = ReversedTrigger(0, np.full(SHAPE, 0.5), np.ones(SHAPE), 8.0)
    out = unlearn_backdoor(spec, w, data, trig, TrainingHyper(epochs=0))
    assert np.array_equal(out, w)


def test_unlearn_keeps_labels_and_changes_weights():
    spec, w, data = _trained()
    trig = ReversedTrigger(0, np.full(SHAPE, 0.5), np.ones(SHAPE), 8.0)
    out = unlearn_backdoor(spec, w, data, trig, TrainingHyper(8, 1, 0.01), seed=2)
    assert out.shape == w.shape and not np.array_equal(out, w)


@pytest.mark.parametrize("frac,batch,count", [(0.5, 4, 2), (0.5, 3, 2), (0.5, 1, 1), (0.0, 8, 0), (1.0, 5, 5), (0.25, 6, 2)])
def test_adversarial_count(frac, batch, count):
    assert adversarial_count(frac, batch) == count


def test_at_hook_perturbs_leading_fraction_within_budget():
    spec, w, data = _trained()
    hook = adversarial_training_hook(AtConfig(eps=0.2, fraction=0.5))
    xb, yb = data.x[:4].copy(), data.y[:4].copy()
    out = hook(spec, w, xb, yb)
    assert np.array_equal(out[2:], xb[2:])
    assert np.all(np.abs(out[:2] - xb[:2]) <= 0.2)
    assert (out[:2] != xb[:2]).any()
    assert np.array_equal(yb, data.y[:4])


def test_at_disabled_or_zero_fraction_bit_identical():
    data = synth_dataset(3, 20, SHAPE, 0.2, 0)
    spec = dense_spec(SHAPE, 3, 8)
    hyper = TrainingHyper(8, 2, 0.01)
    base = client_update(spec, init_params(spec, 0), data, hyper, 9)
    zero = client_update(spec, init_params(spec, 0), data, hyper, 9, adversarial_training_hook(AtConfig(fraction=0.0)))
    assert np.array_equal(base, zero)
    assert adversarial_training_hook(AtConfig(enabled=False)) is None


def test_at_config_validation():
    with pytest.raises(ValueError):
        AtConfig(fraction=1.5)
    with pytest.raises(ValueError):
        AtConfig(generator="JSMA")
