import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hflsec.datasets import Dataset, dirichlet_partition, synth_dataset
from hflsec.hfl import (
    AggregationSchedule,
    AttackHooks,
    Federation,
    HflConfigError,
    LearnerContext,
    SelectionPolicy,
    aggregate,
    run_hfl,
    select_clients,
    weighted_average,
)
from hflsec.learner import TrainingHyper, dense_spec, init_params, loss_and_param_grad
from hflsec.topology import NodeId, TopologyConfig, build_tree, place_overlap_clients

SHAPE = (4, 4, 1)


def _shards(tree, per_client=6, seed=0, classes=3):
    data = synth_dataset(classes, per_client * len(tree.clients), SHAPE, 0.2, seed)
    plan = dirichlet_partition(data, len(tree.clients), 1.0, seed)
    return {c: s for c, s in zip(tree.clients, plan.shards(data))}


def test_weighted_average_examples():
    assert np.allclose(weighted_average([(np.array([1.0, 3.0]), 1), (np.array([3.0, 5.0]), 3)]), [2.5, 4.5])
    assert np.allclose(weighted_average([(np.array([1.0]), 2), (np.array([3.0]), 2)]), [2.0])
    assert np.array_equal(weighted_average([(np.array([1.5, -2.0]), 7)]), [1.5, -2.0])


@pytest.mark.parametrize(
    "bad", [[], [(np.zeros(2), 1), (np.zeros(3), 1)], [(np.zeros(2), 0)], [(np.zeros(2), -1)]]
)
def test_weighted_average_errors(bad):
    with pytest.raises(ValueError):
        weighted_average(bad)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.tuples(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(0.1, 10)), min_size=1, max_size=6),
    st.floats(0.01, 100),
    st.randoms(use_true_random=False),
)
def test_weighted_average_permutation_and_scale_invariant(items, c, rnd):
    ups = [(np.array(v), w) for v, w in items]
    base = weighted_average(ups)
    shuffled = list(ups)
    rnd.shuffle(shuffled)
    assert np.allclose(weighted_average(shuffled), base, atol=1e-9)
    assert np.allclose(weighted_average([(v, w * c) for v, w in ups]), base, atol=1e-9)


def test_selection_full_participation():
    cov = {NodeId(2, i) for i in range(5)}
    assert select_clients(cov, SelectionPolicy(1.0)) == sorted(cov)


def test_selection_ceiling_and_fixed_mode():
    cov = {NodeId(2, i) for i in range(5)}
    pol = SelectionPolicy(0.4, "fixed", 3)
    a = select_clients(cov, pol, 1)
    assert len(a) == 2
    assert select_clients(cov, pol, 2) == a


def test_selection_resample_changes_over_rounds():
    cov = {NodeId(2, i) for i in range(20)}
    pol = SelectionPolicy(0.25, "resample", 3)
    sets = {tuple(select_clients(cov, pol, t)) for t in range(1, 8)}
    assert len(sets) > 1


def test_schedule_round_counts():
    assert AggregationSchedule((20, 2)).regional_rounds() == 40
    assert AggregationSchedule((20, 3, 2)).regional_rounds() == 120
    with pytest.raises(HflConfigError):
        AggregationSchedule((20, 0))


def _client_step_oracle(spec, w, shard, lr):
    _, g = loss_and_param_grad(spec, w, shard.x, shard.y)
    return w - lr * g


def test_two_level_two_client_oracle():
    tree = build_tree(TopologyConfig(2, [2]))
    data = synth_dataset(3, 4, SHAPE, 0.2, 1)
    shards = {tree.clients[0]: data.subset(range(0, 6)), tree.clients[1]: data.subset(range(6, 12))}
    spec = dense_spec(SHAPE, 3, hidden=4)
    hyper = TrainingHyper(batch_size=10_000, epochs=1, learning_rate=0.1, optimizer="sgd")
    w0 = init_params(spec, 7)
    ctx = LearnerContext(spec, hyper, shards, run_seed=5)
    out = aggregate(tree, tree.root, w0, AggregationSchedule((1,)), SelectionPolicy(), None, ctx)
    oracle = 0.5 * (_client_step_oracle(spec, w0, shards[tree.clients[0]], 0.1)
                    + _client_step_oracle(spec, w0, shards[tree.clients[1]], 0.1))
    assert np.max(np.abs(out - oracle)) <= 1e-12


def test_unequal_shard_weights_oracle():
    tree = build_tree(TopologyConfig(2, [2]))
    data = synth_dataset(3, 4, SHAPE, 0.2, 1)
    a, b = data.subset(range(0, 3)), data.subset(range(3, 12))
    spec = dense_spec(SHAPE, 3, hidden=4)
    hyper = TrainingHyper(batch_size=10_000, learning_rate=0.1, optimizer="sgd")
    w0 = init_params(spec, 7)
    ctx = LearnerContext(spec, hyper, {tree.clients[0]: a, tree.clients[1]: b})
    out = aggregate(tree, tree.root, w0, AggregationSchedule((1,)), SelectionPolicy(), None, ctx)
    oracle = (3 * _client_step_oracle(spec, w0, a, 0.1) + 9 * _client_step_oracle(spec, w0, b, 0.1)) / 12
    assert np.max(np.abs(out - oracle)) <= 1e-12


@pytest.mark.parametrize("levels,fanouts,rounds", [(2, [4], (3,)), (3, [2, 3], (2, 2)), (4, [2, 2, 2], (2, 2, 1))])
def test_zero_learning_rate_is_fixed_point(levels, fanouts, rounds):
    tree = build_tree(TopologyConfig(levels, fanouts))
    spec = dense_spec(SHAPE, 3, hidden=4)
    w0 = init_params(spec, 1)
    ctx = LearnerContext(spec, TrainingHyper(learning_rate=0.0), _shards(tree))
    out = aggregate(tree, tree.root, w0, AggregationSchedule(rounds), SelectionPolicy(), None, ctx)
    assert np.allclose(out, w0, rtol=0, atol=1e-14)


def test_identical_updates_are_idempotent():
    tree = build_tree(TopologyConfig(4, [2, 2, 2]))
    spec = dense_spec(SHAPE, 3, hidden=4)
    u = init_params(spec, 9)
    hooks = AttackHooks(post_local_training=lambda c, w: u)
    ctx = LearnerContext(spec, TrainingHyper(), _shards(tree))
    out = aggregate(tree, tree.root, init_params(spec, 1), AggregationSchedule((1, 1, 1)), SelectionPolicy(), hooks, ctx)
    assert np.allclose(out, u, atol=1e-14)


def _count_run(levels, fanouts, rounds):
    tree = build_tree(TopologyConfig(levels, fanouts))
    spec = dense_spec(SHAPE, 3, hidden=2)
    ctx = LearnerContext(spec, TrainingHyper(learning_rate=0.0), _shards(tree, per_client=2))
    fed = Federation(tree, AggregationSchedule(rounds), SelectionPolicy(), None, ctx)
    fed.aggregate(tree.root, init_params(spec, 0))
    return fed


def test_default_schedules_round_counts():
    three = _count_run(3, [20, 5], (20, 2))
    assert three.regional_rounds == 40
    assert all(v == 40 for v in three.round_counts.values())
    assert len(three.round_counts) == 20
    four = _count_run(4, [4, 5, 5], (20, 3, 2))
    assert four.regional_rounds == 120
    assert all(v == 120 for v in four.round_counts.values())


def test_overlap_accounting():
    tree = place_overlap_clients(build_tree(TopologyConfig(3, [2, 2])), 1, 0, clients=[NodeId(2, 1)])
    shards = _shards(tree)
    spec = dense_spec(SHAPE, 3, hidden=2)
    fed = Federation(tree, AggregationSchedule((1, 1)), SelectionPolicy(), None, LearnerContext(spec, TrainingHyper(), shards))
    total = sum(len(s) for s in shards.values())
    mass = sum(fed.sizes[s] for s in tree.regional_servers)
    assert mass == total + len(shards[NodeId(2, 1)])
    assert fed.sizes[NodeId(1, 1)] == len(shards[NodeId(2, 1)]) + len(shards[NodeId(2, 2)]) + len(shards[NodeId(2, 3)])


def test_overlap_weighted_twice_in_oracle():
    # overlap client 1 trains under both regionals; cloud mass counts it twice
    tree = place_overlap_clients(build_tree(TopologyConfig(3, [2, 2])), 1, 0, clients=[NodeId(2, 1)])
    shards = _shards(tree)
    spec = dense_spec(SHAPE, 3, hidden=2)
    hyper = TrainingHyper(batch_size=10_000, learning_rate=0.1, optimizer="sgd")
    w0 = init_params(spec, 3)
    ctx = LearnerContext(spec, hyper, shards)
    out = aggregate(tree, tree.root, w0, AggregationSchedule((1, 1)), SelectionPolicy(), None, ctx)
    step = {c: _client_step_oracle(spec, w0, shards[c], 0.1) for c in tree.clients}
    n = {c: len(shards[c]) for c in tree.clients}
    c0, c1, c2, c3 = tree.clients
    r0 = (n[c0] * step[c0] + n[c1] * step[c1]) / (n[c0] + n[c1])
    r1 = (n[c1] * step[c1] + n[c2] * step[c2] + n[c3] * step[c3]) / (n[c1] + n[c2] + n[c3])
    m0, m1 = n[c0] + n[c1], n[c1] + n[c2] + n[c3]
    assert np.max(np.abs(out - (m0 * r0 + m1 * r1) / (m0 + m1))) <= 1e-12


@pytest.mark.parametrize("workers", [1, 3])
def test_overlap_jobs_ordered_by_parent(workers):
    base = build_tree(TopologyConfig(3, [4, 3]))
    tree = place_overlap_clients(base, 4, 11)
    spec = dense_spec(SHAPE, 3, hidden=2)
    ctx = LearnerContext(spec, TrainingHyper(), _shards(tree), workers=workers)
    fed = Federation(tree, AggregationSchedule((2, 2)), SelectionPolicy(), None, ctx, record_trace=True)
    fed.aggregate(tree.root, init_params(spec, 0))
    for c in tree.overlap:
        jobs = [(i, parent, path) for i, (client, parent, path) in enumerate(fed.jobs) if client == c]
        assert len(jobs) == 2 * 2 * 2
        for t in range(1, 3):
            for u in range(1, 3):
                parents = [p.index for _, p, path in jobs if path == (t, u)]
                assert parents == sorted(parents) and len(parents) == 2


def _tiny_run(workers, seed=4):
    tree = place_overlap_clients(build_tree(TopologyConfig(4, [2, 2, 3])), 2, 1)
    data = synth_dataset(3, 40, SHAPE, 0.3, 0)
    test = synth_dataset(3, 10, SHAPE, 0.3, 1)
    shards = dict(zip(tree.clients, dirichlet_partition(data, len(tree.clients), 0.5, 2).shards(data)))
    spec = dense_spec(SHAPE, 3, hidden=8)
    return run_hfl(tree, AggregationSchedule((3, 2, 2)), SelectionPolicy(0.7, "resample", 1), None, shards,
                   spec, TrainingHyper(batch_size=4, learning_rate=0.02), test, seed, workers=workers,
                   record_trace=True)


def test_run_hfl_deterministic_across_workers():
    a, b, c = _tiny_run(1), _tiny_run(1), _tiny_run(3)
    assert a.report.to_json() == b.report.to_json() == c.report.to_json()
    assert np.array_equal(a.params, c.params)
    assert [t.digest for t in a.federation.traces] == [t.digest for t in c.federation.traces]
    assert len(a.report.rounds) == 3


def test_run_hfl_seed_matters():
    assert not np.array_equal(_tiny_run(1, seed=4).params, _tiny_run(1, seed=5).params)


def test_setup_errors_before_training():
    tree = build_tree(TopologyConfig(3, [2, 2]))
    shards = _shards(tree)
    spec = dense_spec(SHAPE, 3)
    with pytest.raises(HflConfigError):
        Federation(tree, AggregationSchedule((2,)), SelectionPolicy(), None, LearnerContext(spec, TrainingHyper(), shards))
    shards.pop(tree.clients[0])
    with pytest.raises(HflConfigError):
        Federation(tree, AggregationSchedule((2, 2)), SelectionPolicy(), None, LearnerContext(spec, TrainingHyper(), shards))
    with pytest.raises(HflConfigError):
        aggregate(tree, tree.clients[1], init_params(spec, 0), AggregationSchedule((2, 2)), SelectionPolicy(), None,
                  LearnerContext(spec, TrainingHyper(), _shards(tree)))


def test_server_hook_sees_every_regional_round():
    tree = build_tree(TopologyConfig(3, [3, 2]))
    seen = []
    hooks = AttackHooks(post_server_aggregate=lambda s, w: seen.append(s) or w)
    spec = dense_spec(SHAPE, 3, hidden=2)
    ctx = LearnerContext(spec, TrainingHyper(), _shards(tree))
    aggregate(tree, tree.root, init_params(spec, 0), AggregationSchedule((2, 3)), SelectionPolicy(), hooks, ctx)
    assert len(seen) == 3 * 2 * 3
    assert set(seen) == set(tree.regional_servers)


def test_three_level_convergence_mostly_improves():
    tree = build_tree(TopologyConfig(3, [4, 5]))
    data = synth_dataset(3, 100, (6, 6, 1), 0.35, 0)
    test = synth_dataset(3, 60, (6, 6, 1), 0.35, 1)
    shards = dict(zip(tree.clients, dirichlet_partition(data, 20, 0.5, 0).shards(data)))
    spec = dense_spec((6, 6, 1), 3, hidden=16)
    res = run_hfl(tree, AggregationSchedule((20, 2)), SelectionPolicy(), None, shards, spec,
                  TrainingHyper(batch_size=16, learning_rate=0.005), test, 0)
    mrs = [r.clean_mr for r in res.report.rounds]
    assert mrs[-1] < mrs[0]
    assert sum(b <= a for a, b in zip(mrs, mrs[1:])) >= 15
