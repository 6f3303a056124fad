"""Build a run from a ``RunConfig``, execute it and write its artifacts."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .attacks import (
    AttackScenario,
    ItaConfig,
    TriggerSpec,
    apply_tlf,
    apply_ulf,
    backdoor_eval_set,
    build_hooks,
    generate,
    merge_hooks,
    pick_servers,
)
from .config import DEFAULT_FANOUTS, DEFAULT_ROUNDS, RunConfig, load_config, with_overrides
from .datasets import Dataset, dirichlet_partition, load_idx, synth_dataset
from .defenses import AtConfig, adversarial_training_hook, neural_cleanse
from .hfl import AggregationSchedule, AttackHooks, BackdoorProbe, SelectionPolicy, run_hfl
from .learner import (
    Classifier,
    Conv,
    Dense,
    ModelSpec,
    ReLU,
    Softmax,
    TrainingHyper,
    cifar_cnn_spec,
    dense_spec,
    mnist_cnn_spec,
    save_params,
)
from .metrics import MetricsReport, misclassification_rate, tasr
from .topology import NodeId, TopologyConfig, build_tree, pick_clients, place_overlap_clients

log = logging.getLogger(__name__)

WORKERS_ENV = "HFLSEC_WORKERS"

# architecture shorthands usable as a sweep axis
ARCHS = {
    "cml": {"topology": {"levels": 2, "fanouts": [1], "overlap_clients": 0}, "schedule": {"rounds": [20]},
            "dataset": {"owners": 100}, "attack": {"overlap": False}},
    "2l": {"topology": {"levels": 2, "fanouts": [100], "overlap_clients": 0}, "schedule": {"rounds": [20]}, "attack": {"overlap": False}},
    "3l": {"topology": {"levels": 3, "fanouts": [20, 5], "overlap_clients": 0}, "schedule": {"rounds": [20, 2]}, "attack": {"overlap": False}},
    "4l": {"topology": {"levels": 4, "fanouts": [4, 5, 5], "overlap_clients": 0}, "schedule": {"rounds": [20, 3, 2]}, "attack": {"overlap": False}},
    "3lo": {"topology": {"levels": 3, "fanouts": [20, 5], "overlap_clients": 10}, "schedule": {"rounds": [20, 2]}, "attack": {"overlap": True}},
    "4lo": {"topology": {"levels": 4, "fanouts": [4, 5, 5], "overlap_clients": 10}, "schedule": {"rounds": [20, 3, 2]}, "attack": {"overlap": True}},
}


def env_workers(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, default)))
    except ValueError:
        return default


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0] >> 1)


def build_model_spec(cfg: RunConfig, shape, classes: int) -> ModelSpec:
    m = cfg.model
    if m.kind == "dense":
        return dense_spec(shape, classes, m.hidden)
    if m.kind == "mnist_cnn":
        return mnist_cnn_spec(shape, classes)
    if m.kind == "cifar_cnn":
        return cifar_cnn_spec(shape, classes)
    layers = []
    for i, entry in enumerate(m.layers):
        if len(entry) != 1:
            raise ValueError(f"model.layers.{i}: each layer is a one-key mapping")
        (name, arg), = entry.items()
        if name == "dense":
            layers.append(Dense(int(arg)))
        elif name == "relu":
            layers.append(ReLU())
        elif name == "softmax":
            layers.append(Softmax(int(arg)))
        elif name == "conv":
            arg = arg if isinstance(arg, dict) else {"channels": arg}
            layers.append(Conv(int(arg["channels"]), int(arg.get("kernel", 3)), bool(arg.get("pool", False))))
        else:
            raise ValueError(f"model.layers.{i}: unknown layer {name!r}")
    spec = ModelSpec(tuple(shape), tuple(layers))
    if spec.num_classes != classes:
        raise ValueError(f"model.layers: softmax has {spec.num_classes} classes, dataset has {classes}")
    return spec


@dataclass
class DataBundle:
    train: Dataset
    test: Dataset
    holdout: Dataset


def load_data(cfg: RunConfig) -> DataBundle:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        shape = tuple(ds.shape)
        return DataBundle(
            synth_dataset(ds.classes, ds.per_class, shape, ds.noise, _seed(ds.seed, 0)),
            synth_dataset(ds.classes, ds.test_per_class, shape, ds.noise, _seed(ds.seed, 1)),
            synth_dataset(ds.classes, ds.holdout_per_class, shape, ds.noise, _seed(ds.seed, 2)),
        )
    train = load_idx(ds.images, ds.labels, ds.classes)
    test = load_idx(ds.test_images, ds.test_labels, ds.classes)
    if ds.test_limit:
        test = test.subset(np.arange(min(ds.test_limit, len(test))))
    rest, hold = np.arange(len(train) - ds.holdout), np.arange(len(train) - ds.holdout, len(train))
    if ds.train_limit:
        rest = rest[: ds.train_limit]
    return DataBundle(train.subset(rest), test, train.subset(hold))


@dataclass
class Setup:
    cfg: RunConfig
    tree: object
    data: DataBundle
    spec: ModelSpec
    hyper: TrainingHyper
    schedule: AggregationSchedule
    policy: SelectionPolicy
    shards: dict
    hooks: AttackHooks
    scenario: AttackScenario
    trigger: TriggerSpec | None


def _trigger(cfg: RunConfig) -> TriggerSpec:
    t = cfg.attack.trigger
    return TriggerSpec(t.row, t.col, t.size, t.value, t.target, t.fraction, t.source)


def _chosen(spec_value, pool: list, seed: int, picker) -> list:
    if isinstance(spec_value, int):
        return picker(spec_value, seed)
    return [pool[i] for i in sorted(spec_value)]


def prepare(cfg: RunConfig) -> Setup:
    """Everything needed to run, before any training happens."""
    topo, atk = cfg.topology, cfg.attack
    data = load_data(cfg)
    tree = build_tree(TopologyConfig(topo.levels, tuple(topo.fanouts), 0, topo.clients))
    n_clients = len(tree.clients)
    owners = cfg.dataset.owners or n_clients
    plan = dirichlet_partition(data.train, owners, cfg.dataset.alpha, _seed(cfg.dataset.seed, 3))
    owner_shards = plan.shards(data.train)
    attack_seed = cfg.seed if atk.seed is None else atk.seed
    trigger = _trigger(cfg) if (atk.kind == "TLF" or cfg.defense.nc.enabled) else None

    malicious_clients: list[NodeId] = []
    malicious_servers: list[NodeId] = []
    if atk.kind in ("TLF", "ULF", "CSF") and owners == n_clients:
        malicious_clients = _chosen(
            atk.malicious_clients, tree.clients, attack_seed, lambda k, s: pick_clients(tree, k, s)
        )
    elif atk.kind in ("TLF", "ULF"):
        # several data owners per client (centralized comparator): poison the
        # chosen owners' data up front, since no client is wholly malicious
        rng_pick = np.random.default_rng(attack_seed)
        bad = (
            sorted(rng_pick.choice(owners, size=atk.malicious_clients, replace=False).tolist())
            if isinstance(atk.malicious_clients, int)
            else sorted(atk.malicious_clients)
        )
        for o in bad:
            seed = (attack_seed, n_clients, o)
            owner_shards[o] = (
                apply_tlf(owner_shards[o], trigger, seed) if atk.kind == "TLF" else apply_ulf(owner_shards[o], seed)
            )
    elif atk.kind == "CSF":
        raise ValueError("attack.kind: CSF needs one data owner per client")
    elif atk.kind == "SSF":
        malicious_servers = _chosen(
            atk.malicious_servers, tree.regional_servers, attack_seed, lambda k, s: pick_servers(tree, k, s)
        )

    if atk.overlap and malicious_clients:
        tree = place_overlap_clients(tree, len(malicious_clients), attack_seed, clients=malicious_clients)
    elif topo.overlap_clients:
        tree = place_overlap_clients(tree, topo.overlap_clients, _seed(cfg.seed, 4))

    per = owners // n_clients
    shards = {
        c: Dataset.concat(owner_shards[i * per : (i + 1) * per]) if per > 1 else owner_shards[i]
        for i, c in enumerate(tree.clients)
    }
    scenario = AttackScenario(atk.kind, malicious_clients, malicious_servers, trigger, attack_seed)
    scenario.validate_against(tree)
    hooks = build_hooks(scenario)
    at = cfg.defense.at
    if at.enabled:
        at_hooks = AttackHooks(batch_transform=adversarial_training_hook(
            AtConfig(at.generator, at.eps, at.fraction, at.steps, at.alpha)
        ))
        hooks = merge_hooks([hooks, at_hooks])
    h = cfg.hyper
    return Setup(
        cfg,
        tree,
        data,
        build_model_spec(cfg, data.train.shape, data.train.num_classes),
        TrainingHyper(h.batch_size, h.epochs, h.learning_rate, h.optimizer, h.beta1, h.beta2, h.eps),
        AggregationSchedule(tuple(cfg.schedule.rounds)),
        SelectionPolicy(cfg.selection.cp, cfg.selection.mode, cfg.seed if cfg.selection.seed is None else cfg.selection.seed),
        shards,
        hooks,
        scenario,
        trigger,
    )


def _ita_config(cfg: RunConfig) -> ItaConfig:
    i = cfg.ita
    return ItaConfig(
        i.kind, i.eps, i.alpha, i.steps, i.random_start, i.theta, i.gamma, i.p_init, i.iterations,
        tuple(i.rotations), tuple(i.translations), i.patch_size, i.patch_iterations, i.patch_lr,
        i.target, cfg.seed if i.seed is None else i.seed,
    )


@dataclass
class RunOutcome:
    report: MetricsReport
    params: np.ndarray
    setup: Setup
    anomaly: dict | None = None
    files: dict = field(default_factory=dict)


def execute(cfg: RunConfig, workers: int | None = None) -> RunOutcome:
    """Run a scenario in memory: training, then ITA and NC if configured."""
    setup = prepare(cfg)
    test = setup.data.test
    probe = None
    if cfg.attack.kind == "TLF":
        bx, by = backdoor_eval_set(test.x, test.y, setup.trigger)
        probe = BackdoorProbe(bx, by, setup.trigger.target)
    digest = cfg.digest()
    result = run_hfl(
        setup.tree, setup.schedule, setup.policy, setup.hooks, setup.shards, setup.spec, setup.hyper,
        test, cfg.seed, backdoor=probe,
        workers=workers or cfg.workers or 1,
        run_id=digest[:12], config_digest=digest,
    )
    report, params = result.report, result.params
    if cfg.attack.kind != "none":
        report.summary["attack"] = cfg.attack.kind
        report.summary["malicious_clients"] = [c.index for c in sorted(setup.scenario.malicious_clients)]
        report.summary["malicious_servers"] = [s.index for s in sorted(setup.scenario.malicious_servers)]
    if setup.tree.overlap:
        report.summary["overlap_clients"] = [c.index for c in sorted(setup.tree.overlap)]

    if cfg.ita.kind != "none":
        n = cfg.ita.samples or len(test)
        model = Classifier(setup.spec, params)
        x_adv = generate(model, _ita_config(cfg), test.x[:n], test.y[:n])
        adv_mr = misclassification_rate(model, x_adv, test.y[:n])
        report.rounds[-1].adv_mr = adv_mr
        report.summary["ita"] = cfg.ita.kind
        report.summary["adv_mr"] = adv_mr

    anomaly = None
    if cfg.defense.nc.enabled:
        nc = cfg.defense.nc
        lr = setup.hyper.learning_rate if nc.learning_rate is None else nc.learning_rate
        fine = TrainingHyper(
            setup.hyper.batch_size, nc.epochs, lr,
            setup.hyper.optimizer, setup.hyper.beta1, setup.hyper.beta2, setup.hyper.eps,
        )
        res = neural_cleanse(
            setup.spec, params, setup.data.holdout, fine, nc.lam, nc.steps, nc.threshold,
            nc.lam_trials, nc.success_target, nc.fraction, seed=_seed(cfg.seed, 5),
        )
        anomaly = res.report.to_dict()
        after = Classifier(setup.spec, res.params)
        report.summary["nc_flagged"] = list(res.report.flagged)
        report.summary["clean_mr_before_nc"] = report.summary["final_clean_mr"]
        report.summary["clean_mr_after_nc"] = misclassification_rate(after, test.x, test.y)
        if probe is not None:
            report.summary["tasr_before_nc"] = report.summary["final_tasr"]
            report.summary["tasr_after_nc"] = tasr(after, probe.x, probe.y_true, probe.target)
        params = res.params
    report.validate()
    return RunOutcome(report, params, setup, anomaly)


def write_outputs(outcome: RunOutcome, out_dir, started: float | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "report.json": out / "report.json",
        "rounds.csv": out / "rounds.csv",
        "model.bin": out / "model.bin",
    }
    files["report.json"].write_text(outcome.report.to_json())
    files["rounds.csv"].write_text(outcome.report.to_csv())
    save_params(files["model.bin"], outcome.setup.spec, outcome.params)
    (out / "config.json").write_text(json.dumps(outcome.setup.cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    files["config.json"] = out / "config.json"
    if outcome.anomaly is not None:
        files["anomaly.json"] = out / "anomaly.json"
        files["anomaly.json"].write_text(json.dumps(outcome.anomaly, indent=2, sort_keys=True) + "\n")
    # timestamps live only here so the files above stay byte-reproducible
    meta = {"finished_unix": time.time()}
    if started is not None:
        meta["wall_clock_s"] = time.time() - started
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    outcome.files = {k: str(v) for k, v in files.items()}
    return outcome.files


def run_scenario(cfg: RunConfig, out_dir=None, workers: int | None = None) -> MetricsReport:
    """Run ``cfg`` and write report.json, rounds.csv, model.bin (and
    anomaly.json when neural cleanse runs) into ``out_dir`` or ``cfg.out``."""
    started = time.time()
    try:
        outcome = execute(cfg, workers)
    except Exception as e:
        raise RuntimeError(f"run failed (seed {cfg.seed}): {e}") from e
    target = out_dir or cfg.out
    if target:
        write_outputs(outcome, target, started)
    return outcome.report


# sweeps


@dataclass
class SweepSpec:
    axes: dict[str, list] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0])

    @classmethod
    def from_dict(cls, data: dict) -> "SweepSpec":
        unknown = set(data) - {"axes", "seeds"}
        if unknown:
            raise ValueError(f"sweep: unknown keys {sorted(unknown)}")
        axes = data.get("axes") or {}
        for k, v in axes.items():
            if not isinstance(v, list) or not v:
                raise ValueError(f"sweep.axes.{k}: expected a non-empty list")
        return cls(dict(axes), list(data.get("seeds") or [0]))

    def cells(self) -> list[dict]:
        names = list(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.axes[n] for n in names))]


def _axis_overrides(cfg: RunConfig, name: str, value) -> dict:
    if name == "arch":
        if value not in ARCHS:
            raise ValueError(f"sweep.axes.arch: unknown architecture {value!r}; known {sorted(ARCHS)}")
        over = json.loads(json.dumps(ARCHS[value]))
        if value != "cml":
            over.setdefault("dataset", {})["owners"] = None
        return {k: v for k, v in over.items()}
    if name == "malicious_count":
        key = "attack.malicious_servers" if cfg.attack.kind == "SSF" else "attack.malicious_clients"
        return {key: value}
    if name == "levels":
        return {"topology": {"levels": value, "fanouts": DEFAULT_FANOUTS[value]},
                "schedule": {"rounds": DEFAULT_ROUNDS[value]}}
    if name == "overlap":
        return {"attack.overlap": bool(value)}
    return {name: value}


def cell_config(base: RunConfig, cell: dict, seed: int) -> RunConfig:
    over: dict = {}
    for name, value in cell.items():
        over.update(_axis_overrides(base, name, value))
    over["seed"] = seed
    return with_overrides(base, over)


def _axis_label(cell: dict) -> str:
    return ";".join(f"{k}={json.dumps(v, sort_keys=True)}" for k, v in cell.items())


SUMMARY_METRICS = ("final_clean_mr", "final_tasr", "adv_mr", "clean_mr_after_nc", "tasr_after_nc")


def _run_cell(args):
    cell_id, cell, seed, base_dict = args
    try:
        from .config import config_from_dict

        cfg = cell_config(config_from_dict(base_dict), cell, seed)
        report = execute(cfg, workers=1).report
        return cell_id, cell, seed, {k: report.summary[k] for k in SUMMARY_METRICS if k in report.summary}, None
    except Exception as e:  # recorded, sweep continues
        return cell_id, cell, seed, {}, f"{type(e).__name__}: {e}"


@dataclass
class SweepResult:
    rows: list[dict]
    summary: list[dict]
    errors: list[dict]

    @property
    def ok(self) -> bool:
        return not self.errors

    def long_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell_id", "axis_values", "seed", "metric", "value"])
        for r in self.rows:
            w.writerow([r["cell_id"], r["axis_values"], r["seed"], r["metric"], repr(float(r["value"]))])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell_id", "axis_values", "metric", "mean", "n"])
        for r in self.summary:
            w.writerow([r["cell_id"], r["axis_values"], r["metric"], repr(float(r["mean"])), r["n"]])
        return buf.getvalue()

    def mean(self, metric: str, **axis_values) -> float:
        for r in self.summary:
            if r["metric"] == metric and all(r["cell"].get(k) == v for k, v in axis_values.items()):
                return r["mean"]
        raise KeyError((metric, axis_values))


def run_sweep(base: RunConfig, sweep: SweepSpec, out_dir=None, workers: int | None = None) -> SweepResult:
    """Run every cell of the axis cross product for every seed.

    An empty axis set is a single cell holding the base config.
    """
    cells = sweep.cells() if sweep.axes else [{}]
    jobs = [(i, cell, seed, base.to_dict()) for i, cell in enumerate(cells) for seed in sweep.seeds]
    workers = workers or base.workers or env_workers()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    rows, errors = [], []
    grouped: dict[tuple[int, str], list[float]] = {}
    for cell_id, cell, seed, metrics, err in sorted(results, key=lambda r: (r[0], r[2])):
        if err:
            errors.append({"cell_id": cell_id, "axis_values": _axis_label(cell), "seed": seed, "error": err})
            continue
        for metric, value in metrics.items():
            rows.append({"cell_id": cell_id, "axis_values": _axis_label(cell), "seed": seed,
                         "metric": metric, "value": value})
            grouped.setdefault((cell_id, metric), []).append(value)
    summary = [
        {"cell_id": cid, "axis_values": _axis_label(cells[cid]), "cell": cells[cid], "metric": m,
         "mean": float(np.mean(v)), "n": len(v)}
        for (cid, m), v in sorted(grouped.items())
    ]
    result = SweepResult(rows, summary, errors)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.csv").write_text(result.long_csv())
        (out / "sweep_summary.csv").write_text(result.summary_csv())
        (out / "sweep_errors.json").write_text(json.dumps(errors, indent=2) + "\n")
    return result


def load_sweep(path) -> SweepSpec:
    data = yaml.safe_load(Path(path).read_text()) or {}
    return SweepSpec.from_dict(data)


__all__ = [
    "ARCHS",
    "RunOutcome",
    "SweepResult",
    "SweepSpec",
    "cell_config",
    "execute",
    "load_config",
    "load_sweep",
    "prepare",
    "run_scenario",
    "run_sweep",
]
