"""Run configuration: schema, defaults, presets and cross-section checks.

Configs are YAML (JSON also parses). ``extends: <preset or path>`` pulls in
another config first and deep-merges the rest on top of it.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from importlib import resources
from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

DEFAULT_FANOUTS = {2: [100], 3: [20, 5], 4: [4, 5, 5]}
DEFAULT_ROUNDS = {2: [20], 3: [20, 2], 4: [20, 3, 2]}


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class TopologySection(_Section):
    levels: int = 3
    fanouts: Optional[list[int]] = None
    overlap_clients: int = 0
    clients: Optional[int] = None

    @model_validator(mode="after")
    def _defaults(self):
        if self.levels not in DEFAULT_FANOUTS:
            raise ValueError(f"levels must be 2, 3 or 4, got {self.levels}")
        if self.fanouts is None:
            self.fanouts = list(DEFAULT_FANOUTS[self.levels])
        return self

    @property
    def num_clients(self) -> int:
        return math.prod(self.fanouts)

    @property
    def num_regional(self) -> int:
        return math.prod(self.fanouts[:-1])


class DatasetSection(_Section):
    kind: Literal["synthetic", "idx"] = "synthetic"
    classes: int = 5
    per_class: int = 300
    test_per_class: int = 100
    holdout_per_class: int = 40
    shape: list[int] = Field(default_factory=lambda: [8, 8, 1])
    noise: float = 0.25
    alpha: float = 0.5
    seed: int = 0
    owners: Optional[int] = None
    images: Optional[str] = None
    labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None
    holdout: int = 200


class ModelSection(_Section):
    kind: Literal["dense", "mnist_cnn", "cifar_cnn", "custom"] = "dense"
    hidden: int = 32
    layers: Optional[list[dict[str, Any]]] = None


class HyperSection(_Section):
    batch_size: int = 32
    epochs: int = 1
    learning_rate: float = 1e-3
    optimizer: Literal["sgd", "adam"] = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class ScheduleSection(_Section):
    rounds: Optional[list[int]] = None


class SelectionSection(_Section):
    cp: float = 1.0
    mode: Literal["fixed", "resample"] = "fixed"
    seed: Optional[int] = None


class TriggerSection(_Section):
    row: Optional[int] = None
    col: Optional[int] = None
    size: int = 2
    value: float = 1.0
    target: int = 0
    fraction: float = 0.5
    source: Optional[int] = None


class AttackSection(_Section):
    kind: Literal["none", "TLF", "ULF", "CSF", "SSF"] = "none"
    malicious_clients: Union[int, list[int]] = 0
    malicious_servers: Union[int, list[int]] = 0
    overlap: bool = False
    trigger: TriggerSection = Field(default_factory=TriggerSection)
    seed: Optional[int] = None


class ItaSection(_Section):
    kind: Literal["none", "FGSM", "PGD", "JSMA", "PATCH", "SQUARE", "ST"] = "none"
    eps: float = 0.3
    alpha: Optional[float] = None
    steps: int = 10
    random_start: bool = False
    theta: float = 1.0
    gamma: float = 0.1
    p_init: float = 0.3
    iterations: int = 500
    rotations: list[float] = Field(default_factory=lambda: [-30.0, -15.0, 0.0, 15.0, 30.0])
    translations: list[int] = Field(default_factory=lambda: [-2, 0, 2])
    patch_size: int = 2
    patch_iterations: int = 100
    patch_lr: float = 0.1
    target: int = 0
    samples: Optional[int] = None
    seed: Optional[int] = None


class NcSection(_Section):
    enabled: bool = False
    lam: float = Field(0.01, alias="lambda")
    threshold: float = 2.0
    steps: int = 300
    lam_trials: int = 3
    success_target: float = 0.99
    fraction: float = 0.2
    epochs: int = 5
    learning_rate: Optional[float] = None


class AtSection(_Section):
    enabled: bool = False
    generator: Literal["FGSM", "PGD"] = "PGD"
    eps: float = 0.3
    fraction: float = 0.5
    steps: int = 5
    alpha: Optional[float] = None


class DefenseSection(_Section):
    nc: NcSection = Field(default_factory=NcSection)
    at: AtSection = Field(default_factory=AtSection)


class RunConfig(_Section):
    seed: int = 0
    out: Optional[str] = None
    workers: Optional[int] = None
    topology: TopologySection = Field(default_factory=TopologySection)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    model: ModelSection = Field(default_factory=ModelSection)
    hyper: HyperSection = Field(default_factory=HyperSection)
    schedule: ScheduleSection = Field(default_factory=ScheduleSection)
    selection: SelectionSection = Field(default_factory=SelectionSection)
    attack: AttackSection = Field(default_factory=AttackSection)
    ita: ItaSection = Field(default_factory=ItaSection)
    defense: DefenseSection = Field(default_factory=DefenseSection)

    @model_validator(mode="after")
    def _fill(self):
        if self.schedule.rounds is None:
            self.schedule.rounds = list(DEFAULT_ROUNDS[self.topology.levels])
        return self

    def digest(self) -> str:
        """Hash of everything that influences results (not out/workers)."""
        data = self.model_dump(mode="json", by_alias=True, exclude={"out", "workers"})
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()

    def to_dict(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)


def _fail(path: str, msg: str):
    raise ConfigError(f"{path}: {msg}")


def check_consistency(cfg: RunConfig) -> None:
    """Cross-section invariants; raises ConfigError naming the key path."""
    topo, ds, atk = cfg.topology, cfg.dataset, cfg.attack
    L = topo.levels
    if len(topo.fanouts) != L - 1:
        _fail("topology.fanouts", f"need {L - 1} entries for {L} levels, got {topo.fanouts}")
    if any(f < 1 for f in topo.fanouts):
        _fail("topology.fanouts", "entries must be >= 1")
    n_clients = topo.num_clients
    if topo.clients is not None and topo.clients != n_clients:
        _fail("topology.clients", f"fanout product {n_clients} != {topo.clients}")
    if not 0 <= topo.overlap_clients <= n_clients:
        _fail("topology.overlap_clients", f"must be in [0, {n_clients}]")
    if len(cfg.schedule.rounds) != L - 1:
        _fail("schedule.rounds", f"need {L - 1} entries for {L} levels, got {cfg.schedule.rounds}")
    if any(t < 1 for t in cfg.schedule.rounds):
        _fail("schedule.rounds", "every level needs >= 1 round")
    if not 0 < cfg.selection.cp <= 1:
        _fail("selection.cp", "must be in (0, 1]")
    if len(ds.shape) != 3 or min(ds.shape) < 1:
        _fail("dataset.shape", f"must be three positive dims, got {ds.shape}")
    if ds.classes < 2:
        _fail("dataset.classes", "need at least 2 classes")
    if ds.alpha <= 0:
        _fail("dataset.alpha", "must be > 0")
    if ds.kind == "idx" and not (ds.images and ds.labels and ds.test_images and ds.test_labels):
        _fail("dataset", "idx datasets need images, labels, test_images and test_labels paths")
    owners = ds.owners or n_clients
    if owners < n_clients or owners % n_clients:
        _fail("dataset.owners", f"must be a multiple of the client count {n_clients}")
    h, w, _ = ds.shape
    trig = atk.trigger
    r = h - trig.size if trig.row is None else trig.row
    c = w - trig.size if trig.col is None else trig.col
    if atk.kind == "TLF" or cfg.defense.nc.enabled:
        if trig.size < 1 or r < 0 or c < 0 or r + trig.size > h or c + trig.size > w:
            _fail("attack.trigger", f"{trig.size}x{trig.size} patch at ({r},{c}) does not fit a {h}x{w} image")
        if not 0 <= trig.target < ds.classes:
            _fail("attack.trigger.target", f"must be in [0, {ds.classes})")
        if not 0 < trig.fraction <= 1:
            _fail("attack.trigger.fraction", "must be in (0, 1]")
        if not 0 <= trig.value <= 1:
            _fail("attack.trigger.value", "must be in [0, 1]")
    mc, ms = atk.malicious_clients, atk.malicious_servers
    client_pool = owners if atk.kind in ("TLF", "ULF") else n_clients
    if isinstance(mc, int):
        if not 0 <= mc <= client_pool:
            _fail("attack.malicious_clients", f"count must be in [0, {client_pool}]")
    elif any(not 0 <= i < client_pool for i in mc) or len(set(mc)) != len(mc):
        _fail("attack.malicious_clients", f"ids must be distinct and in [0, {client_pool})")
    if isinstance(ms, int):
        if not 0 <= ms <= topo.num_regional:
            _fail("attack.malicious_servers", f"count must be in [0, {topo.num_regional}]")
    elif any(not 0 <= i < topo.num_regional for i in ms) or len(set(ms)) != len(ms):
        _fail("attack.malicious_servers", f"ids must be distinct and in [0, {topo.num_regional})")
    has_clients = mc if isinstance(mc, int) else len(mc)
    has_servers = ms if isinstance(ms, int) else len(ms)
    if atk.kind == "SSF" and has_clients:
        _fail("attack.malicious_clients", "SSF compromises regional servers only")
    if atk.kind in ("TLF", "ULF", "CSF") and has_servers:
        _fail("attack.malicious_servers", f"{atk.kind} compromises clients only")
    if atk.kind == "SSF" and L < 3:
        _fail("attack.kind", "SSF needs a regional server below the cloud (levels >= 3)")
    if atk.overlap or topo.overlap_clients:
        if topo.num_regional < 2:
            _fail("attack.overlap" if atk.overlap else "topology.overlap_clients", "overlap needs >= 2 regional servers")
        if atk.overlap and owners != n_clients:
            _fail("attack.overlap", "overlap placement needs one data owner per client")
    if cfg.model.kind == "custom" and not cfg.model.layers:
        _fail("model.layers", "custom models need a layer list")
    if cfg.ita.kind == "PATCH" and cfg.ita.patch_size > min(h, w):
        _fail("ita.patch_size", "patch does not fit the image")
    if cfg.defense.nc.enabled and ds.classes < 3:
        _fail("defense.nc", "neural cleanse needs at least 3 classes")
    if not 0 <= cfg.defense.at.fraction <= 1:
        _fail("defense.at.fraction", "must be in [0, 1]")
    if cfg.hyper.batch_size < 1 or cfg.hyper.epochs < 0 or cfg.hyper.learning_rate < 0:
        _fail("hyper", "batch_size >= 1, epochs >= 0 and learning_rate >= 0 required")


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def preset_names() -> list[str]:
    root = resources.files("hflsec") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def preset_text(name: str) -> str:
    path = resources.files("hflsec") / "presets" / f"{name}.yaml"
    if not path.is_file():
        raise ConfigError(f"extends: unknown preset {name!r}; known: {preset_names()}")
    return path.read_text()


def _resolve(data: dict, base_dir: Path | None, depth: int = 0) -> dict:
    if depth > 10:
        raise ConfigError("extends: chain too deep")
    parent = data.pop("extends", None)
    if parent is None:
        return data
    candidate = Path(parent) if base_dir is None else base_dir / parent
    if str(parent).endswith((".yaml", ".yml", ".json")) and candidate.is_file():
        parent_data, parent_dir = _load_mapping(candidate.read_text()), candidate.parent
    else:
        parent_data, parent_dir = _load_mapping(preset_text(str(parent))), None
    return deep_merge(_resolve(parent_data, parent_dir, depth + 1), data)


def _load_mapping(text: str) -> dict:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"<root>: malformed config text: {e}") from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("<root>: config must be a mapping")
    return data


def config_from_dict(data: dict, base_dir: Path | None = None) -> RunConfig:
    data = _resolve(copy.deepcopy(data), base_dir)
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as e:
        lines = []
        for err in e.errors():
            path = ".".join(str(p) for p in err["loc"] if not str(p).startswith(("int", "list["))) or "<root>"
            lines.append(f"{path}: {err['msg']}")
        raise ConfigError("; ".join(dict.fromkeys(lines))) from None
    check_consistency(cfg)
    return cfg


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    return config_from_dict(_load_mapping(text), base_dir)


def load_config(path_or_preset: str) -> RunConfig:
    """Read a config file, or a bundled preset by name."""
    p = Path(path_or_preset)
    if p.is_file():
        return parse_config(p.read_text(), p.parent)
    return parse_config(preset_text(path_or_preset))


def with_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """New validated config with dotted-path overrides applied."""
    data = cfg.to_dict()
    for key, value in overrides.items():
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        if isinstance(value, dict) and isinstance(node.get(parts[-1]), dict):
            node[parts[-1]] = deep_merge(node[parts[-1]], value)
        else:
            node[parts[-1]] = value
    return config_from_dict(data)
