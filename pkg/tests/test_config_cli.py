import csv
import io
import json

import pytest
import yaml

from hflsec.cli import main
from hflsec.config import ConfigError, load_config, parse_config, preset_names, with_overrides
from hflsec.runner import SweepSpec, execute, run_scenario, run_sweep

TINY = {
    "seed": 1,
    "topology": {"levels": 2, "fanouts": [4]},
    "schedule": {"rounds": [2]},
    "dataset": {"classes": 3, "per_class": 12, "test_per_class": 5, "holdout_per_class": 4, "shape": [4, 4, 1]},
    "model": {"hidden": 4},
    "hyper": {"batch_size": 8, "learning_rate": 0.05},
}


def _tiny(**over):
    cfg = parse_config(yaml.safe_dump(TINY))
    return with_overrides(cfg, over) if over else cfg


def test_minimal_config_fills_defaults():
    cfg = parse_config("dataset:\n  kind: synthetic\ntopology:\n  levels: 3\n")
    assert cfg.topology.fanouts == [20, 5]
    assert cfg.schedule.rounds == [20, 2]
    assert cfg.hyper.batch_size == 32 and cfg.hyper.optimizer == "adam"
    assert cfg.attack.kind == "none" and cfg.defense.nc.lam == 0.01


def test_trigger_too_large_names_key():
    text = "dataset:\n  shape: [4, 4, 1]\nattack:\n  kind: TLF\n  malicious_clients: 1\n  trigger:\n    size: 5\n"
    with pytest.raises(ConfigError, match=r"^attack\.trigger"):
        parse_config(text)


def test_four_level_preset():
    cfg = load_config("hfl4")
    assert cfg.topology.levels == 4 and cfg.topology.fanouts == [4, 5, 5]
    assert cfg.schedule.rounds == [20, 3, 2]
    full = load_config("mnist-4l")
    assert full.topology.fanouts == [4, 5, 5] and full.schedule.rounds == [20, 3, 2]
    assert full.model.kind == "mnist_cnn"


def test_presets_all_validate():
    names = preset_names()
    assert {"cml", "fl2", "hfl3", "hfl4", "hfl3o", "hfl4o"} <= set(names)
    for n in names:
        load_config(n)


@pytest.mark.parametrize(
    "text,path",
    [
        ("bogus: 1\n", "bogus"),
        ("hyper:\n  lr: 0.1\n", "hyper.lr"),
        ("hyper:\n  batch_size: many\n", "hyper.batch_size"),
        ("topology:\n  levels: 3\n  fanouts: [4]\n", "topology.fanouts"),
        ("attack:\n  kind: SSF\n  malicious_clients: 2\n", "attack.malicious_clients"),
        ("attack:\n  kind: CSF\n  malicious_clients: 101\ntopology:\n  levels: 2\n", "attack.malicious_clients"),
        ("extends: nonexistent-preset\n", "extends"),
    ],
)
def test_errors_carry_key_path(text, path):
    with pytest.raises(ConfigError) as e:
        parse_config(text)
    assert str(e.value).startswith(path)


def test_extends_file_relative(tmp_path):
    (tmp_path / "base.yaml").write_text(yaml.safe_dump(TINY))
    (tmp_path / "child.yaml").write_text("extends: base.yaml\nseed: 9\n")
    cfg = load_config(str(tmp_path / "child.yaml"))
    assert cfg.seed == 9 and cfg.topology.fanouts == [4]


def test_digest_ignores_out_and_workers():
    a = _tiny()
    assert a.digest() == with_overrides(a, {"out": "x", "workers": 3}).digest()
    assert a.digest() != with_overrides(a, {"seed": 2}).digest()


def test_baseline_report_has_no_attack_fields(tmp_path):
    rep = run_scenario(_tiny(), tmp_path)
    assert len(rep.rounds) == 2
    assert all(r.tasr is None and r.adv_mr is None for r in rep.rounds)
    assert not {"attack", "malicious_clients", "final_tasr"} & set(rep.summary)
    for name in ("report.json", "rounds.csv", "model.bin", "config.json"):
        assert (tmp_path / name).is_file()
    assert not (tmp_path / "anomaly.json").exists()


def test_tlf_report_has_tasr():
    out = execute(_tiny(**{"attack.kind": "TLF", "attack.malicious_clients": 2}))
    assert all(r.tasr is not None for r in out.report.rounds)
    assert "final_tasr" in out.report.summary and "final_clean_mr" in out.report.summary


def test_run_twice_identical_files(tmp_path):
    cfg = _tiny(**{"attack.kind": "TLF", "attack.malicious_clients": 1})
    run_scenario(cfg, tmp_path / "a", workers=1)
    run_scenario(cfg, tmp_path / "b", workers=2)
    for name in ("report.json", "rounds.csv", "model.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_nc_writes_anomaly(tmp_path):
    cfg = _tiny(**{"defense.nc.enabled": True, "defense.nc.steps": 5, "defense.nc.lam_trials": 1,
                   "defense.nc.epochs": 1})
    rep = run_scenario(cfg, tmp_path)
    anomaly = json.loads((tmp_path / "anomaly.json").read_text())
    assert set(anomaly["norms"]) == {"0", "1", "2"}
    assert "nc_flagged" in rep.summary


def test_sweep_counts_rows(tmp_path):
    base = _tiny(**{"attack.kind": "CSF"})
    res = run_sweep(base, SweepSpec({"malicious_count": [0, 1]}, [0]), tmp_path)
    rows = list(csv.DictReader(io.StringIO(res.long_csv())))
    per_metric = {}
    for r in rows:
        per_metric[r["metric"]] = per_metric.get(r["metric"], 0) + 1
    assert per_metric["final_clean_mr"] == 2
    assert list(rows[0]) == ["cell_id", "axis_values", "seed", "metric", "value"]
    assert (tmp_path / "sweep.csv").read_text() == res.long_csv()
    assert res.ok


def test_empty_sweep_is_single_base_run(tmp_path):
    base = _tiny()
    res = run_sweep(base, SweepSpec({}, [0]), tmp_path)
    assert {r["cell_id"] for r in res.rows} == {0}
    direct = execute(with_overrides(base, {"seed": 0})).report.summary["final_clean_mr"]
    assert res.mean("final_clean_mr") == direct


def test_sweep_records_failures_and_continues(tmp_path):
    base = _tiny(**{"attack.kind": "CSF"})
    res = run_sweep(base, SweepSpec({"malicious_count": [1, 50]}, [0]), tmp_path)
    assert not res.ok and len(res.errors) == 1
    assert any(r["metric"] == "final_clean_mr" for r in res.rows)


def test_sweep_spec_rejects_unknown_keys():
    with pytest.raises(ValueError):
        SweepSpec.from_dict({"axis": {}})


def test_cli_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    assert main(["validate", "--config", str(cfg)]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "report.json").is_file()
    bad = tmp_path / "bad.yaml"
    bad.write_text("hyper:\n  lr: 1\n")
    assert main(["validate", "--config", str(bad)]) == 2
    sweep = tmp_path / "s.yaml"
    sweep.write_text("axes:\n  attack.kind: [CSF]\n  malicious_count: [1, 50]\nseeds: [0]\n")
    assert main(["sweep", "--config", str(cfg), "--sweep", str(sweep), "--out", str(tmp_path / "sw")]) == 1
    sweep.write_text("axes:\n  malicious_count: [0]\n")
    assert main(["sweep", "--config", str(cfg), "--sweep", str(sweep), "--out", str(tmp_path / "sw2")]) == 0
    capsys.readouterr()
