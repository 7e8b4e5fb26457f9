import csv
import hashlib

import numpy as np
import pytest
import yaml

from learnres import cli
from learnres import config as C
from learnres import simulator as S


def write_cfg(tmp_path, **sections):
    raw = {"out_dir": str(tmp_path / "out"), "data": {"n_scenes": 60},
           "train": {"iters": 12, "log_every": 4, "batch": 8}}
    for k, v in sections.items():
        if isinstance(v, dict) and isinstance(raw.get(k), dict):
            raw[k].update(v)
        else:
            raw[k] = v
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_defaults_and_preset():
    cfg = C.from_dict({})
    assert (cfg.preset, cfg.scale.tau_max, cfg.scale.tau_min) == ("M", 1.5, 0.2)
    assert C.from_dict({"preset": "H"}).scale.tau_max == 2.25
    explicit = C.from_dict({"preset": "H", "scale": {"tau_max": 1.1}})
    assert explicit.scale.tau_max == 1.1 and explicit.preset is None


@pytest.mark.parametrize("raw, where", [
    ({"trian": {}}, "unknown key(s) trian"),
    ({"train": {"lr": "fast"}}, "train.lr"),
    ({"train": {"iters": 0}}, "train:"),
    ({"scale": {"tau_min": 2.0, "tau_max": 1.0}}, "scale"),
    ({"data": {"size": {"mean_area": 2.0}}}, "data.size"),
    ({"preset": "Q"}, "preset"),
    ({"train": {"lambdas": {"scale": -1.0}}}, "train.lambdas"),
    ({"predictor": {"activation": "gelu"}}, "predictor"),
])
def test_invalid_configs_name_the_field(raw, where):
    with pytest.raises(C.ConfigError, match=where.replace("(", r"\(").replace(")", r"\)")):
        C.from_dict(raw)


def test_resolved_config_roundtrip(tmp_path):
    cfg = C.from_dict({"preset": "L", "train": {"form": "plain", "lambdas": {"dist": 0.3}}})
    C.dump(cfg, tmp_path / "r.yaml")
    back = C.load(tmp_path / "r.yaml")
    assert back.scale == cfg.scale and back.train == cfg.train and back.data == cfg.data


def test_with_seed_overrides_every_seed():
    cfg = C.with_seed(C.from_dict({}), 17)
    assert {cfg.data.seed, cfg.predictor.init_seed, cfg.oracle.seed, cfg.train.seed, cfg.check.seed} == {17}


def test_generate_creates_dir_and_is_reproducible(tmp_path, capsys):
    path = write_cfg(tmp_path)
    out = tmp_path / "out"
    assert not out.exists()
    assert cli.main(["generate", "--config", str(path)]) == 0
    data = out / "dataset.jsonl"
    assert len(data.read_text().splitlines()) == 60
    first = sha(data)
    assert cli.main(["generate", "--config", str(path)]) == 0
    assert sha(data) == first
    assert "wrote 60 scenes" in capsys.readouterr().out
    assert (out / "config.resolved.yaml").exists()


def test_train_outputs_and_flags(tmp_path):
    path = write_cfg(tmp_path)
    out = tmp_path / "out"
    cli.main(["generate", "--config", str(path)])
    assert cli.main(["train", "--config", str(path), "--preset", "M"]) == 0
    assert cli.main(["train", "--config", str(path), "--form", "plain"]) == 0
    assert cli.main(["train", "--config", str(path), "--no-elastic-losses", "--no-lpf"]) == 0
    for tag in ("likelihood", "plain", "likelihood_nolpf_nolosses"):
        for stem in ("report", "boundaries"):
            assert (out / f"{stem}_{tag}.csv").exists()
        assert (out / f"phi_histogram_{tag}.json").exists()
        assert (out / f"checkpoint_{tag}.bin").exists()
    with open(out / "report_likelihood.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == list(S.REPORT_COLUMNS)
    assert {r["tau_max"] for r in rows} == {"1.5"}
    with open(out / "report_likelihood_nolpf_nolosses.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["lambda_scale_eff"] for r in rows} == {"0.0"} and {r["lpf"] for r in rows} == {"0"}
    assert (out / "boundaries_likelihood.csv").read_bytes() != (out / "boundaries_plain.csv").read_bytes()
    resolved = C.load(out / "config.resolved.yaml")
    assert resolved.train.lambdas.scale == 0.0 and resolved.train.lpf is False


def test_train_is_byte_deterministic(tmp_path):
    path = write_cfg(tmp_path)
    cli.main(["generate", "--config", str(path)])
    cli.main(["train", "--config", str(path)])
    first = sha(tmp_path / "out" / "report_likelihood.csv")
    cli.main(["train", "--config", str(path)])
    assert sha(tmp_path / "out" / "report_likelihood.csv") == first


def test_train_without_dataset_fails(tmp_path, capsys):
    path = write_cfg(tmp_path)
    assert cli.main(["train", "--config", str(path)]) == cli.EXIT_CONFIG
    assert "data.file" in capsys.readouterr().err


def test_invalid_config_exit(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("train: {batch: -3}\n")
    assert cli.main(["generate", "--config", str(path)]) != 0
    assert "train" in capsys.readouterr().err


def test_divergence_flushes_partial_report(tmp_path, monkeypatch):
    path = write_cfg(tmp_path)
    cli.main(["generate", "--config", str(path)])
    real = S.oracle_losses
    calls = {"n": 0}

    def flaky(a, d, oc, rng):
        calls["n"] += 1
        out = real(a, d, oc, rng)
        return out if calls["n"] < 9 else out * np.nan

    monkeypatch.setattr(S, "oracle_losses", flaky)
    assert cli.main(["train", "--config", str(path)]) == cli.EXIT_DIVERGED
    lines = (tmp_path / "out" / "report_likelihood.csv").read_text().splitlines()
    assert len(lines) == 3  # header + iterations 4 and 8
    assert len((tmp_path / "out" / "boundaries_likelihood.csv").read_text().splitlines()) == 10


def test_evaluate_command(tmp_path, capsys):
    path = write_cfg(tmp_path)
    cli.main(["generate", "--config", str(path)])
    assert cli.main(["evaluate", "--config", str(path)]) == cli.EXIT_CONFIG
    cli.main(["train", "--config", str(path)])
    assert cli.main(["evaluate", "--config", str(path)]) == 0
    assert (tmp_path / "out" / "metrics_likelihood.json").exists()
    assert "phi_mean" in capsys.readouterr().out


def test_check_command_and_fault_hook(tmp_path, capsys):
    out = str(tmp_path / "ck")
    assert cli.main(["check", "--out", out, "--points", "5", "--tol", "0.001"]) == 0
    text = capsys.readouterr().out
    assert "(tol 0.001)" in text and "[FAIL]" not in text
    assert cli.main(["check", "--out", out, "--points", "5", "--inject-fault", "logistic"]) != 0
    text = capsys.readouterr().out
    assert "[FAIL]" in text and "op 'logistic'" in text


def test_sweep_command(tmp_path):
    path = write_cfg(tmp_path, train={"iters": 4})
    assert cli.main(["sweep", "--config", str(path)]) == 0
    with open(tmp_path / "out" / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["preset"] for r in rows] == list("SMBLH")
    assert [float(r["tau_max"]) for r in rows] == [1.25, 1.5, 1.75, 2.0, 2.25]
    assert (tmp_path / "out" / "preset_H" / "report_likelihood.csv").exists()
