import csv
import json
from pathlib import Path

import pytest
import yaml

from jumpbsde import cli
from jumpbsde.config import ExperimentConfig, load_config, parse_config
from jumpbsde.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write_config(tmp_path, data, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


def small(tmp_path, **extra):
    data = {
        "problem": {"name": "linear", "params": {"x0": 0.5}},
        "grid": {"M": 4},
        "train": {"iterations": 40, "batch_size": 64},
        "eval_batch": 2000,
        "reference": {"batch": 4000, "degree": 1, "substeps": 2},
        "output": str(tmp_path / "runs"),
        "seed": 3,
    }
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return data


def read_rows(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    return list(csv.DictReader(lines[1:]))


def test_documented_linear_config_trains_and_certifies(tmp_path, capsys):
    data = yaml.safe_load((CONFIGS / "linear.yaml").read_text())
    data["output"] = str(tmp_path / "runs")
    path = write_config(tmp_path, data)
    assert cli.main(["train", path]) == 0
    metrics = json.loads((tmp_path / "runs/train/metrics.json").read_text())
    assert abs(metrics["y0"] - metrics["Y0_exact"]) <= 0.05 * (1 + abs(metrics["Y0_exact"]))
    assert (tmp_path / "runs/train/checkpoint_000200.bin").exists()
    assert cli.main(["certify", path]) == 0
    cert = json.loads((tmp_path / "runs/certify/certificate.json").read_text())
    assert 0 < cert["bound_value"] < float("inf")
    assert cert["ci"] > 0 and cert["config_hash"] == metrics["config_hash"]
    apriori = json.loads((tmp_path / "runs/certify/apriori.json").read_text())
    assert apriori["H_bar"] > 0
    assert "certify: bound=" in capsys.readouterr().out


def test_missing_problem_name(tmp_path, capsys):
    data = small(tmp_path)
    data["problem"] = {"params": {}}
    assert cli.main(["train", write_config(tmp_path, data)]) == 2
    assert "problem.name" in capsys.readouterr().err


def test_unknown_keys_are_rejected(tmp_path, capsys):
    data = small(tmp_path, train={"iteratons": 5})
    assert cli.main(["train", write_config(tmp_path, data)]) == 2
    assert "iteratons" in capsys.readouterr().err
    data = small(tmp_path, problem={"name": "linear", "params": {"K_F": 1.0}})
    assert cli.main(["train", write_config(tmp_path, data)]) == 2


def test_unreadable_config(tmp_path):
    assert cli.main(["train", str(tmp_path / "missing.yaml")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("problem: [unclosed")
    assert cli.main(["train", str(bad)]) == 2


def test_training_is_deterministic_and_reruns_are_noops(tmp_path, capsys):
    first = write_config(tmp_path, small(tmp_path, output=str(tmp_path / "a")), "a.yaml")
    second = write_config(tmp_path, small(tmp_path, output=str(tmp_path / "b")), "b.yaml")
    assert cli.main(["train", first]) == 0
    assert cli.main(["train", second]) == 0
    loss_a = (tmp_path / "a/train/loss.csv").read_bytes()
    assert loss_a == (tmp_path / "b/train/loss.csv").read_bytes()
    assert (tmp_path / "a/train/checkpoint.bin").read_bytes() == (tmp_path / "b/train/checkpoint.bin").read_bytes()
    stamp = (tmp_path / "a/train/stamp.json").stat().st_mtime_ns
    capsys.readouterr()
    assert cli.main(["train", first]) == 0
    assert "up to date" in capsys.readouterr().out
    assert (tmp_path / "a/train/stamp.json").stat().st_mtime_ns == stamp
    assert cli.main(["train", first, "--force"]) == 0
    assert (tmp_path / "a/train/loss.csv").read_bytes() == loss_a


def test_threads_do_not_change_results(tmp_path):
    one = write_config(tmp_path, small(tmp_path, output=str(tmp_path / "one")), "one.yaml")
    two = write_config(tmp_path, small(tmp_path, output=str(tmp_path / "two")), "two.yaml")
    assert cli.main(["train", one]) == 0
    assert cli.main(["train", two, "--threads", "3"]) == 0
    assert (tmp_path / "one/train/loss.csv").read_bytes() == (tmp_path / "two/train/loss.csv").read_bytes()


def test_changed_config_in_stamped_directory_needs_force(tmp_path):
    path = write_config(tmp_path, small(tmp_path))
    assert cli.main(["train", path]) == 0
    changed = write_config(tmp_path, small(tmp_path, seed=4), "changed.yaml")
    assert cli.main(["train", changed]) == 2
    assert cli.main(["train", changed, "--force"]) == 0


def test_every_output_embeds_hash_and_seed(tmp_path):
    path = write_config(tmp_path, small(tmp_path))
    assert cli.main(["train", path]) == 0
    digest = load_config(path).digest()
    for f in (tmp_path / "runs/train").iterdir():
        if f.suffix == ".csv":
            assert f.read_text().startswith(f"# config_hash={digest}, seed=3\n")
        elif f.suffix == ".json":
            payload = json.loads(f.read_text())
            assert payload["config_hash"] == digest and payload["seed"] == 3


def test_convergence_table(tmp_path):
    path = write_config(tmp_path, small(tmp_path, grid={"M": 4, "M_list": [2, 4]}))
    assert cli.main(["convergence", path]) == 0
    rows = read_rows(tmp_path / "runs/convergence/convergence.csv")
    assert [r["method"] for r in rows] == ["oracle", "deep", "oracle", "deep", "oracle-slope", "deep-slope"]
    assert (tmp_path / "runs/convergence/coefficients_M4.csv").exists()
    single = write_config(tmp_path, small(tmp_path, output=str(tmp_path / "single")), "single.yaml")
    assert cli.main(["convergence", single]) == 0
    rows = read_rows(tmp_path / "single/convergence/convergence.csv")
    assert not any(r["method"].endswith("slope") for r in rows)


def test_convergence_refuses_without_exact_solution(tmp_path, capsys):
    data = small(tmp_path, problem={"name": "jump_ou", "params": {}})
    assert cli.main(["convergence", write_config(tmp_path, data)]) == 2
    assert "no closed-form solution" in capsys.readouterr().err


def test_certify_needs_a_checkpoint(tmp_path, capsys):
    assert cli.main(["certify", write_config(tmp_path, small(tmp_path))]) == 2
    assert "run 'jumpbsde train'" in capsys.readouterr().err


def test_infeasible_lambda_override(tmp_path, capsys):
    path = write_config(tmp_path, small(tmp_path))
    assert cli.main(["train", path]) == 0
    data = small(tmp_path, certificate={"lambda_sq": 1000.0, "lambdabar": 1.0})
    assert cli.main(["certify", write_config(tmp_path, data, "override.yaml")]) == 2
    assert "dt K_f" in capsys.readouterr().err
    data = small(tmp_path, certificate={"lambda_sq": 2.0})
    assert cli.main(["certify", write_config(tmp_path, data, "half.yaml")]) == 2


def power_config(tmp_path, **extra):
    measure = {"family": "power", "c": 1.0, "alpha": 0.5, "z_max": 1.0}
    return small(tmp_path, problem={"name": "linear", "params": {"x0": 0.5, "sigma": 0.0, "measure": measure}},
                 grid={"M": 10}, **extra)


def test_epsilon_pipeline_certificate(tmp_path):
    path = write_config(tmp_path, power_config(tmp_path, epsilon=0.1))
    assert cli.main(["train", path]) == 0
    assert cli.main(["certify", path]) == 0
    cert = json.loads((tmp_path / "runs/certify/certificate.json").read_text())
    assert cert["kind"] == "epsilon"
    assert cert["remainder"]["small_jump_second_moment"] == pytest.approx(0.042164, abs=1e-6)


def test_infinite_activity_needs_epsilon(tmp_path, capsys):
    assert cli.main(["train", write_config(tmp_path, power_config(tmp_path))]) == 2
    assert "epsilon" in capsys.readouterr().err


def test_epsilon_study(tmp_path):
    path = write_config(tmp_path, power_config(tmp_path, epsilon_list=[0.4, 0.2, 0.1]))
    assert cli.main(["epsilon-study", path]) == 0
    rows = read_rows(tmp_path / "runs/epsilon-study/epsilon.csv")
    remainder = [float(r["remainder"]) for r in rows]
    assert remainder[0] > remainder[1] > remainder[2]
    assert [float(r["epsilon"]) for r in rows] == [0.4, 0.2, 0.1]


def test_epsilon_study_usage_errors(tmp_path):
    assert cli.main(["epsilon-study", write_config(tmp_path, power_config(tmp_path))]) == 2
    finite = small(tmp_path, epsilon_list=[0.1])
    assert cli.main(["epsilon-study", write_config(tmp_path, finite, "finite.yaml")]) == 2


def test_validate_writes_report(tmp_path):
    assert cli.main(["validate", write_config(tmp_path, small(tmp_path))]) == 0
    report = json.loads((tmp_path / "runs/validate/validate.json").read_text())
    assert report["passed"]


def test_numerical_failure_exit_code(tmp_path, capsys):
    data = small(tmp_path, problem={"name": "linear", "params": {"kappa": 2.0}}, grid={"M": 1})
    assert cli.main(["convergence", write_config(tmp_path, data)]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_config_round_trip():
    for path in CONFIGS.glob("*.yaml"):
        cfg = load_config(path)
        again = parse_config(yaml.safe_load(cfg.to_yaml()))
        assert again == cfg and again.digest() == cfg.digest()
    cfg = ExperimentConfig.model_validate({"problem": {"name": "linear"}, "epsilon_list": [0.3]})
    assert parse_config(yaml.safe_load(cfg.to_yaml())) == cfg
    with pytest.raises(ConfigError):
        parse_config(["not", "a", "mapping"])


def test_help_documents_csv_columns(capsys):
    with pytest.raises(SystemExit):
        cli.main(["train", "--help"])
    out = capsys.readouterr().out
    assert "iter,loss" in out and "epsilon,K_nu_eps" in out
