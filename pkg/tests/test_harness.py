import csv
import json

import numpy as np
import pytest
import yaml
from PIL import Image

from parl import cli, harness
from parl.exceptions import ConfigError

TINY = {
    "name": "tiny",
    "dataset": {"n": 200, "eval_n": 60},
    "epochs": 3,
    "seeds": [0, 1],
    "attacks": [{"family": "fgsm"}, {"family": "pgd", "steps": 4, "restarts": 2}],
    "epsilons": [0.0, 0.05],
}


def _write(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_defaults_and_digest():
    a = harness.ExperimentConfig.from_dict({})
    assert a.ensemble_size == 3 and a.parl["gamma2"] == 0.5 and a.optimizer["lr"] == 0.001
    assert a.seeds == [0, 1, 2] and a.epsilons[-1] == 0.07 and a.surrogate["parl"]["gamma2"] == 0.0
    b = harness.ExperimentConfig.from_dict({"parl": {"gamma2": 0.5}})
    assert a.digest() == b.digest()
    assert a.digest() != a.replace(epochs=3).digest()


@pytest.mark.parametrize("bad", [
    {"epocs": 3},
    {"parl": {"gamma3": 1}},
    {"seeds": []},
    {"attacks": [{"family": "cw"}]},
    {"attacks": [{"family": "fgsm", "eps": 0.1}]},
    {"model": {"sizes": [2, 16, 3]}, "parl": {"n_taps": 2}},
    {"dataset": {"kind": "mnist"}},
    {"surrogate": {"parl": {"lr": 1}}},
    {"parl": {"gamma2": -1}},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        harness.ExperimentConfig.from_dict(bad)


def test_surrogate_inherits_unspecified_parl_keys():
    c = harness.ExperimentConfig.from_dict({"surrogate": {"parl": {"n_taps": 1}}})
    assert c.surrogate_config() == harness.loss.ParlConfig(1.0, 0.0, 1)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = _write(root, TINY)
    assert cli.main(["train", "--config", cfg, "--out", str(root)]) == 0
    assert cli.main(["attack-eval", "--config", cfg, "--out", str(root)]) == 0
    assert cli.main(["cka", "--config", cfg, "--out", str(root)]) == 0
    run_dir = root / harness.ExperimentConfig.from_dict(TINY).run_id
    return root, cfg, run_dir


def test_layout(tiny_run):
    _, _, run_dir = tiny_run
    for name in ("metrics.csv", "loss.csv", "eval.csv", "report.json", "cka/summary.csv"):
        assert (run_dir / name).is_file()
    for seed in (0, 1):
        for role in ("target", "surrogate"):
            assert len(list((run_dir / f"checkpoints/seed{seed}/{role}").glob("member*.parl"))) == 3
    assert _rows(run_dir / "metrics.csv")[0].keys() == set(harness.METRICS_HEADER)


def test_report_echoes_config(tiny_run):
    _, _, run_dir = tiny_run
    report = json.loads((run_dir / "report.json").read_text())
    config = harness.ExperimentConfig.from_dict(TINY)
    assert report["schema_version"] == harness.REPORT_SCHEMA
    assert report["config_digest"] == config.digest() == harness.ExperimentConfig.from_dict(report["config"]).digest()
    assert [t["status"] for t in report["train"]] == ["ok", "ok"]
    assert {"train", "eval", "cka"} <= set(report)


def test_metrics_are_bitwise_reproducible(tiny_run, tmp_path):
    root, cfg, run_dir = tiny_run
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path), "--jobs", "2"]) == 0
    again = tmp_path / run_dir.name
    for name in ("metrics.csv", "loss.csv"):
        assert (again / name).read_bytes() == (run_dir / name).read_bytes()


def test_metric_rows_cover_pairs_and_layers(tiny_run):
    _, _, run_dir = tiny_run
    rows = _rows(run_dir / "metrics.csv")
    steps = 100 // 32 + 1
    assert len(rows) == 2 * 3 * steps * 3 * 2   # seeds, epochs, steps, pairs, layers
    for r in rows:
        assert -1 <= float(r["mean_g"]) <= 1 and -2 <= float(r["r"]) <= 2


def test_zero_epsilon_rows_equal_clean(tiny_run):
    _, _, run_dir = tiny_run
    rows = _rows(run_dir / "eval.csv")
    for seed in ("0", "1"):
        clean = [r for r in rows if r["seed"] == seed and r["mode"] == "clean"][0]["accuracy"]
        for r in rows:
            if r["seed"] == seed and float(r["epsilon"]) == 0.0:
                assert r["accuracy"] == clean
    assert {r["mode"] for r in rows} == {"clean", "black-box"}


def test_identity_transfer_equals_white_box(tiny_run, tmp_path):
    root, cfg, run_dir = tiny_run
    target = str(run_dir / "checkpoints/seed0/target")
    white = tmp_path / "white"
    black = tmp_path / "black"
    assert cli.main(["attack-eval", "--config", cfg, "--out", str(white), "--seed-list", "0", "--white-box",
                     "--target", target]) == 0
    assert cli.main(["attack-eval", "--config", cfg, "--out", str(black), "--seed-list", "0",
                     "--target", target, "--surrogate", target]) == 0
    w = _rows(next(white.iterdir()) / "eval.csv")
    b = _rows(next(black.iterdir()) / "eval.csv")
    assert [r["accuracy"] for r in w] == [r["accuracy"] for r in b]
    assert {r["mode"] for r in w[1:]} == {"white-box"} and {r["mode"] for r in b[1:]} == {"black-box"}


def test_cka_self_comparison_is_one(tiny_run):
    root, cfg, run_dir = tiny_run
    assert cli.main(["cka", "--config", cfg, "--out", str(root), "--against", str(run_dir)]) == 0
    rows = _rows(run_dir / "cka/summary.csv")
    selfs = [float(r["value"]) for r in rows if "other" in r["pair"]]
    assert selfs and np.allclose(selfs, 1.0, atol=1e-9)
    assert all(-1e-9 <= float(r["value"]) <= 1 + 1e-9 for r in rows)


def test_report_aggregates(tiny_run):
    root, _, run_dir = tiny_run
    assert cli.main(["report", "--out", str(root)]) == 0
    rows = _rows(root / "summary.csv")
    clean = [r for r in rows if r["metric"] == "clean_accuracy"][0]
    per_seed = [float(r["accuracy"]) for r in _rows(run_dir / "eval.csv") if r["mode"] == "clean"]
    assert float(clean["value"]) == pytest.approx(np.mean(per_seed)) and clean["seeds"] == "2"
    assert (root / "summary.md").read_text().startswith("| run_id")


def test_single_member_without_penalty_reduces_loss(tmp_path):
    cfg = _write(tmp_path, {**TINY, "ensemble_size": 1, "parl": {"gamma2": 0.0}, "epochs": 30,
                            "seeds": [0], "surrogate": {"enabled": False}})
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path)]) == 0
    run_dir = next(p for p in tmp_path.iterdir() if p.is_dir())
    rows = _rows(run_dir / "loss.csv")
    first = np.mean([float(r["mean_ce"]) for r in rows if r["epoch"] == "0"])
    last = np.mean([float(r["mean_ce"]) for r in rows if r["epoch"] == "29"])
    assert last < first
    assert _rows(run_dir / "metrics.csv") == []


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_numeric_fault_marks_seed_failed(tmp_path):
    cfg = _write(tmp_path, {**TINY, "optimizer": {"lr": 1e300}, "epochs": 2})
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path)]) == cli.EXIT_NUMERIC
    run_dir = next(p for p in tmp_path.iterdir() if p.is_dir())
    report = json.loads((run_dir / "report.json").read_text())
    assert [t["status"] for t in report["train"]] == ["failed", "failed"]


def test_exit_codes(tmp_path, tiny_run):
    assert cli.main(["train", "--config", _write(tmp_path, {"bogus": 1}, "bad.yaml")]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--config", str(tmp_path / "missing.yaml")]) == cli.EXIT_IO
    (tmp_path / "broken.yaml").write_text("a: [1, 2")
    assert cli.main(["train", "--config", str(tmp_path / "broken.yaml")]) == cli.EXIT_CONFIG
    _, cfg, _ = tiny_run
    assert cli.main(["gradviz", "--config", cfg, "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["attack-eval", "--config", cfg, "--out", str(tmp_path / "void")]) == cli.EXIT_IO


def test_checkpoint_spec_mismatch_is_contract_error(tiny_run, tmp_path):
    root, cfg, run_dir = tiny_run
    other = _write(tmp_path, {**TINY, "model": {"activation": "tanh"}}, "other.yaml")
    code = cli.main(["attack-eval", "--config", other, "--out", str(tmp_path), "--seed-list", "0",
                     "--target", str(run_dir / "checkpoints/seed0/target")])
    assert code == cli.EXIT_CONFIG


BARS = {
    "name": "bars",
    "dataset": {"kind": "bars", "n": 200, "eval_n": 40},
    "model": {"input_shape": [1, 8, 8], "layers": [
        {"kind": "conv2d", "in_channels": 1, "out_channels": 3, "kernel_size": 3, "padding": 1},
        {"kind": "avgpool", "kernel_size": 2}, {"kind": "flatten"},
        {"kind": "dense", "in_features": 48, "out_features": 2, "activation": "identity"}]},
    "parl": {"n_taps": 1},
    "epochs": 2, "seeds": [0], "attacks": [{"family": "fgsm"}], "epsilons": [0.05],
}


def test_gradviz_images_and_cosines(tmp_path):
    cfg = _write(tmp_path, BARS)
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert cli.main(["gradviz", "--config", cfg, "--out", str(tmp_path), "--index", "2"]) == 0
    sal = next(p for p in tmp_path.iterdir() if p.is_dir()) / "saliency"
    for m in range(3):
        img = np.array(Image.open(sal / f"seed0_ex2_member{m}.png"))
        assert img.shape == (8, 8) and img.min() == 0 and img.max() == 255
    rows = list(csv.reader(open(sal / "seed0_ex2_cosine.csv")))
    cos = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    np.testing.assert_allclose(np.diag(cos), 1.0, atol=1e-12)
    np.testing.assert_allclose(cos, cos.T)


def test_saliency_scaling():
    g = np.array([[[-2.0, 0.0], [1.0, 2.0]]])
    np.testing.assert_array_equal(harness.saliency_image(g), [[0, 128], [191, 255]])
    assert not harness.saliency_image(np.ones((1, 2, 2))).any()
