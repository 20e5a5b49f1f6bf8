"""Config-driven experiments: train, attack sweeps, CKA, saliency exports and reports.

A run directory ``<out>/<run-id>`` holds::

    checkpoints/seed<S>/{target,surrogate}/member<I>.parl
    metrics.csv   seed,step,epoch,pair,layer,mean_g,r
    loss.csv      seed,step,epoch,objective,mean_ce
    eval.csv      seed,mode,attack,epsilon,accuracy,n
    cka/          seed<S>_pair<I>-<J>.csv (layer,value) and summary.csv
    saliency/     per-member gradient PNGs and pairwise cosine CSVs
    report.json

The run id is the config name followed by the first 12 hex digits of the
config digest, so every output is tied to the exact configuration that
produced it. Floats in the CSV files are written with ``repr`` and are
bitwise reproducible for a fixed config and seed.
"""

import copy
import csv
import hashlib
import itertools
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import attacks
from . import data as data_mod
from . import diversity, loss, nn, training
from .ensemble import Ensemble, evaluate, score
from .exceptions import ConfigError, ContractViolation, NumericalFault

REPORT_SCHEMA = 1

DEFAULTS = {
    "name": "experiment",
    "dataset": {
        "kind": "two_moons",    # two_moons | blobs | bars | cifar10 | cifar100
        "n": 2000,
        "noise": 0.1,
        "classes": 3,
        "spread": 1.0,
        "size": 8,
        "test_fraction": 0.5,
        "seed": None,           # None: follow the run seed
        "train_path": None,
        "test_path": None,
        "eval_n": 1000,
    },
    "model": {
        "sizes": [2, 16, 16, 2],
        "activation": "relu",
        "normalize": {"mean": [0.5], "std": [0.25]},
        "layers": None,         # explicit layer list; overrides sizes
        "input_shape": None,
        "tap_layers": None,
    },
    "ensemble_size": 3,
    "parl": {"gamma1": 1.0, "gamma2": 0.5, "n_taps": 2, "cosine_eps": 1e-12},
    "optimizer": {"lr": 0.001},
    "epochs": 50,
    "batch_size": 32,
    "augment": None,
    "attacks": [{"family": "fgsm"}, {"family": "pgd"}],
    "epsilons": [0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07],
    "surrogate": {"enabled": True, "seed_offset": 1000, "parl": {"gamma2": 0.0}},
    "cka": {"probe_n": 1000},
    "seeds": [0, 1, 2],
    "out": "runs",
}

_ATTACK_KEYS = {"family", "steps", "alpha", "step_rule", "mu", "restarts", "seed", "loss_mode"}
_FREE_FORM = {"augment", "attacks", "seeds", "epsilons"}


def _merge(base, override, path=""):
    if override is None:
        return copy.deepcopy(base)
    if not isinstance(override, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if where == "surrogate.parl":
            if not isinstance(value, dict) or set(value) - set(DEFAULTS["parl"]):
                raise ConfigError("surrogate.parl may only override parl keys")
            out[key] = {**base[key], **value}
        elif isinstance(base[key], dict) and key not in _FREE_FORM and value is not None:
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class ExperimentConfig:
    """Effective (defaults merged) experiment configuration."""

    raw: dict

    @classmethod
    def from_dict(cls, d):
        config = cls(_merge(DEFAULTS, d))
        config.validate()
        return config

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                d = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(d or {})

    def __getattr__(self, key):
        try:
            return self.__dict__["raw"][key]
        except KeyError:
            raise AttributeError(key) from None

    def replace(self, **overrides):
        return ExperimentConfig.from_dict(_merge(self.raw, overrides))

    def validate(self):
        try:
            if not self.seeds:
                raise ConfigError("seeds must be non-empty")
            if self.ensemble_size < 1 or self.epochs < 0 or self.batch_size < 1:
                raise ConfigError("ensemble_size, epochs and batch_size must be positive")
            spec = self.model_spec()
            self.parl_config().taps_for(spec)
            self.surrogate_config().taps_for(spec)
            self.attack_specs()
            self.augment_spec()
            if self.dataset["kind"] not in _DATASETS:
                raise ConfigError(f"unknown dataset kind {self.dataset['kind']!r}")
        except (ContractViolation, TypeError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def digest(self):
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    @property
    def run_id(self):
        return f"{self.name}-{self.digest()[:12]}"

    def model_spec(self):
        m = self.model
        if m["layers"] is not None:
            if m["input_shape"] is None:
                raise ConfigError("model.layers needs model.input_shape")
            layers = [nn.layer_from_dict(l) for l in m["layers"]]
            num_classes = layers[-1].out_features
            taps = m["tap_layers"] if m["tap_layers"] is not None else [
                i for i, l in enumerate(layers[:-1]) if isinstance(l, (nn.Dense, nn.Conv2d))]
            return nn.ModelSpec(tuple(m["input_shape"]), tuple(layers), num_classes, tuple(taps))
        norm = None
        if m["normalize"] is not None:
            norm = (tuple(m["normalize"]["mean"]), tuple(m["normalize"]["std"]))
        return nn.mlp_spec(m["sizes"], m["activation"], m["tap_layers"], norm)

    def parl_config(self, overrides=None):
        p = dict(self.parl, **(overrides or {}))
        return loss.ParlConfig(p["gamma1"], p["gamma2"], p["n_taps"], p["cosine_eps"])

    def surrogate_config(self):
        return self.parl_config(self.surrogate.get("parl"))

    def attack_specs(self):
        out = []
        for a in self.attacks:
            unknown = set(a) - _ATTACK_KEYS
            if unknown:
                raise ConfigError(f"unknown attack keys {sorted(unknown)}")
            out.append(attacks.AttackSpec(epsilon=0.0, **a))
        return out

    def augment_spec(self):
        return None if self.augment is None else data_mod.AugmentSpec(**self.augment)


# ----------------------------------------------------------------------------
# datasets and training
# ----------------------------------------------------------------------------

def _synthetic(kind):
    def make(d, seed):
        if kind == "two_moons":
            return data_mod.synth_two_moons(d["n"], d["noise"], seed)
        if kind == "blobs":
            return data_mod.synth_blobs(d["n"], d["classes"], d["spread"], seed)
        return data_mod.synth_bars(d["n"], d["size"], d["noise"], seed)
    return make


_DATASETS = {k: _synthetic(k) for k in ("two_moons", "blobs", "bars")}
_DATASETS.update({k: None for k in ("cifar10", "cifar100")})


def load_datasets(config, seed):
    """Training split and the (subsampled) evaluation split for one run seed."""
    d = config.dataset
    data_seed = seed if d["seed"] is None else d["seed"]
    if d["kind"].startswith("cifar"):
        if not d["train_path"] or not d["test_path"]:
            raise ConfigError("CIFAR datasets need dataset.train_path and dataset.test_path")
        train = data_mod.load_cifar_binary(d["train_path"], d["kind"], "train")
        test = data_mod.load_cifar_binary(d["test_path"], d["kind"], "test")
    else:
        full = _DATASETS[d["kind"]](d, data_seed)
        train, test = data_mod.train_test_split(full, d["test_fraction"], data_seed)
    return train, test.sample(d["eval_n"], data_seed)


def _fit(config, train, parl_config, seed, on_step=None):
    return training.train_ensemble(
        config.model_spec(), train.inputs, train.labels, parl_config,
        n_members=config.ensemble_size, epochs=config.epochs, batch_size=config.batch_size,
        lr=config.optimizer["lr"], seed=seed, augment=config.augment_spec(), on_step=on_step)


def train_target(config, seed, train=None, on_step=None):
    train = load_datasets(config, seed)[0] if train is None else train
    return _fit(config, train, config.parl_config(), seed, on_step)


def train_surrogate(config, seed, train=None):
    """Hold-out ensemble for black-box attacks; unprotected (gamma2 = 0) unless configured."""
    train = load_datasets(config, seed)[0] if train is None else train
    return _fit(config, train, config.surrogate_config(), seed + config.surrogate["seed_offset"])


def _r(x):
    return repr(float(x))


def metric_rows(seed, step, epoch, report):
    for (i, j), means in report.layer_means.items():
        for k, g in enumerate(means):
            yield [seed, step, epoch, f"{i}-{j}", k, _r(g), _r(report.r[(i, j)])]


def loss_row(seed, step, epoch, report):
    return [seed, step, epoch, _r(report.objective), _r(np.mean(report.cross_entropy))]


METRICS_HEADER = ["seed", "step", "epoch", "pair", "layer", "mean_g", "r"]
LOSS_HEADER = ["seed", "step", "epoch", "objective", "mean_ce"]
EVAL_HEADER = ["seed", "mode", "attack", "epsilon", "accuracy", "n"]


def _checkpoint_dir(run_dir, seed, role):
    return Path(run_dir) / "checkpoints" / f"seed{seed}" / role


def save_ensemble(directory, ens):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(ens.members):
        nn.save_params(directory / f"member{i}.parl", ens.spec, p)


def load_ensemble(directory, spec):
    paths = sorted(Path(directory).glob("member*.parl"), key=lambda p: int(p.stem[6:]))
    if not paths:
        raise FileNotFoundError(f"no checkpoints in {directory}")
    return Ensemble(spec, [nn.load_params(p, spec) for p in paths])


def _train_seed(args):
    """Worker: train target (and surrogate) for one seed. Returns rows, never raises on numeric faults."""
    raw, seed, run_dir = args
    config = ExperimentConfig.from_dict(raw)
    started = time.time()
    metrics, losses = [], []

    def on_step(step, epoch, report):
        metrics.extend(metric_rows(seed, step, epoch, report))
        losses.append(loss_row(seed, step, epoch, report))

    result = {"seed": seed, "status": "ok"}
    try:
        train, test = load_datasets(config, seed)
        ens, history = train_target(config, seed, train, on_step)
        save_ensemble(_checkpoint_dir(run_dir, seed, "target"), ens)
        result["clean_accuracy"] = score(ens, test.inputs, test.labels).accuracy
        result["final_r_over_h"] = history.final_normalized_penalty()
        result["steps"] = len(history.reports)
        if config.surrogate["enabled"]:
            sur, _ = train_surrogate(config, seed, train)
            save_ensemble(_checkpoint_dir(run_dir, seed, "surrogate"), sur)
            result["surrogate_clean_accuracy"] = score(sur, test.inputs, test.labels).accuracy
    except NumericalFault as exc:
        result.update(status="failed", error=str(exc))
    result["seconds"] = time.time() - started
    return result, metrics, losses


def _map(fn, jobs, items):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_dir_for(config, out=None):
    return Path(out if out is not None else config.out) / config.run_id


def read_report(run_dir):
    path = Path(run_dir) / "report.json"
    if path.exists():
        with open(path) as fh:
            return json.load(fh)
    return {}


def write_report(run_dir, config, **sections):
    report = read_report(run_dir)
    report.update(schema_version=REPORT_SCHEMA, config=config.raw, config_digest=config.digest(),
                  run_id=config.run_id)
    report.update(sections)
    with open(Path(run_dir) / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report


def cmd_train(config, seeds=None, out=None, jobs=1):
    """Train every seed. Returns the per-seed summaries; failed seeds are marked, not raised."""
    seeds = list(config.seeds if seeds is None else seeds)
    run_dir = run_dir_for(config, out)
    run_dir.mkdir(parents=True, exist_ok=True)
    results = _map(_train_seed, jobs, [(config.raw, s, str(run_dir)) for s in seeds])
    _write_csv(run_dir / "metrics.csv", METRICS_HEADER, [r for _, m, _ in results for r in m])
    _write_csv(run_dir / "loss.csv", LOSS_HEADER, [r for _, _, l in results for r in l])
    summaries = [s for s, _, _ in results]
    write_report(run_dir, config, train=summaries)
    return summaries


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------

def _eval_seed(args):
    raw, seed, run_dir, target_dir, surrogate_dir, white_box = args
    config = ExperimentConfig.from_dict(raw)
    spec = config.model_spec()
    _, test = load_datasets(config, seed)
    target = load_ensemble(Path(target_dir or _checkpoint_dir(run_dir, seed, "target")), spec)
    source = None
    if not white_box:
        sdir = Path(surrogate_dir) if surrogate_dir else _checkpoint_dir(run_dir, seed, "surrogate")
        if sdir.exists():
            source = load_ensemble(sdir, spec)
    rows, details = [], []
    clean = score(target, test.inputs, test.labels)
    rows.append([seed, "clean", "clean", _r(0.0), _r(clean.accuracy), clean.labels.size])
    details.append({"seed": seed, **clean.detail()})
    for base in config.attack_specs():
        for eps in config.epsilons:
            spec_a = base.with_epsilon(float(eps))
            rng = np.random.default_rng([spec_a.seed, seed])
            res = evaluate(target, test.inputs, test.labels, spec_a, source, rng)
            rows.append([seed, res.mode, spec_a.family, _r(eps), _r(res.accuracy), res.labels.size])
            details.append({"seed": seed, **res.detail()})
    return rows, details


def cmd_attack_eval(config, seeds=None, out=None, jobs=1, target_dir=None, surrogate_dir=None,
                    white_box=False):
    """Accuracy under every (attack, epsilon); black-box when surrogate checkpoints exist."""
    seeds = list(config.seeds if seeds is None else seeds)
    run_dir = run_dir_for(config, out)
    run_dir.mkdir(parents=True, exist_ok=True)
    if (target_dir or surrogate_dir) and len(seeds) > 1:
        raise ConfigError("explicit checkpoint directories need a single seed")
    items = [(config.raw, s, str(run_dir), target_dir, surrogate_dir, white_box) for s in seeds]
    results = _map(_eval_seed, jobs, items)
    rows = [r for rs, _ in results for r in rs]
    _write_csv(run_dir / "eval.csv", EVAL_HEADER, rows)
    write_report(run_dir, config, eval=[d for _, ds in results for d in ds])
    return rows


def cmd_cka(config, seeds=None, out=None, other=None):
    """Layer-wise CKA for every member pair; ``other`` compares against a second run directory."""
    seeds = list(config.seeds if seeds is None else seeds)
    run_dir = run_dir_for(config, out)
    cka_dir = run_dir / "cka"
    cka_dir.mkdir(parents=True, exist_ok=True)
    spec = config.model_spec()
    summary = []
    for seed in seeds:
        _, test = load_datasets(config, seed)
        probe = test.sample(config.cka["probe_n"], seed).inputs
        ens = load_ensemble(_checkpoint_dir(run_dir, seed, "target"), spec)
        pairs = [(f"{i}-{j}", ens.members[i], ens.members[j])
                 for i, j in itertools.combinations(range(ens.size), 2)]
        if other is not None:
            theirs = load_ensemble(_checkpoint_dir(other, seed, "target"), spec)
            pairs += [(f"{i}-other{i}", ens.members[i], theirs.members[i])
                      for i in range(min(ens.size, theirs.size))]
        for name, a, b in pairs:
            profile = diversity.layerwise_cka_profile(spec, a, b, probe)
            _write_csv(cka_dir / f"seed{seed}_pair{name}.csv", ["layer", "value"],
                       [[k, _r(v)] for k, v in profile.rows()])
            summary += [[seed, name, k, _r(v)] for k, v in profile.rows()]
            summary.append([seed, name, "overall", _r(profile.overall)])
    _write_csv(cka_dir / "summary.csv", ["seed", "pair", "layer", "value"], summary)
    write_report(run_dir, config, cka=[dict(zip(["seed", "pair", "layer", "value"], r)) for r in summary])
    return summary


def saliency_image(g):
    """Min-max scale a (c, h, w) gradient to an 8-bit grayscale (h, w) image, channels averaged."""
    g = np.asarray(g, dtype=np.float64).mean(axis=0)
    lo, hi = g.min(), g.max()
    scaled = np.zeros_like(g) if hi == lo else (g - lo) / (hi - lo)
    return np.round(scaled * 255).astype(np.uint8)


def gradient_cosines(grads):
    flat = np.stack([np.asarray(g).ravel() for g in grads])
    norms = np.maximum(np.linalg.norm(flat, axis=1), 1e-12)
    return (flat @ flat.T) / np.outer(norms, norms)


def cmd_gradviz(config, index=0, seeds=None, out=None):
    """Per-member loss-input-gradient PNGs and the pairwise cosine table for one test example."""
    from PIL import Image

    seeds = list(config.seeds if seeds is None else seeds)
    spec = config.model_spec()
    if len(spec.input_shape) != 3:
        raise ContractViolation("gradient images need image-shaped inputs")
    run_dir = run_dir_for(config, out)
    sal_dir = run_dir / "saliency"
    sal_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for seed in seeds:
        _, test = load_datasets(config, seed)
        if not 0 <= index < len(test):
            raise ConfigError(f"example index {index} outside the {len(test)} evaluation examples")
        ens = load_ensemble(_checkpoint_dir(run_dir, seed, "target"), spec)
        x, y = test.inputs[index:index + 1], test.labels[index:index + 1]
        grads = [attacks.input_gradient((spec, p), x, y)[0] for p in ens.members]
        for m, g in enumerate(grads):
            path = sal_dir / f"seed{seed}_ex{index}_member{m}.png"
            Image.fromarray(saliency_image(g), mode="L").save(path)
            written.append(path)
        cos = gradient_cosines(grads)
        path = sal_dir / f"seed{seed}_ex{index}_cosine.csv"
        _write_csv(path, ["member"] + [str(m) for m in range(len(grads))],
                   [[m] + [_r(v) for v in row] for m, row in enumerate(cos)])
        written.append(path)
    return written


# ----------------------------------------------------------------------------
# cross-run reports
# ----------------------------------------------------------------------------

def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize_run(run_dir):
    """Seed-averaged rows for one run directory."""
    run_dir = Path(run_dir)
    report = read_report(run_dir)
    cfg = report.get("config", {})
    base = {"run_id": report.get("run_id", run_dir.name), "gamma2": cfg.get("parl", {}).get("gamma2"),
            "n_taps": cfg.get("parl", {}).get("n_taps")}
    rows = []
    train = [t for t in report.get("train", []) if t.get("status") == "ok"]
    if train:
        rows.append({**base, "metric": "r_over_h", "attack": "", "epsilon": "",
                     "value": float(np.mean([t["final_r_over_h"] for t in train])), "seeds": len(train)})
    if (run_dir / "eval.csv").exists():
        groups = {}
        for r in _read_csv(run_dir / "eval.csv"):
            groups.setdefault((r["mode"], r["attack"], float(r["epsilon"])), []).append(float(r["accuracy"]))
        for (mode, attack, eps), acc in sorted(groups.items()):
            rows.append({**base, "metric": f"{mode}_accuracy", "attack": attack, "epsilon": eps,
                         "value": float(np.mean(acc)), "seeds": len(acc)})
    if (run_dir / "cka" / "summary.csv").exists():
        groups = {}
        for r in _read_csv(run_dir / "cka" / "summary.csv"):
            if "other" not in r["pair"]:
                groups.setdefault(r["layer"], []).append(float(r["value"]))
        for layer, vals in groups.items():
            rows.append({**base, "metric": "cka", "attack": f"layer {layer}", "epsilon": "",
                         "value": float(np.mean(vals)), "seeds": len(vals)})
    return rows


REPORT_HEADER = ["run_id", "gamma2", "n_taps", "metric", "attack", "epsilon", "value", "seeds"]


def cmd_report(out, run_dirs=None):
    """Collect every run under ``out`` (or the given run directories) into summary.csv and summary.md."""
    out = Path(out)
    if run_dirs is None:
        run_dirs = sorted(p for p in out.iterdir() if (p / "report.json").exists())
    rows = [row for d in run_dirs for row in summarize_run(d)]
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "summary.csv", REPORT_HEADER,
               [[r[k] if not isinstance(r[k], float) else _r(r[k]) for k in REPORT_HEADER] for r in rows])
    lines = ["| " + " | ".join(REPORT_HEADER) + " |", "|" + "---|" * len(REPORT_HEADER)]
    for r in rows:
        cells = [f"{r[k]:.4f}" if k == "value" else str(r[k]) for k in REPORT_HEADER]
        lines.append("| " + " | ".join(cells) + " |")
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    return rows
