import itertools
import time
from pathlib import Path

import numpy as np
import pytest

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
ACCEPTANCE_LINES = []


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def record(name, ok, detail=""):
    """Log one acceptance verdict; the lines are repeated in the terminal summary."""
    line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def moons_experiment():
    """Surrogate, baseline, PARL (H=2) and PARL (H=1) ensembles on two-moons, three seeds.

    Adversarial examples are crafted once per (seed, attack, epsilon) on the
    unprotected surrogate and scored on every target ensemble.
    """
    from parl import attacks, diversity, harness
    from parl.ensemble import score

    started = time.time()
    configs = {name: harness.ExperimentConfig.load(CONFIGS / f"two_moons_{name}.yaml")
               for name in ("baseline", "parl", "parl_h1")}
    ref = configs["parl"]
    out = {"clean": {}, "r_over_h": {}, "cka": {}, "transfer": {}, "layers": None,
           "epsilons": list(ref.epsilons), "seeds": list(ref.seeds)}
    families = [a for a in ref.attack_specs() if a.family in ("fgsm", "pgd")]
    for seed in ref.seeds:
        train, test = harness.load_datasets(ref, seed)
        surrogate, _ = harness.train_surrogate(ref, seed, train)
        targets = {}
        for name, cfg in configs.items():
            ens, history = harness.train_target(cfg, seed, train)
            targets[name] = ens
            out["clean"].setdefault(name, []).append(score(ens, test.inputs, test.labels).accuracy)
            out["r_over_h"].setdefault(name, []).append(history.final_normalized_penalty())
            profiles = [diversity.layerwise_cka_profile(ens.spec, a, b, test.inputs)
                        for a, b in itertools.combinations(ens.members, 2)]
            out["layers"] = profiles[0].layers
            out["cka"].setdefault(name, []).append(np.mean([p.values for p in profiles], axis=0))
        out["clean"].setdefault("surrogate", []).append(score(surrogate, test.inputs, test.labels).accuracy)
        for base in families:
            for eps in ref.epsilons:
                spec_a = base.with_epsilon(float(eps))
                adv = attacks.generate(surrogate, test.inputs, test.labels, spec_a,
                                       rng=np.random.default_rng([spec_a.seed, seed]))
                for name, ens in targets.items():
                    acc = score(ens, adv.x_adv, test.labels).accuracy
                    out["transfer"].setdefault((name, base.family, float(eps)), []).append(acc)
    out["tap_layers"] = list(ref.model_spec().tap_layers)
    out["seconds"] = time.time() - started
    return out
