"""Untargeted L-infinity attacks: FGSM, BIM, MIM and PGD.

A *target* is anything with ``.spec`` and ``.members`` (an ensemble), or a
``(spec, params)`` pair for a single model. Against an ensemble the attack
loss is the mean of the members' cross-entropies.

Iterates are kept feasible after every step by projecting onto the
epsilon-ball around the clean input and then clamping to the valid input
range ``[0, 1]``.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .exceptions import ContractViolation

FAMILIES = ("fgsm", "bim", "mim", "pgd")
STEP_RULES = ("eps/5", "eps/steps")


@dataclass(frozen=True)
class AttackSpec:
    """Attack family and hyperparameters.

    ``alpha`` overrides the step size; otherwise ``step_rule`` derives it from
    ``epsilon`` (one fifth of the budget by default, or ``epsilon / steps``).
    """

    family: str
    epsilon: float
    steps: int = 50
    alpha: float = None
    step_rule: str = "eps/5"
    mu: float = 0.01
    restarts: int = 10
    seed: int = 0
    loss_mode: str = "mean-member-ce"

    def __post_init__(self):
        object.__setattr__(self, "family", self.family.lower())
        if self.family not in FAMILIES:
            raise ContractViolation(f"unknown attack family {self.family!r}")
        if self.epsilon < 0:
            raise ContractViolation("epsilon must be non-negative")
        if self.family != "fgsm":
            if self.steps < 1:
                raise ContractViolation("iterative attacks need steps >= 1")
            if self.alpha is not None and not self.alpha > 0:
                raise ContractViolation("alpha must be positive")
        if self.restarts < 1:
            raise ContractViolation("restarts must be >= 1")
        if self.mu < 0:
            raise ContractViolation("mu must be non-negative")
        if self.step_rule not in STEP_RULES:
            raise ContractViolation(f"unknown step rule {self.step_rule!r}")
        if self.loss_mode != "mean-member-ce":
            raise ContractViolation(f"unsupported loss mode {self.loss_mode!r}")

    @property
    def step_size(self):
        if self.alpha is not None:
            return self.alpha
        if self.step_rule == "eps/steps":
            return self.epsilon / self.steps
        return self.epsilon / 5.0

    def with_epsilon(self, epsilon):
        return replace(self, epsilon=epsilon)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class AdvBatch:
    x_adv: np.ndarray
    origin: np.ndarray
    spec: AttackSpec
    iterates: list = field(default_factory=list)


def _members(target):
    if hasattr(target, "members") and hasattr(target, "spec"):
        return target.spec, list(target.members)
    spec, params = target
    return spec, [params]


def attack_loss(target, x, y, reduction="mean"):
    """Mean over members of the cross-entropy; ``reduction`` applies over examples."""
    spec, members = _members(target)
    per_member = [ad.softmax_crossentropy(nn.forward_with_taps(spec, p, x)[0], y, reduction="none")
                  for p in members]
    total = per_member[0]
    for term in per_member[1:]:
        total = ad.add(total, term)
    per_example = ad.mul(total, 1.0 / len(members))
    if reduction == "none":
        return per_example
    if reduction == "sum":
        return ad.sum(per_example)
    return ad.mean(per_example)


def loss_per_example(target, x, y):
    with ad.no_grad():
        return attack_loss(target, x, y, "none").value


def input_gradient(target, x, y):
    """Per-example gradient of the attack loss w.r.t. the inputs."""
    xn = ad.variable(x)
    return ad.grad(attack_loss(target, xn, y, "sum"), xn)


def project(x, origin, epsilon):
    """Project onto the epsilon-ball around ``origin``, then clamp to [0, 1]."""
    return np.clip(origin + np.clip(x - origin, -epsilon, epsilon), 0.0, 1.0)


def _check(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] != y.shape[0]:
        raise ContractViolation("inputs and labels differ in length")
    return x, y


def fgsm(target, x, y, spec, keep_iterates=False):
    x, y = _check(x, y)
    g = input_gradient(target, x, y)
    x_adv = project(x + spec.epsilon * np.sign(g), x, spec.epsilon)
    return AdvBatch(x_adv, x, spec, [x, x_adv] if keep_iterates else [])


def _l1_normalize(g):
    l1 = np.abs(g).reshape(g.shape[0], -1).sum(axis=1)
    scale = np.where(l1 > 0, 1.0 / np.where(l1 > 0, l1, 1.0), 0.0)
    return g * scale.reshape((-1,) + (1,) * (g.ndim - 1))


def _iterate(target, origin, start, y, spec, momentum, keep_iterates):
    alpha, eps = spec.step_size, spec.epsilon
    x = start
    iterates = [x] if keep_iterates else []
    acc = np.zeros_like(origin)
    for _ in range(spec.steps):
        g = input_gradient(target, x, y)
        if momentum:
            acc = spec.mu * acc + _l1_normalize(g)
            direction = np.sign(acc)
        else:
            direction = np.sign(g)
        x = project(x + alpha * direction, origin, eps)
        if keep_iterates:
            iterates.append(x)
    return x, iterates


def bim(target, x, y, spec, keep_iterates=False):
    x, y = _check(x, y)
    x_adv, iterates = _iterate(target, x, x, y, spec, False, keep_iterates)
    return AdvBatch(x_adv, x, spec, iterates)


def mim(target, x, y, spec, keep_iterates=False):
    x, y = _check(x, y)
    x_adv, iterates = _iterate(target, x, x, y, spec, True, keep_iterates)
    return AdvBatch(x_adv, x, spec, iterates)


def pgd(target, x, y, spec, rng=None, keep_iterates=False):
    """BIM from random starts in the epsilon-ball; per example the highest-loss restart wins."""
    x, y = _check(x, y)
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    best, best_loss = None, None
    iterates = []
    for _ in range(spec.restarts):
        noise = rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape)
        start = np.clip(x + noise, 0.0, 1.0)
        candidate, its = _iterate(target, x, start, y, spec, False, keep_iterates)
        iterates.extend(its)
        cand_loss = loss_per_example(target, candidate, y)
        if best is None:
            best, best_loss = candidate.copy(), cand_loss
            continue
        better = cand_loss > best_loss
        best[better] = candidate[better]
        best_loss = np.where(better, cand_loss, best_loss)
    return AdvBatch(best, x, spec, iterates)


_DISPATCH = {"fgsm": fgsm, "bim": bim, "mim": mim}


def generate(target, x, y, spec, rng=None, keep_iterates=False):
    """Run the attack named by ``spec.family``."""
    if spec.family == "pgd":
        return pgd(target, x, y, spec, rng, keep_iterates)
    return _DISPATCH[spec.family](target, x, y, spec, keep_iterates)
