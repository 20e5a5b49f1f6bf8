"""Minibatch training of an ensemble under the PARL objective."""

from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import loss
from . import nn
from .ensemble import Ensemble


def member_seed(seed, index):
    """Initialisation seed of ensemble member ``index`` for a run seeded with ``seed``."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


@dataclass
class TrainHistory:
    reports: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def final_normalized_penalty(self, last=None):
        """Mean pairwise R/H over the last ``last`` steps (default: the final epoch)."""
        if not self.reports:
            return 0.0
        if last is None:
            final = self.epochs[-1]
            chosen = [r for r, e in zip(self.reports, self.epochs) if e == final]
        else:
            chosen = self.reports[-last:]
        return float(np.mean([r.mean_normalized() for r in chosen]))


def train_ensemble(spec, X, y, config, n_members=3, epochs=100, batch_size=50, lr=0.001,
                   seed=0, augment=None, members=None, on_step=None):
    """Train ``n_members`` models jointly. Returns ``(Ensemble, TrainHistory)``.

    ``on_step(step, epoch, report)`` is called after every update.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if members is None:
        members = [nn.init_params(spec, member_seed(seed, i)) for i in range(n_members)]
    states = [nn.AdamState.for_params(p, lr=lr) for p in members]
    order_rng = np.random.default_rng([int(seed), 1])
    history = TrainHistory()
    step = 0
    n = X.shape[0]
    for epoch in range(epochs):
        perm = order_rng.permutation(n)
        inputs = X
        if augment is not None:
            inputs = data_mod.augment(X, augment, epoch=epoch)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            members, states, report = loss.parl_train_step(
                spec, members, inputs[idx], y[idx], config, states)
            history.reports.append(report)
            history.epochs.append(epoch)
            if on_step is not None:
                on_step(step, epoch, report)
            step += 1
    return Ensemble(spec, members), history
