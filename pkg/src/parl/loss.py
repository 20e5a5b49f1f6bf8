"""Pairwise layer-gradient similarity penalty and the joint ensemble objective.

For every member the input gradient of each of the first ``n_taps`` hidden
layers (summed over that layer's output features) is computed once per batch.
For each pair of members the per-example cosine similarities of these
gradients are summed over layers and averaged over the batch, giving the
pairwise penalty. The training objective is::

    gamma1 * sum_i mean_x CE_i(x, y)  +  gamma2 * sum_{i<j} penalty(i, j)

All members are updated jointly: the penalty's gradient reaches both models
of every pair.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .exceptions import ContractViolation


@dataclass(frozen=True)
class ParlConfig:
    gamma1: float = 1.0
    gamma2: float = 0.5
    n_taps: int = None
    cosine_eps: float = 1e-12

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ContractViolation("gamma1 and gamma2 must be non-negative")
        if self.n_taps is not None and self.n_taps < 0:
            raise ContractViolation("n_taps must be non-negative")
        if not self.cosine_eps > 0:
            raise ContractViolation("cosine_eps must be positive")

    def taps_for(self, spec):
        n = len(spec.tap_layers) if self.n_taps is None else self.n_taps
        if n > len(spec.tap_layers):
            raise ContractViolation(f"n_taps={n} exceeds the {len(spec.tap_layers)} taps of the model")
        return n


@dataclass
class PenaltyReport:
    """Pre-step penalty values of one training step."""

    n_taps: int
    batch_size: int
    r: dict = field(default_factory=dict)             # (i, j) -> penalty
    layer_means: dict = field(default_factory=dict)   # (i, j) -> [mean cosine per layer]
    objective: float = float("nan")
    cross_entropy: list = field(default_factory=list)

    def normalized(self):
        """Penalty divided by the number of layers, one value per pair."""
        if not self.n_taps:
            return {pair: 0.0 for pair in self.r}
        return {pair: value / self.n_taps for pair, value in self.r.items()}

    def mean_normalized(self):
        values = list(self.normalized().values())
        return float(np.mean(values)) if values else 0.0


def layer_pair_similarity(g_i, g_j, eps=1e-12, axis=None):
    """Cosine similarity with each norm floored at ``eps``.

    With ``axis`` set, similarities are taken along that axis (one per row).
    """
    g_i, g_j = ad.constant(g_i), ad.constant(g_j)
    if g_i.shape != g_j.shape:
        raise ContractViolation(f"gradient shapes differ: {g_i.shape} vs {g_j.shape}")
    num = ad.dot(g_i, g_j, axis)
    den = ad.mul(ad.maximum(ad.l2_norm(g_i, axis), eps), ad.maximum(ad.l2_norm(g_j, axis), eps))
    return ad.div(num, den)


def _flat_rows(g):
    g = ad.constant(g)
    return ad.reshape(g, (g.shape[0], -1))


def _per_example_similarities(grads_i, grads_j, eps):
    """Per-layer vectors of per-example cosines between two members' input gradients."""
    return [layer_pair_similarity(_flat_rows(a), _flat_rows(b), eps, axis=1)
            for a, b in zip(grads_i, grads_j)]


def _check_pair(spec_i, spec_j):
    if spec_i != spec_j:
        raise ContractViolation("both models must share one model spec")


def pairwise_similarity(spec, params_i, params_j, x, n_taps, eps=1e-12, create_graph=True):
    """Sum over the first ``n_taps`` layers of the gradient cosine for one example."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != spec.input_shape:
        raise ContractViolation(f"expected a single example of shape {spec.input_shape}")
    return penalty(spec, params_i, params_j, x[None], n_taps, eps, create_graph)


def penalty(spec, params_i, params_j, X, n_taps, eps=1e-12, create_graph=True, spec_j=None):
    """Batch mean of the summed per-layer gradient cosines between two models."""
    _check_pair(spec, spec if spec_j is None else spec_j)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 0 or X.shape[0] == 0:
        raise ContractViolation("penalty needs a non-empty batch")
    _, gi = nn.tap_input_gradients(spec, params_i, X, n_taps, create_graph)
    _, gj = nn.tap_input_gradients(spec, params_j, X, n_taps, create_graph)
    if n_taps == 0:
        return ad.constant(0.0)
    per_layer = _per_example_similarities(gi, gj, eps)
    total = per_layer[0]
    for s in per_layer[1:]:
        total = ad.add(total, s)
    return ad.mean(total)


def _objective_terms(spec, members, X, y, config, create_graph):
    n = len(members)
    if n < 1:
        raise ContractViolation("ensemble needs at least one member")
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ContractViolation("empty batch")
    H = config.taps_for(spec)
    need_penalty = H > 0 and n > 1
    x_node = ad.variable(X)

    ce_terms, grads = [], []
    for params in members:
        if need_penalty:
            logits, g = nn.tap_input_gradients(spec, params, x_node, H, create_graph)
        else:
            logits, _ = nn.forward_with_taps(spec, params, x_node)
            g = []
        ce_terms.append(ad.softmax_crossentropy(logits, y))
        grads.append(g)

    ce_sum = ce_terms[0]
    for term in ce_terms[1:]:
        ce_sum = ad.add(ce_sum, term)
    objective = ad.mul(config.gamma1, ce_sum)

    pair_r, pair_layers = {}, {}
    if need_penalty:
        for i, j in itertools.combinations(range(n), 2):
            per_layer = _per_example_similarities(grads[i], grads[j], config.cosine_eps)
            layer_means = [ad.mean(s) for s in per_layer]
            r = layer_means[0]
            for m in layer_means[1:]:
                r = ad.add(r, m)
            pair_r[(i, j)] = r
            pair_layers[(i, j)] = layer_means
        if config.gamma2 > 0:
            pen = None
            for r in pair_r.values():
                pen = r if pen is None else ad.add(pen, r)
            objective = ad.add(objective, ad.mul(config.gamma2, pen))
    return objective, ce_terms, pair_r, pair_layers, H


def parl_objective(spec, members, X, y, config):
    """Scalar objective node; ``members`` are ModelParams or dicts of parameter nodes."""
    objective, *_ = _objective_terms(spec, members, X, y, config, create_graph=True)
    return objective


def parl_train_step(spec, members, X, y, config, states):
    """One joint update of every member.

    Returns ``(new_members, new_states, report)``. On a numerical fault the
    exception propagates and the inputs are left untouched.
    """
    nodes = [{k: ad.variable(v) for k, v in p.tensors.items()} for p in members]
    create_graph = config.gamma2 > 0
    objective, ce_terms, pair_r, pair_layers, H = _objective_terms(
        spec, nodes, X, y, config, create_graph)

    flat = [node for d in nodes for node in d.values()]
    flat_grads = ad.grad(objective, flat)
    it = iter(flat_grads)
    new_members, new_states = [], []
    for params, node_dict, state in zip(members, nodes, states):
        grads = {k: next(it) for k in node_dict}
        p, s = nn.adam_step(params, grads, state)
        new_members.append(p)
        new_states.append(s)

    report = PenaltyReport(
        n_taps=H,
        batch_size=int(np.shape(X)[0]),
        r={pair: r.item() for pair, r in pair_r.items()},
        layer_means={pair: [m.item() for m in ms] for pair, ms in pair_layers.items()},
        objective=objective.item(),
        cross_entropy=[c.item() for c in ce_terms],
    )
    return new_members, new_states, report
