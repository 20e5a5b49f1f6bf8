"""Linear CKA between layer representations of two models."""

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .exceptions import ContractViolation


class DegenerateCKAWarning(RuntimeWarning):
    """Emitted when an activation matrix is constant and CKA is undefined."""


def center_columns(X):
    return X - X.mean(axis=0, keepdims=True)


def linear_cka(X, Y):
    """Linear CKA of activation matrices X (n x p) and Y (n x q).

    Returns 0 (with a :class:`DegenerateCKAWarning`) when either side has no
    variance.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    X = X.reshape(X.shape[0], -1)
    Y = Y.reshape(Y.shape[0], -1)
    if X.shape[0] != Y.shape[0]:
        raise ContractViolation(f"CKA inputs have {X.shape[0]} and {Y.shape[0]} rows")
    if X.shape[0] < 2:
        raise ContractViolation("CKA needs at least two examples")
    X, Y = center_columns(X), center_columns(Y)
    n = X.shape[0]
    if max(X.shape[1], Y.shape[1]) > n:
        # Gram form is cheaper for wide activations
        Kx, Ky = X @ X.T, Y @ Y.T
        hsic = np.sum(Kx * Ky)
        norm_x, norm_y = np.linalg.norm(Kx), np.linalg.norm(Ky)
    else:
        hsic = np.linalg.norm(Y.T @ X) ** 2
        norm_x, norm_y = np.linalg.norm(X.T @ X), np.linalg.norm(Y.T @ Y)
    den = norm_x * norm_y
    if den == 0:
        warnings.warn("constant activations; linear CKA is undefined", DegenerateCKAWarning)
        return 0.0
    return float(hsic / den)


@dataclass
class CkaProfile:
    layers: list
    values: list
    n: int

    @property
    def overall(self):
        return float(np.mean(self.values)) if self.values else float("nan")

    def rows(self):
        return list(zip(self.layers, self.values))


def representation_layers(spec):
    """Layers whose outputs are compared; flatten and fixed normalisation carry no learned representation."""
    return [i for i, layer in enumerate(spec.layers)
            if not isinstance(layer, (nn.Flatten, nn.Normalize))]


def layer_activations(spec, params, X):
    with ad.no_grad():
        outputs = nn.forward_all(spec, params, np.asarray(X, dtype=np.float64))
    return [o.value.reshape(o.shape[0], -1) for o in outputs]


def layerwise_cka_profile(spec, params_i, params_j, probe, layers=None):
    probe = np.asarray(probe, dtype=np.float64)
    if probe.shape[0] == 0:
        raise ContractViolation("empty probe set")
    layers = representation_layers(spec) if layers is None else list(layers)
    acts_i = layer_activations(spec, params_i, probe)
    acts_j = layer_activations(spec, params_j, probe)
    values = [linear_cka(acts_i[k], acts_j[k]) for k in layers]
    return CkaProfile(layers, values, int(probe.shape[0]))
