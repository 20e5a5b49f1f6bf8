"""Majority-vote ensembles and accuracy under clean, white-box and black-box conditions."""

from dataclasses import dataclass, field

import numpy as np

from . import attacks
from . import nn
from .exceptions import ContractViolation


@dataclass
class Ensemble:
    """Ordered members sharing one architecture."""

    spec: nn.ModelSpec
    members: list

    def __post_init__(self):
        self.members = list(self.members)
        if not self.members:
            raise ContractViolation("an ensemble needs at least one member")
        for p in self.members:
            p.check(self.spec)

    @property
    def size(self):
        return len(self.members)

    def member_logits(self, X):
        return [nn.predict_logits(self.spec, p, X) for p in self.members]

    def member_probabilities(self, X):
        return np.stack([_softmax(z) for z in self.member_logits(X)], axis=1)

    def predict(self, X):
        votes, probs = self.votes(X)
        return majority_vote_batch(votes, probs.sum(axis=1))

    def votes(self, X):
        """Member predictions (n, N) and member class probabilities (n, N, C)."""
        probs = self.member_probabilities(np.asarray(X, dtype=np.float64))
        return probs.argmax(axis=2), probs


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def majority_vote(member_predictions, member_confidences):
    """Modal class; ties go to the highest summed probability, then the lowest class id."""
    preds = np.asarray(member_predictions, dtype=np.int64)
    if preds.size < 1:
        raise ContractViolation("majority vote needs at least one prediction")
    conf = np.asarray(member_confidences, dtype=np.float64)
    summed = conf.sum(axis=0) if conf.ndim == 2 else conf
    return int(majority_vote_batch(preds[None, :], summed[None, :])[0])


def majority_vote_batch(votes, summed_probs):
    """Vectorised :func:`majority_vote` over rows: ``votes`` (n, N), ``summed_probs`` (n, C)."""
    votes = np.asarray(votes, dtype=np.int64)
    summed_probs = np.asarray(summed_probs, dtype=np.float64)
    n, num_classes = summed_probs.shape
    counts = np.zeros((n, num_classes), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(n), votes.shape[1]), votes.reshape(-1)), 1)
    tied = counts == counts.max(axis=1, keepdims=True)
    score = np.where(tied, summed_probs, -np.inf)
    # argmax returns the first maximum, i.e. the lowest class id among exact ties
    return score.argmax(axis=1)


@dataclass
class EvalResult:
    accuracy: float
    member_accuracies: list
    votes: np.ndarray
    summed_probs: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray
    mode: str = "clean"
    attack: object = None
    epsilon: float = 0.0
    extra: dict = field(default_factory=dict)

    def recount(self):
        """Accuracy recomputed from the stored per-example votes."""
        preds = majority_vote_batch(self.votes, self.summed_probs)
        return float(np.mean(preds == self.labels))

    def row(self):
        return {
            "mode": self.mode,
            "attack": self.attack.family if self.attack is not None else "clean",
            "epsilon": self.epsilon,
            "accuracy": self.accuracy,
            "n": int(self.labels.size),
        }

    def detail(self):
        return {**self.row(), "member_accuracies": list(self.member_accuracies),
                "attack_spec": self.attack.to_dict() if self.attack is not None else None}


def score(ensemble, X, y, mode="clean", attack=None):
    """Majority-vote accuracy of ``ensemble`` on the given (possibly perturbed) inputs."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[1:] != ensemble.spec.input_shape or X.shape[0] != y.shape[0]:
        raise ContractViolation("dataset does not match the ensemble's input shape")
    votes, probs = ensemble.votes(X)
    summed = probs.sum(axis=1)
    preds = majority_vote_batch(votes, summed)
    member_acc = [float(np.mean(votes[:, m] == y)) for m in range(votes.shape[1])]
    return EvalResult(
        accuracy=float(np.mean(preds == y)),
        member_accuracies=member_acc,
        votes=votes,
        summed_probs=summed,
        predictions=preds,
        labels=y,
        mode=mode,
        attack=attack,
        epsilon=attack.epsilon if attack is not None else 0.0,
    )


def evaluate(ensemble, X, y, attack=None, source=None, rng=None):
    """Accuracy on clean data, or under attack.

    With ``source`` the adversarial examples are crafted on that surrogate
    ensemble and transferred (black-box); otherwise they are crafted on
    ``ensemble`` itself (white-box).
    """
    if source is not None and attack is None:
        raise ContractViolation("black-box evaluation needs an attack spec")
    if attack is None:
        return score(ensemble, X, y)
    if source is not None and source.spec.input_shape != ensemble.spec.input_shape:
        raise ContractViolation("surrogate and target take different inputs")
    crafter = ensemble if source is None else source
    adv = attacks.generate(crafter, X, y, attack, rng=rng)
    return score(ensemble, adv.x_adv, y, "white-box" if source is None else "black-box", attack)
