"""scikit-learn style wrapper around PARL ensemble training."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from . import attacks
from . import ensemble as ens_mod
from . import loss, nn, training


class ParlEnsembleClassifier(ClassifierMixin, BaseEstimator):
    """Majority-vote ensemble of MLPs trained jointly with the pairwise gradient-similarity penalty.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
        Widths of the hidden dense layers. Ignored when ``model_spec`` is given.
    activation : str
        Hidden activation, ``"relu"`` or ``"tanh"``.
    n_members : int
        Ensemble size.
    gamma1, gamma2 : float
        Weights of the summed cross-entropy and of the pairwise penalty.
        ``gamma2=0`` trains the members independently.
    n_taps : int or None
        Number of leading hidden layers whose input gradients are decorrelated;
        ``None`` uses every hidden layer.
    normalize : tuple or None
        ``(mean, std)`` of a fixed input standardisation layer. Inputs are
        expected in ``[0, 1]``; ``(0.5, 0.25)`` centres them.
    model_spec : ModelSpec or None
        Full architecture, for image models. ``X`` holds flattened rows that
        are reshaped to its input shape.
    augment : AugmentSpec or None
        Per-epoch augmentation for image inputs.
    """

    def __init__(self, hidden_layer_sizes=(16, 16), activation="relu", n_members=3,
                 gamma1=1.0, gamma2=0.5, n_taps=None, epochs=50, batch_size=32,
                 learning_rate=0.001, normalize=(0.5, 0.25), model_spec=None, augment=None,
                 random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.n_members = n_members
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.n_taps = n_taps
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.normalize = normalize
        self.model_spec = model_spec
        self.augment = augment
        self.random_state = random_state

    def _build_spec(self, n_features, n_classes):
        if self.model_spec is not None:
            return self.model_spec
        norm = None
        if self.normalize is not None:
            mean, std = self.normalize
            norm = ((float(mean),), (float(std),))
        sizes = [n_features, *self.hidden_layer_sizes, max(n_classes, 2)]
        return nn.mlp_spec(sizes, self.activation, normalize=norm)

    def _inputs(self, X):
        if self.model_spec is not None:
            return X.reshape((X.shape[0],) + tuple(self.spec_.input_shape))
        return X

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        self.spec_ = self._build_spec(self.n_features_in_, len(self.classes_))
        config = loss.ParlConfig(self.gamma1, self.gamma2, self.n_taps)
        self.ensemble_, self.history_ = training.train_ensemble(
            self.spec_, self._inputs(X), self._encoder.transform(y), config,
            n_members=self.n_members, epochs=self.epochs, batch_size=self.batch_size,
            lr=self.learning_rate, seed=self.random_state, augment=self.augment)
        return self

    def _check(self, X):
        check_is_fitted(self, "ensemble_")
        return self._inputs(validate_data(self, X, dtype=np.float64, reset=False))

    def predict(self, X):
        X = self._check(X)
        if len(self.classes_) == 1:
            return np.full(X.shape[0], self.classes_[0])
        return self.classes_[self.ensemble_.predict(X)]

    def predict_proba(self, X):
        """Mean member class probabilities (the vote itself is by majority; see ``predict``)."""
        X = self._check(X)
        if len(self.classes_) == 1:
            return np.ones((X.shape[0], 1))
        return self.ensemble_.member_probabilities(X).mean(axis=1)

    @property
    def penalty_(self):
        """Mean pairwise penalty over layers during the final epoch."""
        check_is_fitted(self, "history_")
        return self.history_.final_normalized_penalty()

    def perturb(self, X, y, attack, source=None):
        """Adversarial inputs crafted against this ensemble, or against ``source`` (another fitted estimator)."""
        crafter = self if source is None else source
        X = self._check(X)
        target_y = crafter._encoder.transform(np.asarray(y))
        adv = attacks.generate(crafter.ensemble_, X, target_y, attack)
        return adv.x_adv.reshape(adv.x_adv.shape[0], -1)

    def attack_score(self, X, y, attack, source=None):
        """Majority-vote accuracy under ``attack``; black-box when ``source`` is given."""
        X = self._check(X)
        y = self._encoder.transform(np.asarray(y))
        source_ens = None if source is None else source.ensemble_
        return ens_mod.evaluate(self.ensemble_, X, y, attack=attack, source=source_ens).accuracy

