"""scikit-learn compatible wrappers.

``fit(X, y)`` partitions the training data over simulated clients, runs the
federated algorithm and keeps every client's personalized classifier.
``predict_proba`` averages the clients' class probabilities unless a single
``client`` is requested.

>>> from sklearn.datasets import make_blobs
>>> X, y = make_blobs(400, centers=4, random_state=0)
>>> clf = FedAvgClassifier(n_clients=4, rounds=5).fit(X, y)
>>> clf.predict(X[:3]).shape
(3,)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import MinMaxScaler
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import nn
from .config import RunConfig
from .data import LabeledDataset
from .experiments import Simulation, evaluate, make_partition


class _FederatedClassifier(ClassifierMixin, BaseEstimator):
    _algorithm = "local"

    def _run_config(self) -> RunConfig:
        params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()}
        seed = params.pop("random_state")
        return RunConfig(
            algorithm=self._algorithm,
            seed=0 if seed is None else int(seed),
            sampling_ratio=1.0,
            **params,
        ).validate()

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        # Generated samples live in [-1, 1] (tanh), so real data is scaled to match.
        self.scaler_ = MinMaxScaler(feature_range=(-1, 1), clip=True).fit(X)
        ds = LabeledDataset(self.scaler_.transform(X), y_idx.astype(np.int64), len(self.classes_))
        cfg = self._run_config()
        self.shards_ = make_partition(cfg, ds)
        sim = Simulation(cfg, ds, self.shards_)
        self.round_records_ = [sim.step() for _ in range(cfg.rounds)]
        self.client_params_ = [theta.copy() for theta in sim.classifiers()]
        self.ledger_ = sim.ledger
        self.global_params_ = None if sim.global_classifier is None else sim.global_classifier.copy()
        return self

    def _scaled(self, X):
        check_is_fitted(self, "client_params_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, but {type(self).__name__} is expecting {self.n_features_in_} features as input"
            )
        return self.scaler_.transform(X)

    def predict_proba(self, X, client: int | None = None):
        Xs = self._scaled(X)
        thetas = self.client_params_ if client is None else [self.client_params_[client]]
        probs = [nn.softmax(nn.forward(t.spec, t, Xs)) for t in thetas]
        return np.mean(probs, axis=0)

    def predict(self, X, client: int | None = None):
        proba = self.predict_proba(X, client)
        return self.classes_[np.argmax(proba, axis=1)]

    def client_scores(self, X, y) -> list[float]:
        """Accuracy of every client's own classifier on ``(X, y)``."""
        Xs = self._scaled(X)
        y = np.asarray(y)
        lookup = {c: i for i, c in enumerate(self.classes_)}
        y_idx = np.array([lookup.get(v, -1) for v in y], dtype=np.int64)
        hits = []
        for t in self.client_params_:
            pred = np.argmax(nn.forward(t.spec, t, Xs), axis=1)
            hits.append(float(np.mean(pred == y_idx)))
        return hits


class FedDTGClassifier(_FederatedClassifier):
    """Per-client classifiers trained with a shared conditional GAN and mutual distillation."""

    _algorithm = "feddtg"

    def __init__(
        self,
        n_clients=10,
        frac=1.0,
        rounds=20,
        partition="dirichlet",
        dirichlet_alpha=0.5,
        batch_size=32,
        local_epochs=1,
        z_dim=8,
        generator_hidden=(64, 64),
        discriminator_hidden=(64, 64),
        classifier_hidden=(64, 64),
        lr_generator=1e-3,
        lr_discriminator=1e-3,
        lr_classifier=1e-3,
        distill_sample_count=1000,
        alpha_kd=0.9,
        temperature=1.0,
        use_global_generator=True,
        use_co_distillation=True,
        random_state=None,
    ):
        self.n_clients = n_clients
        self.frac = frac
        self.rounds = rounds
        self.partition = partition
        self.dirichlet_alpha = dirichlet_alpha
        self.batch_size = batch_size
        self.local_epochs = local_epochs
        self.z_dim = z_dim
        self.generator_hidden = generator_hidden
        self.discriminator_hidden = discriminator_hidden
        self.classifier_hidden = classifier_hidden
        self.lr_generator = lr_generator
        self.lr_discriminator = lr_discriminator
        self.lr_classifier = lr_classifier
        self.distill_sample_count = distill_sample_count
        self.alpha_kd = alpha_kd
        self.temperature = temperature
        self.use_global_generator = use_global_generator
        self.use_co_distillation = use_co_distillation
        self.random_state = random_state


class FedAvgClassifier(_FederatedClassifier):
    """FedAvg; a positive ``fedprox_mu`` turns it into FedProx."""

    _algorithm = "fedavg"

    def __init__(
        self,
        n_clients=10,
        frac=1.0,
        rounds=20,
        partition="dirichlet",
        dirichlet_alpha=0.5,
        batch_size=32,
        local_epochs=1,
        classifier_hidden=(64, 64),
        lr_classifier=1e-3,
        fedprox_mu=0.0,
        aggregation_weighting="uniform",
        random_state=None,
    ):
        self.n_clients = n_clients
        self.frac = frac
        self.rounds = rounds
        self.partition = partition
        self.dirichlet_alpha = dirichlet_alpha
        self.batch_size = batch_size
        self.local_epochs = local_epochs
        self.classifier_hidden = classifier_hidden
        self.lr_classifier = lr_classifier
        self.fedprox_mu = fedprox_mu
        self.aggregation_weighting = aggregation_weighting
        self.random_state = random_state

    def _run_config(self) -> RunConfig:
        cfg = super()._run_config()
        cfg.algorithm = "fedprox" if self.fedprox_mu > 0 else "fedavg"
        return cfg


class LocalClassifier(_FederatedClassifier):
    """Each client trains alone on its shard; no communication."""

    _algorithm = "local"

    def __init__(
        self,
        n_clients=10,
        frac=1.0,
        rounds=20,
        partition="dirichlet",
        dirichlet_alpha=0.5,
        batch_size=32,
        local_epochs=1,
        classifier_hidden=(64, 64),
        lr_classifier=1e-3,
        random_state=None,
    ):
        self.n_clients = n_clients
        self.frac = frac
        self.rounds = rounds
        self.partition = partition
        self.dirichlet_alpha = dirichlet_alpha
        self.batch_size = batch_size
        self.local_epochs = local_epochs
        self.classifier_hidden = classifier_hidden
        self.lr_classifier = lr_classifier
        self.random_state = random_state


def global_accuracy(estimator: FedAvgClassifier, X, y) -> float:
    """Accuracy of the server-side FedAvg model (not a personalized one)."""
    check_is_fitted(estimator, "global_params_")
    if estimator.global_params_ is None:
        raise ValueError("this estimator has no global model")
    Xs = estimator._scaled(X)
    lookup = {c: i for i, c in enumerate(estimator.classes_)}
    labels = np.array([lookup.get(v, -1) for v in np.asarray(y)], dtype=np.int64)
    n = len(estimator.classes_)
    valid = labels >= 0
    ds = LabeledDataset(Xs[valid], labels[valid], n)
    return evaluate(estimator.global_params_, ds) * valid.mean()
