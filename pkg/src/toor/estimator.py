"""scikit-learn compatible front end.

Unlabeled rows are marked with ``y == -1``, following the convention of
:mod:`sklearn.semi_supervised`.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .autodiff import softmax
from .data import Dataset, Splits
from .networks import feature_extract, predict_logits
from .scoring import ScoringConfig, scaled_prediction, softmax_score
from .ssl import SslRegularizer
from .trainer import TrainConfig, Trainer


class TOORClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Semi-supervised classifier that recycles transferable OOD examples.

    Parameters
    ----------
    method : {"toor", "supervised", "pi-model", "pseudo-label", "toor-no-recycle"}
        Training objective.  ``toor`` filters the unlabeled pool by stabilized
        softmax score and adversarially aligns weighted OOD examples;
        ``toor-no-recycle`` keeps the filtering but drops the alignment term.
    max_iter, pretrain_iter : int
        Total iterations, and how many of them are supervised-only warm-up
        (default 1% of ``max_iter``).
    tau, delta, eta : float
        Softmax temperature, ID threshold and EMA momentum for detection.
    lambda_max, gamma_max : float
        Scale of the ramped consistency and recycling coefficients.  ``None``
        picks the method's default consistency scale (1 for ``toor``, 20 for
        ``pi-model``, 0.3 for ``pseudo-label``).
    hidden, feature_dim, disc_hidden : network widths.
    random_state : int
        Master seed; every stochastic component derives its own stream.

    Attributes
    ----------
    classes_ : ndarray of shape (n_classes,)
    bundle_ : ModelBundle
        Trained extractor, classifier and discriminator.
    pool_ : UnlabeledPoolState
        Scores, partition and transferability weights of the unlabeled rows.
    report_ : TrainReport
    """

    def __init__(self, method="toor", max_iter=20000, pretrain_iter=None, batch_size=100,
                 lr=3e-4, lr_disc=1e-3, lambda_max=None, gamma_max=1.0, tau=0.8, delta=0.9,
                 eta=0.6, ssl_variant="pi-model", noise_std=0.15, threshold=0.95,
                 feature_dim=16, hidden=(32,), disc_hidden=64, dropout=0.5,
                 negative_slope=0.1, refresh_epochs=1.0, report_interval=None,
                 random_state=0):
        self.method = method
        self.max_iter = max_iter
        self.pretrain_iter = pretrain_iter
        self.batch_size = batch_size
        self.lr = lr
        self.lr_disc = lr_disc
        self.lambda_max = lambda_max
        self.gamma_max = gamma_max
        self.tau = tau
        self.delta = delta
        self.eta = eta
        self.ssl_variant = ssl_variant
        self.noise_std = noise_std
        self.threshold = threshold
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.disc_hidden = disc_hidden
        self.dropout = dropout
        self.negative_slope = negative_slope
        self.refresh_epochs = refresh_epochs
        self.report_interval = report_interval
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            method=self.method, max_iter=self.max_iter, pretrain_iter=self.pretrain_iter,
            batch_size=self.batch_size, lr=self.lr, lr_disc=self.lr_disc,
            lambda_max=self.lambda_max, gamma_max=self.gamma_max,
            refresh_epochs=self.refresh_epochs, report_interval=self.report_interval,
            seed=0 if self.random_state is None else int(self.random_state),
            feature_dim=self.feature_dim, hidden=tuple(self.hidden),
            disc_hidden=self.disc_hidden, dropout=self.dropout,
            negative_slope=self.negative_slope,
            scoring=ScoringConfig(self.tau, self.delta, self.eta),
            ssl=SslRegularizer(self.ssl_variant, self.noise_std, self.threshold))

    def fit(self, X, y, X_test=None, y_test=None, unlabeled_roles=None):
        """Fit on labeled rows (``y >= 0``) and unlabeled rows (``y == -1``).

        ``X_test``/``y_test`` are only used for the accuracy column of the
        training report; ``unlabeled_roles`` (e.g. "ID"/"nearOOD"/"farOOD")
        only feed the detection columns.  Neither influences training.
        """
        X, y = check_X_y(X, y, dtype=np.float64)
        labeled = y != -1
        if not labeled.any():
            raise ValueError("need at least one labeled row (y != -1)")
        self.classes_, y_enc = np.unique(y[labeled], return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two labeled classes")
        self.n_features_in_ = X.shape[1]
        n_u = int((~labeled).sum())
        roles = (np.asarray(unlabeled_roles, dtype=object) if unlabeled_roles is not None
                 else np.array(["unknown"] * n_u, dtype=object))
        if len(roles) != n_u:
            raise ValueError(f"{n_u} unlabeled rows but {len(roles)} roles")
        lab = Dataset(X[labeled], y_enc, np.array(["ID"] * len(y_enc), dtype=object))
        unl = Dataset(X[~labeled], np.full(n_u, -1), roles)
        if X_test is not None:
            X_test = check_array(X_test, dtype=np.float64)
            y_t = np.searchsorted(self.classes_, np.asarray(y_test))
            test = Dataset(X_test, y_t, np.array(["test"] * len(y_t), dtype=object))
        else:
            test = Dataset(np.empty((0, X.shape[1])), np.empty(0, int), np.empty(0, object))
        splits = Splits(lab, unl, test, len(self.classes_))
        trainer = Trainer(self._train_config(), splits)
        trainer.run()
        self.bundle_, self.pool_, self.report_ = trainer.bundle, trainer.pool, trainer.report
        return self

    def decision_function(self, X):
        """Raw class logits."""
        check_is_fitted(self, "bundle_")
        X = check_array(X, dtype=np.float64)
        return predict_logits(self.bundle_, X)

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def score_samples(self, X):
        """Temperature-scaled softmax score; higher means more in-distribution."""
        return softmax_score(scaled_prediction(self.decision_function(X), self.tau))

    def transform(self, X):
        """Learned features ``F(X)``."""
        check_is_fitted(self, "bundle_")
        X = check_array(X, dtype=np.float64)
        feats, _ = feature_extract(self.bundle_, X, "eval")
        return feats
