"""scikit-learn compatible front door to the MixNet training code."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_frames, check_labels, check_lengths
from .synth import ClassHierarchy, FrameDataset, derive_broad_labels
from .training import (
    ModelConfig,
    TrainConfig,
    build_model,
    evaluate,
    fit_pipeline,
    predict_proba,
    pretrain_aux,
    train,
)

__all__ = ["MixNetClassifier"]


class MixNetClassifier(ClassifierMixin, BaseEstimator):
    """Frame classifier for any of the six model variants.

    Sequences follow the ``X, lengths`` convention: ``X`` stacks the frames
    of consecutive utterances and ``lengths`` gives their sizes.

    Parameters
    ----------
    variant : str
        One of ``baseline``, ``eigen_dmoe``, ``mixnet1`` .. ``mixnet4``.
    hierarchy : ClassHierarchy or None
        Maps sub-class labels to broad classes (the gate targets).  Defaults
        to 17/27/1 sub-classes.
    model_params : dict or None
        Overrides for :meth:`ModelConfig.preset`.
    epochs, aux_epochs, learning_rate, batch_size, threads, unfreeze_aux
        See :class:`TrainConfig`.
    random_state : int
        Seeds initialization and shuffling.

    Attributes
    ----------
    model_ : Model
    train_report_, aux_report_ : TrainReport or None
    classes_ : ndarray
    """

    def __init__(self, variant="mixnet4", hierarchy=None, model_params=None, epochs=12,
                 aux_epochs=5, learning_rate=0.05, batch_size=128, threads=1,
                 unfreeze_aux=False, random_state=0):
        self.variant = variant
        self.hierarchy = hierarchy
        self.model_params = model_params
        self.epochs = epochs
        self.aux_epochs = aux_epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.threads = threads
        self.unfreeze_aux = unfreeze_aux
        self.random_state = random_state

    def _hierarchy(self):
        return self.hierarchy if self.hierarchy is not None else ClassHierarchy()

    def _dataset(self, X, y=None, lengths=None):
        X = check_frames(X, allow_empty=False)
        lengths = check_lengths(lengths, X.shape[0])
        h = self._hierarchy()
        if y is None:
            y = np.zeros(X.shape[0], dtype=np.int64)
        y = check_labels(y, X.shape[0], h.n_sub)
        return FrameDataset(X, y, derive_broad_labels(y, h), lengths, np.arange(lengths.size), h)

    def _train_config(self):
        return TrainConfig(epochs=self.epochs, aux_epochs=self.aux_epochs,
                           learning_rate=self.learning_rate, batch_size=self.batch_size,
                           threads=self.threads, unfreeze_aux=self.unfreeze_aux,
                           seed=self.random_state)

    def fit(self, X, y, lengths=None, eval_set=None):
        """Fit front end, aux classifier (MixNet only) and acoustic stack.

        ``eval_set`` is an optional ``(X, y, lengths)`` tuple used for the
        learning-rate schedule.
        """
        ds = self._dataset(X, y, lengths)
        cv = self._dataset(*eval_set) if eval_set is not None else None
        h = self._hierarchy()
        cfg = ModelConfig.preset(self.variant, frame_dim=ds.dim, n_classes=h.n_sub,
                                 n_gate_classes=h.n_broad, **(self.model_params or {}))
        tc = self._train_config()
        model = fit_pipeline(build_model(cfg, self.random_state), ds)
        self.aux_report_ = None
        if model.aux is not None:
            model, self.aux_report_ = pretrain_aux(model, ds, cv, tc)
        model, self.train_report_ = train(model, ds, cv, tc)
        self.model_ = model
        self.classes_ = np.arange(h.n_sub)
        self.n_features_in_ = ds.dim
        return self

    def predict_proba(self, X, lengths=None):
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, self._dataset(X, None, lengths))

    def predict(self, X, lengths=None):
        return np.argmax(self.predict_proba(X, lengths), axis=1)

    def score(self, X, y, lengths=None, sample_weight=None):
        if sample_weight is not None:
            return super().score(X, y, sample_weight)
        check_is_fitted(self, "model_")
        return evaluate(self.model_, self._dataset(X, y, lengths)).accuracy

    @property
    def n_parameters_(self):
        check_is_fitted(self, "model_")
        return self.model_.param_count
