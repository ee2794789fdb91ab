"""scikit-learn front end for skip search on a pretrained chain."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .autodiff import no_grad
from .data import Dataset
from .network import SkippableNetwork
from .pipeline import DASPipeline, SearchConfig


class DASClassifier(ClassifierMixin, BaseEstimator):
    """Search which frozen blocks of ``network`` to skip, then finetune the pruned chain.

    Parameters
    ----------
    network : SkippableNetwork
        Pretrained chain with frozen blocks. It is copied, never modified.
    n_skip : int
        Number of blocks replaced by short-cut adapters.
    n_candidates : int
        Subnetworks validated per bandit update.
    interval : int
        Training steps between bandit updates.
    validation_fraction : float
        Share of ``X`` held out for rewards when ``fit`` gets no validation set.

    Attributes
    ----------
    skip_mask_ : SkipMask
    redundancy_ : ndarray of shape (n_blocks,)
    pruned_ : PrunedNetwork
    report_ : SearchReport
    """

    def __init__(
        self,
        network: SkippableNetwork | None = None,
        n_skip: int = 2,
        n_candidates: int = 4,
        interval: int = 10,
        warmup_epochs: int = 1,
        search_epochs: int = 2,
        finetune_epochs: int = 10,
        batch_size: int = 32,
        validation_batch_size: int = 128,
        lr_adapters: float = 1e-3,
        lr_head: float = 1e-3,
        weight_decay: float = 0.0,
        validation_fraction: float = 0.2,
        random_state: int = 0,
    ):
        self.network = network
        self.n_skip = n_skip
        self.n_candidates = n_candidates
        self.interval = interval
        self.warmup_epochs = warmup_epochs
        self.search_epochs = search_epochs
        self.finetune_epochs = finetune_epochs
        self.batch_size = batch_size
        self.validation_batch_size = validation_batch_size
        self.lr_adapters = lr_adapters
        self.lr_head = lr_head
        self.weight_decay = weight_decay
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _config(self) -> SearchConfig:
        return SearchConfig(
            n=self.network.n,
            m=self.n_skip,
            c=self.n_candidates,
            interval=self.interval,
            warmup_epochs=self.warmup_epochs,
            search_epochs=self.search_epochs,
            finetune_epochs=self.finetune_epochs,
            batch_size=self.batch_size,
            validation_batch_size=self.validation_batch_size,
            lr_adapters=self.lr_adapters,
            lr_head=self.lr_head,
            weight_decay=self.weight_decay,
            seed=self.random_state,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        if not isinstance(self.network, SkippableNetwork):
            raise TypeError("network must be a pretrained SkippableNetwork")
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        if X.shape[1] != self.network.input_dim:
            raise ValueError(f"X has {X.shape[1]} features, network expects {self.network.input_dim}")
        self.classes_ = np.unique(y if y_val is None else np.concatenate([y, np.asarray(y_val)]))
        if len(self.classes_) > self.network.classes:
            raise ValueError(f"{len(self.classes_)} classes but the network head has {self.network.classes}")
        self.n_features_in_ = X.shape[1]
        codes = np.searchsorted(self.classes_, y)
        if X_val is None:
            X, X_val, codes, val_codes = train_test_split(
                X, codes, test_size=self.validation_fraction, random_state=self.random_state
            )
        else:
            X_val, y_val = check_X_y(X_val, y_val, dtype=np.float64)
            val_codes = np.searchsorted(self.classes_, y_val)
        cfg = self._config()
        self.pipeline_ = DASPipeline(self.network, cfg, Dataset(X, codes), Dataset(X_val, val_codes))
        self.report_ = self.pipeline_.run()
        self.pruned_ = self.pipeline_.pruned
        self.skip_mask_ = self.pipeline_.final_mask
        self.redundancy_ = self.pipeline_.state.r.copy()
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "pruned_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        with no_grad():
            logits = self.pruned_.forward(X).values
        return logits[:, : len(self.classes_)]

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "pruned_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
