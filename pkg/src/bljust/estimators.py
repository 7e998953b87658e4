"""scikit-learn style wrapper around the three training strategies."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import SequencePool, corpus_token_error_rate, greedy_ctc_decode
from .engine import PenaltySchedule, TrainConfig, train_bljust, train_ptft, train_supervised
from .model import EncoderConfig, predict_log_probs
from .validation import check_label_sequences, check_positive, check_sequences

__all__ = ["SequenceRecognizer"]

STRATEGIES = ("bljust", "ptft", "supervised")


class SequenceRecognizer(BaseEstimator):
    """CTC sequence recognizer trained by one of three strategies.

    ``strategy="bljust"`` couples the labeled CTC loss with an InfoNCE penalty
    on ``X_unlabeled`` in a single loop; ``"ptft"`` pre-trains on the unlabeled
    data and then fine-tunes; ``"supervised"`` ignores unlabeled data.

    ``X`` is a list of ``[time, features]`` arrays and ``y`` a list of label
    sequences over ``1..vocab_size``.  :meth:`predict` returns greedy CTC
    transcripts; :meth:`score` is ``1 - token error rate``.
    """

    def __init__(
        self,
        strategy: str = "bljust",
        vocab_size: int = 5,
        hidden_dim: int = 16,
        context_dim: int = 16,
        num_layers: int = 1,
        prediction_offsets=(1, 2),
        alpha: float = 5e-3,
        beta: float = 5e-4,
        pretrain_lr: float = 5e-3,
        finetune_lr: float = 5e-4,
        epochs: int = 100,
        pretrain_epochs: int | None = None,
        gamma_rate: float = 0.002,
        gamma_initial: float = 0.0,
        optimizer: str = "adamw",
        weight_decay: float = 0.01,
        plateau: bool = True,
        patience: int = 20,
        factor: float = 0.1,
        batch_size: int = 20,
        negatives: int = 3,
        random_state: int = 0,
    ):
        self.strategy = strategy
        self.vocab_size = vocab_size
        self.hidden_dim = hidden_dim
        self.context_dim = context_dim
        self.num_layers = num_layers
        self.prediction_offsets = prediction_offsets
        self.alpha = alpha
        self.beta = beta
        self.pretrain_lr = pretrain_lr
        self.finetune_lr = finetune_lr
        self.epochs = epochs
        self.pretrain_epochs = pretrain_epochs
        self.gamma_rate = gamma_rate
        self.gamma_initial = gamma_initial
        self.optimizer = optimizer
        self.weight_decay = weight_decay
        self.plateau = plateau
        self.patience = patience
        self.factor = factor
        self.batch_size = batch_size
        self.negatives = negatives
        self.random_state = random_state

    def _train_config(self, alpha: float, beta: float, epochs: int) -> TrainConfig:
        return TrainConfig(
            alpha=alpha,
            beta=beta,
            epochs=epochs,
            optimizer=self.optimizer,
            weight_decay=self.weight_decay,
            plateau=self.plateau,
            patience=self.patience,
            factor=self.factor,
            batch_size=self.batch_size,
            negatives=self.negatives,
            seed=self.random_state,
        )

    def fit(self, X, y, X_unlabeled=None, X_valid=None, y_valid=None):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        for name in ("alpha", "beta", "pretrain_lr", "finetune_lr"):
            check_positive(getattr(self, name), name)
        X = check_sequences(X)
        feature_dim = X[0].shape[1]
        y = check_label_sequences(y, len(X), self.vocab_size)
        labeled = SequencePool(X, y, feature_dim)
        unlabeled = None
        if self.strategy != "supervised":
            if X_unlabeled is None:
                raise ValueError(f"strategy {self.strategy!r} needs X_unlabeled")
            unlabeled = SequencePool(check_sequences(X_unlabeled, feature_dim, "X_unlabeled"), None, feature_dim)
        valid = None
        if X_valid is not None:
            Xv = check_sequences(X_valid, feature_dim, "X_valid")
            valid = SequencePool(Xv, check_label_sequences(y_valid, len(Xv), self.vocab_size, "y_valid"), feature_dim)

        self.model_config_ = EncoderConfig(
            feature_dim=feature_dim,
            hidden_dim=self.hidden_dim,
            context_dim=self.context_dim,
            num_layers=self.num_layers,
            vocab_size=self.vocab_size,
            prediction_offsets=tuple(self.prediction_offsets),
        )
        if self.strategy == "bljust":
            sched = PenaltySchedule(self.gamma_initial, self.gamma_rate, "linear")
            cfg = self._train_config(self.alpha, self.beta, self.epochs)
            params, history, state = train_bljust(self.model_config_, labeled, unlabeled, cfg, sched, valid=valid)
            self.epoch_log_ = state.epoch_log
        elif self.strategy == "supervised":
            cfg = self._train_config(self.finetune_lr, self.finetune_lr, self.epochs)
            params, history, state = train_supervised(self.model_config_, labeled, cfg, valid=valid)
            self.epoch_log_ = state.epoch_log
        else:
            pt_epochs = self.epochs if self.pretrain_epochs is None else self.pretrain_epochs
            cfg_pt = self._train_config(self.pretrain_lr, self.pretrain_lr, pt_epochs)
            cfg_ft = self._train_config(self.finetune_lr, self.finetune_lr, self.epochs)
            params, hist_pt, hist_ft, s_pt, s_ft = train_ptft(
                self.model_config_, unlabeled, labeled, cfg_pt, cfg_ft, valid=valid
            )
            history = hist_pt + hist_ft
            self.epoch_log_ = s_pt.epoch_log + s_ft.epoch_log
        self.params_ = params
        self.history_ = history
        self.n_features_in_ = feature_dim
        return self

    def predict_log_proba(self, X) -> list[np.ndarray]:
        """Per-frame log posteriors ``[time, vocab_size + 1]`` for each sequence."""
        check_is_fitted(self, "params_")
        X = check_sequences(X, self.n_features_in_)
        pool = SequencePool(X, None, self.n_features_in_)
        out = []
        for idx in pool.minibatches(100):
            x, lengths = pool.padded(idx)
            lp = predict_log_probs(self.params_, x, self.model_config_)
            out.extend(lp[i, : lengths[i]] for i in range(len(idx)))
        return out

    def predict(self, X) -> list[list[int]]:
        return [greedy_ctc_decode(lp) for lp in self.predict_log_proba(X)]

    def score(self, X, y) -> float:
        hyps = self.predict(X)
        y = check_label_sequences(y, len(hyps), self.vocab_size)
        return 1.0 - corpus_token_error_rate(hyps, y)
