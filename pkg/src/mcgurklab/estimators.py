"""Scikit-learn style wrappers around the CPC model and the DTW k-NN classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .evaluation import dtw_matrix, knn_from_distances
from .model import CpcModel
from .train import TrainConfig, Trainer

__all__ = ["check_sequences", "check_records", "AVCPCEmbedder", "DTWKNeighborsClassifier"]


def check_sequences(X, name: str = "X") -> list[np.ndarray]:
    """Validate a collection of ``(T, D)`` sequences with a common ``D``."""
    if isinstance(X, np.ndarray) and X.dtype != object:
        if X.ndim != 3:
            raise ValueError(f"{name} must be a list of (T, D) arrays or a (n, T, D) array")
        X = list(X)
    seqs = [np.asarray(s, dtype=np.float64) for s in X]
    if not seqs:
        raise ValueError(f"{name} is empty")
    dims = set()
    for i, s in enumerate(seqs):
        if s.ndim != 2 or s.shape[0] < 1:
            raise ValueError(f"{name}[{i}] must be a non-empty (T, D) array, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError(f"{name}[{i}] contains non-finite values")
        dims.add(s.shape[1])
    if len(dims) != 1:
        raise ValueError(f"{name} mixes feature dimensions {sorted(dims)}")
    return seqs


def check_records(X, name: str = "X") -> list:
    """Accept stimulus records or ``(Waveform, LipTrack)`` pairs."""
    items = list(X)
    if not items:
        raise ValueError(f"{name} is empty")
    for i, r in enumerate(items):
        ok = hasattr(r, "waveform") and hasattr(r, "liptrack")
        ok = ok or (isinstance(r, tuple) and len(r) == 2 and hasattr(r[0], "samples") and hasattr(r[1], "frames"))
        if not ok:
            raise ValueError(f"{name}[{i}] is neither a stimulus record nor a (Waveform, LipTrack) pair")
    return items


def _as_pairs(items) -> list:
    return [(r.waveform, r.liptrack) if hasattr(r, "waveform") else r for r in items]


class AVCPCEmbedder(TransformerMixin, BaseEstimator):
    """Self-supervised audiovisual CPC front end.

    ``fit`` trains on unlabelled congruent clips; ``transform`` maps stimulus
    records to context embedding sequences (an object array of ``(T, D)``).
    """

    def __init__(
        self,
        steps=3000,
        batch_size=8,
        learning_rate=1e-3,
        snr_db=None,
        noise_bank=None,
        clip_frames=32,
        embed_dim=64,
        modality_dropout_p=0.5,
        representation="context",
        mode="audiovisual",
        precision="64",
        random_state=0,
    ):
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.snr_db = snr_db
        self.noise_bank = noise_bank
        self.clip_frames = clip_frames
        self.embed_dim = embed_dim
        self.modality_dropout_p = modality_dropout_p
        self.representation = representation
        self.mode = mode
        self.precision = precision
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            snr_db=self.snr_db,
            clip_frames=self.clip_frames,
            seed=self.random_state,
            precision=self.precision,
            model={
                "embed_dim": self.embed_dim,
                "modality_dropout_p": self.modality_dropout_p,
                "representation": self.representation,
            },
        )

    def fit(self, X, y=None):
        pairs = _as_pairs(check_records(X))
        trainer = Trainer(self._train_config(), pairs, self.noise_bank)
        trainer.run()
        self.model_ = trainer.model
        self.loss_curve_ = list(trainer.losses)
        self.n_steps_ = trainer.step
        return self

    @classmethod
    def from_model(cls, model: CpcModel, **params) -> "AVCPCEmbedder":
        """Wrap an already trained model (e.g. loaded from a checkpoint)."""
        est = cls(embed_dim=model.config.embed_dim, representation=model.config.representation, **params)
        est.model_ = model
        est.loss_curve_ = []
        est.n_steps_ = 0
        return est

    def transform(self, X):
        check_is_fitted(self, "model_")
        items = check_records(X)
        if self.mode not in ("audiovisual", "audio_only"):
            raise ValueError("mode must be 'audiovisual' or 'audio_only'")
        if hasattr(items[0], "waveform"):
            embs = self.model_.embed_records(items, mode=self.mode, representation=self.representation)
        else:
            embs = []
            for w, l in items:
                lips = np.zeros_like(l.frames) if self.mode == "audio_only" else l.frames
                embs.append(self.model_.embed(w.samples, lips, self.representation)[0])
        out = np.empty(len(embs), dtype=object)
        out[:] = embs
        return out


class DTWKNeighborsClassifier(ClassifierMixin, BaseEstimator):
    """k-nearest neighbours under length-normalised cosine DTW.

    Vote ties go to the label with the smaller mean neighbour distance, then
    to the earlier label in ``classes_``.
    """

    def __init__(self, n_neighbors=5, label_order=None):
        self.n_neighbors = n_neighbors
        self.label_order = label_order

    def fit(self, X, y):
        seqs = check_sequences(X)
        y = list(y)
        if len(y) != len(seqs):
            raise ValueError(f"X has {len(seqs)} sequences but y has {len(y)} labels")
        if int(self.n_neighbors) < 1:
            raise ValueError("n_neighbors must be at least 1")
        self.references_ = seqs
        self.labels_ = y
        order = list(self.label_order) if self.label_order is not None else sorted(set(y), key=str)
        missing = set(y) - set(order)
        if missing:
            raise ValueError(f"label_order is missing labels {sorted(missing, key=str)}")
        self.classes_ = np.array(order, dtype=object)
        self.n_features_in_ = seqs[0].shape[1]
        return self

    def _check_query(self, X) -> list:
        check_is_fitted(self, "references_")
        seqs = check_sequences(X)
        if seqs[0].shape[1] != self.n_features_in_:
            raise ValueError(f"X has {seqs[0].shape[1]} features, expected {self.n_features_in_}")
        return seqs

    def distances(self, X) -> np.ndarray:
        """Cosine-DTW distances ``(n_queries, n_references)``."""
        return dtw_matrix(self._check_query(X), self.references_)

    def predict(self, X):
        d = self.distances(X)
        order = list(self.classes_)
        return np.array([knn_from_distances(row, self.labels_, self.n_neighbors, order) for row in d], dtype=object)
