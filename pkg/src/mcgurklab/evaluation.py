"""Cosine-DTW k-NN evaluation: cross-validation, forced choice, distance profiles."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .stats import bootstrap_ci, chi_squared
from .stimgen import ProtocolError, ROLES

__all__ = [
    "DegenerateVectorError",
    "cosine_distance",
    "cosine_cost_matrix",
    "dtw_distance",
    "dtw_matrix",
    "knn_classify",
    "knn_from_distances",
    "stratified_folds",
    "CVResult",
    "cross_validate",
    "forced_choice",
    "distance_profile",
    "ForcedChoiceOutcome",
    "evaluate_model",
    "contingency_table",
]


class DegenerateVectorError(ValueError):
    """A zero-norm vector has no cosine distance."""


def cosine_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine distance of a zero vector")
    return float(min(2.0, max(0.0, 1.0 - np.dot(u, v) / (nu * nv))))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateVectorError("sequence contains a zero-norm frame")
    return x / norms


def cosine_cost_matrix(a, b) -> np.ndarray:
    """Frame-by-frame cosine distances, ``(len(a), len(b))`` (batched over leading axes)."""
    ua = _unit_rows(np.asarray(a, dtype=np.float64))
    ub = _unit_rows(np.asarray(b, dtype=np.float64))
    return np.clip(1.0 - ua @ np.swapaxes(ub, -1, -2), 0.0, 2.0)


def _dtw_from_costs(cost: np.ndarray) -> np.ndarray:
    """Length-normalised DTW over a batch of cost matrices ``(P, n, m)``.

    The minimum-cost path is found with moves (i-1, j-1), (i-1, j),
    (i, j-1), preferring them in that order on exact ties; its accumulated
    cost is divided by its number of cells.
    """
    p, n, m = cost.shape
    acc = np.empty((p, n, m))
    length = np.empty((p, n, m))
    acc[:, 0, 0] = cost[:, 0, 0]
    length[:, 0, 0] = 1
    for j in range(1, m):
        acc[:, 0, j] = acc[:, 0, j - 1] + cost[:, 0, j]
        length[:, 0, j] = length[:, 0, j - 1] + 1
    for i in range(1, n):
        acc[:, i, 0] = acc[:, i - 1, 0] + cost[:, i, 0]
        length[:, i, 0] = length[:, i - 1, 0] + 1
        for j in range(1, m):
            diag, up, left = acc[:, i - 1, j - 1], acc[:, i - 1, j], acc[:, i, j - 1]
            best = diag.copy()
            best_len = length[:, i - 1, j - 1].copy()
            take = up < best
            best[take] = up[take]
            best_len[take] = length[:, i - 1, j][take]
            take = left < best
            best[take] = left[take]
            best_len[take] = length[:, i, j - 1][take]
            acc[:, i, j] = best + cost[:, i, j]
            length[:, i, j] = best_len + 1
    return acc[:, -1, -1] / length[:, -1, -1]


def dtw_distance(a, b) -> float:
    """Cosine-DTW distance between two ``(T, D)`` sequences, normalised by path length."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or len(a) == 0 or len(b) == 0:
        raise ValueError("dtw_distance needs two non-empty (T, D) sequences")
    return float(_dtw_from_costs(cosine_cost_matrix(a, b)[None])[0])


def dtw_matrix(queries, references=None) -> np.ndarray:
    """All pairwise cosine-DTW distances; symmetric work is shared when ``references`` is None."""
    symmetric = references is None
    refs = queries if symmetric else references
    out = np.zeros((len(queries), len(refs)))
    units_q = [_unit_rows(np.asarray(q, dtype=np.float64)) for q in queries]
    units_r = units_q if symmetric else [_unit_rows(np.asarray(r, dtype=np.float64)) for r in refs]
    groups: dict = {}
    for i, q in enumerate(units_q):
        for j, r in enumerate(units_r):
            if symmetric and j <= i:
                continue
            groups.setdefault((len(q), len(r)), []).append((i, j))
    for pairs in groups.values():
        for lo in range(0, len(pairs), 4096):
            chunk = pairs[lo : lo + 4096]
            qi = np.stack([units_q[i] for i, _ in chunk])
            rj = np.stack([units_r[j] for _, j in chunk])
            cost = np.clip(1.0 - qi @ np.swapaxes(rj, -1, -2), 0.0, 2.0)
            d = _dtw_from_costs(cost)
            for (i, j), v in zip(chunk, d):
                out[i, j] = v
                if symmetric:
                    out[j, i] = v
    return out


# ---------------------------------------------------------------- k-NN


def knn_from_distances(distances, labels, k: int, label_order=None):
    """Majority label among the ``k`` nearest references.

    Vote ties go to the smaller mean distance among the tied labels'
    neighbours, then to the earlier label in ``label_order`` (default: sorted).
    Equal distances at the cut-off are ordered by label rank, so the result
    does not depend on reference order.
    """
    d = np.asarray(distances, dtype=np.float64)
    labels = list(labels)
    if len(labels) == 0:
        raise ProtocolError("empty reference set")
    if k < 1:
        raise ValueError("k must be at least 1")
    order = list(label_order) if label_order is not None else sorted(set(labels), key=str)
    rank = {lab: i for i, lab in enumerate(order)}
    idx = sorted(range(len(labels)), key=lambda i: (d[i], rank[labels[i]]))[:k]
    votes = Counter(labels[i] for i in idx)
    top = max(votes.values())
    tied = [lab for lab, v in votes.items() if v == top]
    if len(tied) == 1:
        return tied[0]
    mean = {lab: float(np.mean([d[i] for i in idx if labels[i] == lab])) for lab in tied}
    return min(tied, key=lambda lab: (mean[lab], rank[lab]))


def knn_classify(query, references, labels, k: int = 5, label_order=None):
    """Classify one ``(T, D)`` sequence against labelled reference sequences."""
    if len(references) == 0:
        raise ProtocolError("empty reference set")
    dists = [dtw_distance(query, r) for r in references]
    return knn_from_distances(dists, labels, k, label_order)


# ---------------------------------------------------------------- cross-validation


def stratified_folds(labels, folds: int, seed: int = 0) -> np.ndarray:
    """Fold index per item; each label's items are shuffled and dealt round-robin."""
    labels = list(labels)
    if len(labels) < folds:
        raise ProtocolError(f"{len(labels)} records cannot fill {folds} folds")
    rng = np.random.default_rng(seed)
    assign = np.empty(len(labels), dtype=int)
    offset = 0
    for lab in sorted(set(labels), key=str):
        members = [i for i, x in enumerate(labels) if x == lab]
        members = list(rng.permutation(members))
        for r, i in enumerate(members):
            assign[i] = (offset + r) % folds
        offset += len(members)
    return assign


@dataclass
class CVResult:
    accuracy: float
    ci: tuple
    fold_accuracies: list
    correct: list
    predictions: list
    k: int
    folds: int
    sensitivity: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "ci95": list(self.ci),
            "fold_accuracies": self.fold_accuracies,
            "k": self.k,
            "folds": self.folds,
            "k_sensitivity": self.sensitivity,
        }


def _cv_predictions(dist: np.ndarray, labels: list, assign: np.ndarray, k: int, order) -> list:
    preds = []
    for i in range(len(labels)):
        train = np.flatnonzero(assign != assign[i])
        preds.append(knn_from_distances(dist[i, train], [labels[j] for j in train], k, order))
    return preds


def cross_validate(
    embeddings,
    labels,
    folds: int = 10,
    k: int = 5,
    seed: int = 0,
    n_resamples: int = 10000,
    distances: np.ndarray | None = None,
    sensitivity_ks=(1, 3, 5),
) -> CVResult:
    """Stratified k-fold cosine-DTW k-NN accuracy with a bootstrap 95% CI (percent)."""
    labels = list(labels)
    if len(labels) < folds:
        raise ProtocolError(f"{len(labels)} records cannot fill {folds} folds")
    dist = dtw_matrix(embeddings) if distances is None else distances
    assign = stratified_folds(labels, folds, seed)
    order = sorted(set(labels), key=str)
    preds = _cv_predictions(dist, labels, assign, k, order)
    correct = [float(p == t) for p, t in zip(preds, labels)]
    fold_acc = [100.0 * float(np.mean([c for c, f in zip(correct, assign) if f == fi])) for fi in range(folds)]
    acc = 100.0 * float(np.mean(correct))
    lo, hi = bootstrap_ci(correct, n_resamples, seed=seed)
    sens = {}
    for kk in sensitivity_ks:
        pk = preds if kk == k else _cv_predictions(dist, labels, assign, kk, order)
        sens[str(kk)] = 100.0 * float(np.mean([p == t for p, t in zip(pk, labels)]))
    return CVResult(acc, (100.0 * lo, 100.0 * hi), fold_acc, correct, preds, k, folds, sens)


# ---------------------------------------------------------------- forced choice


def _option_refs(stimulus, references: list, cross_speaker: bool) -> dict:
    """Congruent references of the stimulus triple grouped by option role."""
    tid = stimulus.audio_word.triple_id
    refs = {role: [] for role in ROLES}
    for r in references:
        if r.condition != "congruent" or r.audio_word.triple_id != tid:
            continue
        if not cross_speaker and r.speaker != stimulus.speaker:
            continue
        refs[r.audio_word.role].append(r)
    for role in ROLES:
        if not refs[role]:
            raise ProtocolError(f"no {role} references for triple {tid} ({stimulus.speaker})")
    return refs


def forced_choice(stim_embedding, option_embeddings: dict, k: int = 5) -> str:
    """k-NN restricted to the auditory/visual/fused references of one triple.

    ``option_embeddings`` maps role -> list of ``(T, D)`` reference embeddings.
    """
    missing = [r for r in ROLES if not option_embeddings.get(r)]
    if missing:
        raise ProtocolError(f"missing references for options: {missing}")
    dists, labels = [], []
    for role in ROLES:
        for e in option_embeddings[role]:
            dists.append(dtw_distance(stim_embedding, e))
            labels.append(role)
    return knn_from_distances(dists, labels, k, ROLES)


def distance_profile(stim_embedding, option_embeddings: dict) -> dict:
    """Mean cosine-DTW distance from a stimulus to each option's references."""
    return {
        role: float(np.mean([dtw_distance(stim_embedding, e) for e in option_embeddings[role]])) for role in ROLES
    }


@dataclass
class ForcedChoiceOutcome:
    condition: str
    responses: dict  # stimulus id -> option
    profiles: dict = field(default_factory=dict)  # stimulus id -> role -> mean distance

    @property
    def counts(self) -> dict:
        c = Counter(self.responses.values())
        return {role: int(c.get(role, 0)) for role in ROLES}

    @property
    def proportions(self) -> dict:
        n = len(self.responses)
        return {role: (v / n if n else 0.0) for role, v in self.counts.items()}

    def mean_profile(self) -> dict:
        if not self.profiles:
            return {}
        return {role: float(np.mean([p[role] for p in self.profiles.values()])) for role in ROLES}

    def to_dict(self) -> dict:
        return {
            "condition": self.condition,
            "n": len(self.responses),
            "counts": self.counts,
            "proportions": self.proportions,
            "mean_distance_profile": self.mean_profile(),
        }


def contingency_table(a: ForcedChoiceOutcome, b: ForcedChoiceOutcome) -> np.ndarray:
    return np.array([[a.counts[r] for r in ROLES], [b.counts[r] for r in ROLES]], dtype=float)


def run_forced_choice(stimuli, stim_embeddings, references, ref_embeddings, k, cross_speaker=False, condition=None):
    ref_index = {r.id: e for r, e in zip(references, ref_embeddings)}
    responses, profiles = {}, {}
    for stim, emb in zip(stimuli, stim_embeddings):
        groups = _option_refs(stim, references, cross_speaker)
        opt = {role: [ref_index[r.id] for r in rs] for role, rs in groups.items()}
        dists, labels = [], []
        for role in ROLES:
            for e in opt[role]:
                dists.append(dtw_distance(emb, e))
                labels.append(role)
        responses[stim.id] = knn_from_distances(dists, labels, k, ROLES)
        d = np.asarray(dists)
        lab = np.asarray(labels)
        profiles[stim.id] = {role: float(d[lab == role].mean()) for role in ROLES}
    return ForcedChoiceOutcome(condition or (stimuli[0].condition if stimuli else ""), responses, profiles)


def evaluate_model(model, corpus, k: int = 5, seed: int = 0, n_resamples: int = 10000, folds: int = 10, cross_speaker: bool = False) -> dict:
    """Congruent CV, audiovisual and audio-only forced choice for one model."""
    congruent = corpus.congruent
    cong_emb = model.embed_records(congruent)
    cv = cross_validate(cong_emb, [r.key for r in congruent], folds=folds, k=k, seed=seed, n_resamples=n_resamples)
    incong = corpus.incongruent
    av = run_forced_choice(incong, model.embed_records(incong), congruent, cong_emb, k, cross_speaker, "audiovisual")
    audio_only = corpus.audio_only
    ao = run_forced_choice(
        audio_only, model.embed_records(audio_only, mode="audio_only"), congruent, cong_emb, k, cross_speaker, "audio_only"
    )
    return {"cv": cv, "audiovisual": av, "audio_only": ao}


def compare_conditions(clean: ForcedChoiceOutcome, noisy: ForcedChoiceOutcome) -> dict:
    stat, df, p = chi_squared(contingency_table(clean, noisy))
    return {"statistic": stat, "df": df, "p": p}
