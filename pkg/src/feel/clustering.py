"""Attention-weighted global video features and k-means clustering."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_SWEEPS = 300


def uniform_attention(T: int) -> np.ndarray:
    if T < 1:
        raise ValueError("T must be at least 1")
    return np.full(T, 1.0 / T)


def aggregate_global_feature(X, S) -> np.ndarray:
    """Attention-weighted snippet sum ``sum_t S[t] * X[t]``.

    No renormalisation of ``S``: sigmoid attention does not sum to one and the
    resulting scale is left to the distance-based ranking downstream.
    """
    X = np.asarray(X, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if S.shape[-1] != X.shape[-2]:
        raise ValueError(f"attention length {S.shape[-1]} != snippet count {X.shape[-2]}")
    if np.any(S < 0) or np.any(S > 1):
        raise ValueError("attention values must lie in [0, 1]")
    return np.einsum("...t,...td->...d", S, X)


@dataclass
class GlobalFeatureTable:
    features: np.ndarray  # N x D
    attention_version: int = 0


def euclidean_confidence_matrix(centers, features) -> np.ndarray:
    """K x N matrix of center-to-video Euclidean distances."""
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if centers.shape[1] != features.shape[1]:
        raise ValueError(f"dimension mismatch: {centers.shape} vs {features.shape}")
    # exact difference form: the expanded-square shortcut loses ~1e-8 near zero
    diff = centers[:, None, :] - features[None, :, :]
    return np.sqrt(np.einsum("knd,knd->kn", diff, diff))


def rank_rows(D) -> np.ndarray:
    """Per-row ascending argsort; ties go to the lower column index."""
    return np.argsort(D, axis=1, kind="stable")


@dataclass
class ClusterState:
    centers: np.ndarray       # K x D
    assignments: np.ndarray   # N
    D_E: np.ndarray           # K x N
    rankings: np.ndarray      # K x N, row k = videos by ascending D_E[k]
    inertia: float
    inertia_trace: list = field(default_factory=list)
    sweeps: int = 0


def kmeans_plusplus(X, K, rng: np.random.Generator, local_trials: int | None = None) -> np.ndarray:
    """Greedy k-means++ seeding.

    Each new center is the best of ``local_trials`` D^2-sampled candidates
    (default ``2 + floor(ln K)``), judged by the resulting potential. One
    trial gives the plain k-means++ rule.
    """
    N = X.shape[0]
    trials = local_trials if local_trials is not None else 2 + int(np.log(K))
    centers = np.empty((K, X.shape[1]))
    centers[0] = X[rng.integers(N)]
    closest = ((X - centers[0]) ** 2).sum(1)
    for j in range(1, K):
        total = closest.sum()
        if total <= 0:
            centers[j] = X[int(rng.integers(N))]
            continue
        cand = rng.choice(N, size=trials, p=closest / total)
        d2 = ((X[None, :, :] - X[cand][:, None, :]) ** 2).sum(-1)
        pots = np.minimum(closest[None, :], d2)
        best = int(np.argmin(pots.sum(1)))
        centers[j] = X[cand[best]]
        closest = pots[best]
    return centers


def _assign(X, centers):
    d2 = euclidean_confidence_matrix(centers, X) ** 2
    labels = np.argmin(d2, axis=0)  # first minimum wins ties
    return labels, float(d2[labels, np.arange(X.shape[0])].sum())


def kmeans(features, K: int, rng: np.random.Generator, max_sweeps: int = MAX_SWEEPS,
           restarts: int = 1) -> ClusterState:
    """Lloyd's algorithm from k-means++ seeds.

    Stops at an assignment fixpoint or after ``max_sweeps``. A center left
    without members is moved onto the point farthest from its current center.
    With ``restarts > 1`` the lowest-inertia run is kept (first one on ties).
    """
    X = features.features if isinstance(features, GlobalFeatureTable) else features
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[0]
    if N < K:
        raise ValueError(f"cannot form {K} clusters from {N} points")
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    best = None
    for _ in range(restarts):
        run = _lloyd(X, K, rng, max_sweeps)
        if best is None or run.inertia < best.inertia:
            best = run
    return best


def _lloyd(X, K, rng, max_sweeps) -> ClusterState:
    centers = kmeans_plusplus(X, K, rng)
    labels, inertia = _assign(X, centers)
    trace = [inertia]
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        prev = labels.copy()
        for k in range(K):
            members = labels == k
            if members.any():
                centers[k] = X[members].mean(0)
            else:
                far = ((X - centers[labels]) ** 2).sum(1)
                far[np.bincount(labels, minlength=K)[labels] <= 1] = -1.0
                idx = int(np.argmax(far))
                centers[k] = X[idx]
                labels[idx] = k
        new_labels, inertia = _assign(X, centers)
        trace.append(inertia)
        labels = new_labels
        if np.array_equal(new_labels, prev):
            break
    D_E = euclidean_confidence_matrix(centers, X)
    return ClusterState(centers=centers, assignments=labels, D_E=D_E,
                        rankings=rank_rows(D_E), inertia=inertia,
                        inertia_trace=trace, sweeps=sweeps)


def snippetwise_pseudolabels(X, S, k: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """Video labels from clustering each video's top-k attention snippets.

    ``X`` is N x T x D, ``S`` is N x T. Every video takes the majority cluster
    over its k snippets, ties to the lowest cluster index.
    """
    X = np.asarray(X, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    N, T, D = X.shape
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > T:
        raise ValueError(f"k={k} exceeds T={T}")
    top = np.argsort(-S, axis=1, kind="stable")[:, :k]
    points = np.take_along_axis(X, top[:, :, None], axis=1).reshape(N * k, D)
    state = kmeans(points, K, rng)
    votes = state.assignments.reshape(N, k)
    counts = np.stack([np.bincount(v, minlength=K) for v in votes])
    return np.argmax(counts, axis=1)
