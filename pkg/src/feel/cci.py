"""Clustering-confidence improvement: k-reciprocal neighbour re-ranking of
center-to-video distances.

Centers and videos live in one *universe* of K + N entities (centers first).
Neighbour lists exclude the entity itself and break distance ties by index.

By default every entity may appear in every list and set, and every
encoding carries the entity's own slot at weight 1. With ``video_only`` a
center's list holds videos only, reciprocal sets and query expansion range
over videos only and centers get no self slot. That variant stops centers
acting as hubs that link every ambiguous video to every center, which
matters when distances are rescaled so that ``exp(-d)`` stays large.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .clustering import euclidean_confidence_matrix, rank_rows

log = logging.getLogger(__name__)


@dataclass
class EntityUniverse:
    points: np.ndarray   # (K+N) x D
    n_centers: int
    dist: np.ndarray     # (K+N) x (K+N), symmetric, zero diagonal
    order: np.ndarray    # row i: the other entities by ascending distance
    position: np.ndarray  # position[i, j] = rank of j in order[i]; -1 on the diagonal
    video_only: bool = False

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def n_videos(self) -> int:
        return self.size - self.n_centers

    def candidates(self, entity: int) -> int:
        """Length of the usable part of ``order[entity]``."""
        if self.video_only and entity < self.n_centers:
            return self.n_videos
        return self.size - 1


def build_universe(centers, features, video_only: bool = False) -> EntityUniverse:
    pts = np.vstack([np.asarray(centers, dtype=np.float64), np.asarray(features, dtype=np.float64)])
    D = euclidean_confidence_matrix(pts, pts)
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    M = D.shape[0]
    # self goes first (distance -inf), then gets dropped
    K = len(centers)
    masked = D.copy()
    if video_only:
        # center-to-center links sort last and sit beyond any valid l
        masked[:K, :K] = np.inf
    np.fill_diagonal(masked, -np.inf)
    order = np.argsort(masked, axis=1, kind="stable")[:, 1:]
    position = np.full((M, M), -1, dtype=np.int64)
    rows = np.repeat(np.arange(M), M - 1)
    position[rows, order.ravel()] = np.tile(np.arange(M - 1), M)
    return EntityUniverse(pts, K, D, order, position, video_only)


def top_l_neighbors(universe: EntityUniverse, entity: int, l: int) -> np.ndarray:
    limit = universe.candidates(entity)
    if not 1 <= l <= limit:
        raise ValueError(f"l={l} outside [1, {limit}]")
    return universe.order[entity, :l]


def k_reciprocal_set(universe: EntityUniverse, entity: int, l: int) -> np.ndarray:
    """Entities z among the top-l of ``entity`` that hold ``entity`` among
    their top-l (videos only in a ``video_only`` universe)."""
    if l == 0:
        return np.empty(0, dtype=np.int64)
    near = top_l_neighbors(universe, entity, l)
    back = universe.position[near, entity]
    keep = (back >= 0) & (back < l)
    if universe.video_only:
        keep &= near >= universe.n_centers
    return near[keep]


def expand_reciprocal_set(universe: EntityUniverse, entity: int, l: int, _cache=None) -> np.ndarray:
    """Grow U(entity, l) by the half-size reciprocal sets of its members that
    overlap it by at least two thirds. Returns sorted entity indices."""
    def recip(e, size):
        if _cache is None:
            return k_reciprocal_set(universe, e, size)
        key = (e, size)
        if key not in _cache:
            _cache[key] = k_reciprocal_set(universe, e, size)
        return _cache[key]

    base = recip(entity, l)
    base_set = set(base.tolist())
    out = set(base_set)
    half = l // 2
    for z in base:
        cand = recip(int(z), half)
        # integer form of |U ∩ U_z| >= 2/3 |U_z|
        if 3 * len(base_set.intersection(cand.tolist())) >= 2 * len(cand):
            out.update(cand.tolist())
    return np.array(sorted(out), dtype=np.int64)


def encode_neighbors(entity: int, members, dist_row, include_self: bool = True) -> np.ndarray:
    """Dense encoding: ``exp(-d)`` on ``members`` and, if ``include_self``, on
    the entity's own slot (weight 1); zero elsewhere."""
    dist_row = np.asarray(dist_row, dtype=np.float64)
    e = np.zeros_like(dist_row)
    idx = np.asarray(members, dtype=np.int64)
    if include_self:
        idx = np.union1d(idx, [entity])
    e[idx] = np.exp(-dist_row[idx])
    return e


def jaccard_set_form(a, b) -> float:
    a, b = set(np.asarray(a).tolist()), set(np.asarray(b).tolist())
    union = len(a | b)
    if union == 0:
        return 1.0
    return 1.0 - len(a & b) / union


def jaccard_encoded(ea, eb) -> float:
    ea = np.asarray(ea, dtype=np.float64)
    eb = np.asarray(eb, dtype=np.float64)
    den = np.maximum(ea, eb).sum()
    if den == 0:
        return 1.0
    return float(1.0 - np.minimum(ea, eb).sum() / den)


def jaccard_matrix(EA, EB) -> np.ndarray:
    """Pairwise encoded Jaccard distances between rows of EA and rows of EB."""
    out = np.empty((EA.shape[0], EB.shape[0]))
    for i, row in enumerate(EA):
        num = np.minimum(row[None, :], EB).sum(1)
        den = np.maximum(row[None, :], EB).sum(1)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[i] = np.where(den > 0, 1.0 - num / np.where(den > 0, den, 1.0), 1.0)
    return out


@dataclass
class RefinedRanking:
    distances: np.ndarray  # K x N blended distances
    jaccard: np.ndarray    # K x N
    euclidean: np.ndarray  # K x N, on the scale used in the blend
    gamma: float
    rankings: np.ndarray   # K x N


def encode_universe(universe: EntityUniverse, l: int, l_expansion: int, scale: float = 1.0) -> np.ndarray:
    M = universe.size
    cache = {}
    E = np.zeros((M, M))
    K = universe.n_centers
    video_only = universe.video_only
    for i in range(M):
        members = expand_reciprocal_set(universe, i, l, cache)
        E[i] = encode_neighbors(i, members, universe.dist[i] / scale,
                                include_self=not video_only or i >= K)
    if l_expansion > 1:
        # local query expansion: average with the nearest l_expansion - 1 entities
        if video_only:
            near = np.stack([row[row >= K][:l_expansion - 1] for row in universe.order])
        else:
            near = universe.order[:, :l_expansion - 1]
        E = (E + E[near].sum(1)) / l_expansion
    return E


def refined_distance_matrix(D_E, universe: EntityUniverse, gamma: float = 0.7, l: int = 20,
                            l_expansion: int = 6, normalize: bool = False) -> RefinedRanking:
    """Blend ``gamma * d_J + (1 - gamma) * d_E`` for every center/video pair and
    re-rank each center's list.

    By default distances enter both terms unscaled. With ``normalize`` the
    encoding weights and the Euclidean term use distances divided by the
    largest distance in the universe, which gives the Jaccard term more pull
    when raw distances are large. Rankings at ``gamma=0`` are unchanged by
    the rescaling.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma={gamma} outside [0, 1]")
    D_E = np.asarray(D_E, dtype=np.float64)
    K = universe.n_centers
    M = universe.size
    limit = M - K if universe.video_only else M - 1
    if l > limit:
        log.warning("l=%d clamped to %d", l, limit)
        l = limit
    if l_expansion > limit:
        log.warning("l_expansion=%d clamped to %d", l_expansion, limit)
        l_expansion = limit
    scale = 1.0
    if normalize:
        peak = float(universe.dist.max())
        scale = peak if peak > 0 else 1.0
    d_e = D_E / scale
    if gamma == 0.0:
        d_j = np.zeros_like(d_e)
    else:
        E = encode_universe(universe, l, l_expansion, scale)
        d_j = jaccard_matrix(E[:K], E[K:])
    d = gamma * d_j + (1.0 - gamma) * d_e
    return RefinedRanking(d, d_j, d_e, gamma, rank_rows(d))
