"""Proposal generation, temporal NMS, cluster-to-class mapping, mAP and NMI."""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_TAU_A = tuple(np.round(np.arange(0.0, 0.15, 0.015), 10))
ACTIVITYNET_IOUS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 10))


@dataclass
class Proposal:
    video_id: str
    start: float
    end: float
    label: int
    score: float


def _runs(mask) -> list:
    """Half-open [start, end) spans of consecutive True values."""
    padded = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return list(zip(edges[::2].tolist(), edges[1::2].tolist()))


def minmax_normalize(col) -> np.ndarray:
    col = np.asarray(col, dtype=np.float64)
    lo, hi = col.min(), col.max()
    if hi <= lo:
        return np.zeros_like(col)
    return (col - lo) / (hi - lo)


def score_proposal(col, start: int, end: int, margin_frac: float = 0.25) -> float:
    """Outer-inner contrast: inside mean minus the mean over both flanking
    margins of ``floor(margin_frac * length)`` snippets (0 when both are empty)."""
    col = np.asarray(col, dtype=np.float64)
    inner = col[start:end].mean()
    m = int(math.floor(margin_frac * (end - start)))
    outer_vals = np.concatenate([col[max(0, start - m):start], col[end:min(len(col), end + m)]]) if m else np.empty(0)
    outer = outer_vals.mean() if outer_vals.size else 0.0
    return float(inner - outer)


def generate_proposals(video_id: str, A, class_scores, tau: float, tau_grid,
                       margin_frac: float = 0.25) -> list:
    """Threshold each confident class's normalised activation at every grid
    value and turn maximal above-threshold runs into scored proposals."""
    tau_grid = list(tau_grid)
    if not tau_grid:
        raise ValueError("empty activation-threshold grid")
    A = np.asarray(A, dtype=np.float64)
    out = []
    for k in np.flatnonzero(np.asarray(class_scores) > tau):
        col = minmax_normalize(A[:, k])
        for thr in tau_grid:
            for s, e in _runs(col > thr):
                out.append(Proposal(video_id, float(s), float(e), int(k),
                                    score_proposal(col, s, e, margin_frac)))
    return out


def temporal_iou(a, b) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return float(inter / union) if union > 0 else 0.0


def nms(proposals: list, threshold: float = 0.7) -> list:
    """Greedy class-agnostic suppression. Equal scores keep input order."""
    if not proposals:
        return []
    order = sorted(range(len(proposals)), key=lambda i: -proposals[i].score)
    starts = np.array([p.start for p in proposals])
    ends = np.array([p.end for p in proposals])
    alive = np.ones(len(proposals), dtype=bool)
    kept = []
    for i in order:
        if not alive[i]:
            continue
        kept.append(proposals[i])
        alive[i] = False
        inter = np.clip(np.minimum(ends, ends[i]) - np.maximum(starts, starts[i]), 0, None)
        union = (ends - starts) + (ends[i] - starts[i]) - inter
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
        alive &= ~(iou > threshold)
    return kept


def map_clusters_to_labels(pseudo, gt_labels, K: int) -> np.ndarray:
    """Majority ground-truth class per cluster, ties to the lower class id.
    Videos with gt label -1 are ignored. Empty clusters map to class 0."""
    pseudo = np.asarray(pseudo)
    gt_labels = np.asarray(gt_labels)
    mapping = np.zeros(K, dtype=np.int64)
    n_cls = max(K, int(gt_labels.max()) + 1 if gt_labels.size else K)
    for k in range(K):
        members = gt_labels[(pseudo == k) & (gt_labels >= 0)]
        if members.size == 0:
            log.warning("cluster %d has no labelled members; mapped to class 0", k)
            continue
        mapping[k] = int(np.argmax(np.bincount(members, minlength=n_cls)))
    return mapping


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from a score-ordered TP indicator."""
    if n_gt == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]))


def _class_tp(props, gts_by_video, thr):
    order = sorted(range(len(props)), key=lambda i: -props[i].score)
    used = {vid: np.zeros(len(g), dtype=bool) for vid, g in gts_by_video.items()}
    tp = np.zeros(len(props))
    for rank, i in enumerate(order):
        p = props[i]
        gts = gts_by_video.get(p.video_id, [])
        if not gts:
            continue
        ious = np.array([temporal_iou((p.start, p.end), g) for g in gts])
        for j in np.argsort(-ious, kind="stable"):
            if ious[j] < thr:
                break
            if used[p.video_id][j]:
                continue
            used[p.video_id][j] = True
            tp[rank] = 1.0
            break
    return tp


def mean_average_precision(proposals: list, gt, iou_thresholds=ACTIVITYNET_IOUS) -> dict:
    """Per-class AP at each IoU threshold over classes present in ``gt``.

    ``proposals`` must already carry ground-truth class ids. Each gt segment
    matches at most one proposal, claimed greedily in score order.
    """
    by_class = defaultdict(lambda: defaultdict(list))
    for vid, segs in gt.in_snippets().segments.items():
        for s in segs:
            by_class[s.label][vid].append((s.start, s.end))
    props_by_class = defaultdict(list)
    for p in proposals:
        props_by_class[p.label].append(p)
    classes = sorted(by_class)
    if not classes:
        log.warning("ground truth holds no segments; mAP reported as 0")
        return {"iou_thresholds": list(iou_thresholds), "map": [0.0] * len(iou_thresholds),
                "average_map": 0.0, "per_class_ap": {}}
    ap = np.zeros((len(iou_thresholds), len(classes)))
    for ci, c in enumerate(classes):
        n_gt = sum(len(v) for v in by_class[c].values())
        for ti, thr in enumerate(iou_thresholds):
            ap[ti, ci] = average_precision(_class_tp(props_by_class[c], by_class[c], thr), n_gt)
    maps = ap.mean(1)
    return {"iou_thresholds": [float(t) for t in iou_thresholds],
            "map": maps.tolist(),
            "average_map": float(maps.mean()),
            "per_class_ap": {int(c): ap[:, ci].tolist() for ci, c in enumerate(classes)}}


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(pred, truth) -> float:
    """Mutual information over the arithmetic mean of the two entropies."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("empty labelings")
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(truth, return_inverse=True)
    table = np.zeros((pi.max() + 1, ti.max() + 1))
    np.add.at(table, (pi, ti), 1.0)
    h_p = _entropy(table.sum(1))
    h_t = _entropy(table.sum(0))
    if h_p == 0 and h_t == 0:
        return 1.0
    n = pred.size
    nz = table > 0
    outer = np.outer(table.sum(1), table.sum(0))
    mi = float((table[nz] / n * np.log(table[nz] * n / outer[nz])).sum())
    denom = 0.5 * (h_p + h_t)
    return float(min(1.0, max(0.0, mi / denom)))


def labeling_accuracy(pseudo, gt_labels, mapping) -> float:
    pseudo = np.asarray(pseudo)
    gt_labels = np.asarray(gt_labels)
    if pseudo.size == 0:
        return float("nan")
    return float(np.mean(np.asarray(mapping)[pseudo] == gt_labels))


def precision_at(rankings, center_classes, gt_labels, depth: int = 10) -> float:
    """Mean over centers of the share of the top-``depth`` videos whose true
    class equals the center's class."""
    gt_labels = np.asarray(gt_labels)
    vals = [np.mean(gt_labels[np.asarray(r)[:depth]] == c) for r, c in zip(rankings, center_classes)]
    return float(np.mean(vals))


@dataclass
class EvalReport:
    iou_thresholds: list
    map: list
    average_map: float
    nmi: float
    per_class_ap: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def map_at(self, iou: float) -> float:
        for t, v in zip(self.iou_thresholds, self.map):
            if abs(t - iou) < 1e-9:
                return v
        raise KeyError(iou)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        return d
