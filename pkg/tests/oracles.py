"""Independent reference implementations used as test oracles.

Each one is written the slow, obvious way and shares no code with the
package beyond plain numpy.
"""
import math
from fractions import Fraction

import numpy as np


# --- neighbour sets --------------------------------------------------------

def neighbors(dist, e, l, K=0, video_only=False):
    cand = [j for j in range(dist.shape[0]) if j != e]
    if video_only and e < K:
        cand = [j for j in cand if j >= K]
    cand.sort(key=lambda j: (dist[e, j], j))
    return cand[:l]


def reciprocal(dist, e, l, K=0, video_only=False):
    if l == 0:
        return set()
    out = {z for z in neighbors(dist, e, l, K, video_only)
           if e in neighbors(dist, z, l, K, video_only)}
    if video_only:
        out = {z for z in out if z >= K}
    return out


def expanded(dist, e, l, K=0, video_only=False):
    base = reciprocal(dist, e, l, K, video_only)
    out = set(base)
    for z in base:
        half = reciprocal(dist, z, l // 2, K, video_only)
        if len(base & half) >= Fraction(2, 3) * len(half):
            out |= half
    return out


def jaccard_loop(ea, eb):
    num = den = 0.0
    for x, y in zip(ea, eb):
        num += min(x, y)
        den += max(x, y)
    return 1.0 if den == 0 else 1.0 - num / den


# --- localizer loss with frozen index sets ----------------------------------

def loss_fixed_indices(X, params, labels, topk_idx, triples, lam, theta, normalize=True):
    """Total loss recomputed with the forward pass's top-k rows and mined
    triples held fixed, so finite differences see a smooth function."""
    B = X.shape[0]
    total_cls = 0.0
    total_ctr = 0.0
    for b in range(B):
        H = X[b] @ params["W_e"] + params["b_e"]
        XE = np.where(H > 0, H, 0.0)
        Z = XE @ params["W_c"] + params["b_c"]
        A = np.where(Z > 0, Z, 0.0)
        K = A.shape[1]
        a = np.array([A[topk_idx[b][:, k], k].mean() for k in range(K)])
        m = a.max()
        logp = a - m - math.log(np.exp(a - m).sum())
        total_cls += -logp[labels[b]]
        if normalize:
            n = np.linalg.norm(XE, axis=1, keepdims=True)
            F = np.where(n > 0, XE / np.where(n > 0, n, 1), 0.0)
        else:
            F = XE
        for t in triples[b]:
            q = F[t.query]
            logits = np.array([q @ F[t.positive]] + [q @ F[j] for j in t.negatives]) / theta
            mx = logits.max()
            total_ctr += mx + math.log(np.exp(logits - mx).sum()) - logits[0]
    return total_cls / B + lam * total_ctr


def finite_difference(fn, params, h=1e-5):
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            g[idx] = (fn(plus) - fn(minus)) / (2 * h)
        grads[name] = g
    return grads


def block_relative_error(analytic, numeric):
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return num / den


# --- evaluation --------------------------------------------------------------

def iou(a, b):
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def nms_bruteforce(props, thr):
    """Repeatedly take the best remaining proposal and drop everything that
    overlaps it above ``thr``."""
    remaining = list(range(len(props)))
    kept = []
    while remaining:
        best = remaining[0]
        for i in remaining[1:]:
            if props[i].score > props[best].score:
                best = i
        kept.append(best)
        remaining = [i for i in remaining if i != best and
                     iou((props[i].start, props[i].end), (props[best].start, props[best].end)) <= thr]
    return [props[i] for i in kept]


def nmi_contingency(a, b):
    a = list(a)
    b = list(b)
    n = len(a)
    ca, cb = {}, {}
    joint = {}
    for x, y in zip(a, b):
        ca[x] = ca.get(x, 0) + 1
        cb[y] = cb.get(y, 0) + 1
        joint[(x, y)] = joint.get((x, y), 0) + 1
    ha = -sum(c / n * math.log(c / n) for c in ca.values())
    hb = -sum(c / n * math.log(c / n) for c in cb.values())
    if ha == 0 and hb == 0:
        return 1.0
    mi = sum(c / n * math.log(c * n / (ca[x] * cb[y])) for (x, y), c in joint.items())
    return mi / ((ha + hb) / 2)
