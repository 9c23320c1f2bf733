"""CoLA-style localisation head with hand-written gradients.

Per video with snippet features X (T x D)::

    X_E = relu(X @ W_e + b_e)            embedded snippets, T x D
    A   = relu(X_E @ W_c + b_c)          class activation map, T x K
    S   = sigmoid(A.sum(1))              class-agnostic attention, T
    a   = mean of top-l_high rows of A   video-level prediction, K
    p   = softmax(a)

Loss = mean_n(-log p_n[y_n]) + lam * sum of snippet InfoNCE terms, where
queries, positives and negatives are mined from S. Mined indices and top-k
rows are constants of the forward pass; no gradient flows through them.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .numerics import AdamState, adam_step, l2_normalize_rows, sigmoid, softmax

log = logging.getLogger(__name__)

PARAM_ORDER = ("W_e", "b_e", "W_c", "b_c")


@dataclass
class MiningConfig:
    tau_c: float = 0.5
    erosion: int | None = None   # default max(1, T // 64)
    dilation: int | None = None  # default max(1, T // 64)

    @staticmethod
    def easy_count(T: int) -> int:
        return max(1, T // 8)

    @staticmethod
    def hard_count(T: int) -> int:
        return max(1, T // 32)

    def margins(self, T: int) -> tuple:
        m = self.erosion if self.erosion is not None else max(1, T // 64)
        M = self.dilation if self.dilation is not None else max(1, T // 64)
        if m < 1 or M < 1:
            raise ValueError("erosion/dilation margins must be at least 1")
        return m, M


@dataclass
class LossConfig:
    lam: float = 0.005
    theta: float = 0.07
    l_high: int | None = None  # default max(1, T // 8)
    normalize_features: bool = True

    def topk(self, T: int) -> int:
        k = self.l_high if self.l_high is not None else max(1, T // 8)
        return min(k, T)


# --------------------------------------------------------------------------
# parameters and forward pass

def init_params(D: int, K: int, rng: np.random.Generator) -> dict:
    def glorot(fan_in, fan_out):
        r = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-r, r, size=(fan_in, fan_out))
    return {"W_e": glorot(D, D), "b_e": np.zeros(D),
            "W_c": glorot(D, K), "b_c": np.zeros(K)}


@dataclass
class ActivationMaps:
    X: np.ndarray      # B x T x D input
    H: np.ndarray      # pre-activation embedding
    XE: np.ndarray     # B x T x D
    Z: np.ndarray      # pre-activation CAS
    A: np.ndarray      # B x T x K
    S: np.ndarray      # B x T
    topk: np.ndarray   # B x k x K row indices feeding a
    a: np.ndarray      # B x K
    p: np.ndarray      # B x K


def forward(X, params: dict, cfg: LossConfig = LossConfig()) -> ActivationMaps:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    B, T, D = X.shape
    if params["W_e"].shape[0] != D:
        raise ValueError(f"feature width {D} != embedding input {params['W_e'].shape[0]}")
    H = X @ params["W_e"] + params["b_e"]
    XE = np.maximum(H, 0.0)
    Z = XE @ params["W_c"] + params["b_c"]
    A = np.maximum(Z, 0.0)
    S = sigmoid(A.sum(-1))
    k = cfg.topk(T)
    idx = np.argsort(-A, axis=1, kind="stable")[:, :k, :]
    a = np.take_along_axis(A, idx, axis=1).mean(1)
    p = softmax(a)
    return ActivationMaps(X, H, XE, Z, A, S, idx, a, p)


# --------------------------------------------------------------------------
# snippet mining

@dataclass
class MinedSnippets:
    hard_action: np.ndarray
    hard_background: np.ndarray
    easy_action: np.ndarray
    easy_background: np.ndarray


def mine_snippets(S, cfg: MiningConfig = MiningConfig(), rng: np.random.Generator | None = None) -> MinedSnippets:
    """Boundary (hard) and extreme-attention (easy) snippets of one video."""
    S = np.asarray(S, dtype=np.float64)
    T = S.shape[0]
    m, M = cfg.margins(T)
    mask = S > cfg.tau_c
    eroded = ndimage.binary_erosion(mask, structure=np.ones(2 * m + 1, dtype=bool))
    dilated = ndimage.binary_dilation(mask, structure=np.ones(2 * M + 1, dtype=bool))
    hard_act = np.flatnonzero(mask & ~eroded)
    hard_bg = np.flatnonzero(dilated & ~mask)
    n_hard = MiningConfig.hard_count(T)
    if rng is not None:
        if hard_act.size > n_hard:
            hard_act = np.sort(rng.choice(hard_act, n_hard, replace=False))
        if hard_bg.size > n_hard:
            hard_bg = np.sort(rng.choice(hard_bg, n_hard, replace=False))
    n_easy = MiningConfig.easy_count(T)
    order = np.argsort(-S, kind="stable")
    easy_act = order[:n_easy]
    # bottom picks come from what the top picks left over, so the two never share a snippet
    rest = order[n_easy:]
    easy_bg = rest[::-1][:n_easy] if rest.size else rest
    return MinedSnippets(hard_act, hard_bg, np.sort(easy_act), np.sort(easy_bg))


@dataclass
class Triple:
    query: int
    positive: int
    negatives: np.ndarray


def _draw(pool, count, rng):
    return rng.choice(pool, count, replace=pool.size < count)


def sample_triples(mined: MinedSnippets, n_neg: int, rng: np.random.Generator) -> list:
    """One action triple and one background triple where the pools allow."""
    out = []
    for q_pool, p_pool, n_pool in ((mined.hard_action, mined.easy_action, mined.easy_background),
                                   (mined.hard_background, mined.easy_background, mined.easy_action)):
        if q_pool.size == 0 or p_pool.size == 0 or n_pool.size == 0:
            continue
        out.append(Triple(int(rng.choice(q_pool)), int(rng.choice(p_pool)),
                          np.asarray(_draw(n_pool, n_neg, rng), dtype=np.int64)))
    return out


# --------------------------------------------------------------------------
# losses

def classification_loss(p, label) -> float:
    """Cross-entropy ``-log p[label]``; batched input gives the mean."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    label = np.atleast_1d(np.asarray(label))
    if np.any(label < 0) or np.any(label >= p.shape[1]):
        raise ValueError(f"label outside [0, {p.shape[1]})")
    picked = p[np.arange(p.shape[0]), label]
    return float(-np.log(picked).mean())


def info_nce(q, pos, negs, theta: float) -> float:
    """``-log exp(q.p/theta) / (exp(q.p/theta) + sum exp(q.n/theta))``."""
    logits = np.concatenate([[q @ pos], np.asarray(negs) @ q]) / theta
    top = logits.max()
    return float(top + np.log(np.exp(logits - top).sum()) - logits[0])


def _info_nce_grad(F, t: Triple, theta: float, dF: np.ndarray, scale: float) -> float:
    q, pos, negs = F[t.query], F[t.positive], F[t.negatives]
    logits = np.concatenate([[q @ pos], negs @ q]) / theta
    top = logits.max()
    w = np.exp(logits - top)
    pi = w / w.sum()
    loss = top + np.log(w.sum()) - logits[0]
    g = pi.copy()
    g[0] -= 1.0
    g *= scale / theta
    dF[t.query] += g[0] * pos + g[1:] @ negs
    dF[t.positive] += g[0] * q
    np.add.at(dF, t.negatives, g[1:, None] * q[None, :])
    return float(loss)


def contrastive_features(XE, cfg: LossConfig):
    return l2_normalize_rows(XE) if cfg.normalize_features else np.asarray(XE, dtype=np.float64)


def contrastive_loss(F, triples: list, theta: float = 0.07) -> float:
    """Sum of InfoNCE terms over the given triples of one video."""
    F = np.asarray(F, dtype=np.float64)
    return float(sum(info_nce(F[t.query], F[t.positive], F[t.negatives], theta) for t in triples))


def total_loss(L_cls: float, L_ctr: float, lam: float) -> float:
    return L_cls + lam * L_ctr


def batch_loss(maps: ActivationMaps, labels, triples: list, cfg: LossConfig) -> tuple:
    """``(total, L_cls, L_ctr)`` for a batch; ``triples[b]`` lists video b's triples."""
    L_cls = classification_loss(maps.p, labels)
    L_ctr = 0.0
    for b, trips in enumerate(triples):
        if trips:
            L_ctr += contrastive_loss(contrastive_features(maps.XE[b], cfg), trips, cfg.theta)
    return total_loss(L_cls, L_ctr, cfg.lam), L_cls, L_ctr


def backward(maps: ActivationMaps, labels, triples: list, params: dict, cfg: LossConfig) -> tuple:
    """Exact gradients of the batch loss. Returns ``(grads, (total, L_cls, L_ctr))``."""
    labels = np.asarray(labels)
    B, T, K = maps.A.shape
    k = maps.topk.shape[1]

    da = maps.p.copy()
    da[np.arange(B), labels] -= 1.0
    da /= B
    L_cls = classification_loss(maps.p, labels)

    dA = np.zeros_like(maps.A)
    np.put_along_axis(dA, maps.topk, np.broadcast_to(da[:, None, :] / k, maps.topk.shape), axis=1)
    dZ = dA * (maps.Z > 0)

    dXE = dZ @ params["W_c"].T
    L_ctr = 0.0
    if cfg.lam != 0.0:
        for b, trips in enumerate(triples):
            if not trips:
                continue
            XE = maps.XE[b]
            F = contrastive_features(XE, cfg)
            dF = np.zeros_like(F)
            for t in trips:
                L_ctr += _info_nce_grad(F, t, cfg.theta, dF, cfg.lam)
            if cfg.normalize_features:
                norms = np.linalg.norm(XE, axis=1, keepdims=True)
                proj = dF - F * (F * dF).sum(1, keepdims=True)
                dF = np.where(norms > 0, proj / np.where(norms > 0, norms, 1.0), 0.0)
            dXE[b] += dF
    else:
        L_ctr = sum(contrastive_loss(contrastive_features(maps.XE[b], cfg), trips, cfg.theta)
                    for b, trips in enumerate(triples) if trips)
    dH = dXE * (maps.H > 0)

    grads = {
        "W_c": np.einsum("btd,btk->dk", maps.XE, dZ),
        "b_c": dZ.sum((0, 1)),
        "W_e": np.einsum("bti,btj->ij", maps.X, dH),
        "b_e": dH.sum((0, 1)),
    }
    return grads, (total_loss(L_cls, L_ctr, cfg.lam), L_cls, L_ctr)


def mine_batch(maps: ActivationMaps, mining: MiningConfig, rng: np.random.Generator) -> list:
    T = maps.S.shape[1]
    n_neg = MiningConfig.easy_count(T)
    return [sample_triples(mine_snippets(maps.S[b], mining, rng), n_neg, rng)
            for b in range(maps.S.shape[0])]


# --------------------------------------------------------------------------
# training

@dataclass
class TrainTrace:
    epoch_loss: list = field(default_factory=list)
    epoch_cls: list = field(default_factory=list)
    epoch_ctr: list = field(default_factory=list)
    steps: int = 0


def train_iteration(X_all, videos, labels, params: dict, state: AdamState, epochs: int,
                    batch_size: int, rng: np.random.Generator,
                    loss_cfg: LossConfig = LossConfig(), mining: MiningConfig = MiningConfig()):
    """Shuffled mini-batch Adam over the selected videos for ``epochs`` epochs.

    ``X_all`` is N x T x D; ``videos``/``labels`` are the selected indices and
    their pseudo labels. Returns ``(params, state, TrainTrace)``.
    """
    videos = np.asarray(videos, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    trace = TrainTrace()
    if videos.size == 0:
        log.warning("empty selection; skipping training")
        return params, state, trace
    for _ in range(epochs):
        perm = rng.permutation(videos.size)
        tot = cls = ctr = 0.0
        for start in range(0, perm.size, batch_size):
            sel = perm[start:start + batch_size]
            maps = forward(X_all[videos[sel]], params, loss_cfg)
            triples = mine_batch(maps, mining, rng)
            grads, (L, Lc, Lt) = backward(maps, labels[sel], triples, params, loss_cfg)
            params, state = adam_step(params, grads, state)
            n = sel.size
            tot, cls, ctr = tot + L * n, cls + Lc * n, ctr + Lt * n
            trace.steps += 1
        trace.epoch_loss.append(tot / videos.size)
        trace.epoch_cls.append(cls / videos.size)
        trace.epoch_ctr.append(ctr / videos.size)
    return params, state, trace


def attention_maps(X_all, params: dict, cfg: LossConfig = LossConfig(), chunk: int = 256) -> ActivationMaps:
    """Forward over a whole N x T x D array, in chunks."""
    parts = [forward(X_all[i:i + chunk], params, cfg) for i in range(0, len(X_all), chunk)]
    if len(parts) == 1:
        return parts[0]
    return ActivationMaps(*(np.concatenate([getattr(p, f) for p in parts])
                            for f in ActivationMaps.__dataclass_fields__))


# --------------------------------------------------------------------------
# checkpoints
#
# b"FEELCKPT", u32 version=1, u32 iteration, u32 D, u32 K, u64 adam step,
# f64 lr, beta1, beta2, eps, then for W_e, b_e, W_c, b_c in that order:
# parameter, first moment, second moment as little-endian f64, row-major.

CKPT_MAGIC = b"FEELCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, params: dict, state: AdamState, iteration: int) -> None:
    D, K = params["W_c"].shape
    head = CKPT_MAGIC + struct.pack("<IIIIQdddd", CKPT_VERSION, iteration, D, K, state.step,
                                    state.lr, state.beta1, state.beta2, state.eps)
    body = []
    for name in PARAM_ORDER:
        for arr in (params[name], state.m.get(name, np.zeros_like(params[name])),
                    state.v.get(name, np.zeros_like(params[name]))):
            body.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(head + b"".join(body))


def load_checkpoint(path):
    """Returns ``(params, AdamState, iteration)``."""
    buf = Path(path).read_bytes()
    if buf[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError("not a FEELCKPT file")
    fmt = "<IIIIQdddd"
    off = len(CKPT_MAGIC)
    version, iteration, D, K, step, lr, b1, b2, eps = struct.unpack_from(fmt, buf, off)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off += struct.calcsize(fmt)
    shapes = {"W_e": (D, D), "b_e": (D,), "W_c": (D, K), "b_c": (K,)}
    params, m, v = {}, {}, {}
    for name in PARAM_ORDER:
        n = int(np.prod(shapes[name]))
        for target in (params, m, v):
            if off + 8 * n > len(buf):
                raise ValueError("truncated checkpoint")
            target[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shapes[name]).copy()
            off += 8 * n
    if off != len(buf):
        raise ValueError("trailing bytes in checkpoint")
    return params, AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step, m=m, v=v), iteration
