"""Shared numeric primitives: softmax, top-k pooling, Adam, row normalisation
and a seeded random-stream factory.

Matrices are plain ``numpy.ndarray`` objects. Everything here is a pure
function except :class:`AdamState`, which is owned by one training loop.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

RNG_ALGORITHM = "PCG64/SeedSequence"


def softmax(v):
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    z = np.exp(v - v.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def topk_indices_per_column(M, k):
    """Row indices of the k largest entries of each column, shape (k, K).

    Ties resolve to the lower row index so the selection is deterministic.
    """
    M = np.asarray(M)
    T = M.shape[0]
    if not 1 <= k <= T:
        raise ValueError(f"k={k} must lie in [1, {T}]")
    order = np.argsort(-M, axis=0, kind="stable")
    return order[:k]


def topk_mean_per_column(M, k):
    """Mean of the ``k`` largest values in every column of a T x K matrix."""
    M = np.asarray(M, dtype=np.float64)
    idx = topk_indices_per_column(M, k)
    return np.take_along_axis(M, idx, axis=0).mean(axis=0)


def l2_normalize_rows(M):
    """Scale each nonzero row to unit Euclidean norm; zero rows pass through."""
    M = np.asarray(M, dtype=np.float64)
    norms = np.linalg.norm(M, axis=-1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return M / safe


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, lr: float = 1e-4) -> "AdamState":
        return cls(
            lr=lr,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    Inputs are not mutated.
    """
    if set(params) != set(grads):
        raise ValueError("parameter and gradient keys differ")
    for name, p in params.items():
        if np.shape(grads[name]) != np.shape(p):
            raise ValueError(f"gradient shape mismatch for {name!r}: "
                             f"{np.shape(grads[name])} vs {np.shape(p)}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    new_state = AdamState(lr=state.lr, beta1=b1, beta2=b2, eps=state.eps,
                          step=t, m=new_m, v=new_v)
    return new_params, new_state


def _purpose_key(purpose: str) -> int:
    # crc32 is stable across interpreters, unlike hash()
    return zlib.crc32(purpose.encode("utf-8"))


@dataclass(frozen=True)
class SeededRng:
    """Factory of independent, reproducible ``numpy.random.Generator`` streams.

    Each ``(iteration, purpose)`` pair maps to its own spawn key under one
    root seed, so e.g. the k-means stream of iteration 3 never depends on how
    many draws the training loop made.
    """

    seed: int
    algorithm: str = RNG_ALGORITHM

    def stream(self, iteration: int = 0, purpose: str = "default") -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(int(iteration), _purpose_key(purpose)))
        return np.random.Generator(np.random.PCG64(ss))
