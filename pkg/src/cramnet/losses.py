"""Softmax, cross-entropy, teacher MSE and the combined teacher/label loss.

All losses take batches shaped ``(N, K)`` (a single ``(K,)`` vector is
treated as a batch of one) and reduce with the mean over samples.
"""
from __future__ import annotations

import numpy as np


class DivergentLossError(ArithmeticError):
    """The loss is infinite or undefined (true-class probability underflowed to 0)."""


def _rows(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[None] if a.ndim == 1 else a


def softmax(z) -> np.ndarray:
    """Max-shifted softmax along the last axis."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, classes))
    out[np.arange(labels.size), labels.ravel()] = 1.0
    return out


def cross_entropy(l, q_prob) -> float:
    """Mean over samples of ``-sum_j l[j] * log q[j]``."""
    l, q = _rows(l), _rows(q_prob)
    if l.shape != q.shape:
        raise ValueError(f"label shape {l.shape} != probability shape {q.shape}")
    true_q = (l * q).sum(axis=1)
    if np.any(true_q <= 0):
        raise DivergentLossError("probability of the true class is 0; cross-entropy is infinite")
    mask = l != 0
    per_sample = -(np.where(mask, l * np.log(np.where(mask, q, 1.0)), 0.0)).sum(axis=1)
    return float(per_sample.mean())


def teacher_mse(p, q) -> float:
    """Mean over samples of ``(1/K) * sum_j (p[j] - q[j])**2`` on pre-softmax logits."""
    p, q = _rows(p), _rows(q)
    if p.shape != q.shape:
        raise ValueError(f"teacher shape {p.shape} != student shape {q.shape}")
    return float(((p - q) ** 2).mean(axis=1).mean())


def ce_loss(q, l) -> tuple[float, np.ndarray]:
    """Cross-entropy of ``softmax(q)`` against one-hot ``l``, with its gradient in ``q``."""
    q, l = _rows(q), _rows(l)
    s = softmax(q)
    return cross_entropy(l, s), (s - l) / q.shape[0]


def cram_loss(q, p, l) -> tuple[float, np.ndarray]:
    """``teacher_mse(p, q) + cross_entropy(l, softmax(q))`` and its gradient in ``q``.

    ``q`` are the student logits, ``p`` the teacher logits, ``l`` one-hot labels.
    """
    q, p, l = _rows(q), _rows(p), _rows(l)
    n, k = q.shape
    s = softmax(q)
    value = teacher_mse(p, q) + cross_entropy(l, s)
    grad = 2.0 * (q - p) / (k * n) + (s - l) / n
    return value, grad


def loss_and_grad(kind: str, q, l, p=None) -> tuple[float, np.ndarray]:
    if kind == "ce":
        return ce_loss(q, l)
    if kind == "cram":
        if p is None:
            raise ValueError("the combined loss needs teacher logits")
        return cram_loss(q, p, l)
    raise ValueError(f"unknown loss {kind!r}")
