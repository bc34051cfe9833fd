"""Intra-modal and cross-modal instance discrimination losses.

By default the cross-view sum in each denominator runs over every k, so it
contains the positive pair once more.
``literal=False`` drops that k = i cross term (the usual InfoNCE form).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg

DEFAULT_TEMPERATURE = 0.07
_MASKED = -1e30


@dataclass
class ContrastBatch:
    """Embeddings of two augmentations (``z_t1``, ``z_t2``) and the image side ``h``."""

    z_t1: dg.Node
    z_t2: dg.Node
    h: dg.Node
    tau: float = DEFAULT_TEMPERATURE
    literal: bool = True

    def __post_init__(self):
        shapes = {self.z_t1.shape, self.z_t2.shape, self.h.shape}
        if len(shapes) != 1 or len(self.z_t1.shape) != 2:
            raise dg.ShapeError(f"batch shapes differ: {sorted(shapes)}")
        if self.n < 2:
            raise ValueError("contrastive losses need a batch of at least 2")
        if not self.tau > 0:
            raise ValueError("temperature must be positive")

    @property
    def n(self) -> int:
        return self.z_t1.shape[0]


def _pair_term(anchor: dg.Node, positive: dg.Node, same_view: dg.Node, cross_view: dg.Node,
               i: int, tau: float, literal: bool) -> dg.Node:
    """-log exp(s(a_i, p_i)/tau) / (sum_{k!=i} exp(s(a_i, same_k)/tau) + sum_k exp(s(a_i, cross_k)/tau))."""
    n = same_view.shape[0]
    a = anchor[i : i + 1]
    s_same = dg.cosine_similarity_rows(a, same_view)[0]
    s_cross = dg.cosine_similarity_rows(a, cross_view)[0]
    s_pos = dg.cosine_similarity_rows(a, positive[i : i + 1])[0, 0]
    others = np.array([k for k in range(n) if k != i])
    cross_idx = np.arange(n) if literal else others
    logits = dg.concat([s_same[others], s_cross[cross_idx]])
    return dg.logsumexp_row(dg.scale(logits, 1.0 / tau)) - s_pos * (1.0 / tau)


def _check_index(batch: ContrastBatch, i: int):
    if not 0 <= i < batch.n:
        raise IndexError(f"pair index {i} outside batch of {batch.n}")


def imid_pair_loss(batch: ContrastBatch, i: int, direction: int = 0) -> dg.Node:
    """l(i, t1, t2) for direction 0, l(i, t2, t1) for direction 1."""
    _check_index(batch, i)
    a, b = (batch.z_t1, batch.z_t2) if direction == 0 else (batch.z_t2, batch.z_t1)
    return _pair_term(a, b, a, b, i, batch.tau, batch.literal)


def prototype(z_t1: dg.Node, z_t2: dg.Node) -> dg.Node:
    """Row-wise mean of the two views; deliberately not re-normalised."""
    if z_t1.shape != z_t2.shape:
        raise dg.ShapeError(f"prototype shapes {z_t1.shape} vs {z_t2.shape}")
    return dg.scale(z_t1 + z_t2, 0.5)


def cmid_pair_loss(batch: ContrastBatch, i: int, direction: int = 0, z: dg.Node | None = None) -> dg.Node:
    """c(i, z, h) for direction 0, c(i, h, z) for direction 1 (z = prototypes)."""
    _check_index(batch, i)
    if z is None:
        z = prototype(batch.z_t1, batch.z_t2)
    a, b = (z, batch.h) if direction == 0 else (batch.h, z)
    return _pair_term(a, b, a, b, i, batch.tau, batch.literal)


def _symmetric_loss(a: dg.Node, b: dg.Node, tau: float, literal: bool) -> dg.Node:
    """(1/2N) sum_i [term(i, a, b) + term(i, b, a)], vectorised over i."""
    n = a.shape[0]
    mask_same = np.where(np.eye(n, dtype=bool), _MASKED, 0.0)
    mask_cross = np.zeros((n, n)) if literal else mask_same
    total = None
    for x, y in ((a, b), (b, a)):
        s_same = dg.cosine_similarity_rows(x, x)
        s_cross = dg.cosine_similarity_rows(x, y)
        logits = dg.concat([dg.scale(s_same, 1.0 / tau) + mask_same,
                            dg.scale(s_cross, 1.0 / tau) + mask_cross], axis=1)
        pos = dg.scale(s_cross[np.arange(n), np.arange(n)], 1.0 / tau)
        term = dg.sum(dg.logsumexp_row(logits) - pos)
        total = term if total is None else total + term
    return dg.scale(total, 1.0 / (2 * n))


def imid_loss(batch: ContrastBatch) -> dg.Node:
    return _symmetric_loss(batch.z_t1, batch.z_t2, batch.tau, batch.literal)


def cmid_loss(batch: ContrastBatch) -> dg.Node:
    z = prototype(batch.z_t1, batch.z_t2)
    return _symmetric_loss(z, batch.h, batch.tau, batch.literal)


def contrast_loss(batch: ContrastBatch, lambda1: float = 0.5, lambda2: float = 0.5) -> dg.Node:
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be non-negative")
    return dg.scale(imid_loss(batch), lambda1) + dg.scale(cmid_loss(batch), lambda2)
