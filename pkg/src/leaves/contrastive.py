"""NT-Xent contrastive loss over interleaved view pairs.

Rows ``2k`` and ``2k+1`` (0-indexed) hold the two views of source sample ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_TAU = 0.05


class CollapsedEmbeddingError(ValueError):
    pass


@dataclass
class EmbeddingBatch:
    embeddings: Tensor
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        rows = self.embeddings.shape[0]
        if self.embeddings.ndim != 2:
            raise ValueError(f"embeddings must be (2N, D), got {self.embeddings.shape}")
        # 2 rows is allowed but degenerate: the positive is the only denominator term
        if rows < 2 or rows % 2:
            raise ValueError(f"need an even number (>= 2) of rows, got {rows}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def pairs(self) -> int:
        return self.embeddings.shape[0] // 2


def cosine_similarity(a, b) -> Tensor:
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    na = float(np.sqrt(np.sum(a.data**2)))
    nb = float(np.sqrt(np.sum(b.data**2)))
    if na == 0 or nb == 0:
        raise CollapsedEmbeddingError("cosine similarity of a zero-norm vector")
    return (a * b).sum() / (ad.sqrt((a * a).sum()) * ad.sqrt((b * b).sum()))


def _normalize_rows(z: Tensor) -> Tensor:
    sq = (z * z).sum(axis=1, keepdims=True)
    if np.any(sq.data == 0):
        row = int(np.argwhere(sq.data[:, 0] == 0)[0, 0])
        raise CollapsedEmbeddingError(f"embedding row {row} has zero norm")
    return z / ad.sqrt(sq)


def similarity_logits(batch: EmbeddingBatch) -> Tensor:
    zn = _normalize_rows(batch.embeddings)
    return ad.matmul(zn, ad.transpose(zn)) / batch.tau


def nt_xent(batch: EmbeddingBatch) -> Tensor:
    logits = similarity_logits(batch)
    rows = logits.shape[0]
    partner = np.arange(rows) ^ 1
    self_mask = np.where(np.eye(rows, dtype=bool), -np.inf, 0.0)
    masked = logits + Tensor(self_mask)
    # shift by the row max so exp never overflows at small tau
    shift = Tensor(np.max(masked.data, axis=1, keepdims=True))
    log_denom = ad.log(ad.exp(masked - shift).sum(axis=1))
    positive = ad.take_lastaxis(logits - shift, partner[:, None])
    per_row = log_denom - ad.reshape(positive, (rows,))
    return per_row.mean()


def nt_xent_loss(z, tau: float = DEFAULT_TAU) -> Tensor:
    return nt_xent(EmbeddingBatch(ad.as_tensor(z), tau))


def interleave_views(views_a, views_b) -> Tensor:
    """Rows A1, B1, A2, B2, ..."""
    views_a, views_b = ad.as_tensor(views_a), ad.as_tensor(views_b)
    if views_a.shape != views_b.shape:
        raise ValueError(f"view shapes differ: {views_a.shape} vs {views_b.shape}")
    n = views_a.shape[0]
    order = np.stack([np.arange(n), np.arange(n) + n], axis=1).reshape(-1)
    return ad.take(ad.concat([views_a, views_b], axis=0), order, axis=0)


def deinterleave(z) -> tuple[np.ndarray, np.ndarray]:
    data = z.data if isinstance(z, Tensor) else np.asarray(z)
    return data[0::2].copy(), data[1::2].copy()
