"""Causal attention kernels: full, local window, and clustering-routed.

All kernels take per-head tensors shaped ``(..., N, d)`` and include the
query position itself as an admissible key, so every softmax row is
well defined (position 0 attends only to itself).
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F


def _check_qkv(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> None:
    if q.shape != k.shape:
        raise ValueError(f"query/key shape mismatch: {tuple(q.shape)} vs {tuple(k.shape)}")
    if v.shape[:-1] != k.shape[:-1]:
        raise ValueError(f"key/value length mismatch: {tuple(k.shape)} vs {tuple(v.shape)}")
    if q.dim() < 2:
        raise ValueError("expected tensors shaped (..., N, d)")


def causal_mask(n: int, device=None) -> torch.Tensor:
    i = torch.arange(n, device=device)
    return i[None, :] <= i[:, None]


def local_mask(n: int, window: int, device=None) -> torch.Tensor:
    """Admissible keys for query i are positions i - window .. i."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    i = torch.arange(n, device=device)
    offset = i[:, None] - i[None, :]
    return (offset >= 0) & (offset <= window)


def assign_clusters(x: torch.Tensor, centroids: torch.Tensor) -> torch.Tensor:
    """Nearest centroid by squared Euclidean distance; ties go to the lowest id."""
    if centroids.dim() != 2 or centroids.shape[0] < 1:
        raise ValueError("need at least one centroid, shaped (c, d)")
    if x.shape[-1] != centroids.shape[-1]:
        raise ValueError(f"vector dim {x.shape[-1]} != centroid dim {centroids.shape[-1]}")
    dist = ((x.unsqueeze(-2) - centroids) ** 2).sum(-1)
    # torch.argmin returns the first minimal index
    return dist.argmin(dim=-1)


def routing_mask(q: torch.Tensor, k: torch.Tensor, centroids: torch.Tensor) -> torch.Tensor:
    """Boolean ``(..., N, N)`` mask: earlier keys sharing the query's cluster, plus self."""
    cq = assign_clusters(q, centroids)
    ck = assign_clusters(k, centroids)
    n = q.shape[-2]
    same = cq.unsqueeze(-1) == ck.unsqueeze(-2)
    eye = torch.eye(n, dtype=torch.bool, device=q.device)
    return (same & causal_mask(n, q.device)) | eye


def masked_attention(q, k, v, mask, return_weights: bool = False):
    """Softmax attention restricted to ``mask``; every row must admit at least one key."""
    if not return_weights:
        # masked keys get exactly zero weight in the fused kernel as well
        return F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
    scores = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    scores = scores.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return torch.matmul(weights, v), weights


def full_attention(q, k, v, causal: bool = True, return_weights: bool = False):
    _check_qkv(q, k, v)
    n = q.shape[-2]
    if causal:
        mask = causal_mask(n, q.device)
    else:
        mask = torch.ones(n, n, dtype=torch.bool, device=q.device)
    return masked_attention(q, k, v, mask, return_weights)


def local_attention(q, k, v, window: int, return_weights: bool = False):
    _check_qkv(q, k, v)
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    n = q.shape[-2]
    if window >= n:
        # same mask, same ops as full causal attention: outputs are bit-equal
        return masked_attention(q, k, v, causal_mask(n, q.device), return_weights)
    if return_weights:
        return masked_attention(q, k, v, local_mask(n, window, q.device), return_weights)
    return _local_attention_blocked(q, k, v, window)


def _local_attention_blocked(q, k, v, w: int):
    """O(N * w) local attention: each block of w queries sees its own and the previous block.

    Blocks are aligned to the end of the sequence (zero padding goes in
    front), so a query's arithmetic depends only on its distance from the end
    and on the keys in its window.  Dropping tokens from the front therefore
    leaves the outputs of every query whose window is intact bit-identical.
    """
    *lead, n, d = q.shape
    nb = -(-n // w)
    pad = nb * w - n

    def blocks(t):
        t = F.pad(t, (0, 0, pad, 0))
        return t.reshape(*lead, nb, w, t.shape[-1])

    qb, kb, vb = blocks(q), blocks(k), blocks(v)

    def with_prev(t):
        prev = F.pad(t, (0, 0, 0, 0, 1, 0))[..., :-1, :, :]
        return torch.cat([prev, t], dim=-2)

    keys, values = with_prev(kb), with_prev(vb)
    b = torch.arange(nb, device=q.device)[:, None, None]
    r = torch.arange(w, device=q.device)[None, :, None]
    s = torch.arange(2 * w, device=q.device)[None, None, :]
    qidx = b * w + r          # padded coordinates
    kidx = b * w + s - w
    band = (kidx <= qidx) & (kidx >= qidx - w)
    # padding rows attend to themselves only, which keeps their softmax finite
    mask = (band & (kidx >= pad)) | (kidx == qidx)
    scores = torch.matmul(qb, keys.transpose(-1, -2)) / math.sqrt(d)
    scores = scores.masked_fill(~mask, float("-inf"))
    out = torch.matmul(torch.softmax(scores, dim=-1), values)
    return out.reshape(*lead, nb * w, v.shape[-1])[..., pad:, :]


def routing_attention(q, k, v, centroids, return_weights: bool = False):
    """Dense masked form of routing attention (differentiable, used in training)."""
    _check_qkv(q, k, v)
    mask = routing_mask(q, k, centroids)
    return masked_attention(q, k, v, mask, return_weights)


def routing_attention_sparse(q, k, v, centroids):
    """Cluster-gathered routing attention for a single head.

    Scores are evaluated only for admissible (query, key) pairs, grouped by
    cluster.  Returns ``(outputs, n_scores)`` where ``n_scores`` counts the
    key-query dot products actually computed.
    """
    _check_qkv(q, k, v)
    if q.dim() != 2:
        raise ValueError("sparse kernel expects unbatched (N, d) inputs")
    n, d = q.shape
    scale = 1.0 / math.sqrt(d)
    cq = assign_clusters(q, centroids)
    ck = assign_clusters(k, centroids)
    out = torch.empty(n, v.shape[-1], dtype=v.dtype, device=v.device)
    self_scores = (q * k).sum(-1) * scale
    n_scores = n
    for c in range(centroids.shape[0]):
        qi = torch.nonzero(cq == c).flatten()
        if qi.numel() == 0:
            continue
        kj = torch.nonzero(ck == c).flatten()
        # keys strictly before the query; self is handled through self_scores
        before = kj[None, :] < qi[:, None]
        n_scores += int(before.sum())
        scores = (q[qi] @ k[kj].T) * scale
        scores = scores.masked_fill(~before, float("-inf"))
        scores = torch.cat([scores, self_scores[qi, None]], dim=1)
        w = torch.softmax(scores, dim=1)
        out[qi] = w[:, :-1] @ v[kj] + w[:, -1:] * v[qi]
    return out, n_scores


def update_centroids(centroids: torch.Tensor, vectors: torch.Tensor, decay: float) -> torch.Tensor:
    """One EMA k-means step: ``c' = decay * c + (1 - decay) * mean(assigned)``.

    Centroids with no assigned vectors are returned unchanged.
    """
    if not 0.0 < decay < 1.0:
        raise ValueError(f"decay must lie in (0, 1), got {decay}")
    vectors = vectors.reshape(-1, centroids.shape[-1]).to(centroids.dtype)
    assign = assign_clusters(vectors, centroids)
    n_clusters = centroids.shape[0]
    sums = torch.zeros_like(centroids).index_add_(0, assign, vectors)
    counts = torch.bincount(assign, minlength=n_clusters).to(centroids.dtype)
    hit = counts > 0
    means = sums[hit] / counts[hit, None]
    new = centroids.clone()
    new[hit] = decay * centroids[hit] + (1.0 - decay) * means
    return new
