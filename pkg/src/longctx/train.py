"""Deterministic single-threaded trainer for TransformerLM."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .attention import update_centroids
from .model import ModelConfig, TransformerLM

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.1
    steps: int = 200
    batch_size: int = 8
    seq_len: int = 64
    seed: int = 0
    optimizer: str = "sgd"  # "sgd" (momentum-free) or "adam"
    clip_norm: float = 1.0
    warmup_steps: int = 0
    log_every: int = 0


@dataclass
class TrainResult:
    model: TransformerLM
    losses: list[float] = field(default_factory=list)


class NonFiniteLoss(RuntimeError):
    pass


def _docs_as_arrays(corpus_tokens) -> list[np.ndarray]:
    if isinstance(corpus_tokens, Mapping):
        corpus_tokens = [corpus_tokens[k] for k in sorted(corpus_tokens)]
    return [np.asarray(getattr(t, "ids", t), dtype=np.int64) for t in corpus_tokens]


def sample_batch(docs: list[np.ndarray], batch_size: int, length: int, rng: np.random.Generator):
    """Random crops of ``length`` tokens; documents weighted by how many crops they hold."""
    weights = np.array([max(len(d) - length + 1, 0) for d in docs], dtype=np.float64)
    if weights.sum() == 0:
        raise ValueError(f"no document has {length} tokens")
    weights /= weights.sum()
    rows = []
    for _ in range(batch_size):
        d = docs[rng.choice(len(docs), p=weights)]
        start = rng.integers(0, len(d) - length + 1)
        rows.append(d[start : start + length])
    return torch.from_numpy(np.stack(rows))


def _init_centroids(model: TransformerLM, batch: torch.Tensor, rng: np.random.Generator) -> None:
    """Seed each routing layer's centroids with distinct Q/K vectors from one batch."""
    layers = model.routing_layers()
    for layer in layers:
        layer.record_qk = True
    with torch.no_grad():
        model(batch)
    for layer in layers:
        q, k = layer.last_qk
        vecs = torch.cat([q.reshape(-1, q.shape[-1]), k.reshape(-1, k.shape[-1])])
        idx = rng.choice(len(vecs), size=layer.centroids.shape[0], replace=False)
        layer.centroids.copy_(vecs[torch.from_numpy(idx)])
        layer.record_qk = False
        layer.last_qk = None


def train(config: ModelConfig, corpus_tokens, hp: TrainConfig, init_model: TransformerLM | None = None) -> TrainResult:
    if hp.seq_len > config.max_seq_len:
        raise ValueError(f"seq_len {hp.seq_len} exceeds max_seq_len {config.max_seq_len}")
    docs = _docs_as_arrays(corpus_tokens)
    rng = np.random.default_rng(hp.seed)
    model = init_model if init_model is not None else TransformerLM(config, seed=hp.seed)
    model.train()
    params = [p for p in model.parameters() if p.requires_grad]
    if hp.optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=hp.lr)
    elif hp.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=hp.lr)
    else:
        raise ValueError(f"unknown optimizer {hp.optimizer!r}")

    routing = model.routing_layers()
    if routing and init_model is None:
        _init_centroids(model, sample_batch(docs, hp.batch_size, hp.seq_len, rng), rng)
    for layer in routing:
        layer.record_qk = True

    result = TrainResult(model=model)
    try:
        for step in range(hp.steps):
            if hp.warmup_steps:
                for g in opt.param_groups:
                    g["lr"] = hp.lr * min(1.0, (step + 1) / hp.warmup_steps)
            batch = sample_batch(docs, hp.batch_size, hp.seq_len + 1, rng)
            logits = model(batch[:, :-1])
            loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch[:, 1:].reshape(-1))
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(f"loss became {value} at step {step}")
            result.losses.append(value)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if hp.clip_norm:
                torch.nn.utils.clip_grad_norm_(params, hp.clip_norm)
            opt.step()
            with torch.no_grad():
                for layer in routing:
                    q, k = layer.last_qk
                    d = q.shape[-1]
                    vecs = torch.cat([q.reshape(-1, d), k.reshape(-1, d)])
                    layer.centroids.copy_(
                        update_centroids(layer.centroids, vecs, layer.spec.centroid_decay)
                    )
            if hp.log_every and step % hp.log_every == 0:
                log.info("step %d loss %.4f", step, value)
    finally:
        for layer in routing:
            layer.record_qk = False
            layer.last_qk = None
    model.eval()
    return result
