"""Small causal transformer LM with per-layer attention kernels."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import full_attention, local_attention, routing_attention


@dataclass(frozen=True)
class Full:
    kind = "full"


@dataclass(frozen=True)
class Local:
    window: int
    kind = "local"

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"local window must be >= 1, got {self.window}")


@dataclass(frozen=True)
class Routing:
    n_clusters: int
    centroid_decay: float = 0.999
    kind = "routing"

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError(f"need >= 1 cluster, got {self.n_clusters}")
        if not 0.0 < self.centroid_decay < 1.0:
            raise ValueError(f"centroid_decay must lie in (0, 1), got {self.centroid_decay}")


AttentionSpec = Union[Full, Local, Routing]


def spec_to_dict(spec: AttentionSpec) -> dict:
    return {"kind": spec.kind, **asdict(spec)}


def spec_from_dict(d: dict) -> AttentionSpec:
    d = dict(d)
    kind = d.pop("kind")
    cls = {"full": Full, "local": Local, "routing": Routing}.get(kind)
    if cls is None:
        raise ValueError(f"unknown attention kind {kind!r}")
    return cls(**d)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    max_seq_len: int = 256
    attention: tuple = field(default=())
    # "start": position 0 is the first input token. "end": the last input token
    # always sits at max_seq_len - 1, so truncating context never moves the targets.
    positions: str = "start"

    def __post_init__(self):
        if not self.attention:
            object.__setattr__(self, "attention", tuple(Full() for _ in range(self.n_layers)))
        object.__setattr__(self, "attention", tuple(self.attention))
        if len(self.attention) != self.n_layers:
            raise ValueError(
                f"attention has {len(self.attention)} entries for {self.n_layers} layers"
            )
        if self.positions not in ("start", "end"):
            raise ValueError(f"positions must be 'start' or 'end', got {self.positions!r}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def receptive_field(self) -> int | None:
        """Context reach of an all-local stack (window * layers); None otherwise."""
        if all(isinstance(s, Local) for s in self.attention):
            return sum(s.window for s in self.attention)
        return None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attention"] = [spec_to_dict(s) for s in self.attention]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["attention"] = tuple(spec_from_dict(s) for s in d.get("attention", []))
        return cls(**d)


class Attention(nn.Module):
    def __init__(self, config: ModelConfig, spec: AttentionSpec):
        super().__init__()
        self.spec = spec
        self.n_heads = config.n_heads
        self.qkv = nn.Linear(config.d_model, 3 * config.d_model)
        self.proj = nn.Linear(config.d_model, config.d_model)
        if isinstance(spec, Routing):
            self.register_buffer("centroids", torch.randn(spec.n_clusters, config.d_head))
        # set by the trainer to collect Q/K vectors for centroid updates
        self.record_qk = False
        self.last_qk = None

    def forward(self, x):
        b, n, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).view(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        spec = self.spec
        if isinstance(spec, Full):
            out = full_attention(q, k, v)
        elif isinstance(spec, Local):
            out = local_attention(q, k, v, spec.window)
        else:
            out = routing_attention(q, k, v, self.centroids)
            if self.record_qk:
                self.last_qk = (q.detach(), k.detach())
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, config: ModelConfig, spec: AttentionSpec):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.d_model)
        self.attn = Attention(config, spec)
        self.ln2 = nn.LayerNorm(config.d_model)
        self.ff = nn.Sequential(
            nn.Linear(config.d_model, config.d_ff),
            nn.GELU(),
            nn.Linear(config.d_ff, config.d_model),
        )

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.ff(self.ln2(x))


class TransformerLM(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.meta: dict = {}
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
            self.pos_emb = nn.Embedding(config.max_seq_len, config.d_model)
            self.blocks = nn.ModuleList(Block(config, s) for s in config.attention)
            self.ln_f = nn.LayerNorm(config.d_model)
            self.head = nn.Linear(config.d_model, config.vocab_size)
            for name, p in self.named_parameters():
                if p.dim() == 2:
                    nn.init.normal_(p, std=0.02)
                elif name.endswith("bias"):
                    nn.init.zeros_(p)
        finally:
            torch.random.set_rng_state(gen_state)

    def routing_layers(self) -> list[Attention]:
        return [b.attn for b in self.blocks if isinstance(b.attn.spec, Routing)]

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        n = ids.shape[-1]
        if n > self.config.max_seq_len:
            raise ValueError(f"sequence length {n} exceeds max_seq_len {self.config.max_seq_len}")
        pos = torch.arange(n, device=ids.device)
        if self.config.positions == "end":
            pos = pos + (self.config.max_seq_len - n)
        x = self.tok_emb(ids) + self.pos_emb(pos)
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))


def _as_ids(model: TransformerLM, tokens) -> torch.Tensor:
    ids = getattr(tokens, "ids", tokens)
    ids = torch.as_tensor(np.asarray(ids, dtype=np.int64))
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= model.config.vocab_size):
        raise ValueError("token id outside the model vocabulary")
    if ids.shape[-1] > model.config.max_seq_len:
        raise ValueError(
            f"sequence length {ids.shape[-1]} exceeds max_seq_len {model.config.max_seq_len}"
        )
    return ids


@torch.no_grad()
def batch_nll(model: TransformerLM, ids) -> np.ndarray:
    """Next-token NLLs for a ``(B, N)`` batch, shape ``(B, N-1)``, float64."""
    ids = _as_ids(model, ids)
    if ids.dim() == 1:
        ids = ids[None]
    was_training = model.training
    model.eval()
    try:
        logits = model(ids)
    finally:
        model.train(was_training)
    # float64 log-softmax keeps exact-formula checks (e.g. uniform heads) clean
    logp = F.log_softmax(logits[:, :-1].double(), dim=-1)
    nll = -logp.gather(-1, ids[:, 1:, None]).squeeze(-1)
    return nll.numpy()


def forward_nll(model: TransformerLM, tokens) -> np.ndarray:
    """Position i holds -log p(token[i+1] | token[0..i]); length is len(tokens) - 1."""
    ids = _as_ids(model, tokens)
    if ids.dim() != 1:
        raise ValueError("forward_nll takes a single sequence")
    if ids.numel() < 2:
        return np.zeros(0)
    return batch_nll(model, ids[None])[0]


# -- checkpoint format ------------------------------------------------------
#
#   8 bytes   magic b"LCTXCKPT"
#   uint32    format version (little endian)
#   uint32    byte length L of the JSON config block
#   L bytes   UTF-8 JSON {"config": ModelConfig.to_dict(), "meta": {...},
#                         "tensors": [[name, shape], ...]}
#   then each tensor in the listed order (state_dict order) as raw float32 LE

MAGIC = b"LCTXCKPT"
FORMAT_VERSION = 1


def save_checkpoint(model: TransformerLM, path, meta: dict | None = None) -> None:
    """``meta`` is free-form JSON carried alongside the weights (e.g. the vocab hash)."""
    state = model.state_dict()
    header = {
        "config": model.config.to_dict(),
        "meta": meta or {},
        "tensors": [[name, list(t.shape)] for name, t in state.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for t in state.values():
            f.write(t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())


def load_checkpoint(path) -> TransformerLM:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a longctx checkpoint")
    version, n = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + n].decode("utf-8"))
    model = TransformerLM(ModelConfig.from_dict(header["config"]))
    offset = 16 + n
    state = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
        offset += 4 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after tensor data")
    model.load_state_dict(state)
    model.meta = header.get("meta", {})
    return model
