"""Experiment configuration: one JSON document, fully resolved before a run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import ModelConfig, spec_from_dict
from .perturbations import KINDS, RANDOM_CONTROL, TARGET_OCCURRENCES
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class CorpusParams:
    dir: str | None = None
    metadata: str | None = None  # JSONL labels; defaults to <dir>/metadata.jsonl when present


@dataclass
class TokenizerParams:
    vocab_size: int = 512
    vocab: str | None = None  # existing vocab file; trained from the corpus when absent


@dataclass
class ModelParams:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    max_seq_len: int = 256
    attention: list = field(default_factory=lambda: [{"kind": "full"}, {"kind": "full"}])
    positions: str = "start"

    def build(self, vocab_size: int) -> ModelConfig:
        d = asdict(self)
        d["attention"] = tuple(spec_from_dict(s) for s in self.attention)
        return ModelConfig(vocab_size=vocab_size, **d)


@dataclass
class TrainParams:
    lr: float = 0.1
    steps: int = 200
    batch_size: int = 8
    seq_len: int = 64
    optimizer: str = "sgd"
    clip_norm: float = 1.0
    warmup_steps: int = 0

    def build(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **asdict(self))


@dataclass
class ProtocolParams:
    prefix_len: int = 256          # N, longest prefix a window provides
    n_targets: int = 10            # k
    exclude_last: int = 40         # e
    total: int = 100               # M, windows over the whole corpus
    cutoff: int = 2000             # copy local/distant cutoff
    lengths: list = field(default_factory=lambda: [64, 128, 256])
    group_by: list = field(default_factory=list)
    loss_scale: float = 1.0
    batch_size: int = 1
    kinds: list = field(default_factory=lambda: list(KINDS))
    drop_predicates: list = field(default_factory=lambda: [TARGET_OCCURRENCES, RANDOM_CONTROL])
    m_values: list = field(default_factory=lambda: [0, 64, 128])
    runs: int = 5
    offsets: list = field(default_factory=lambda: [0, 32, 64, 128])
    suffix_len: int = 128
    suffix_count: int = 100
    suffix_lengths: list = field(default_factory=list)


@dataclass
class ChapterParams:
    n_chapters: int = 8
    spacing: int = 32
    n_filler: int = 64
    first_number: int = 0
    train_docs: int = 400
    train_steps: int = 600
    train_lr: float = 3e-3
    train_batch_size: int = 16


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str | None = None
    model_path: str | None = None
    corpus: CorpusParams = field(default_factory=CorpusParams)
    tokenizer: TokenizerParams = field(default_factory=TokenizerParams)
    model: ModelParams = field(default_factory=ModelParams)
    train: TrainParams = field(default_factory=TrainParams)
    protocol: ProtocolParams = field(default_factory=ProtocolParams)
    chapter: ChapterParams = field(default_factory=ChapterParams)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "config")

    def validate(self) -> None:
        p = self.protocol
        for name in ("prefix_len", "n_targets", "total", "runs", "suffix_len", "suffix_count", "batch_size"):
            if getattr(p, name) < 1:
                raise ConfigError(f"protocol.{name} must be >= 1")
        if p.exclude_last < 0:
            raise ConfigError("protocol.exclude_last must be >= 0")
        if not p.lengths or list(p.lengths) != sorted(set(p.lengths)) or p.lengths[0] < 1:
            raise ConfigError("protocol.lengths must be strictly ascending positive integers")
        if p.lengths[-1] > p.prefix_len:
            raise ConfigError(f"protocol.lengths exceed protocol.prefix_len {p.prefix_len}")
        if any(m < 0 or m > p.prefix_len for m in p.m_values):
            raise ConfigError("protocol.m_values must lie in 0..prefix_len")
        if any(o < 0 or o + p.n_targets > p.prefix_len for o in p.offsets):
            raise ConfigError("protocol.offsets must satisfy 0 <= d and d + n_targets <= prefix_len")
        for k in p.kinds:
            if k not in KINDS:
                raise ConfigError(f"unknown perturbation kind {k!r}")
        for q in p.drop_predicates:
            if q not in (TARGET_OCCURRENCES, RANDOM_CONTROL):
                raise ConfigError(f"unknown drop predicate {q!r}")
        if p.loss_scale <= 0:
            raise ConfigError("protocol.loss_scale must be positive")
        try:
            self.model.build(vocab_size=2)
            self.train.build(self.seed)
        except (ValueError, TypeError, KeyError) as e:
            raise ConfigError(f"invalid model/train section: {e}") from e


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in d.items():
        sub = _SECTIONS.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from e


_SECTIONS = {
    (ExperimentConfig, "corpus"): CorpusParams,
    (ExperimentConfig, "tokenizer"): TokenizerParams,
    (ExperimentConfig, "model"): ModelParams,
    (ExperimentConfig, "train"): TrainParams,
    (ExperimentConfig, "protocol"): ProtocolParams,
    (ExperimentConfig, "chapter"): ChapterParams,
}


def load_config(path) -> ExperimentConfig:
    """Read a config file; a run manifest is accepted too (its ``config`` echo is used)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if isinstance(d, dict) and "subcommand" in d and "config" in d:
        d = d["config"]
    return ExperimentConfig.from_dict(d)
