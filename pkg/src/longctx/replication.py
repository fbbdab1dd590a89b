"""Directional copy experiment on the synthetic marker corpus.

A routing model (three Local{64} layers under one routing layer) and an
all-Local{64} twin of the same size are trained with a two-phase schedule:
short crops first so the copy behaviour is learned quickly, then long crops
so it reaches distances beyond the local receptive field.  Both models
index positions from the end of the input, so truncating context never
moves the target's position embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .evaluator import EvalRecord, prefix_sweep
from .model import Local, ModelConfig, Routing, TransformerLM
from .perturbations import RANDOM_CONTROL, TARGET_OCCURRENCES, TOKEN_DROP, perturbation_sweep
from .synthetic import CopyLayout, make_copy_corpus, plant_windows
from .train import TrainConfig, train


@dataclass(frozen=True)
class Phase:
    seq_len: int
    min_distance: int
    max_distance: int
    n_docs: int
    steps: int
    batch_size: int
    lr: float


@dataclass(frozen=True)
class CopyRecipe:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_layers: int = 4
    window: int = 64
    n_clusters: int = 2
    centroid_decay: float = 0.99
    max_seq_len: int = 2048
    phases: tuple = (
        Phase(seq_len=128, min_distance=4, max_distance=120, n_docs=3000, steps=1500, batch_size=32, lr=3e-3),
        Phase(seq_len=1152, min_distance=8, max_distance=1144, n_docs=2000, steps=300, batch_size=4, lr=1e-3),
    )

    def model_config(self, layout: CopyLayout, routing: bool) -> ModelConfig:
        stack = [Local(self.window)] * (self.n_layers - 1)
        top = Routing(self.n_clusters, self.centroid_decay) if routing else Local(self.window)
        return ModelConfig(
            vocab_size=layout.vocab.vocab_size,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_model=self.d_model,
            d_ff=self.d_ff,
            max_seq_len=self.max_seq_len,
            attention=tuple(stack + [top]),
            positions="end",
        )


def phase_corpus(phase: Phase, layout: CopyLayout, seed: int) -> list[np.ndarray]:
    """One plant per crop-sized document, distance uniform in the phase's range."""
    rng = np.random.default_rng(seed)
    docs = []
    for i in range(phase.n_docs):
        d = int(rng.integers(phase.min_distance, phase.max_distance))
        out, _ = make_copy_corpus(1, phase.seq_len + 1, (d,), seed=seed * 1_000_003 + i, layout=layout, tail=2)
        docs.extend(out.values())
    return docs


def train_copy_model(recipe: CopyRecipe, routing: bool, seed: int = 0, layout: CopyLayout = CopyLayout()) -> TransformerLM:
    config = recipe.model_config(layout, routing)
    model = None
    for i, phase in enumerate(recipe.phases):
        docs = phase_corpus(phase, layout, seed=seed * 10 + i)
        hp = TrainConfig(
            lr=phase.lr, steps=phase.steps, batch_size=phase.batch_size,
            seq_len=phase.seq_len, seed=seed * 10 + i, optimizer="adam",
        )
        model = train(config, docs, hp, init_model=model).model
    return model


def one_sided_lower(deltas) -> tuple[float, float]:
    """Mean and its one-sided 95% lower confidence bound (normal approximation)."""
    d = np.asarray(deltas, dtype=np.float64)
    if len(d) < 2:
        raise ValueError("need at least two paired differences")
    mean = float(d.mean())
    se = float(d.std(ddof=1)) / math.sqrt(len(d))
    return mean, mean - 1.6448536269514722 * se


@dataclass
class EvalSet:
    docs: dict
    plants: list
    windows: list
    short_len: int
    long_len: int


def eval_sets(distances=(256, 1024), per_distance: int = 250, margin: int = 32, seed: int = 12345,
              layout: CopyLayout = CopyLayout()) -> list[EvalSet]:
    """Per distance D: windows whose short prefix (D - margin) misses the first marker
    and whose long prefix (D + margin) contains it."""
    out = []
    for j, d in enumerate(distances):
        docs, plants = make_copy_corpus(
            per_distance, d + 3 * margin, (d,), seed=seed + j, layout=layout, tail=2, min_first=margin,
        )
        docs = {f"d{d}-{k}": v for k, v in docs.items()}
        plants = [type(p)(f"d{d}-{p.doc_id}", p.first_pos, p.recall_pos, p.marker) for p in plants]
        out.append(EvalSet(docs, plants, plant_windows(plants, d + margin), d - margin, d + margin))
    return out


def _nll_by_doc(records: list[EvalRecord], length: int) -> dict[str, float]:
    return {r.doc_id: r.nll for r in records if r.prefix_len == length}


@dataclass
class ReplicationReport:
    long_gain: list = field(default_factory=list)       # short-prefix NLL minus long-prefix NLL
    drop_delta: list = field(default_factory=list)      # target-drop NLL minus control-drop NLL
    local_flat: bool = True
    local_lengths: tuple = ()

    def gain_test(self):
        return one_sided_lower(self.long_gain)

    def drop_test(self):
        return one_sided_lower(self.drop_delta)


def evaluate_replication(routing_model: TransformerLM, local_model: TransformerLM, sets: list[EvalSet],
                         layout: CopyLayout = CopyLayout(), control_runs: int = 5) -> ReplicationReport:
    report = ReplicationReport()
    rf = local_model.config.receptive_field()
    for s in sets:
        _, recs = prefix_sweep(routing_model, s.windows, s.docs, [s.short_len, s.long_len])
        short, long_ = _nll_by_doc(recs, s.short_len), _nll_by_doc(recs, s.long_len)
        report.long_gain.extend(short[p.doc_id] - long_[p.doc_id] for p in s.plants)

        target = perturbation_sweep(
            routing_model, s.windows, s.docs, TOKEN_DROP, [s.long_len], runs=1,
            drop_predicate=TARGET_OCCURRENCES, pad_id=layout.vocab.pad_id,
        ).records
        control = perturbation_sweep(
            routing_model, s.windows, s.docs, TOKEN_DROP, [s.long_len], runs=control_runs,
            drop_predicate=RANDOM_CONTROL, pad_id=layout.vocab.pad_id,
        ).records
        ctl: dict[str, list[float]] = {}
        for r in control:
            ctl.setdefault(r.doc_id, []).append(r.nll)
        report.drop_delta.extend(r.nll - float(np.mean(ctl[r.doc_id])) for r in target)

        lengths = sorted({rf + 1, (rf + 1 + s.long_len) // 2, s.long_len})
        lengths = [n for n in lengths if rf < n <= s.long_len]
        if len(lengths) >= 2:
            _, lrecs = prefix_sweep(local_model, s.windows, s.docs, lengths)
            per = [_nll_by_doc(lrecs, n) for n in lengths]
            report.local_flat &= all(p[k] == per[0][k] for p in per[1:] for k in per[0])
            report.local_lengths += tuple(lengths)
    return report
