"""Context perturbations applied to the first m tokens of a prefix."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .corpus import TargetWindow
from .evaluator import Taxonomy, aggregate, score_inputs, window_input
from .model import TransformerLM
from .seeding import stable_seed

SHUFFLE = "shuffle"
RANDOM_REPLACE = "random_replace"
TOKEN_DROP = "token_drop"
KINDS = (SHUFFLE, RANDOM_REPLACE, TOKEN_DROP)

TARGET_OCCURRENCES = "target_occurrences"
RANDOM_CONTROL = "random_control"


class PerturbationError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    m: int
    seed: int
    run_index: int = 0
    drop_predicate: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PerturbationError(f"unknown perturbation kind {self.kind!r}")
        if self.m < 0:
            raise PerturbationError(f"m must be >= 0, got {self.m}")
        if (self.kind == TOKEN_DROP) != (self.drop_predicate is not None):
            raise PerturbationError("token_drop needs a drop_predicate; other kinds take none")
        if self.drop_predicate not in (None, TARGET_OCCURRENCES, RANDOM_CONTROL):
            raise PerturbationError(f"unknown drop predicate {self.drop_predicate!r}")

    @property
    def label(self) -> str:
        return f"{self.kind}:{self.drop_predicate}" if self.drop_predicate else self.kind


def _check_m(prefix: np.ndarray, m: int) -> None:
    if not 0 <= m <= len(prefix):
        raise PerturbationError(f"m={m} outside 0..{len(prefix)}")


def shuffle_window(prefix, m: int, seed: int) -> np.ndarray:
    """Uniformly permute positions 0..m-1 (sentence boundaries ignored)."""
    out = np.array(prefix, dtype=np.int64, copy=True)
    _check_m(out, m)
    perm = np.random.default_rng(seed).permutation(m)
    out[:m] = out[:m][perm]
    return out


def random_replace(prefix, m: int, donors: Mapping[str, object], exclude_doc: str, seed: int) -> np.ndarray:
    """Overwrite positions 0..m-1 with a contiguous m-token span of another document."""
    out = np.array(prefix, dtype=np.int64, copy=True)
    _check_m(out, m)
    if m == 0:
        return out
    eligible = []
    for doc_id in sorted(donors):
        ids = np.asarray(getattr(donors[doc_id], "ids", donors[doc_id]), dtype=np.int64)
        if doc_id != exclude_doc and len(ids) >= m:
            eligible.append(ids)
    if not eligible:
        raise PerturbationError(f"no donor document other than {exclude_doc!r} has {m} tokens")
    rng = np.random.default_rng(seed)
    donor = eligible[int(rng.integers(len(eligible)))]
    start = int(rng.integers(len(donor) - m + 1))
    out[:m] = donor[start : start + m]
    return out


def drop_tokens(prefix, m: int, targets, predicate: str, pad_id: int, seed: int) -> np.ndarray:
    """Replace tokens in positions 0..m-1 with ``pad_id``.

    ``target_occurrences`` pads every position holding a token that occurs in
    ``targets``; ``random_control`` pads the same number of uniformly chosen
    positions instead.
    """
    out = np.array(prefix, dtype=np.int64, copy=True)
    _check_m(out, m)
    hits = np.flatnonzero(np.isin(out[:m], np.asarray(targets, dtype=np.int64)))
    if predicate == TARGET_OCCURRENCES:
        out[hits] = pad_id
    elif predicate == RANDOM_CONTROL:
        picks = np.random.default_rng(seed).choice(m, size=len(hits), replace=False)
        out[picks] = pad_id
    else:
        raise PerturbationError(f"unknown drop predicate {predicate!r}")
    return out


def perturb_prefix(prefix, spec: PerturbationSpec, *, targets=None, donors=None, doc_id=None, pad_id=None):
    if spec.kind == SHUFFLE:
        return shuffle_window(prefix, spec.m, spec.seed)
    if spec.kind == RANDOM_REPLACE:
        if donors is None:
            raise PerturbationError("random_replace needs a donor corpus")
        return random_replace(prefix, spec.m, donors, doc_id, spec.seed)
    if pad_id is None or targets is None:
        raise PerturbationError("token_drop needs targets and a pad id")
    return drop_tokens(prefix, spec.m, targets, spec.drop_predicate, pad_id, spec.seed)


def run_seed(base_seed: int, window: TargetWindow, run: int) -> int:
    return stable_seed("perturb", base_seed, window.doc_id, window.anchor, run)


@dataclass
class SweepResult:
    curves: list  # pooled over runs
    per_run: list  # additionally keyed by run_index
    records: list


def perturbation_sweep(
    model: TransformerLM,
    windows: Sequence[TargetWindow],
    tokens: Mapping[str, object],
    kind: str,
    m_values: Sequence[int],
    runs: int = 5,
    base_seed: int = 0,
    drop_predicate: str | None = None,
    donors: Mapping[str, object] | None = None,
    pad_id: int | None = None,
    taxonomy: Taxonomy | None = None,
    group_by: Sequence[str] = (),
    loss_scale: float = 1.0,
    batch_size: int = 1,
) -> SweepResult:
    """Perturb every window's full prefix for each m and run, then score its targets."""
    records = []
    for m in m_values:
        for run in range(runs):
            inputs, specs = [], []
            for w in windows:
                x = window_input(tokens[w.doc_id], w, w.prefix_len)
                prefix, targets = x[: w.prefix_len], x[w.prefix_len :]
                spec = PerturbationSpec(kind, m, run_seed(base_seed, w, run), run, drop_predicate)
                new = perturb_prefix(
                    prefix, spec, targets=targets, donors=donors, doc_id=w.doc_id, pad_id=pad_id
                )
                inputs.append(np.concatenate([new, targets]))
                specs.append(spec)
            for w, x, spec in zip(windows, inputs, specs):
                records.extend(
                    score_inputs(
                        model, [w], [x], w.prefix_len, tokens, taxonomy, batch_size,
                        perturbation=spec, run_index=run, seed=spec.seed,
                    )
                )
    curves = aggregate(records, group_by, "perturb_m", loss_scale)
    per_run = aggregate(records, tuple(group_by) + ("run_index",), "perturb_m", loss_scale)
    return SweepResult(curves, per_run, records)
