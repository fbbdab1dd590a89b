import json
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

WORDS = (
    "the a doctor said river stone walked quietly house garden letter morning "
    "over under found kept Trocadero lantern"
).split()


def make_text(seed: int, n_sentences: int) -> str:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_sentences):
        words = rng.choice(WORDS, int(rng.integers(4, 12)))
        out.append(" ".join(words).capitalize() + str(rng.choice([".", ".", "?", "!"])))
    return " ".join(out)


def write_corpus(root: Path, n_docs: int = 4, n_sentences: int = 200, labels: bool = True) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_docs):
        (root / f"book{i}.txt").write_text(make_text(i, n_sentences), encoding="utf-8")
        rows.append({
            "doc_id": f"book{i}",
            "genre": ("fiction", "nonfiction")[i % 2],
            "continuity": "continuous",
            "authorship": "single",
        })
    if labels:
        (root / "metadata.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return root


@pytest.fixture
def corpus_dir(tmp_path):
    return write_corpus(tmp_path / "corpus")


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def uniform_model(vocab_size: int, n_layers: int = 1, max_seq_len: int = 256, attention=None):
    """A model whose output layer is zeroed, so every next-token distribution is uniform."""
    from longctx.model import ModelConfig, TransformerLM

    cfg = ModelConfig(vocab_size=vocab_size, n_layers=n_layers, n_heads=1, d_model=8, d_ff=8,
                      max_seq_len=max_seq_len, attention=attention or ())
    m = TransformerLM(cfg)
    with torch.no_grad():
        m.head.weight.zero_()
        m.head.bias.zero_()
    return m


def tiny_lm(vocab_size: int = 30, attention=None, max_seq_len: int = 128, seed: int = 0, **kw):
    from longctx.model import Full, ModelConfig, TransformerLM

    attention = attention or (Full(), Full())
    cfg = ModelConfig(vocab_size=vocab_size, n_layers=len(attention), n_heads=2, d_model=16, d_ff=32,
                      max_seq_len=max_seq_len, attention=attention, **kw)
    return TransformerLM(cfg, seed=seed)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion, printed in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        print(ACCEPTANCE_LINES[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
