import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ssnt.model import SSNT  # noqa: E402
from ssnt.seqnn import NetConfig  # noqa: E402


def make_model(seed=0, src_vocab=9, tgt_vocab=9, hidden=4, neural=True, bidirectional=False,
               scale=None, **kw):
    cfg = NetConfig(src_vocab=src_vocab, tgt_vocab=tgt_vocab, hidden=hidden,
                    bidirectional=bidirectional, neural_transition=neural, **kw)
    model = SSNT(cfg, rng=np.random.default_rng(seed), emit_e=None if neural else 0.4)
    if scale is not None:
        # larger weights so outputs depend visibly on inputs
        rng = np.random.default_rng(seed + 1000)
        for p in model.params.values():
            p.value[...] = rng.uniform(-scale, scale, size=p.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> None:
    """Record (and print) one acceptance verdict line."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion:>2}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
