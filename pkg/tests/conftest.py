import numpy as np
import pytest

from lstmp.model import ModelConfig, init_params


def randomize(params, rng, scale=0.5):
    for _, t in params.named():
        t.values[...] = rng.uniform(-scale, scale, t.shape)
    return params


@pytest.fixture
def tiny():
    """|W| = 7 (end, start, two plain words, three objects), every dimension small."""
    cfg = ModelConfig(D_v=3, D_w=4, D_h=5, vocab_size=7, object_words=(4, 5, 6), max_len=6)
    rng = np.random.default_rng(11)
    params = randomize(init_params(cfg, 0), rng)
    return cfg, params, rng


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per criterion; the lines are echoed in the terminal summary."""
    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
