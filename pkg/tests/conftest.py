import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from cognigraph.search_space import NetConfig, assemble_network  # noqa: E402


def tiny_net(n_nodes=1, n_reg=1, widths=(4, 4, 4), dtype=torch.float64, seed=0, randomize_alphas=True, **kw):
    net = assemble_network(NetConfig(widths=widths, n_nodes=n_nodes, n_reg=n_reg, seed=seed, **kw)).to(dtype)
    if randomize_alphas:
        g = torch.Generator().manual_seed(seed + 100)
        with torch.no_grad():
            for p in net.alpha_parameters():
                p.copy_(torch.randn(p.shape, generator=g, dtype=dtype))
    return net


def rand_inputs(batch=2, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    audio = torch.randn(batch, 80, 64, generator=g, dtype=dtype)
    lm = 0.5 + 0.05 * torch.randn(batch, 80, 68, 2, generator=g, dtype=dtype)
    return audio, lm


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def _verdict(criterion: int, ok: bool, detail: str):
        line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[_ACCEPTANCE].append(line)
        print(line)
        assert ok, line

    return _verdict


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
