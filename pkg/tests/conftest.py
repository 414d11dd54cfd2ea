import numpy as np
import pytest
import torch

from salseg.core import PipelineConfig


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def tiny_cfg():
    return PipelineConfig(grid_h=4, grid_w=4, n_classes=2, d_corr=8, d_enc=6, d_attn=16,
                          n_attn_heads=4, n_attn_layers=3, k_fg=5, window_size=2)


def state_numpy(module):
    return {k: v.detach().double().numpy() for k, v in module.state_dict().items()}


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def randomize_(module, scale=0.5, generator=None):
    """Overwrite every parameter with Gaussian noise (undoes identity/zero inits)."""
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * scale)
    return module


# acceptance criteria report: one line per criterion, shown in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, name: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {name}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
