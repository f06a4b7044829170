from __future__ import annotations

import numpy as np
import pytest

from longmalconv.models import Model, ModelConfig

_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance_line():
    """Record one PASS/FAIL line; all lines are echoed in the terminal summary."""
    def record(n: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        print(_ACCEPTANCE[-1])
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def numeric_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar f with respect to every entry of x (in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), 1e-12)
    return float(np.abs(a - b).max(initial=0) / scale)


def small_model(arch: str, seed: int = 0, channels: int = 6, kernel: int = 16, stride: int = 4,
                embed_dim: int = 4) -> Model:
    return Model.create(ModelConfig(arch, channels=channels, kernel=kernel, stride=stride,
                                    embed_dim=embed_dim), seed)


def as64(model: Model) -> Model:
    """Same model with float64 parameters, for finite-difference checks."""
    for k in model.params:
        model.params[k] = model.params[k].astype(np.float64)
    return model
