from __future__ import annotations

import numpy as np
import pytest

from smmix.vit import ModelConfig, VisionTransformer

TINY = ModelConfig(image_size=8, patch_size=4, channels=1, embed_dim=8, num_heads=2, depth=1, num_classes=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(seed: int = 0, dtype=np.float64, cfg: ModelConfig = TINY, **kw) -> VisionTransformer:
    return VisionTransformer.create(cfg, seed=seed, dtype=dtype, **kw)


def randomize_head(model: VisionTransformer, rng: np.random.Generator, scale: float = 0.5) -> None:
    for k in ("head.weight", "head.bias"):
        p = model.params[k]
        p.data = (rng.normal(size=p.shape) * scale).astype(p.dtype)


def random_distribution(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    x = rng.random((rows, cols)) + 1e-3
    return x / x.sum(axis=1, keepdims=True)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        name, ok, detail = results[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {name} -- {detail}")
