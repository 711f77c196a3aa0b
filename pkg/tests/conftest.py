import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hit import tensor as T
from hit.model import HiT, HiTConfig

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def float64():
    prev = T.get_default_dtype()
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(prev)


@pytest.fixture
def tiny_cfg():
    return HiTConfig(depth=2, d_model=8, heads=2, image_size=16, patch_size=4, pool_layers=(1,),
                     num_classes=3, attn_dropout=0.0)


def perturbed_model(cfg, seed=0, scale=0.3, dtype=np.float64):
    """Model with non-trivial weights (the real init is nearly linear at std 0.02)."""
    model = HiT(cfg, seed=seed).astype(dtype)
    rng = np.random.default_rng(seed + 100)
    for name, p in model.params.items():
        p.data[...] += rng.normal(0.0, scale, size=p.shape).astype(dtype)
    return model


def random_images(cfg, n, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return rng.random((n, cfg.image_size, cfg.image_size, 3)).astype(dtype)


# acceptance criteria record their verdicts here; printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
