from __future__ import annotations

from collections.abc import Callable
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from sam_peft.config import get_settings
from sam_peft.samlite import SamLite, build_custom
from sam_peft.synth import GenSpec, generate

# Smallest geometry the instance head accepts: a 4x4 token grid upsampled 16x.
TINY_VIT: dict[str, Any] = {
    "image_size": 64,
    "patch_size": 16,
    "embed_dim": 16,
    "depth": 4,
    "heads": 2,
    "neck_dim": 8,
    "in_channels": 1,
}
TINY_DECODER: dict[str, Any] = {
    "token_dim": 8,
    "heads": 2,
    "mlp_dim": 16,
    "cross_attention_layers": 1,
    "instance_channels": (4, 4, 4, 4),
}

TinyFactory = Callable[..., SamLite]


@pytest.fixture(autouse=True)
def _quiet_settings(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    """Keep progress bars off and run artefacts inside the test's tmp dir."""
    monkeypatch.setenv("SAM_PEFT_PROGRESS", "0")
    monkeypatch.setenv("SAM_PEFT_RUNS_DIR", str(tmp_path / "runs"))
    get_settings.cache_clear()


@pytest.fixture
def tiny_model() -> TinyFactory:
    """Factory for a small SamLite; pass seed / dtype / depth overrides."""

    def make(*, seed: int = 0, dtype: Any = np.float32, **vit: Any) -> SamLite:
        return build_custom({**TINY_VIT, **vit}, TINY_DECODER, seed=seed, dtype=dtype)

    return make


@pytest.fixture
def tiny_image() -> Callable[[int], np.ndarray[Any, Any]]:
    def make(seed: int = 0) -> np.ndarray[Any, Any]:
        return np.random.default_rng(seed).random((64, 64, 1))

    return make


@pytest.fixture
def instance_data(tmp_path: Path) -> Path:
    """A small synthetic instance dataset on disk (128 px, matching the toy preset)."""
    spec = GenSpec(image_size=128, n_train=2, n_val=1, n_test=2, min_instances=2, max_instances=3, seed=7)
    out = tmp_path / "data"
    generate(spec, out)
    return out
