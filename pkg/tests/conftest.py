import numpy as np
import pytest

from hst.config import (
    BackboneSection,
    DataSection,
    HsnSection,
    RunConfig,
    TogglesSection,
    TrainSection,
)


def make_config(
    image_size=32,
    patch_size=4,
    embed_dim=32,
    depth=4,
    num_heads=2,
    num_meta_tokens=1,
    use_cls_token=False,
    stage_dims=(8, 12, 16, 24),
    attn_heads=1,
    attn_softmax=True,
    num_classes=10,
    **toggles,
) -> RunConfig:
    """Small, fast configuration for unit tests."""
    config = RunConfig(
        backbone=BackboneSection(
            image_size=image_size,
            patch_size=patch_size,
            embed_dim=embed_dim,
            depth=depth,
            num_heads=num_heads,
            num_meta_tokens=num_meta_tokens,
            use_cls_token=use_cls_token,
        ),
        hsn=HsnSection(stage_dims=list(stage_dims), attn_heads=attn_heads, attn_softmax=attn_softmax),
        train=TrainSection(learning_rate=1e-3, batch_size=8, epochs=2),
        data=DataSection(image_size=image_size, num_classes=num_classes),
        toggles=TogglesSection(**toggles),
    )
    config.validate()
    return config


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Finite-difference gradient of a scalar function, element by element."""
    x = x.astype(np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = f(x)
        flat[i] = keep - h
        lo = f(x)
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(b), floor)
    return float(np.max(np.abs(a - b) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
