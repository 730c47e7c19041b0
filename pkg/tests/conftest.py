import pytest

from din.model import ModelShapeSpec, init_model
from din.numerics import make_rng

TINY_SHAPE = ModelShapeSpec(
    raw_dim=4, feat_dim=3, num_frames=5, widths=(2, 3), num_filters=4, num_classes=3
)


@pytest.fixture
def tiny_params():
    return init_model(TINY_SHAPE, make_rng(123))


def rel_err(a, b):
    return abs(a - b) / max(1.0, abs(a), abs(b))


def central_diff(fn, arr, idx, eps):
    orig = arr[idx]
    arr[idx] = orig + eps
    up = fn()
    arr[idx] = orig - eps
    down = fn()
    arr[idx] = orig
    return (up - down) / (2.0 * eps)
