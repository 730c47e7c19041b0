"""Frame sequences into fixed-size DenseImage matrices.

A video arrives as one feature vector per frame. Encoding picks n frames
by segment sampling, pushes each through a trainable linear reduction,
and stacks the results row by row. Row order always equals temporal
order; nothing here may permute or mix rows.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .numerics import Array, glorot_uniform


class SamplingMode(enum.Enum):
    TRAIN_RANDOM = "train_random"
    EVAL_CENTER = "eval_center"


@dataclass(frozen=True)
class FrameFeatureSequence:
    """Per-frame feature vectors, one row per frame in temporal order."""

    features: Array  # T x D

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a T x D matrix with T >= 1")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class ReductionLayer:
    """Trainable linear map from raw frame features (D) down to k dims."""

    weights: Array  # D x k
    bias: Array  # k

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ValueError("reduction weights must be 2-D")
        if self.bias.shape != (self.weights.shape[1],):
            raise ValueError("reduction bias length must equal output dim")
        if self.weights.shape[1] > self.weights.shape[0]:
            raise ValueError("reduction must not widen: k <= D")

    @property
    def raw_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.weights.shape[1]


def init_reduction_layer(
    rng: np.random.Generator, raw_dim: int, feat_dim: int
) -> ReductionLayer:
    weights = glorot_uniform(rng, raw_dim, feat_dim, raw_dim, feat_dim)
    return ReductionLayer(weights, np.zeros(feat_dim))


@dataclass(frozen=True)
class DenseImage:
    """n x k matrix of reduced frame features; row i is sampled frame i."""

    values: Array

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("DenseImage must be 2-D")

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.values.shape[1]


def sample_segments(
    T: int, n: int, mode: SamplingMode, rng: np.random.Generator | None = None
) -> Array:
    """Pick n frame indices from a T-frame video, one per temporal segment.

    Segment s covers [ceil(s*T/n), ceil((s+1)*T/n)). Center mode takes
    start + (len-1)//2; random mode draws uniformly inside the segment.
    Segments that are empty (T < n) repeat the previous segment's index,
    so the result is always non-decreasing. Segment 0 is never empty.
    """
    if T < 1 or n < 1:
        raise ValueError("T and n must be >= 1")
    if mode is SamplingMode.TRAIN_RANDOM and rng is None:
        raise ValueError("train_random sampling needs an rng")
    indices = np.empty(n, dtype=np.int64)
    prev = 0
    for s in range(n):
        lo = -((-s * T) // n)  # ceil(s*T/n)
        hi = -((-(s + 1) * T) // n)
        if hi > lo:
            if mode is SamplingMode.EVAL_CENTER:
                prev = lo + (hi - lo - 1) // 2
            else:
                prev = int(rng.integers(lo, hi))
        indices[s] = prev
    return indices


def reduce_frame(raw: Array, layer: ReductionLayer) -> Array:
    """Linear reduction of one raw frame vector: raw @ W + b."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (layer.raw_dim,):
        raise ValueError(f"expected raw vector of length {layer.raw_dim}")
    return raw @ layer.weights + layer.bias


def reduce_backward(
    raw: Array, layer: ReductionLayer, grad_out: Array
) -> tuple[Array, Array, Array]:
    """Gradients of the linear reduction for one frame.

    Returns (grad_weights, grad_bias, grad_raw) for upstream gradient
    grad_out on the reduced vector.
    """
    raw = np.asarray(raw, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if raw.shape != (layer.raw_dim,) or grad_out.shape != (layer.feat_dim,):
        raise ValueError("reduce_backward shape mismatch")
    grad_weights = np.outer(raw, grad_out)
    grad_bias = grad_out.copy()
    grad_raw = layer.weights @ grad_out
    return grad_weights, grad_bias, grad_raw


def encode(
    seq: FrameFeatureSequence,
    layer: ReductionLayer,
    n: int,
    mode: SamplingMode,
    rng: np.random.Generator | None = None,
) -> DenseImage:
    """Sample n frames, reduce each one, stack rows in temporal order."""
    if seq.dim != layer.raw_dim:
        raise ValueError(
            f"sequence dim {seq.dim} does not match reduction input {layer.raw_dim}"
        )
    indices = sample_segments(seq.num_frames, n, mode, rng)
    rows = seq.features[indices]
    return DenseImage(rows @ layer.weights + layer.bias)
