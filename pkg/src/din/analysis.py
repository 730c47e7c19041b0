"""Model accounting and introspection exports.

Parameter counts come straight from the shape constants, and a test
elsewhere pins them to the scalar count of a real serialized checkpoint
so the accounting can never drift from the live model. FLOP totals use a
fixed convention: one multiply-add counts as 2 operations, elementwise
operations (pooling comparisons, softmax terms) as 1 per element, and
bias additions are not counted.

Exports are delimited text with a header row, one row per sample, rows
ordered by sample id; floats are written with repr so files are
byte-stable across runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_io import Sample, atomic_write_bytes
from .denseimage import FrameFeatureSequence, SamplingMode, encode
from .model import ModelParams, ModelShapeSpec
from .temporal_conv import multiscale_forward, response_profile


@dataclass(frozen=True)
class CostBreakdown:
    """Total plus per-layer lines; the lines always sum to the total."""

    total: int
    lines: dict[str, int]


@dataclass(frozen=True)
class CostReport:
    parameters: CostBreakdown
    flops: CostBreakdown
    # Optional externally supplied (name -> {"parameters":…, "flops":…})
    # reference costs, echoed for side-by-side display only.
    reference: dict[str, dict] = field(default_factory=dict)


def count_parameters(shape: ModelShapeSpec) -> CostBreakdown:
    """Exact trainable-scalar count with a per-layer breakdown."""
    lines: dict[str, int] = {
        "reduction": shape.raw_dim * shape.feat_dim + shape.feat_dim
    }
    for h in shape.widths:
        lines[f"conv/h{h}"] = shape.num_filters * h * shape.feat_dim + shape.num_filters
    for h in shape.widths:
        lines[f"head/h{h}"] = shape.num_classes * shape.num_filters + shape.num_classes
    return CostBreakdown(sum(lines.values()), lines)


def estimate_flops(shape: ModelShapeSpec) -> CostBreakdown:
    """Per-video operation count for one evaluation-mode forward pass."""
    n, k = shape.num_frames, shape.feat_dim
    lines: dict[str, int] = {"reduction": n * 2 * shape.raw_dim * k}
    for h in shape.widths:
        windows = n - h + 1
        lines[f"conv/h{h}"] = shape.num_filters * windows * 2 * h * k
    for h in shape.widths:
        lines[f"pool/h{h}"] = shape.num_filters * (n - h + 1)
    for h in shape.widths:
        lines[f"head/h{h}"] = 2 * shape.num_classes * shape.num_filters
    lines["softmax"] = shape.num_classes
    return CostBreakdown(sum(lines.values()), lines)


def cost_report(shape: ModelShapeSpec, reference: dict[str, dict] | None = None) -> CostReport:
    return CostReport(count_parameters(shape), estimate_flops(shape), dict(reference or {}))


def _encode_eval(params: ModelParams, sample: Sample):
    seq = FrameFeatureSequence(sample.features)
    return encode(seq, params.reduction, params.shape.num_frames, SamplingMode.EVAL_CENTER)


def export_responses(
    params: ModelParams, samples: Sequence[Sample], h: int, out_path: str | Path
) -> Path:
    """Per-sample channel-mean response profile for one filter width.

    Columns: sample id, the n-h+1 window intensities, the argmax window,
    and the sampled-frame range that window covers.
    """
    if h not in params.shape.widths:
        raise ValueError(f"width {h} not in the model (widths {params.shape.widths})")
    num_windows = params.shape.num_frames - h + 1
    header = (
        ["id"]
        + [f"win_{i}" for i in range(num_windows)]
        + ["argmax_window", "frame_start", "frame_end"]
    )
    rows = [",".join(header)]
    for sample in sorted(samples, key=lambda s: s.id):
        profile = response_profile(_encode_eval(params, sample), params.bank, h)
        first, last = profile.frame_range
        cells = [sample.id]
        cells += [repr(float(v)) for v in profile.intensities]
        cells += [str(profile.argmax_window), str(first), str(last)]
        rows.append(",".join(cells))
    out_path = Path(out_path)
    atomic_write_bytes(out_path, ("\n".join(rows) + "\n").encode())
    return out_path


def export_pooled_features(
    params: ModelParams, samples: Sequence[Sample], out_path: str | Path
) -> Path:
    """Per-sample pooled features (all widths concatenated) with labels.

    Also writes the order-invariant control vector per sample: the column
    mean of the DenseImage, i.e. what the sample looks like to a model
    blind to frame order. Intended for external embedding tools.
    """
    shape = params.shape
    header = ["id", "label"]
    for h in shape.widths:
        header += [f"c{h}_{m}" for m in range(shape.num_filters)]
    header += [f"mean_{j}" for j in range(shape.feat_dim)]
    rows = [",".join(header)]
    for sample in sorted(samples, key=lambda s: s.id):
        dense = _encode_eval(params, sample)
        pooled, _ = multiscale_forward(dense, params.bank)
        vector = np.concatenate([pooled[h].values for h in shape.widths])
        baseline = dense.values.mean(axis=0)
        cells = [sample.id, str(sample.label)]
        cells += [repr(float(v)) for v in vector]
        cells += [repr(float(v)) for v in baseline]
        rows.append(",".join(cells))
    out_path = Path(out_path)
    atomic_write_bytes(out_path, ("\n".join(rows) + "\n").encode())
    return out_path
