"""Bit-exact persistence: feature files, manifests, checkpoints, synth data.

Feature file ("DIFX", little-endian):
    magic      4 bytes  b"DIFX"
    version    u16      1
    frames T   u32
    dim D      u16
    payload    T*D float32, frame-major
    total size 12 + 4*T*D bytes, nothing after the payload

Checkpoint ("DICK", little-endian):
    magic      4 bytes  b"DICK"
    version    u16      1
    meta_len   u32      length of the UTF-8 JSON meta block
    meta       JSON: config echo, model shape, optimizer scalars,
               epoch history, best-epoch bookkeeping (sorted keys,
               so identical state -> identical bytes)
    count      u32      number of named tensors
    per tensor: name_len u16, name UTF-8, ndim u8, ndim * u32 dims,
               float64 payload
    tensor namespaces: "param/" current model, "velocity/" optimizer
    buffers, "best/" best-validation snapshot (optional)

Writers go through a temporary file plus atomic rename, so readers never
observe a partial file. Features are quantized to float32 on disk and
widened back to float64 in memory; checkpoints round-trip float64 exactly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .denseimage import FrameFeatureSequence
from .model import ModelParams, ModelShapeSpec, named_parameters, parameter_shapes, params_from_tensors
from .numerics import Array, make_rng
from .trainer import EpochReport, OptimizerState, TrainConfig, TrainState

FEATURE_MAGIC = b"DIFX"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sHIH")  # magic, version, frames, dim

CHECKPOINT_MAGIC = b"DICK"
CHECKPOINT_VERSION = 1

SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    """A binary file does not match its declared format."""


class ManifestError(ValueError):
    """A dataset manifest fails validation."""


@dataclass(frozen=True)
class Sample:
    """One loaded sample: raw frame features (T x D, float64) plus label."""

    id: str
    features: Array
    label: int


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def write_feature_file(
    path: str | Path, features: FrameFeatureSequence | Array
) -> None:
    """Store one frame-feature sequence, quantized to float32."""
    if isinstance(features, FrameFeatureSequence):
        features = features.features
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
        raise FormatError("features must be a non-empty T x D matrix")
    if not np.all(np.isfinite(features)):
        raise FormatError("features must be finite")
    T, D = features.shape
    if D > 0xFFFF:
        raise FormatError("feature dim exceeds the u16 header field")
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, T, D)
    payload = features.astype("<f4").tobytes()
    atomic_write_bytes(Path(path), header + payload)


def read_feature_file(path: str | Path) -> FrameFeatureSequence:
    """Load a feature file back as a float64 frame sequence."""
    blob = Path(path).read_bytes()
    if len(blob) < _FEATURE_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, T, D = _FEATURE_HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if T == 0 or D == 0:
        raise FormatError(f"{path}: empty shape {T}x{D}")
    expected = _FEATURE_HEADER.size + 4 * T * D
    if len(blob) != expected:
        raise FormatError(f"{path}: size {len(blob)} != expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=_FEATURE_HEADER.size)
    return FrameFeatureSequence(data.astype(np.float64).reshape(T, D))


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    feature_path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    """Class names plus sample records; order follows the document."""

    classes: list[str]
    entries: list[ManifestEntry]
    root: Path

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]


def save_manifest(path: str | Path, classes: list[str], entries: list[ManifestEntry]) -> None:
    doc = {
        "classes": list(classes),
        "samples": [
            {"id": e.id, "feature_path": e.feature_path, "label": e.label, "split": e.split}
            for e in entries
        ],
    }
    atomic_write_bytes(Path(path), json.dumps(doc, indent=2, sort_keys=True).encode())


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a manifest; every feature path must resolve."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: cannot parse manifest: {exc}") from exc
    classes = doc.get("classes")
    samples = doc.get("samples")
    if not isinstance(classes, list) or not classes:
        raise ManifestError(f"{path}: 'classes' must be a non-empty list")
    if not isinstance(samples, list):
        raise ManifestError(f"{path}: 'samples' must be a list")
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for record in samples:
        if not isinstance(record, dict):
            raise ManifestError(f"{path}: sample records must be objects: {record!r}")
        sid = record.get("id")
        if not isinstance(sid, str) or not sid:
            raise ManifestError(f"{path}: sample without a valid id: {record!r}")
        if sid in seen:
            raise ManifestError(f"{path}: duplicate sample id {sid!r}")
        seen.add(sid)
        label = record.get("label")
        if not isinstance(label, int) or not 0 <= label < len(classes):
            raise ManifestError(f"{path}: sample {sid!r} label {label!r} outside [0, {len(classes)})")
        split = record.get("split")
        if split not in SPLITS:
            raise ManifestError(f"{path}: sample {sid!r} has unknown split {split!r}")
        feature_path = record.get("feature_path")
        if not isinstance(feature_path, str) or not (root / feature_path).is_file():
            raise ManifestError(f"{path}: sample {sid!r} feature file not found: {feature_path!r}")
        entries.append(ManifestEntry(sid, feature_path, label, split))
    return DatasetManifest(list(classes), entries, root)


def load_split(manifest: DatasetManifest, split: str) -> list[Sample]:
    """Read every feature file of one split, in manifest order."""
    if split not in SPLITS:
        raise ManifestError(f"unknown split {split!r}")
    return [
        Sample(e.id, read_feature_file(manifest.root / e.feature_path).features, e.label)
        for e in manifest.split(split)
    ]


@dataclass(frozen=True)
class SyntheticTaskConfig:
    """Cyclic-order task: identical frame multisets, opposite traversal order.

    Class 0 walks the prototype ring forward from a random offset, class 1
    walks it backward, so per offset both classes contain exactly the same
    frames and only their order carries the label.
    """

    num_prototypes: int = 4
    feature_dim: int = 16
    noise_sigma: float = 0.1
    sequence_length: int = 8
    samples_per_class: int = 256
    val_samples_per_class: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_prototypes < 2:
            raise ValueError("need at least 2 prototypes")
        if self.sequence_length < 2:
            raise ValueError("sequence_length must be >= 2")
        if self.feature_dim < 1 or self.samples_per_class < 1:
            raise ValueError("feature_dim and samples_per_class must be >= 1")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")
        if self.val_samples_per_class is not None and self.val_samples_per_class < 1:
            raise ValueError("val_samples_per_class must be >= 1")

    @property
    def val_count(self) -> int:
        if self.val_samples_per_class is not None:
            return self.val_samples_per_class
        return max(1, self.samples_per_class // 2)

    def to_dict(self) -> dict:
        return {
            "num_prototypes": self.num_prototypes,
            "feature_dim": self.feature_dim,
            "noise_sigma": self.noise_sigma,
            "sequence_length": self.sequence_length,
            "samples_per_class": self.samples_per_class,
            "val_samples_per_class": self.val_samples_per_class,
            "seed": self.seed,
        }


SYNTH_CLASSES = ["ascending", "descending"]


def synth_order_task(config: SyntheticTaskConfig) -> dict[str, list[Sample]]:
    """Generate the order-sensitivity dataset in memory.

    Prototypes are unit-norm Gaussian directions. Each sample walks the
    prototype ring from a random offset (forward for class 0, backward for
    class 1) and adds i.i.d. Gaussian noise per frame element.
    """
    rng = make_rng(config.seed, 2)
    protos = rng.normal(size=(config.num_prototypes, config.feature_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    n = config.sequence_length
    splits: dict[str, list[Sample]] = {"train": [], "val": []}
    for split, count in (("train", config.samples_per_class), ("val", config.val_count)):
        for label in (0, 1):
            step = 1 if label == 0 else -1
            tag = ("asc", "desc")[label]
            for i in range(count):
                offset = int(rng.integers(config.num_prototypes))
                ring = [(offset + step * t) % config.num_prototypes for t in range(n)]
                frames = protos[ring].copy()
                if config.noise_sigma > 0.0:
                    frames += rng.normal(0.0, config.noise_sigma, size=frames.shape)
                splits[split].append(Sample(f"{split}-{tag}-{i:04d}", frames, label))
    return splits


def write_synth_dataset(config: SyntheticTaskConfig, out_dir: str | Path) -> Path:
    """Materialize the synthetic task as feature files plus a manifest."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    entries: list[ManifestEntry] = []
    for split, samples in synth_order_task(config).items():
        for sample in samples:
            rel = f"features/{sample.id}.difx"
            write_feature_file(out_dir / rel, sample.features)
            entries.append(ManifestEntry(sample.id, rel, sample.label, split))
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest_path, SYNTH_CLASSES, entries)
    return manifest_path


@dataclass
class CheckpointData:
    model: ModelParams
    state: TrainState
    config: TrainConfig


def _pack_tensor(name: str, arr: Array) -> bytes:
    encoded = name.encode()
    parts = [struct.pack("<H", len(encoded)), encoded, struct.pack("<B", arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(
    path: str | Path,
    model: ModelParams,
    state: TrainState,
    config: TrainConfig,
) -> None:
    """Serialize model, optimizer and training bookkeeping, atomically."""
    opt = state.optimizer
    meta = {
        "config": config.to_dict(),
        "shape": model.shape.to_dict(),
        "optimizer": {
            "current_lr": opt.current_lr,
            "best_val_error": opt.best_val_error,
            "epochs_since_improvement": opt.epochs_since_improvement,
            "epochs_completed": opt.epochs_completed,
        },
        "history": [r.to_dict() for r in state.history],
        "best_epoch": state.best_epoch,
        "best_val_accuracy": state.best_val_accuracy,
        "has_best": state.best_params is not None,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<H", CHECKPOINT_VERSION),
        struct.pack("<I", len(meta_bytes)),
        meta_bytes,
    ]
    tensors: list[tuple[str, Array]] = []
    for name, arr in named_parameters(model).items():
        tensors.append((f"param/{name}", arr))
    for name, arr in opt.velocity.items():
        tensors.append((f"velocity/{name}", arr))
    if state.best_params is not None:
        for name, arr in named_parameters(state.best_params).items():
            tensors.append((f"best/{name}", arr))
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        parts.append(_pack_tensor(name, arr))
    atomic_write_bytes(Path(path), b"".join(parts))


def read_checkpoint_tensors(path: str | Path) -> tuple[dict, dict[str, Array]]:
    """Low-level read: (meta dict, name -> float64 array). Validates framing."""
    blob = Path(path).read_bytes()
    if len(blob) < 10 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", blob, 6)
    offset = 10 + meta_len
    if offset > len(blob):
        raise FormatError(f"{path}: truncated meta block")
    try:
        meta = json.loads(blob[10:offset].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad meta block: {exc}") from exc
    tensors: dict[str, Array] = {}
    try:
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            if offset + name_len > len(blob):
                raise FormatError(f"{path}: truncated tensor directory")
            name = blob[offset : offset + name_len].decode()
            offset += name_len
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            end = offset + 8 * size
            if end > len(blob):
                raise FormatError(f"{path}: truncated payload for tensor {name!r}")
            tensors[name] = (
                np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
                .reshape(dims)
                .copy()
            )
            offset = end
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt tensor directory: {exc}") from exc
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return meta, tensors


def load_checkpoint(
    path: str | Path, expect_shape: ModelShapeSpec | None = None
) -> CheckpointData:
    """Restore a checkpoint; every tensor is validated against the embedded
    shape spec, and optionally against the caller's expected spec."""
    meta, tensors = read_checkpoint_tensors(path)
    try:
        shape = ModelShapeSpec.from_dict(meta["shape"])
        config = TrainConfig.from_dict(meta["config"])
        opt_meta = meta["optimizer"]
        history = [EpochReport.from_dict(r) for r in meta["history"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid meta block: {exc}") from exc
    if expect_shape is not None and shape != expect_shape:
        raise FormatError(
            f"{path}: checkpoint shape {shape.to_dict()} does not match expected {expect_shape.to_dict()}"
        )
    expected_shapes = parameter_shapes(shape)

    def take(prefix: str) -> dict[str, Array]:
        group = {}
        for name, dims in expected_shapes.items():
            key = f"{prefix}/{name}"
            if key not in tensors:
                raise FormatError(f"{path}: missing tensor {key!r}")
            if tensors[key].shape != dims:
                raise FormatError(
                    f"{path}: tensor {key!r} has shape {tensors[key].shape}, expected {dims}"
                )
            group[name] = tensors[key]
        return group

    model = params_from_tensors(shape, take("param"))
    velocity = take("velocity")
    best_params = None
    if meta.get("has_best"):
        best_params = params_from_tensors(shape, take("best"))
    optimizer = OptimizerState(
        velocity,
        float(opt_meta["current_lr"]),
        float(opt_meta["best_val_error"]),
        int(opt_meta["epochs_since_improvement"]),
        int(opt_meta["epochs_completed"]),
    )
    state = TrainState(
        optimizer,
        history,
        best_params,
        int(meta["best_epoch"]),
        float(meta["best_val_accuracy"]),
    )
    return CheckpointData(model, state, config)
