"""Built-in correctness checks behind the `selftest` CLI command.

Every check is seeded and self-contained: brute-force oracles and
central-difference gradient probes that exercise the shipped forward and
backward passes without touching the test suite. A production install can
therefore verify itself in a few seconds.
"""

from __future__ import annotations

import numpy as np

from . import analysis
from .denseimage import DenseImage, SamplingMode, sample_segments
from .model import (
    ModelParams,
    ModelShapeSpec,
    init_model,
    named_parameters,
    sample_loss_and_grads,
)
from .numerics import cross_entropy_from_logits, make_rng, softmax
from .temporal_conv import (
    TemporalFilterBank,
    conv_scale_forward,
    multiscale_backward,
    multiscale_forward,
)


def naive_scale_responses(X: np.ndarray, W_h: np.ndarray, b_h: np.ndarray) -> np.ndarray:
    """Windowed dot products written as explicit loops; the oracle."""
    n, k = X.shape
    M = W_h.shape[0]
    h = W_h.shape[1] // k
    out = np.zeros((M, n - h + 1))
    for m in range(M):
        for i in range(n - h + 1):
            acc = 0.0
            for a in range(h):
                for b in range(k):
                    acc += W_h[m, a * k + b] * X[i + a, b]
            out[m, i] = max(acc + b_h[m], 0.0)
    return out


def _random_bank(rng, widths, M, k) -> TemporalFilterBank:
    return TemporalFilterBank(
        {h: rng.normal(size=(M, h * k)) for h in widths},
        {h: rng.normal(size=M) * 0.1 for h in widths},
    )


def _check_conv_oracle() -> None:
    rng = make_rng(11)
    for _ in range(20):
        n = int(rng.integers(2, 9))
        k = int(rng.integers(1, 5))
        M = int(rng.integers(1, 5))
        widths = sorted(set(int(rng.integers(2, n + 1)) for _ in range(2)))
        bank = _random_bank(rng, widths, M, k)
        X = DenseImage(rng.normal(size=(n, k)))
        pooled, _ = multiscale_forward(X, bank)
        for h in widths:
            want = naive_scale_responses(X.values, bank.weights[h], bank.biases[h])
            got = conv_scale_forward(X, bank.weights[h], bank.biases[h]).values
            if np.abs(got - want).max() > 1e-12:
                raise AssertionError(f"conv mismatch at h={h}")
            if np.abs(pooled[h].values - want.max(axis=1)).max() > 1e-12:
                raise AssertionError(f"pool mismatch at h={h}")


def _pre_activations(X, bank, h):
    n, k = X.shape
    windows = np.stack([X[i : i + h].ravel() for i in range(n - h + 1)])
    return bank.weights[h] @ windows.T + bank.biases[h][:, None]


def _kink_free(X, bank) -> bool:
    """Reject configurations too close to a rectifier kink or a pool tie."""
    for h in bank.widths:
        pre = _pre_activations(X, bank, h)
        if np.abs(pre).min() < 1e-3:
            return False
        post = np.maximum(pre, 0.0)
        if post.shape[1] >= 2:
            top2 = np.sort(post, axis=1)[:, -2:]
            if (top2[:, 1] - top2[:, 0]).min() < 1e-3:
                return False
    return True


def _check_multiscale_gradients() -> None:
    rng = make_rng(12)
    eps = 1e-4
    done = 0
    while done < 5:
        n, k, M = 5, 3, 4
        widths = (2, 3)
        bank = _random_bank(rng, widths, M, k)
        X = rng.normal(size=(n, k))
        if not _kink_free(X, bank):
            continue
        done += 1
        grad_up = {h: rng.normal(size=M) for h in widths}
        _, cache = multiscale_forward(DenseImage(X), bank)
        grad_W, grad_b, grad_X = multiscale_backward(cache, grad_up)

        def objective():
            p, _ = multiscale_forward(DenseImage(X), bank)
            return sum(float(grad_up[h] @ p[h].values) for h in widths)

        def probe(arr, grad, what):
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + eps
                up = objective()
                arr[idx] = orig - eps
                down = objective()
                arr[idx] = orig
                fd = (up - down) / (2 * eps)
                if abs(fd - grad[idx]) > 1e-5 * max(1.0, abs(fd)):
                    raise AssertionError(f"{what} mismatch at {idx}")

        for h in widths:
            probe(bank.weights[h], grad_W[h], f"dW[h={h}]")
            probe(bank.biases[h], grad_b[h], f"db[h={h}]")
        probe(X, grad_X, "dX")


def _tiny_model(rng) -> tuple[ModelParams, np.ndarray, int]:
    shape = ModelShapeSpec(
        raw_dim=4, feat_dim=3, num_frames=5, widths=(2, 3), num_filters=4, num_classes=3
    )
    params = init_model(shape, rng)
    features = rng.uniform(-1.0, 1.0, size=(shape.num_frames, shape.raw_dim))
    label = int(rng.integers(shape.num_classes))
    return params, features, label


def _model_kink_free(params: ModelParams, features) -> bool:
    rows = features  # T == n, center sampling is the identity
    X = rows @ params.reduction.weights + params.reduction.bias
    return _kink_free(X, params.bank)


def _check_end_to_end_gradients() -> None:
    rng = make_rng(13)
    eps = 1e-4
    done = 0
    while done < 5:
        params, features, label = _tiny_model(rng)
        if not _model_kink_free(params, features):
            continue
        done += 1
        loss, grads = sample_loss_and_grads(params, features, label)
        for name, arr in named_parameters(params).items():
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + eps
                up, _ = sample_loss_and_grads(params, features, label)
                arr[idx] = orig - eps
                down, _ = sample_loss_and_grads(params, features, label)
                arr[idx] = orig
                fd = (up - down) / (2 * eps)
                if abs(fd - grads[name][idx]) > 1e-5 * max(1.0, abs(fd)):
                    raise AssertionError(f"gradient mismatch in {name} at {idx}")


def _check_shape_law() -> None:
    rng = make_rng(14)
    k, M = 3, 2
    bank = _random_bank(rng, (2, 3, 4), M, k)
    X = DenseImage(rng.normal(size=(8, k)))
    for h, want in ((2, 7), (3, 6), (4, 5)):
        fmap = conv_scale_forward(X, bank.weights[h], bank.biases[h])
        if fmap.values.shape != (M, want):
            raise AssertionError(f"h={h}: expected {want} windows, got {fmap.values.shape}")


def _check_softmax_law() -> None:
    rng = make_rng(15)
    for i in range(200):
        length = int(rng.integers(1, 30))
        scale = 1000.0 if i % 4 == 0 else 1.0
        logits = rng.normal(size=length) * scale
        probs = softmax(logits)
        if abs(probs.sum() - 1.0) > 1e-9 or (probs < 0).any():
            raise AssertionError("softmax law violated")
        # Exact zeros only ever come from exp underflow at huge spreads.
        if logits.max() - logits.min() < 700 and (probs == 0).any():
            raise AssertionError("softmax underflowed without cause")


def _check_segment_sampler() -> None:
    cases = [
        (8, 8, [0, 1, 2, 3, 4, 5, 6, 7]),
        (16, 8, [0, 2, 4, 6, 8, 10, 12, 14]),
        (3, 8, [0, 0, 1, 1, 1, 2, 2, 2]),
    ]
    for T, n, want in cases:
        got = sample_segments(T, n, SamplingMode.EVAL_CENTER).tolist()
        if got != want:
            raise AssertionError(f"segment sampling T={T}: {got} != {want}")


def _check_parameter_accounting() -> None:
    shape = ModelShapeSpec(1024, 256, 8, (2, 3, 4, 5, 6), 256, 27)
    total = analysis.count_parameters(shape).total
    if total != 1_609_095:
        raise AssertionError(f"parameter count {total} != 1,609,095")
    small = ModelShapeSpec(4, 3, 5, (2, 3), 4, 3)
    params = init_model(small, make_rng(16))
    live = sum(arr.size for arr in named_parameters(params).values())
    if live != analysis.count_parameters(small).total:
        raise AssertionError("live parameter count disagrees with the accounting")


def _check_order_sensitivity() -> None:
    # A filter keyed to one ordered pair must react when two rows swap.
    A, B, C = np.eye(3)
    X = np.stack([A, B, C])
    bank = TemporalFilterBank(
        {2: np.concatenate([A, B])[None, :]}, {2: np.zeros(1)}
    )
    pooled, _ = multiscale_forward(DenseImage(X), bank)
    swapped, _ = multiscale_forward(DenseImage(X[[0, 2, 1]]), bank)
    if pooled[2].values[0] == swapped[2].values[0]:
        raise AssertionError("row swap left the pooled output unchanged")


def _check_cross_entropy() -> None:
    rng = make_rng(17)
    eps = 1e-5
    for _ in range(20):
        logits = rng.normal(size=int(rng.integers(2, 10)))
        label = int(rng.integers(len(logits)))
        _, grad = cross_entropy_from_logits(logits, label)
        for j in range(len(logits)):
            probe = logits.copy()
            probe[j] += eps
            up, _ = cross_entropy_from_logits(probe, label)
            probe[j] -= 2 * eps
            down, _ = cross_entropy_from_logits(probe, label)
            fd = (up - down) / (2 * eps)
            if abs(fd - grad[j]) > 1e-6 * max(1.0, abs(fd)):
                raise AssertionError("cross-entropy gradient mismatch")


CHECKS = [
    ("segment sampler fixed points", _check_segment_sampler),
    ("softmax probability law", _check_softmax_law),
    ("cross-entropy gradient vs finite differences", _check_cross_entropy),
    ("convolution forward vs brute-force oracle", _check_conv_oracle),
    ("feature-map shape law (n=8 -> 7/6/5)", _check_shape_law),
    ("multiscale backward vs finite differences", _check_multiscale_gradients),
    ("end-to-end gradients vs finite differences", _check_end_to_end_gradients),
    ("temporal order sensitivity", _check_order_sensitivity),
    ("parameter accounting", _check_parameter_accounting),
]


def run_selftest(emit=print) -> int:
    """Run every check; returns the number of failures."""
    failures = 0
    for name, check in CHECKS:
        try:
            check()
        except Exception as exc:  # report and keep going
            failures += 1
            emit(f"[FAIL] {name}: {exc}")
        else:
            emit(f"[ok]   {name}")
    emit(f"selftest: {len(CHECKS) - failures}/{len(CHECKS)} checks passed")
    return failures
