"""Shared oracles and builders used across the test modules.

Everything here is intentionally naive: brute-force DFT sums, triple-loop
matrix products, central finite differences. The implementations under
test must agree with these within the stated tolerances.
"""

from __future__ import annotations

import math

import numpy as np

from pgad.data import SeriesMatrix
from pgad.model import Model, ModelConfig
from pgad.training import l2_loss


def brute_spectrum(values: np.ndarray) -> np.ndarray:
    """O(T^2) DFT amplitude spectrum, bins 1..T//2, averaged over sensors."""
    values = np.asarray(values, dtype=np.float64)
    n_sensors, length = values.shape
    bins = length // 2
    out = np.zeros(bins)
    for f in range(1, bins + 1):
        angle = -2.0 * math.pi * f * np.arange(length) / length
        cos_part = values @ np.cos(angle)
        sin_part = values @ np.sin(angle)
        out[f - 1] = np.mean(np.hypot(cos_part, sin_part))
    return out


def series_of(values, names=None, labels=None) -> SeriesMatrix:
    values = np.asarray(values, dtype=np.float64)
    if names is None:
        names = [f"s{i}" for i in range(values.shape[0])]
    lab = None if labels is None else np.asarray(labels, dtype=np.int64)
    return SeriesMatrix(values, list(names), lab)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Worst elementwise relative error with a 1e-6 absolute floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float((np.abs(a - b) / denom).max())


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(
        n_sensors=4, window=12, embed_dim=5, spatial_dim=5, channels=2,
        temporal_dim=6, hidden_dim=8, kernel_sizes=(2, 3, 5), dilation=1,
        tcn_layers=1, slots=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


def random_instance(seed: int, config: ModelConfig, batch: int = 3, k: int = 2):
    """A model, random params, random batch, and per-slot adjacencies."""
    from pgad.graph import build_slot_graphs, cosine_similarity, topk_adjacency

    rng = np.random.default_rng(seed)
    model = Model(config)
    params = model.init_params(rng)
    windows = rng.normal(0.0, 1.0, (batch, config.n_sensors, config.window))
    targets = rng.normal(0.0, 1.0, (batch, config.n_sensors))
    slot_ids = rng.integers(0, config.slots, batch)
    k_eff = min(k, config.n_sensors - 1)
    adjacencies = [
        topk_adjacency(cosine_similarity(params[f"emb_{s}"]), k_eff)
        for s in range(config.slots)
    ]
    return model, params, windows, slot_ids, adjacencies, targets


def batch_loss(model, params, windows, slot_ids, adjacencies, targets) -> float:
    preds, _ = model.forward(windows, slot_ids, adjacencies, params)
    loss, _ = l2_loss(preds, targets)
    return loss


def _loss_and_kink_signature(model, params, windows, slot_ids, adjacencies, targets):
    """Loss plus a byte fingerprint of every piecewise-linear regime.

    Central differences are only a valid derivative estimate when both
    evaluation points sit on the same side of every ReLU / leaky-ReLU
    kink, so the fingerprint lets callers discard straddling elements.
    """
    preds, trace = model.forward(windows, slot_ids, adjacencies, params)
    loss, _ = l2_loss(preds, targets)
    parts = []
    for g in trace.groups:
        parts.append(g["z1_mask"].tobytes())
        parts.append(g["s_mask"].tobytes())
        for layer in g.get("conv") or []:
            parts.append(layer["mask"].tobytes())
        att = g["att"]
        parts.append(((att["raw"] > 0) & (att["alpha"] > 0)).tobytes())
    return loss, b"".join(parts)


def analytic_gradients(model, params, windows, slot_ids, adjacencies, targets):
    preds, trace = model.forward(windows, slot_ids, adjacencies, params)
    _, dpred = l2_loss(preds, targets)
    return model.backward(trace, dpred, params)


def numeric_gradients(model, params, windows, slot_ids, adjacencies, targets,
                      step: float = 1e-3):
    """Central finite differences of the batch loss for every parameter.

    Uses the base step plus one Richardson refinement at step/2, which
    cancels the O(step^2) truncation term; the layer-norm/softmax
    curvature otherwise leaves ~1e-3 relative error at step 1e-3 even
    for a correct gradient. Elements whose evaluations land in different
    activation regimes (a kink lies inside the interval) come back as
    NaN; there the difference quotient does not estimate the derivative.
    """
    grads = {}
    offsets = (step, step / 2.0, -step / 2.0, -step)
    for name, value in params.items():
        grad = np.zeros_like(np.atleast_1d(value), dtype=np.float64)
        flat = np.atleast_1d(value).reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            losses = []
            signatures = []
            for delta in offsets:
                flat[i] = keep + delta
                loss, signature = _loss_and_kink_signature(
                    model, params, windows, slot_ids, adjacencies, targets)
                losses.append(loss)
                signatures.append(signature)
            flat[i] = keep
            if all(s == signatures[0] for s in signatures[1:]):
                coarse = (losses[0] - losses[3]) / (2.0 * step)
                fine = (losses[1] - losses[2]) / step
                gflat[i] = (4.0 * fine - coarse) / 3.0
            else:
                gflat[i] = np.nan
        grads[name] = grad.reshape(np.shape(value))
    return grads


def grad_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """L2 relative error between two gradient vectors."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-6)
    return float(np.linalg.norm(analytic - numeric) / scale)


def worst_gradient_error(seed: int, config: ModelConfig, batch: int = 3) -> float:
    """Worst per-parameter relative error between backward and FD.

    Kink-straddling elements (NaN in the numeric result) carry no FD
    information. An instance with an activation sitting almost exactly
    on a kink invalidates every upstream element at once, so such draws
    are redrawn from a shifted seed instead of silently skipping most
    of the comparison.
    """
    for attempt in range(5):
        inst = random_instance(seed + 1000 * attempt, config, batch=batch)
        analytic = analytic_gradients(*inst)
        numeric = numeric_gradients(*inst)
        worst = 0.0
        total = 0
        skipped = 0
        for name in analytic:
            num = np.atleast_1d(numeric[name])
            ana = np.atleast_1d(analytic[name])
            valid = np.isfinite(num)
            total += num.size
            skipped += int(num.size - valid.sum())
            if valid.any():
                worst = max(worst, grad_rel_err(ana[valid], num[valid]))
        if skipped <= max(2, total // 50):
            return worst
    raise AssertionError(
        f"kink-straddling instances five times in a row (last {skipped}/{total})"
    )
