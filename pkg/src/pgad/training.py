"""Training loop: Adam, early stopping, per-epoch graph rebuilds.

Each epoch starts by rebuilding every phase slot's TopK neighbor graph
from the current node embeddings; the adjacency then stays fixed for the
epoch while windows are visited in a seeded shuffle. Validation is the
chronological tail of the window set. The best-validation parameters are
kept and restored at the end, and their absolute validation errors are
returned for later score calibration.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import SeriesMatrix, fit_normalizer, make_windows
from .errors import DataError, DivergenceError
from .graph import cosine_similarity, topk_adjacency
from .model import Model, ModelConfig
from .period import APERIODIC_EPS, PeriodProfile, detect_period

log = logging.getLogger(__name__)

LR_GRID = (0.01, 0.005, 0.0025, 0.00125)


@dataclass(frozen=True)
class TrainConfig:
    window: int = 64
    stride: int = 1
    neighbors: int = 15          # requested in-neighbors per node (clamped to N-1)
    slots: int = 4
    epochs: int = 30
    patience: int = 10
    batch_size: int = 32
    lr: float = 0.0025
    seed: int = 0
    normalization: str = "minmax"
    grad_clip: float = 5.0       # global norm cap, 0 disables
    embed_dim: int = 64
    spatial_dim: int = 64
    channels: int = 8
    temporal_dim: int = 32
    hidden_dim: int = 128
    kernel_sizes: tuple[int, ...] = (2, 3, 5)
    dilation: int = 1
    tcn_layers: int = 1
    use_temporal: bool = True
    val_fraction: float = 0.1
    min_val_windows: int = 4
    period_per_window: bool = False

    def validate(self) -> None:
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.neighbors < 1:
            raise ValueError("neighbors must be >= 1")
        if self.slots < 1:
            raise ValueError("slots must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.epochs > 0 and self.patience > self.epochs:
            raise ValueError("patience must not exceed epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.normalization not in ("minmax", "zscore"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")
        if not 0 < self.val_fraction <= 0.5:
            raise ValueError("val_fraction must lie in (0, 0.5]")
        if self.min_val_windows < 1:
            raise ValueError("min_val_windows must be >= 1")
        self.model_config(max(2, self.neighbors + 1)).validate()

    def model_config(self, n_sensors: int) -> ModelConfig:
        return ModelConfig(
            n_sensors=n_sensors,
            window=self.window,
            embed_dim=self.embed_dim,
            spatial_dim=self.spatial_dim,
            channels=self.channels,
            temporal_dim=self.temporal_dim,
            hidden_dim=self.hidden_dim,
            kernel_sizes=tuple(self.kernel_sizes),
            dilation=self.dilation,
            tcn_layers=self.tcn_layers,
            slots=self.slots,
            use_temporal=self.use_temporal,
        )


# ---------------------------------------------------------------------------
# loss and optimizer

def l2_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient w.r.t. the predictions."""
    diff = np.asarray(pred) - np.asarray(target)
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global norm is <= max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place Adam update with bias correction."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if not np.all(np.isfinite(p)):
            raise DivergenceError(f"parameter {name} became non-finite during training")


def param_checksum(params: dict[str, np.ndarray], order: list[str]) -> str:
    digest = hashlib.sha256()
    for name in order:
        digest.update(np.ascontiguousarray(params[name]).tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False
    wall_clock_seconds: float = 0.0
    checksum: str = ""
    lr: float = 0.0
    seed: int = 0
    n_windows: int = 0
    n_val: int = 0
    period: int = 0
    aperiodic: bool = False
    neighbors_effective: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    val_errors: np.ndarray
    normalization: object
    period_profile: PeriodProfile
    train_length: int
    neighbors_effective: int
    period_per_window: bool
    report: TrainReport


def build_adjacencies(params: dict[str, np.ndarray], n_slots: int, k: int) -> list[np.ndarray]:
    """TopK graph per phase slot from the current embeddings."""
    adjacencies = []
    for s in range(n_slots):
        try:
            sim = cosine_similarity(params[f"emb_{s}"])
        except ValueError as exc:
            raise DivergenceError(f"slot {s} embeddings degenerated: {exc}") from exc
        adjacencies.append(topk_adjacency(sim, k))
    return adjacencies


def _per_window_periods(windows: np.ndarray) -> np.ndarray:
    """Dominant period of each window from its own amplitude spectrum."""
    w = windows.shape[-1]
    spectrum = np.abs(np.fft.rfft(windows, axis=-1))[..., 1 : w // 2 + 1].mean(axis=1)
    freq = spectrum.argmax(axis=-1) + 1
    periods = (w + freq - 1) // freq
    return np.where(spectrum.max(axis=-1) <= APERIODIC_EPS, w, periods)


def slot_ids_for_windows(
    starts: np.ndarray,
    period: int,
    n_slots: int,
    *,
    windows: np.ndarray | None = None,
    per_window: bool = False,
) -> np.ndarray:
    """Phase slot of each window; `starts` are absolute timestamps.

    With `per_window` the period is re-estimated from each window's own
    spectrum instead of the frozen training-split period.
    """
    if per_window:
        if windows is None:
            raise ValueError("per-window slot assignment needs the window contents")
        period = _per_window_periods(windows)
    return ((starts % period) * n_slots) // period


def train(series: SeriesMatrix, config: TrainConfig) -> TrainResult:
    """Fit the model on one clean series; returns params plus diagnostics."""
    config.validate()
    if series.n_sensors < 2:
        raise DataError("training needs at least 2 sensors")
    started = time.perf_counter()

    stats = fit_normalizer(series, config.normalization)
    normalized = SeriesMatrix(stats.apply(series.values), series.sensor_names)
    profile = detect_period(normalized)
    if profile.aperiodic:
        log.info("no dominant period found; using full length %d", profile.period)

    batch = make_windows(normalized, config.window, config.stride)
    n_windows = batch.windows.shape[0]
    n_val = max(config.min_val_windows, round(config.val_fraction * n_windows))
    if n_val >= n_windows:
        raise DataError(
            f"only {n_windows} windows available, need more than {n_val} "
            "to reserve a validation split"
        )
    n_train = n_windows - n_val
    slots = slot_ids_for_windows(
        batch.window_start_indices, profile.period, config.slots,
        windows=batch.windows, per_window=config.period_per_window,
    )

    train_w = batch.windows[:n_train]
    train_t = batch.targets[:n_train]
    train_s = slots[:n_train]
    val_w = batch.windows[n_train:]
    val_t = batch.targets[n_train:]
    val_s = slots[n_train:]

    model_cfg = config.model_config(series.n_sensors)
    model = Model(model_cfg)
    rng = np.random.default_rng(config.seed)
    params = model.init_params(rng)
    state = AdamState.init(params)
    k_eff = min(config.neighbors, series.n_sensors - 1)
    if k_eff != config.neighbors:
        log.info("clamping neighbors from %d to %d for %d sensors",
                 config.neighbors, k_eff, series.n_sensors)

    report = TrainReport(
        lr=config.lr, seed=config.seed, n_windows=n_windows, n_val=n_val,
        period=profile.period, aperiodic=profile.aperiodic,
        neighbors_effective=k_eff,
    )

    def _finish(exc: DivergenceError) -> DivergenceError:
        report.wall_clock_seconds = time.perf_counter() - started
        exc.report = report
        return exc

    def _eval_loss(windows, targets, slot_ids, adjacencies) -> float:
        preds = model.predict(windows, slot_ids, adjacencies, params)
        diff = preds - targets
        return float(np.mean(diff * diff))

    best_params = {k: p.copy() for k, p in params.items()}
    bad_epochs = 0
    try:
        adjacencies = build_adjacencies(params, config.slots, k_eff)
        epoch_start = time.perf_counter()
        train_loss = _eval_loss(train_w, train_t, train_s, adjacencies)
        val_loss = _eval_loss(val_w, val_t, val_s, adjacencies)
        report.epochs.append({
            "epoch": 0, "train_loss": train_loss, "val_loss": val_loss,
            "seconds": time.perf_counter() - epoch_start,
        })
        report.best_epoch = 0
        report.best_val_loss = val_loss
        log.info("epoch 0 (init): train %.6f val %.6f", train_loss, val_loss)

        for epoch in range(1, config.epochs + 1):
            epoch_start = time.perf_counter()
            adjacencies = build_adjacencies(params, config.slots, k_eff)
            order = rng.permutation(n_train)
            loss_sum = 0.0
            for lo in range(0, n_train, config.batch_size):
                sel = order[lo : lo + config.batch_size]
                preds, trace = model.forward(train_w[sel], train_s[sel], adjacencies, params)
                loss, dpred = l2_loss(preds, train_t[sel])
                if not np.isfinite(loss):
                    raise DivergenceError(f"loss became non-finite in epoch {epoch}")
                loss_sum += loss * sel.size
                grads = model.backward(trace, dpred, params)
                clip_gradients(grads, config.grad_clip)
                adam_step(params, grads, state, config.lr)
            train_loss = loss_sum / n_train
            val_loss = _eval_loss(val_w, val_t, val_s, adjacencies)
            if not np.isfinite(val_loss):
                raise DivergenceError(f"validation loss became non-finite in epoch {epoch}")
            report.epochs.append({
                "epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                "seconds": time.perf_counter() - epoch_start,
            })
            log.info("epoch %d: train %.6f val %.6f", epoch, train_loss, val_loss)
            if val_loss < report.best_val_loss:
                report.best_val_loss = val_loss
                report.best_epoch = epoch
                best_params = {k: p.copy() for k, p in params.items()}
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= config.patience:
                    report.stopped_early = True
                    log.info("early stop after epoch %d (best %d)", epoch, report.best_epoch)
                    break
    except DivergenceError as exc:
        raise _finish(exc)

    params = best_params
    adjacencies = build_adjacencies(params, config.slots, k_eff)
    val_preds = model.predict(val_w, val_s, adjacencies, params)
    val_errors = np.abs(val_preds - val_t)

    report.wall_clock_seconds = time.perf_counter() - started
    report.checksum = param_checksum(params, list(model.param_shapes()))
    return TrainResult(
        model_config=model_cfg,
        params=params,
        val_errors=val_errors,
        normalization=stats,
        period_profile=profile,
        train_length=series.length,
        neighbors_effective=k_eff,
        period_per_window=config.period_per_window,
        report=report,
    )


# ---------------------------------------------------------------------------
# learning-rate grid

@dataclass
class GridResult:
    entries: list[dict]
    best_lr: float
    result: TrainResult


def _grid_cell(args: tuple[SeriesMatrix, TrainConfig, float]):
    series, config, lr = args
    try:
        result = train(series, dataclasses.replace(config, lr=lr))
        return lr, result, None
    except DivergenceError as exc:
        return lr, None, str(exc)


def grid_search(
    series: SeriesMatrix,
    config: TrainConfig,
    lrs: tuple[float, ...] = LR_GRID,
    workers: int = 1,
) -> GridResult:
    """Train once per learning rate; keep the best validation loss.

    Ties prefer the smaller learning rate. Diverged cells are recorded
    and skipped; if every cell diverges the search itself fails.
    """
    if not lrs:
        raise ValueError("learning-rate grid is empty")
    jobs = [(series, config, lr) for lr in lrs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_grid_cell, jobs))
    else:
        cells = [_grid_cell(job) for job in jobs]

    entries = []
    best: tuple[float, float] | None = None  # (val_loss, lr)
    best_result = None
    for lr, result, error in cells:
        if error is not None:
            entries.append({"lr": lr, "val_loss": None, "error": error})
            log.info("lr %g diverged: %s", lr, error)
            continue
        val = result.report.best_val_loss
        entries.append({"lr": lr, "val_loss": val, "error": None,
                        "best_epoch": result.report.best_epoch})
        if best is None or (val, lr) < best:
            best = (val, lr)
            best_result = result
    if best_result is None:
        raise DivergenceError("no successful configuration in the learning-rate grid")
    return GridResult(entries=entries, best_lr=best[1], result=best_result)
