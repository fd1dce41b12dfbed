"""Forecast metrics (MAE/MSE/RMSE/SSIM/PSNR), the epsilon comparison against a
dense baseline, and the wall-clock speedup harness for compacted inference."""

from __future__ import annotations

import time
from dataclasses import dataclass
from statistics import median

import numpy as np

from . import autodiff as ad
from .mask import BINARY, SensorMask, sparsity
from .models import compact_forward, forward
from .morph import IMAGE, Graph, unmorph_matrix

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - present in the supported environment
    from contextlib import nullcontext

    def threadpool_limits(limits=None):
        return nullcontext()

SSIM_WINDOW = 8


class EquivalenceError(RuntimeError):
    """Compacted inference disagreed with the full forward pass."""


@dataclass
class MetricsReport:
    mae: float
    mse: float
    rmse: float
    psnr: float
    ssim: float | None
    per_horizon: list[float]
    scope: str = "all-units"


@dataclass
class SpeedReport:
    dense_time: float
    compact_time: float
    ratio: float
    mask_sparsity: float
    repetitions: int
    dense_spread: tuple[float, float, float]
    compact_spread: tuple[float, float, float]


def ssim_uniform(a: np.ndarray, b: np.ndarray, data_range: float,
                 window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all sliding window x window patches, uniform weighting,
    sample (n-1) covariance normalization."""
    h, w = a.shape
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} smaller than SSIM window {window}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    wa = np.lib.stride_tricks.sliding_window_view(a, (window, window))
    wb = np.lib.stride_tricks.sliding_window_view(b, (window, window))
    n = window * window
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    corr = n / (n - 1)
    var_a = (np.square(wa).mean(axis=(-1, -2)) - mu_a ** 2) * corr
    var_b = (np.square(wb).mean(axis=(-1, -2)) - mu_b ** 2) * corr
    cov = ((wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b) * corr
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def metrics(predictions: np.ndarray, targets: np.ndarray, layout: str,
            target_dims: tuple[int, ...], data_range: float) -> MetricsReport:
    """Metrics over morphed prediction/target batches [S, rows, K*C].

    SSIM is computed per unmorphed frame with a fixed 8x8 window (image layout
    only; None for graph layouts and for fields smaller than the window). PSNR
    reports inf when the MSE is exactly zero."""
    pred = np.asarray(predictions, dtype=np.float64)
    targ = np.asarray(targets, dtype=np.float64)
    if pred.shape != targ.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {targ.shape}")
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    if pred.ndim == 2:
        pred = pred[None]
        targ = targ[None]
    err = pred - targ
    mae = float(np.abs(err).mean())
    mse = float(np.square(err).mean())
    rmse = float(np.sqrt(mse))
    psnr = float("inf") if mse == 0.0 else float(10.0 * np.log10(data_range ** 2 / mse))
    k = target_dims[0]
    c = pred.shape[2] // k
    per_horizon = [
        float(np.abs(err[:, :, t * c:(t + 1) * c]).mean()) for t in range(k)
    ]
    ssim = None
    if layout == IMAGE and min(target_dims[2], target_dims[3]) >= SSIM_WINDOW:
        vals = []
        for s in range(pred.shape[0]):
            pf = unmorph_matrix(pred[s], IMAGE, target_dims)
            tf = unmorph_matrix(targ[s], IMAGE, target_dims)
            for t in range(target_dims[0]):
                for ch in range(target_dims[1]):
                    vals.append(ssim_uniform(pf[t, ch], tf[t, ch], data_range))
        ssim = float(np.mean(vals))
    return MetricsReport(mae=mae, mse=mse, rmse=rmse, psnr=psnr, ssim=ssim,
                         per_horizon=per_horizon)


def epsilon_check(dyn_report: MetricsReport, dense_report: MetricsReport,
                  epsilon_rel: float):
    """Pass iff |MAE_dyn - MAE_dense| <= epsilon_rel * MAE_dense."""
    if dense_report.mae == 0.0:
        delta = 0.0 if dyn_report.mae == 0.0 else float("inf")
    else:
        delta = abs(dyn_report.mae - dense_report.mae) / dense_report.mae
    return delta <= epsilon_rel, delta


def bench_speed(model, inputs: np.ndarray, graph: Graph | None,
                mask: SensorMask, repetitions: int = 21) -> SpeedReport:
    """Time full versus compacted inference on one pinned thread.

    Verifies the masked/compacted equivalence (1e-9 absolute on active rows)
    before timing anything; a speedup over wrong answers is meaningless. The
    first repetition of each path is discarded as warmup and the ratio is the
    quotient of medians."""
    if repetitions < 11:
        raise ValueError(f"need at least 11 repetitions, got {repetitions}")
    if mask.mode != BINARY:
        raise ValueError("bench_speed requires a binary mask")
    x = ad.constant(inputs)
    full = forward(model, x, graph=graph, mask=mask).values
    comp = compact_forward(model, x, graph=graph, mask=mask).values
    rows = mask.active_row_indices()
    gap = float(np.abs(full[..., rows, :] - comp).max())
    if gap > 1e-9:
        raise EquivalenceError(
            f"compacted inference deviates from forward by {gap:.3e} (> 1e-9)"
        )
    dense_times, compact_times = [], []
    with threadpool_limits(limits=1):
        for _ in range(repetitions):
            t0 = time.perf_counter()
            forward(model, x, graph=graph, mask=mask)
            dense_times.append(time.perf_counter() - t0)
        for _ in range(repetitions):
            t0 = time.perf_counter()
            compact_forward(model, x, graph=graph, mask=mask)
            compact_times.append(time.perf_counter() - t0)
    dense_times = dense_times[1:]
    compact_times = compact_times[1:]
    dm = median(dense_times)
    cm = median(compact_times)
    return SpeedReport(
        dense_time=dm, compact_time=cm, ratio=dm / cm,
        mask_sparsity=sparsity(mask), repetitions=repetitions,
        dense_spread=(min(dense_times), dm, max(dense_times)),
        compact_spread=(min(compact_times), cm, max(compact_times)),
    )


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if v == float("inf") else f"{v:.17g}"
    return str(v)


def save_report(report, path) -> None:
    """Serialize a report as a plain-text key=value block."""
    lines = []
    if isinstance(report, MetricsReport):
        lines.append("type=metrics")
        for key in ("mae", "mse", "rmse", "psnr"):
            lines.append(f"{key}={_fmt(getattr(report, key))}")
        lines.append("ssim=" + ("" if report.ssim is None else _fmt(report.ssim)))
        lines.append("per_horizon=" + ",".join(_fmt(v) for v in report.per_horizon))
        lines.append(f"scope={report.scope}")
    elif isinstance(report, SpeedReport):
        lines.append("type=speed")
        lines.append(f"dense_time={_fmt(report.dense_time)}")
        lines.append(f"compact_time={_fmt(report.compact_time)}")
        lines.append(f"ratio={_fmt(report.ratio)}")
        lines.append(f"sparsity={_fmt(report.mask_sparsity)}")
        lines.append(f"repetitions={report.repetitions}")
        lines.append("dense_spread=" + ",".join(_fmt(v) for v in report.dense_spread))
        lines.append("compact_spread=" + ",".join(_fmt(v) for v in report.compact_spread))
    else:
        raise TypeError(f"cannot serialize report of type {type(report)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_report(path):
    fields = {}
    with open(path) as fh:
        for ln in fh:
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            key, val = ln.split("=", 1)
            fields[key] = val
    kind = fields.get("type")
    if kind == "metrics":
        return MetricsReport(
            mae=float(fields["mae"]), mse=float(fields["mse"]),
            rmse=float(fields["rmse"]), psnr=float(fields["psnr"]),
            ssim=None if fields.get("ssim", "") == "" else float(fields["ssim"]),
            per_horizon=[float(v) for v in fields["per_horizon"].split(",") if v],
            scope=fields.get("scope", "all-units"),
        )
    if kind == "speed":
        return SpeedReport(
            dense_time=float(fields["dense_time"]),
            compact_time=float(fields["compact_time"]),
            ratio=float(fields["ratio"]),
            mask_sparsity=float(fields["sparsity"]),
            repetitions=int(fields["repetitions"]),
            dense_spread=tuple(float(v) for v in fields["dense_spread"].split(",")),
            compact_spread=tuple(float(v) for v in fields["compact_spread"].split(",")),
        )
    raise ValueError(f"{path}: unknown report type {kind!r}")
