"""Sample-based evaluation metrics: RMSE, MMD (Gaussian kernel) and CRPS.

All functions take the truth as ``(K, m)`` and samples as ``(K, N, m)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

MMD_BANDWIDTH = 2.0


def _check(truth, samples) -> tuple[np.ndarray, np.ndarray]:
    truth = np.asarray(truth, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.float64)
    if truth.ndim == 1:
        truth = truth[:, None]
    if samples.ndim == 2:
        samples = samples[:, :, None]
    if samples.ndim != 3 or truth.ndim != 2:
        raise ValueError("expected truth (K, m) and samples (K, N, m)")
    if samples.shape[0] != truth.shape[0] or samples.shape[2] != truth.shape[1]:
        raise ValueError(f"shape mismatch: truth {truth.shape}, samples {samples.shape}")
    if samples.shape[1] < 1:
        raise ValueError("need at least one sample per step")
    return truth, samples


def rmse(truth, samples) -> float:
    truth, samples = _check(truth, samples)
    err = truth - samples.mean(axis=1)
    return float(np.sqrt(np.mean(err * err)))


def mmd(truth, samples, bandwidth: float = MMD_BANDWIDTH) -> float:
    """Per-step squared kernel distance between the sample cloud and a point
    mass at the truth, averaged over steps."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    truth, samples = _check(truth, samples)
    scale = 1.0 / (2.0 * bandwidth**2)
    sq_norm = np.einsum("knd,knd->kn", samples, samples)
    gram = samples @ samples.transpose(0, 2, 1)
    dist2 = np.maximum(sq_norm[:, :, None] + sq_norm[:, None, :] - 2.0 * gram, 0.0)
    within = np.exp(-scale * dist2).mean(axis=(1, 2))
    diff = samples - truth[:, None, :]
    cross = np.exp(-scale * np.einsum("knd,knd->kn", diff, diff)).mean(axis=1)
    # clamp cancellation roundoff; the exact value is a nonnegative squared distance
    return float(np.mean(np.maximum(within - 2.0 * cross + 1.0, 0.0)))


def crps(truth, samples) -> float:
    """Closed-form ensemble CRPS averaged over components and steps."""
    truth, samples = _check(truth, samples)
    N = samples.shape[1]
    abs_err = np.abs(samples - truth[:, None, :]).mean(axis=1)
    srt = np.sort(samples, axis=1)
    # sum_{j,l} |x_j - x_l| = 2 * sum_i (2i - N + 1) x_(i) for sorted x
    coef = (2.0 * np.arange(N) - N + 1.0)[None, :, None]
    spread = 2.0 * np.sum(coef * srt, axis=1) / (2.0 * N * N)
    return float(np.mean(np.maximum(abs_err - spread, 0.0)))


@dataclass
class MetricReport:
    rmse: list[float] = field(default_factory=list)
    mmd: list[float] = field(default_factory=list)
    crps: list[float] = field(default_factory=list)

    def add(self, truth, samples, metrics=("rmse", "mmd", "crps"), bandwidth: float = MMD_BANDWIDTH) -> None:
        if "rmse" in metrics:
            self.rmse.append(rmse(truth, samples))
        if "mmd" in metrics:
            self.mmd.append(mmd(truth, samples, bandwidth))
        if "crps" in metrics:
            self.crps.append(crps(truth, samples))

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for name in ("rmse", "mmd", "crps"):
            vals = np.asarray(getattr(self, name))
            if vals.size:
                out[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return out

    def to_dict(self) -> dict:
        return {"per_trajectory": asdict(self), "aggregate": self.summary()}
