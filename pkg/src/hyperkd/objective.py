"""Reconstruction and distillation losses, and reconstruction-quality metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from . import numerics as nx
from .numerics import Tensor

PSNR_CLAMP_DB = 99.0
KD_FUNCTIONS = ("kld", "l1", "js")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.5
    alpha: float = 1.0
    beta: float = 0.5
    temperature: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class SsimConstants:
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.dynamic_range <= 0:
            raise ValueError("dynamic range must be positive")

    @property
    def c1(self) -> float:
        return (0.01 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (0.03 * self.dynamic_range) ** 2


@dataclass(frozen=True)
class LossBreakdown:
    l_mse: float
    l_ssim: float
    l_recon: float
    l_kd: float
    l_total: float

    def as_dict(self) -> dict:
        return asdict(self)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def select_region(x: Tensor, masked, region: str) -> Tensor:
    """Rows of a (B, N, L) patch tensor in the masked patches, or everything.

    With ``masked_only`` and nothing masked, all patches are used.
    """
    if region == "all" or masked is None:
        return x
    if region != "masked_only":
        raise ValueError(f"unknown region {region!r}")
    masked = np.asarray(masked, dtype=bool)
    if not masked.any():
        return x
    counts = masked.sum(axis=-1)
    if masked.ndim == 2 and (counts != counts[0]).any():
        raise ValueError("masked-only losses need the same masked count per sample")
    if masked.ndim == 1:
        return x[np.flatnonzero(masked)]
    ids = np.stack([np.flatnonzero(r) for r in masked])
    return x[np.arange(ids.shape[0])[:, None], ids]


# -- reconstruction losses ---------------------------------------------------

def mse_loss(truth, pred, masked=None, region: str = "masked_only") -> Tensor:
    truth, pred = _t(truth), _t(pred)
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch {truth.shape} vs {pred.shape}")
    d = select_region(pred, masked, region) - select_region(truth, masked, region)
    return (d * d).mean()


def huber_loss(truth, pred, masked=None, region: str = "masked_only",
               delta: float = 1.0) -> Tensor:
    truth, pred = _t(truth), _t(pred)
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch {truth.shape} vs {pred.shape}")
    d = select_region(pred, masked, region) - select_region(truth, masked, region)
    return nx.huber(d, delta).mean()


def ssim_channels(x, y, axes, constants: SsimConstants = SsimConstants()) -> Tensor:
    """Global-statistics SSIM over ``axes``; one value per remaining index."""
    x, y = _t(x), _t(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    mx = x.mean(axis=axes, keepdims=True)
    my = y.mean(axis=axes, keepdims=True)
    dx, dy = x - mx, y - my
    vx = (dx * dx).mean(axis=axes)
    vy = (dy * dy).mean(axis=axes)
    cxy = (dx * dy).mean(axis=axes)
    mx, my = mx.sum(axis=axes), my.sum(axis=axes)
    c1, c2 = constants.c1, constants.c2
    num = (2.0 * mx * my + c1) * (2.0 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return num / den


def ssim_index(truth, pred, constants: SsimConstants = SsimConstants()) -> Tensor:
    """Per-channel global SSIM of (C, ...) images, averaged over channels."""
    truth = _t(truth)
    return ssim_channels(truth, pred, tuple(range(1, truth.ndim)), constants).mean()


def ssim_loss(truth, pred, constants: SsimConstants = SsimConstants()) -> Tensor:
    return 1.0 - ssim_index(truth, pred, constants)


def patch_ssim_loss(truth, pred, masked, channels: int, mean: np.ndarray, std: np.ndarray,
                    region: str = "masked_only",
                    constants: SsimConstants = SsimConstants()) -> Tensor:
    """1 - SSIM on (B, N, p*p*C) patch tensors, in reflectance units.

    Both sides go through the unclamped inverse normalization ``x*std + mean``
    so the loss stays differentiable. Statistics are taken per sample and band
    over the selected pixels; the result averages over samples and bands.
    """
    t = select_region(_t(truth), masked, region)
    p = select_region(_t(pred), masked, region)
    B, M, L = t.shape
    t = t.reshape(B, M * L // channels, channels) * std + mean
    p = p.reshape(B, M * L // channels, channels) * std + mean
    return 1.0 - ssim_channels(t, p, (1,), constants).mean()


# -- distillation losses -----------------------------------------------------

def feature_kld(teacher, student, temperature: float = 1.0) -> Tensor:
    """T^2 * KL(softmax(t/T) || softmax(s/T)) over the last axis, mean over tokens."""
    teacher, student = _t(teacher), _t(student)
    if teacher.shape != student.shape:
        raise ValueError(f"feature shape mismatch {teacher.shape} vs {student.shape}")
    T = float(temperature)
    log_p = nx.log_softmax(teacher * (1.0 / T), axis=-1)
    log_q = nx.log_softmax(student * (1.0 / T), axis=-1)
    kl = (log_p.exp() * (log_p - log_q)).sum(axis=-1)
    return kl.mean() * (T * T)


def feature_l1(teacher, student) -> Tensor:
    teacher, student = _t(teacher), _t(student)
    if teacher.shape != student.shape:
        raise ValueError(f"feature shape mismatch {teacher.shape} vs {student.shape}")
    return (teacher - student).abs().mean()


def feature_js(teacher, student, temperature: float = 1.0) -> Tensor:
    """Jensen-Shannon divergence (nats) of the softmaxed features, mean over tokens."""
    teacher, student = _t(teacher), _t(student)
    if teacher.shape != student.shape:
        raise ValueError(f"feature shape mismatch {teacher.shape} vs {student.shape}")
    T = float(temperature)
    log_p = nx.log_softmax(teacher * (1.0 / T), axis=-1)
    log_q = nx.log_softmax(student * (1.0 / T), axis=-1)
    p, q = log_p.exp(), log_q.exp()
    log_m = ((p + q) * 0.5).log()
    js = 0.5 * (p * (log_p - log_m)).sum(axis=-1) + 0.5 * (q * (log_q - log_m)).sum(axis=-1)
    return js.mean()


def kd_loss(kind: str, teacher, student, temperature: float = 1.0) -> Tensor:
    if kind == "kld":
        return feature_kld(teacher, student, temperature)
    if kind == "l1":
        return feature_l1(teacher, student)
    if kind == "js":
        return feature_js(teacher, student, temperature)
    raise ValueError(f"unknown KD function {kind!r}")


def total_loss(l_mse, l_ssim, l_kd, weights: LossWeights):
    """alpha * (lambda1 * mse + lambda2 * ssim) + beta * kd -> (Tensor, LossBreakdown)."""
    l_mse, l_ssim, l_kd = _t(l_mse), _t(l_ssim), _t(l_kd)
    recon = l_mse * weights.lambda1 + l_ssim * weights.lambda2
    total = recon * weights.alpha + l_kd * weights.beta
    breakdown = LossBreakdown(l_mse.item(), l_ssim.item(), recon.item(),
                              l_kd.item(), total.item())
    return total, breakdown


# -- metrics (numpy, reflectance scale) --------------------------------------

def to_reflectance(normalized: np.ndarray, mean, std, clamp: bool = True) -> np.ndarray:
    """(C, ...) normalized values back to reflectance, optionally clamped to [0, 1]."""
    x = np.asarray(normalized, dtype=np.float64)
    shape = (-1,) + (1,) * (x.ndim - 1)
    out = x * np.reshape(std, shape) + np.reshape(mean, shape)
    return np.clip(out, 0.0, 1.0) if clamp else out


def psnr(truth, pred, max_value: float = 1.0) -> float:
    truth, pred = np.asarray(truth, dtype=np.float64), np.asarray(pred, dtype=np.float64)
    mse = float(np.mean((truth - pred) ** 2))
    if mse == 0.0:
        return PSNR_CLAMP_DB
    return min(PSNR_CLAMP_DB, 10.0 * math.log10(max_value ** 2 / mse))


def per_channel_psnr(truth, pred, max_value: float = 1.0) -> np.ndarray:
    return np.array([psnr(t, p, max_value) for t, p in zip(truth, pred)])


def _ssim_window(x: np.ndarray, y: np.ndarray, size: int, c: SsimConstants) -> float:
    f = lambda a: uniform_filter(a, size=size, mode="reflect")  # noqa: E731
    mx, my = f(x), f(y)
    vx = f(x * x) - mx * mx
    vy = f(y * y) - my * my
    cxy = f(x * y) - mx * my
    m = ((2 * mx * my + c.c1) * (2 * cxy + c.c2)) / ((mx ** 2 + my ** 2 + c.c1) * (vx + vy + c.c2))
    return float(m.mean())


def per_channel_ssim(truth, pred, constants: SsimConstants = SsimConstants(),
                     window: int | None = None) -> np.ndarray:
    """SSIM per channel of (C, H, W) images; global statistics unless ``window`` is set."""
    truth, pred = np.asarray(truth, dtype=np.float64), np.asarray(pred, dtype=np.float64)
    if window is not None:
        return np.array([_ssim_window(t, p, window, constants) for t, p in zip(truth, pred)])
    return ssim_channels(truth, pred, tuple(range(1, truth.ndim)), constants).data.copy()


def ssim_metric(truth, pred, constants: SsimConstants = SsimConstants(),
                window: int | None = None) -> float:
    return float(per_channel_ssim(truth, pred, constants, window).mean())


def max_of_channel_means(per_tile: np.ndarray) -> float:
    """Summary of a (tiles, channels) table: max over channels of the tile mean."""
    return float(np.asarray(per_tile).mean(axis=0).max())


def write_metrics_csv(path, tile_ids, psnrs, ssims) -> None:
    lines = ["tile_id,psnr,ssim"]
    lines += [f"{t},{float(p)!r},{float(s)!r}" for t, p, s in zip(tile_ids, psnrs, ssims)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_channel_csv(path, psnr_means, ssim_means) -> None:
    lines = ["channel,psnr_mean,ssim_mean"]
    lines += [f"{c},{float(p)!r},{float(s)!r}" for c, (p, s) in enumerate(zip(psnr_means, ssim_means))]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
