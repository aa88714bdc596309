"""Patch significance scores from Gabor or Haar responses, and patch masks."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import conv2d

MODES = ("salient_masked", "salient_visible", "random")
METHODS = ("gabor", "wavelet", "combined", "random")


@dataclass(frozen=True)
class GaborParams:
    wavelength: float
    orientation: float
    phase: float = 0.0
    sigma: float = 1.0
    aspect: float = 0.5
    kernel_size: int = 7

    def __post_init__(self):
        if self.wavelength <= 0 or self.sigma <= 0 or self.aspect <= 0:
            raise ValueError("wavelength, sigma and aspect must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")


@dataclass(frozen=True)
class WaveletSpec:
    levels: int = 1
    family: str = "haar"

    def __post_init__(self):
        if self.family != "haar":
            raise ValueError("only the Haar family is supported")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")

    def check_patch(self, p: int) -> None:
        if p % (2 ** self.levels):
            raise ValueError(f"2**{self.levels} does not divide patch side {p}")


@dataclass
class ScoreVector:
    scores: np.ndarray
    patch_size: int
    grid: tuple[int, int]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.size != self.grid[0] * self.grid[1]:
            raise ValueError("score count does not match the patch grid")
        if not np.isfinite(self.scores).all() or (self.scores < 0).any():
            raise ValueError("scores must be finite and non-negative")

    def __len__(self) -> int:
        return self.scores.size


@dataclass
class PatchMask:
    masked: np.ndarray
    ratio: float
    mode: str
    order: np.ndarray = field(default=None, repr=False)

    @property
    def num_masked(self) -> int:
        return int(self.masked.sum())

    @property
    def visible_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.masked)

    @property
    def masked_ids(self) -> np.ndarray:
        return np.flatnonzero(self.masked)


# -- Gabor -------------------------------------------------------------------

def gabor_kernel(params: GaborParams) -> np.ndarray:
    """Kernel sampled on an integer grid centred at 0, indexed [y, x]."""
    half = params.kernel_size // 2
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    ct, st = math.cos(params.orientation), math.sin(params.orientation)
    xr = x * ct + y * st
    yr = -x * st + y * ct
    envelope = np.exp(-(xr ** 2 + params.aspect ** 2 * yr ** 2) / (2 * params.sigma ** 2))
    return envelope * np.cos(2 * np.pi * xr / params.wavelength + params.phase)


def default_gabor_bank(patch_size: int) -> list[GaborParams]:
    """Four orientations, wavelength p/2, sigma 0.56 wavelength, size p-1 made odd."""
    lam = patch_size / 2.0
    size = patch_size - 1 if patch_size % 2 == 0 else patch_size
    return [GaborParams(lam, theta, 0.0, 0.56 * lam, 0.5, size)
            for theta in (0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4)]


def gabor_score(patch: np.ndarray, bank: Sequence[GaborParams], zero_mean: bool = True) -> float:
    if not bank:
        raise ValueError("Gabor bank is empty")
    patch = np.asarray(patch, dtype=np.float64)
    norms = []
    for params in bank:
        k = gabor_kernel(params)
        if zero_mean:
            k = k - k.mean()
        response = conv2d(patch[None], k, padding="reflect").data[0]
        norms.append(np.linalg.norm(response))
    return float(np.mean(norms))


# -- Haar --------------------------------------------------------------------

def haar_dwt2(tile: np.ndarray):
    """One level of the orthonormal 2-D Haar transform -> (LL, LH, HL, HH).

    LH holds row differences (horizontal edges), HL column differences.
    """
    x = np.asarray(tile, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] % 2 or x.shape[1] % 2:
        raise ValueError(f"Haar transform needs even side lengths, got {x.shape}")
    a, b = x[0::2, 0::2], x[0::2, 1::2]
    c, d = x[1::2, 0::2], x[1::2, 1::2]
    return ((a + b + c + d) / 2, (a + b - c - d) / 2,
            (a - b + c - d) / 2, (a - b - c + d) / 2)


def haar_idwt2(ll, lh, hl, hh) -> np.ndarray:
    out = np.empty((2 * ll.shape[0], 2 * ll.shape[1]))
    out[0::2, 0::2] = (ll + lh + hl + hh) / 2
    out[0::2, 1::2] = (ll + lh - hl - hh) / 2
    out[1::2, 0::2] = (ll - lh + hl - hh) / 2
    out[1::2, 1::2] = (ll - lh - hl + hh) / 2
    return out


def wavelet_score(patch: np.ndarray, spec: WaveletSpec = WaveletSpec()) -> float:
    """Norm of all detail coefficients across ``spec.levels`` levels."""
    approx = np.asarray(patch, dtype=np.float64)
    spec.check_patch(approx.shape[0])
    energy = 0.0
    for _ in range(spec.levels):
        approx, lh, hl, hh = haar_dwt2(approx)
        energy += float((lh ** 2).sum() + (hl ** 2).sum() + (hh ** 2).sum())
    return math.sqrt(energy)


# -- patch scoring -----------------------------------------------------------

def patch_grid(gray: np.ndarray, p: int) -> np.ndarray:
    H, W = gray.shape
    if H % p or W % p:
        raise ValueError(f"patch size {p} does not divide image dims {H}x{W}")
    return gray.reshape(H // p, p, W // p, p).transpose(0, 2, 1, 3).reshape(-1, p, p)


def score_patches(image, method: str = "gabor", p: int = 16,
                  bank: Sequence[GaborParams] | None = None,
                  wavelet: WaveletSpec | None = None, threads: int = 1) -> ScoreVector:
    """Score every p x p patch of the channel-mean image, row-major order.

    ``image`` is a HyperCube or a (C, H, W) array.
    """
    data = getattr(image, "data", image)
    data = np.asarray(data, dtype=np.float64)
    gray = data.mean(axis=0) if data.ndim == 3 else data
    patches = patch_grid(gray, p)
    grid = (gray.shape[0] // p, gray.shape[1] // p)
    if method == "gabor":
        bank = list(bank) if bank is not None else default_gabor_bank(p)
        fn = lambda q: gabor_score(q, bank)  # noqa: E731
    elif method == "wavelet":
        spec = wavelet or WaveletSpec()
        spec.check_patch(p)
        fn = lambda q: wavelet_score(q, spec)  # noqa: E731
    elif method == "combined":
        g = score_patches(data, "gabor", p, bank, wavelet, threads).scores
        w = score_patches(data, "wavelet", p, bank, wavelet, threads).scores
        scaled = [s / s.max() if s.max() > 0 else s for s in (g, w)]
        return ScoreVector(scaled[0] + scaled[1], p, grid)
    else:
        raise ValueError(f"unknown scoring method {method!r}")
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            scores = list(pool.map(fn, patches))
    else:
        scores = [fn(q) for q in patches]
    return ScoreVector(np.array(scores), p, grid)


# -- masks -------------------------------------------------------------------

def num_masked(ratio: float, n: int) -> int:
    """round(ratio * n), halves rounded up."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    return min(n, int(math.floor(ratio * n + 0.5 + 1e-9)))


def build_mask(scores, ratio: float, mode: str = "salient_masked", seed: int = 0) -> PatchMask:
    """Select ``round(ratio * N)`` patches to hide.

    Ranking is by descending score with ties going to the lower patch index.
    ``salient_visible`` keeps the best-ranked patches visible and hides the rest.
    """
    s = scores.scores if isinstance(scores, ScoreVector) else np.asarray(scores, dtype=np.float64)
    n = s.size
    k = num_masked(ratio, n)
    if mode == "random":
        rng = np.random.default_rng(seed)
        chosen = rng.permutation(n)[:k]
        order = None
    elif mode in ("salient_masked", "salient_visible"):
        order = np.lexsort((np.arange(n), -s))
        chosen = order[:k] if mode == "salient_masked" else order[n - k:]
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    masked = np.zeros(n, dtype=bool)
    masked[chosen] = True
    return PatchMask(masked, ratio, mode, order)


def mask_schedule(epoch: int, guided_mode: str = "salient_masked",
                  switch_epoch: int | None = None) -> str:
    """Guided mode before ``switch_epoch``, random from it on; None never switches."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if switch_epoch is not None and epoch >= switch_epoch:
        return "random"
    return guided_mode


# -- outputs -----------------------------------------------------------------

def write_scores_csv(path, scores: ScoreVector, mask: PatchMask | None = None) -> None:
    gw = scores.grid[1]
    lines = ["patch_index,row,col,score,masked"]
    for i, v in enumerate(scores.scores):
        flag = int(mask.masked[i]) if mask is not None else 0
        lines.append(f"{i},{i // gw},{i % gw},{float(v)!r},{flag}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_pgm(path, scores: ScoreVector, scale: int = 1) -> None:
    """Binary 8-bit PGM of the score grid, max score -> 255."""
    grid = scores.scores.reshape(scores.grid)
    top = grid.max()
    img = np.zeros(grid.shape, dtype=np.uint8) if top <= 0 else \
        np.round(255.0 * grid / top).astype(np.uint8)
    img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())
