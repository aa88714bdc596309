"""Spectral band tables and many-to-few band aggregation.

Each target band collects the source bands whose wavelength interval lies
inside its own interval and is synthesized as their unweighted mean.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

WAVELENGTH_BOUNDS = (100.0, 20000.0)

# Landsat-8 OLI intervals for the six bands used by the HLS-pretrained teacher.
HLS_RANGES = (
    (1, 452.0, 512.0),    # blue
    (2, 533.0, 590.0),    # green
    (3, 636.0, 673.0),    # red
    (4, 851.0, 879.0),    # NIR narrow
    (5, 1566.0, 1651.0),  # SWIR 1
    (6, 2107.0, 2294.0),  # SWIR 2
)


class EmptySubset(ValueError):
    """A target band has no matching source bands."""

    def __init__(self, band_id: int):
        super().__init__(f"target band {band_id} has no contained source bands")
        self.band_id = band_id


@dataclass(frozen=True)
class BandRange:
    band_id: int
    lambda_min: float
    lambda_max: float

    def __post_init__(self):
        lo, hi = WAVELENGTH_BOUNDS
        if not self.lambda_min < self.lambda_max:
            raise ValueError(f"band {self.band_id}: lambda_min must be below lambda_max")
        if not (lo < self.lambda_min and self.lambda_max < hi):
            raise ValueError(f"band {self.band_id}: wavelengths outside ({lo}, {hi}) nm")

    def contains(self, other: "BandRange") -> bool:
        return other.lambda_min >= self.lambda_min and other.lambda_max <= self.lambda_max

    def intersects(self, other: "BandRange") -> bool:
        return other.lambda_min < self.lambda_max and other.lambda_max > self.lambda_min


@dataclass(frozen=True)
class BandTable:
    """Bands sorted by ``lambda_min``; the sort is applied on construction."""

    ranges: tuple[BandRange, ...]
    sensor_name: str = "unnamed"

    def __post_init__(self):
        ordered = tuple(sorted(self.ranges, key=lambda r: (r.lambda_min, r.band_id)))
        ids = [r.band_id for r in ordered]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{self.sensor_name}: duplicate band ids")
        object.__setattr__(self, "ranges", ordered)

    def __len__(self) -> int:
        return len(self.ranges)

    def __iter__(self):
        return iter(self.ranges)

    @property
    def band_ids(self) -> list[int]:
        return [r.band_id for r in self.ranges]

    def position(self, band_id: int) -> int:
        for i, r in enumerate(self.ranges):
            if r.band_id == band_id:
                return i
        raise KeyError(f"band id {band_id} not in table {self.sensor_name}")

    def to_rows(self) -> list[list]:
        return [[r.band_id, r.lambda_min, r.lambda_max] for r in self.ranges]

    @classmethod
    def from_rows(cls, rows, sensor_name: str = "unnamed") -> "BandTable":
        return cls(tuple(BandRange(int(b), float(lo), float(hi)) for b, lo, hi in rows),
                   sensor_name)


@dataclass(frozen=True)
class AlignmentMap:
    target: BandTable
    subsets: tuple[tuple[int, ...], ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.subsets)


# -- band table files --------------------------------------------------------

HEADER = ("band_id", "lambda_min_nm", "lambda_max_nm")


def load_band_table(path, sensor_name: str | None = None) -> BandTable:
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(c.strip() for c in rows[0]) != HEADER:
        raise ValueError(f"{path}: expected header {','.join(HEADER)}")
    body = [r for r in rows[1:] if r]
    try:
        return BandTable.from_rows(body, sensor_name or Path(path).stem)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{path}: {exc}") from exc


def save_band_table(table: BandTable, path) -> None:
    lines = [",".join(HEADER)]
    lines += [f"{r.band_id},{r.lambda_min!r},{r.lambda_max!r}" for r in table]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


# -- stock tables ------------------------------------------------------------

def hls_table() -> BandTable:
    return BandTable.from_rows(HLS_RANGES, "HLS")


def synthetic_source_table(n_bands: int = 218, start: float = 420.0, stop: float = 2450.0,
                           half_width: float | None = None) -> BandTable:
    """Evenly spaced contiguous narrow bands, EnMAP-like by default."""
    centers = np.linspace(start, stop, n_bands)
    step = (stop - start) / max(n_bands - 1, 1)
    if half_width is None:
        # few wide bands would otherwise spill below the valid range
        hw = min(0.5 * step, start - WAVELENGTH_BOUNDS[0] - 1.0)
    else:
        hw = half_width
    rows = [(i + 1, float(c - hw), float(c + hw)) for i, c in enumerate(centers)]
    return BandTable.from_rows(rows, f"synthetic{n_bands}")


def spanning_target_table(source: BandTable, n_target: int = 6) -> BandTable:
    """Target bands that tile ``source`` into ``n_target`` contiguous groups."""
    if n_target > len(source):
        raise ValueError("more target bands than source bands")
    groups = np.array_split(np.arange(len(source)), n_target)
    rows = []
    for i, g in enumerate(groups):
        members = [source.ranges[k] for k in g]
        rows.append((i + 1, min(m.lambda_min for m in members),
                     max(m.lambda_max for m in members)))
    return BandTable.from_rows(rows, f"span{n_target}")


# -- alignment ---------------------------------------------------------------

def contained_subset(target: BandRange, source: BandTable,
                     overlap_mode: str = "contained") -> list[int]:
    """Source band ids matched to ``target``, in source-table order."""
    if overlap_mode == "contained":
        return [r.band_id for r in source if target.contains(r)]
    if overlap_mode == "intersecting":
        return [r.band_id for r in source if target.intersects(r)]
    raise ValueError(f"unknown overlap_mode {overlap_mode!r}")


def build_alignment(source: BandTable, target: BandTable,
                    overlap_mode: str = "contained") -> AlignmentMap:
    if not len(source) or not len(target):
        raise ValueError("band tables must be non-empty")
    subsets = []
    for t in target:
        ids = contained_subset(t, source, overlap_mode)
        if not ids:
            raise EmptySubset(t.band_id)
        subsets.append(tuple(ids))
    return AlignmentMap(target, tuple(subsets))


def synthesize_band(cube, subset: Sequence[int]) -> np.ndarray:
    """Pixelwise mean over the listed source bands of ``cube`` (a HyperCube)."""
    if not subset:
        raise EmptySubset(-1)
    rows = [cube.band_table.position(b) for b in subset]
    return cube.data[rows].mean(axis=0)


def align_cube(cube, alignment: AlignmentMap):
    """Aggregate ``cube`` to the target band set, ordered as the target table."""
    from .datastore import HyperCube

    planes = np.stack([synthesize_band(cube, s) for s in alignment.subsets])
    return HyperCube(planes, alignment.target, normalized=cube.normalized,
                     tile_id=cube.tile_id, split=cube.split)


def alignment_matrix(source: BandTable, alignment: AlignmentMap) -> np.ndarray:
    """(n_target, n_source) averaging weights; ``A @ bands`` equals ``align_cube``."""
    A = np.zeros((len(alignment), len(source)))
    for i, subset in enumerate(alignment.subsets):
        for b in subset:
            A[i, source.position(b)] = 1.0 / len(subset)
    return A
