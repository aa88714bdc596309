"""Tiles, per-band statistics, synthetic scenes and the on-disk tile store.

Store layout (one directory)::

    manifest.json        dims, dtype tag, tile list, band table, optional stats
    tile_<id>.bin        float32 little-endian, C-order (band, row, col)
    label_<id>.bin       optional int32 little-endian class map (row, col)
    target_<id>.bin      optional float32 little-endian regression map (row, col)

Scenes are drawn from :class:`Mcg64`, a 64-bit multiplicative congruential
generator, so they do not depend on numpy's generator internals.
"""

from __future__ import annotations

import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .banddef import BandTable, synthetic_source_table

MANIFEST = "manifest.json"
LOCK = "store.lock"
FORMAT_VERSION = 1
STD_FLOOR = 1e-8


class StoreError(IOError):
    """Corrupt, truncated or inconsistent tile store."""


@dataclass
class BandStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be 1-D of equal length")

    def __len__(self) -> int:
        return self.mean.size

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj) -> "BandStats":
        return cls(np.array(obj["mean"]), np.array(obj["std"]))


@dataclass
class HyperCube:
    data: np.ndarray
    band_table: BandTable
    normalized: bool = False
    tile_id: str = "0"
    split: str = "train"
    stats: BandStats | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"cube data must be (C, H, W), got {self.data.shape}")
        if self.data.shape[0] != len(self.band_table):
            raise ValueError(f"{self.data.shape[0]} planes but {len(self.band_table)} bands")
        if not np.isfinite(self.data).all():
            raise ValueError(f"tile {self.tile_id}: non-finite values")
        if self.normalized and self.stats is None:
            raise ValueError("normalized cubes must carry their stats")

    @property
    def shape(self) -> tuple:
        return self.data.shape


# -- normalization -----------------------------------------------------------

def compute_stats(tiles) -> BandStats:
    """Per-band mean and std over the tiles flagged as training split."""
    train = [t for t in tiles if t.split == "train"]
    if not train:
        raise ValueError("no training tiles to compute statistics from")
    stack = np.concatenate([t.data.reshape(t.data.shape[0], -1) for t in train], axis=1)
    return BandStats(stack.mean(axis=1), stack.std(axis=1))


def _check_stats(cube: HyperCube, stats: BandStats) -> None:
    if len(stats) != cube.data.shape[0]:
        raise ValueError(f"stats cover {len(stats)} bands, cube has {cube.data.shape[0]}")


def normalize(cube: HyperCube, stats: BandStats) -> HyperCube:
    _check_stats(cube, stats)
    if cube.normalized:
        raise ValueError(f"tile {cube.tile_id} is already normalized")
    data = (cube.data - stats.mean[:, None, None]) / stats.std[:, None, None]
    return HyperCube(data, cube.band_table, True, cube.tile_id, cube.split, stats)


def denormalize(cube: HyperCube, stats: BandStats | None = None) -> HyperCube:
    stats = stats or cube.stats
    _check_stats(cube, stats)
    data = cube.data * stats.std[:, None, None] + stats.mean[:, None, None]
    return HyperCube(data, cube.band_table, False, cube.tile_id, cube.split)


# -- pseudo-random numbers ---------------------------------------------------

class Mcg64:
    """x[n+1] = A * x[n] mod 2**64, A = 0xF1357AEA2E62A9C5.

    The state is forced odd. Uniforms take the top 53 bits of each state.
    Normals use Box-Muller on consecutive pairs of uniforms.
    """

    A = 0xF1357AEA2E62A9C5
    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        # splitmix-style scramble so small consecutive seeds decorrelate
        z = (int(seed) + 0x9E3779B97F4A7C15) & self.MASK
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & self.MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & self.MASK
        self.state = (z ^ (z >> 31)) | 1

    def _block(self, n: int) -> np.ndarray:
        powers = np.cumprod(np.full(n, self.A, dtype=np.uint64), dtype=np.uint64)
        out = powers * np.uint64(self.state)
        self.state = int(out[-1])
        return out

    def uniform(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.empty(0)
        bits = self._block(n) >> np.uint64(11)
        return (bits.astype(np.float64) + 0.5) / float(1 << 53)

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log(u[:m]))
        t = 2.0 * np.pi * u[m:]
        return np.concatenate([r * np.cos(t), r * np.sin(t)])[:n]

    def integers(self, high: int, n: int) -> np.ndarray:
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def choice(self, n_items: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n_items)``."""
        return np.argsort(self.uniform(n_items), kind="stable")[:k]


# -- synthetic scenes --------------------------------------------------------

@dataclass
class SceneSpec:
    seed: int = 0
    bands: int = 32
    height: int = 32
    width: int = 32
    patch_size: int = 8
    smoothness: float = 1.0
    n_planted: int = 4
    planted: tuple | None = None
    amplitude: float = 0.1
    n_classes: int = 4
    noise: float = 0.002

    def __post_init__(self):
        p = self.patch_size
        if self.height % p or self.width % p:
            raise ValueError("patch size must divide the scene dims")
        n_cells = (self.height // p) * (self.width // p)
        if self.planted is not None:
            if any(not 0 <= c < n_cells for c in self.planted):
                raise ValueError("planted cell outside the patch grid")
        elif not 0 <= self.n_planted <= n_cells:
            raise ValueError("n_planted exceeds the number of cells")
        if self.amplitude < 0:
            raise ValueError("texture amplitude must be non-negative")


@dataclass
class Scene:
    cube: HyperCube
    salient: np.ndarray     # (H/p, W/p) bool, planted texture cells
    labels: np.ndarray      # (H, W) int class map
    target: np.ndarray      # (H, W) float regression field


CLASS_SEED = 0xC1A55


def class_signatures(n_classes: int, bands: int) -> np.ndarray:
    """(n_classes, bands) smooth spectral offsets, identical for every scene."""
    coef = Mcg64(CLASS_SEED + n_classes).normal(3 * n_classes).reshape(n_classes, 3)
    wl = np.linspace(0.0, 1.0, bands)
    basis = np.stack([np.ones(bands), np.cos(np.pi * wl), np.cos(2 * np.pi * wl)])
    return 0.03 * coef @ basis


def gen_scene(spec: SceneSpec, band_table: BandTable | None = None,
              tile_id: str = "0", split: str = "train") -> Scene:
    """Smooth correlated background + per-cell class signatures + planted texture."""
    rng = Mcg64(spec.seed)
    C, H, W, p = spec.bands, spec.height, spec.width, spec.patch_size
    gh, gw = H // p, W // p
    table = band_table or synthetic_source_table(C)
    wl = np.linspace(0.0, 1.0, C)
    yy, xx = np.mgrid[0:H, 0:W] / float(max(H, W))

    # background: a few low-frequency cosines, shared spatially, gain varies by band
    field_ = np.zeros((H, W))
    for _ in range(4):
        fy, fx, ph = rng.uniform(3)
        field_ += np.cos(2 * np.pi * spec.smoothness * (fy * yy + fx * xx) + 2 * np.pi * ph)
    field_ /= 4.0
    base = 0.4 + 0.1 * np.sin(2 * np.pi * (wl * 1.3 + rng.uniform(1)[0]))
    gain = 0.04 * (1.0 + 0.5 * np.cos(2 * np.pi * wl))
    data = base[:, None, None] + gain[:, None, None] * field_[None]

    # classes: one id per patch cell; signatures are shared by all scenes
    cls_cells = rng.integers(spec.n_classes, gh * gw).reshape(gh, gw)
    labels = np.kron(cls_cells, np.ones((p, p), dtype=np.int64))
    data += class_signatures(spec.n_classes, C)[labels].transpose(2, 0, 1)

    # planted texture: sinusoid mixture, band-dependent phase within a quarter turn
    if spec.planted is not None:
        planted = np.array(sorted(spec.planted), dtype=np.int64)
    else:
        planted = np.sort(rng.choice(gh * gw, spec.n_planted))
    salient = np.zeros(gh * gw, dtype=bool)
    if spec.amplitude > 0:
        salient[planted] = True
    band_phase = 0.5 * np.pi * wl
    cy, cx = np.mgrid[0:p, 0:p]
    for cell in planted:
        tex = np.zeros((C, p, p))
        for _ in range(3):
            period, angle, ph = rng.uniform(3)
            period = 2.0 + 2.0 * period
            angle = np.pi * angle
            arg = 2 * np.pi * (cx * np.cos(angle) + cy * np.sin(angle)) / period
            tex += np.sin(arg[None] + 2 * np.pi * ph + band_phase[:, None, None])
        r, c = divmod(int(cell), gw)
        data[:, r * p:(r + 1) * p, c * p:(c + 1) * p] += spec.amplitude / 3.0 * tex

    data += spec.noise * rng.normal(C * H * W).reshape(C, H, W)
    data = data.astype(np.float32).astype(np.float64)

    target = (cls_cells.astype(np.float64) - 0.5 * (spec.n_classes - 1))
    target = np.kron(target, np.ones((p, p))) + 2.0 * field_
    target = target.astype(np.float32).astype(np.float64)

    cube = HyperCube(data, table, tile_id=tile_id, split=split)
    return Scene(cube, salient.reshape(gh, gw), labels, target)


# -- tile store --------------------------------------------------------------

@contextmanager
def _store_lock(root: Path):
    lock = root / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise StoreError(f"{root} is locked by another writer ({LOCK} exists)") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


@dataclass
class TileStore:
    tiles: list[HyperCube]
    band_table: BandTable
    stats: BandStats | None = None
    labels: dict = field(default_factory=dict)
    targets: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[HyperCube]:
        return [t for t in self.tiles if t.split == name]


def write_store(store: TileStore, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    tiles = store.tiles
    if not tiles:
        raise StoreError("refusing to write an empty store")
    dims = list(tiles[0].data.shape)
    ids = [t.tile_id for t in tiles]
    if len(set(ids)) != len(ids):
        raise StoreError("duplicate tile ids")
    with _store_lock(root):
        entries = []
        for t in tiles:
            if list(t.data.shape) != dims:
                raise StoreError(f"tile {t.tile_id}: dims {t.data.shape} differ from {dims}")
            if t.normalized:
                raise StoreError(f"tile {t.tile_id}: store raw reflectance, not normalized data")
            entry = {"id": t.tile_id, "file": f"tile_{t.tile_id}.bin", "split": t.split}
            (root / entry["file"]).write_bytes(t.data.astype("<f4").tobytes())
            if t.tile_id in store.labels:
                entry["labels"] = f"label_{t.tile_id}.bin"
                (root / entry["labels"]).write_bytes(
                    np.asarray(store.labels[t.tile_id]).astype("<i4").tobytes())
            if t.tile_id in store.targets:
                entry["target"] = f"target_{t.tile_id}.bin"
                (root / entry["target"]).write_bytes(
                    np.asarray(store.targets[t.tile_id]).astype("<f4").tobytes())
            entries.append(entry)
        manifest = {
            "format": "hyperkd-tiles",
            "version": FORMAT_VERSION,
            "dtype": "f32",
            "dims": dims,
            "tile_count": len(entries),
            "tiles": entries,
            "band_table": {"sensor": store.band_table.sensor_name,
                           "rows": store.band_table.to_rows()},
            "stats": store.stats.to_json() if store.stats is not None else None,
            "meta": store.meta,
        }
        tmp = root / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
        tmp.replace(root / MANIFEST)
    return root


def _read_raw(path: Path, dtype: str, shape, what: str) -> np.ndarray:
    if not path.exists():
        raise StoreError(f"{what}: missing data file {path.name}")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise StoreError(f"{what}: {path.name} has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape)


def read_store(root) -> TileStore:
    root = Path(root)
    try:
        manifest = json.loads((root / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise StoreError(f"{root}: no {MANIFEST}") from exc
    except json.JSONDecodeError as exc:
        raise StoreError(f"{root}: corrupt manifest ({exc})") from exc
    try:
        if manifest["dtype"] != "f32":
            raise StoreError(f"{root}: unsupported dtype tag {manifest['dtype']!r}")
        dims = tuple(int(d) for d in manifest["dims"])
        table = BandTable.from_rows(manifest["band_table"]["rows"],
                                    manifest["band_table"]["sensor"])
        entries = manifest["tiles"]
        if manifest.get("tile_count", len(entries)) != len(entries):
            raise StoreError(f"{root}: tile_count disagrees with tile list")
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, StoreError):
            raise
        raise StoreError(f"{root}: corrupt manifest ({exc})") from exc
    if dims[0] != len(table):
        raise StoreError(f"{root}: {dims[0]} planes but band table has {len(table)} rows")
    tiles, labels, targets = [], {}, {}
    for e in entries:
        what = f"tile {e['id']}"
        data = _read_raw(root / e["file"], "<f4", dims, what)
        tiles.append(HyperCube(data.astype(np.float64), table, tile_id=e["id"],
                               split=e.get("split", "train")))
        if "labels" in e:
            labels[e["id"]] = _read_raw(root / e["labels"], "<i4", dims[1:], what).astype(np.int64)
        if "target" in e:
            targets[e["id"]] = _read_raw(root / e["target"], "<f4", dims[1:], what).astype(np.float64)
    stats = BandStats.from_json(manifest["stats"]) if manifest.get("stats") else None
    return TileStore(tiles, table, stats, labels, targets, manifest.get("meta", {}))


def generate_store(root, seed: int, n_train: int = 16, n_eval: int = 4,
                   bands: int = 32, size: int = 32, patch_size: int = 8,
                   n_planted: int = 4, amplitude: float = 0.1,
                   n_classes: int = 4) -> TileStore:
    """Synthetic train/eval tiles with labels, targets and training-split stats."""
    table = synthetic_source_table(bands)
    tiles, labels, targets = [], {}, {}
    for k in range(n_train + n_eval):
        spec = SceneSpec(seed=seed * 100003 + k, bands=bands, height=size, width=size,
                         patch_size=patch_size, n_planted=n_planted, amplitude=amplitude,
                         n_classes=n_classes)
        tid = f"{k:04d}"
        scene = gen_scene(spec, table, tile_id=tid, split="train" if k < n_train else "eval")
        tiles.append(scene.cube)
        labels[tid] = scene.labels
        targets[tid] = scene.target
    stats = compute_stats(tiles)
    meta = {"seed": seed, "patch_size": patch_size, "n_classes": n_classes,
            "generator": "Mcg64"}
    store = TileStore(tiles, table, stats, labels, targets, meta)
    if root is not None:
        write_store(store, root)
    return store
