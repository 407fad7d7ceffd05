"""Bags, the MBG1 file format, synthetic generation, and dataset splits.

A bag is one case's N x d instance-feature matrix plus per-task binary
labels (NaN marks a missing label). Features are float32 on disk and
promoted to float64 in memory, so a write/read cycle is bit-exact for
float32-representable values.

MBG1 layout, all little-endian:

    4 bytes   magic "MBG1"
    u32       N (instances)
    u32       d (feature width)
    u8        has_grid
    N x 2 u16 (row, col) per instance, only when has_grid = 1
    N*d f32   features, row-major

The manifest is a comma-separated table with header
``id,path,<task1>,...,<taskn>``; label cells are "0", "1" or empty.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    CalibrationError,
    ConfigError,
    EmptyBagError,
    SizeOverflowError,
    TruncatedFileError,
)

BAG_MAGIC = b"MBG1"
MAX_BAG_ELEMENTS = 1 << 28  # 1 GiB of float32 per bag is already absurd
PREVALENCE_TOLERANCE = 0.05


@dataclass
class Bag:
    """One case: instance features, optional grid coordinates, task labels."""

    id: str
    features: np.ndarray
    grid_coords: np.ndarray | None = None
    labels: np.ndarray | None = None
    signal_mask: np.ndarray | None = None  # generator ground truth, never serialised

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise EmptyBagError(f"bag {self.id!r} needs an N x d matrix with N >= 1")
        if not np.all(np.isfinite(self.features)):
            raise ConfigError(f"bag {self.id!r} contains non-finite features")
        if self.grid_coords is not None:
            self.grid_coords = np.asarray(self.grid_coords, dtype=np.uint16)
            if self.grid_coords.shape != (self.n, 2):
                raise ConfigError(
                    f"bag {self.id!r}: grid coordinates must be N x 2, got {self.grid_coords.shape}"
                )
            cells = {tuple(rc) for rc in self.grid_coords.tolist()}
            if len(cells) != self.n:
                raise ConfigError(f"bag {self.id!r}: grid coordinates must be unique")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def label_mask(self) -> np.ndarray:
        if self.labels is None:
            return np.zeros(0, dtype=bool)
        return ~np.isnan(self.labels)


def write_bag(bag: Bag, path) -> None:
    """Serialise one bag to MBG1. Features are stored as float32."""
    with open(path, "wb") as fh:
        fh.write(BAG_MAGIC)
        has_grid = bag.grid_coords is not None
        fh.write(struct.pack("<IIB", bag.n, bag.d, int(has_grid)))
        if has_grid:
            fh.write(np.ascontiguousarray(bag.grid_coords, dtype="<u2").tobytes())
        fh.write(np.ascontiguousarray(bag.features, dtype="<f4").tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise TruncatedFileError(f"bag file ends inside {what}")
    return data


def read_bag(path, bag_id: str | None = None) -> Bag:
    """Read an MBG1 file; the id defaults to the file stem."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(BAG_MAGIC))
        if magic != BAG_MAGIC:
            raise BadMagicError(f"{path.name}: expected magic {BAG_MAGIC!r}, found {magic!r}")
        n, d, has_grid = struct.unpack("<IIB", _read_exact(fh, 9, "the header"))
        if n < 1 or d < 1:
            raise BadMagicError(f"{path.name}: header announces empty bag (N={n}, d={d})")
        if n * d > MAX_BAG_ELEMENTS:
            raise SizeOverflowError(f"{path.name}: N*d = {n * d} exceeds {MAX_BAG_ELEMENTS}")
        coords = None
        if has_grid:
            raw = _read_exact(fh, 4 * n, "the grid coordinates")
            coords = np.frombuffer(raw, dtype="<u2").reshape(n, 2)
        raw = _read_exact(fh, 4 * n * d, "the feature payload")
        feats = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float64)
        trailing = fh.read(1)
        if trailing:
            raise TruncatedFileError(f"{path.name}: trailing bytes after the feature payload")
    return Bag(id=bag_id or path.stem, features=feats, grid_coords=coords)


def normalize_features(features: np.ndarray) -> np.ndarray:
    """Linear per-column min-max map onto [-1, 1]; constant columns map to 0."""
    x = np.asarray(features, dtype=np.float64)
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = 2.0 * (x - lo) / safe - 1.0
    return np.where(span > 0, out, 0.0)


def normalize_bags(bags: list[Bag]) -> list[Bag]:
    """Min-max normalise all bags against dataset-wide column ranges.

    Results are rounded through float32 so normalised bags still
    round-trip bit-exact through MBG1 files.
    """
    if not bags:
        return bags
    lo = np.min([b.features.min(axis=0) for b in bags], axis=0)
    hi = np.max([b.features.max(axis=0) for b in bags], axis=0)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    for bag in bags:
        scaled = 2.0 * (bag.features - lo) / safe - 1.0
        scaled = np.where(span > 0, scaled, 0.0)
        bag.features = scaled.astype(np.float32).astype(np.float64)
    return bags


@dataclass
class SyntheticSpec:
    """Recipe for a correlated multi-task bag dataset.

    Task labels are thresholded linear readouts of a shared latent
    vector, so tasks whose loading rows overlap are correlated.
    Positive bags receive task-specific additive signal directions on a
    random ``signal_fraction`` subset of their instances; everything
    else is Gaussian noise.
    """

    tasks: int
    bags: int
    patch_range: tuple[int, int]
    d: int
    prevalence: np.ndarray
    latent_dim: int
    task_loadings: np.ndarray
    signal_fraction: float = 0.3
    signal_strength: float = 2.0
    noise_sd: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.prevalence = np.asarray(self.prevalence, dtype=np.float64)
        self.task_loadings = np.asarray(self.task_loadings, dtype=np.float64)
        if self.tasks < 1 or self.bags < 1 or self.d < 1 or self.latent_dim < 1:
            raise ConfigError("tasks, bags, d and latent_dim must all be positive")
        if self.prevalence.shape != (self.tasks,):
            raise ConfigError(f"prevalence must have one entry per task, got {self.prevalence.shape}")
        if np.any(self.prevalence <= 0) or np.any(self.prevalence >= 1):
            raise ConfigError("prevalence targets must lie strictly inside (0, 1)")
        if self.task_loadings.shape != (self.tasks, self.latent_dim):
            raise ConfigError(
                f"task_loadings must be tasks x latent_dim, got {self.task_loadings.shape}"
            )
        if not 0 < self.signal_fraction <= 1:
            raise ConfigError("signal_fraction must lie in (0, 1]")
        lo, hi = self.patch_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"patch_range must satisfy 1 <= min <= max, got {self.patch_range}")


@dataclass
class ManifestEntry:
    id: str
    path: str
    labels: np.ndarray  # {0, 1, nan}


@dataclass
class Manifest:
    task_names: list[str]
    entries: list[ManifestEntry] = field(default_factory=list)


def _row_major_grid(n: int) -> np.ndarray:
    side = math.isqrt(n)
    if side * side < n:
        side += 1
    idx = np.arange(n)
    return np.stack([idx // side, idx % side], axis=1).astype(np.uint16)


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[Bag], Manifest]:
    """Draw a deterministic dataset of labelled bags from ``spec``.

    Per-task thresholds are calibrated on the realised latent scores
    (empirical quantiles), so achieved prevalence tracks the target; a
    miss beyond 0.05 raises CalibrationError with the achieved rate.
    """
    rng = np.random.default_rng(spec.seed)
    latent = rng.standard_normal((spec.bags, spec.latent_dim))
    label_noise = rng.standard_normal((spec.bags, spec.tasks)) * spec.noise_sd
    scores = latent @ spec.task_loadings.T + label_noise

    labels = np.zeros((spec.bags, spec.tasks))
    # a dataset of B bags can only realise prevalences on a 1/B lattice
    tolerance = max(PREVALENCE_TOLERANCE, 1.0 / spec.bags)
    for t in range(spec.tasks):
        threshold = np.quantile(scores[:, t], 1.0 - spec.prevalence[t])
        labels[:, t] = (scores[:, t] > threshold).astype(np.float64)
        achieved = labels[:, t].mean()
        if abs(achieved - spec.prevalence[t]) > tolerance:
            raise CalibrationError(t, float(spec.prevalence[t]), float(achieved))

    # each latent signal owns a unit feature direction; a task's signal is
    # its loading mix of those, so overlapping loadings mean overlapping
    # feature signatures (and magnitudes tracking the loading norm) as
    # well as correlated labels
    latent_directions = rng.standard_normal((spec.latent_dim, spec.d))
    latent_directions /= np.linalg.norm(latent_directions, axis=1, keepdims=True)
    directions = spec.task_loadings @ latent_directions

    lo, hi = spec.patch_range
    width = len(str(spec.bags - 1)) if spec.bags > 1 else 1
    bags: list[Bag] = []
    for b in range(spec.bags):
        n = int(rng.integers(lo, hi + 1))
        feats = rng.standard_normal((n, spec.d)) * spec.noise_sd
        n_signal = max(1, round(spec.signal_fraction * n))
        chosen = rng.choice(n, size=n_signal, replace=False)
        mask = np.zeros(n, dtype=bool)
        positive = labels[b] == 1.0
        if positive.any():
            feats[chosen] += spec.signal_strength * directions[positive].sum(axis=0)
            mask[chosen] = True
        bags.append(
            Bag(
                id=f"bag{b:0{max(width, 4)}d}",
                features=feats,
                grid_coords=_row_major_grid(n),
                labels=labels[b].copy(),
                signal_mask=mask,
            )
        )
    normalize_bags(bags)

    manifest = Manifest(
        task_names=[f"task{t + 1}" for t in range(spec.tasks)],
        entries=[ManifestEntry(bag.id, f"bags/{bag.id}.mbg", bag.labels.copy()) for bag in bags],
    )
    return bags, manifest


def write_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "path"] + manifest.task_names)
        for entry in manifest.entries:
            cells = ["" if np.isnan(v) else str(int(v)) for v in entry.labels]
            writer.writerow([entry.id, entry.path] + cells)


def read_manifest(path) -> Manifest:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["id", "path"]:
        raise ConfigError(f"{path}: manifest must start with the 'id,path,...' header")
    task_names = rows[0][2:]
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for row in rows[1:]:
        if not row:
            continue
        if len(row) != 2 + len(task_names):
            raise ConfigError(f"{path}: row for {row[0]!r} has {len(row)} cells")
        bag_id, bag_path, *cells = row
        if bag_id in seen:
            raise ConfigError(f"{path}: duplicate bag id {bag_id!r}")
        seen.add(bag_id)
        labels = np.empty(len(task_names))
        for i, cell in enumerate(cells):
            if cell == "":
                labels[i] = np.nan
            elif cell in ("0", "1"):
                labels[i] = float(cell)
            else:
                raise ConfigError(f"{path}: label cell must be '0', '1' or empty, got {cell!r}")
        entries.append(ManifestEntry(bag_id, bag_path, labels))
    return Manifest(task_names=task_names, entries=entries)


def write_dataset(bags: list[Bag], manifest: Manifest, out_dir) -> Path:
    """Write bag files plus manifest under ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "bags").mkdir(parents=True, exist_ok=True)
    for bag, entry in zip(bags, manifest.entries):
        write_bag(bag, out_dir / entry.path)
    manifest_path = out_dir / "manifest.csv"
    write_manifest(manifest, manifest_path)
    return manifest_path


def load_dataset(manifest_path) -> tuple[list[Bag], list[str]]:
    """Read a manifest and every bag it references, attaching labels."""
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    base = manifest_path.parent
    bags = []
    for entry in manifest.entries:
        bag = read_bag(base / entry.path, bag_id=entry.id)
        bag.labels = entry.labels.copy()
        bags.append(bag)
    return bags, manifest.task_names


def split_train_test(ids: list[str], seed: int) -> tuple[list[str], list[str]]:
    """Seeded shuffle, then a 4:1 contiguous train/test partition."""
    if len(ids) < 2:
        raise ConfigError(f"need at least 2 ids to split, got {len(ids)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n_test = max(1, len(ids) // 5)
    shuffled = [ids[i] for i in order]
    return shuffled[n_test:], shuffled[:n_test]


@dataclass
class FoldSplit:
    folds: list[list[str]]
    test_ids: list[str] = field(default_factory=list)


def kfold(train_ids: list[str], k: int = 5, seed: int = 0, test_ids=()) -> FoldSplit:
    """Seeded shuffle then contiguous folds whose sizes differ by at most 1."""
    if k < 1 or len(train_ids) < k:
        raise ConfigError(f"cannot form {k} folds from {len(train_ids)} ids")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(train_ids))
    shuffled = [train_ids[i] for i in order]
    base, extra = divmod(len(shuffled), k)
    folds = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append(shuffled[start : start + size])
        start += size
    return FoldSplit(folds=folds, test_ids=list(test_ids))


def make_fold_split(ids: list[str], k: int = 5, seed: int = 0) -> FoldSplit:
    """4:1 train/test split followed by k folds over the training ids."""
    train_ids, test_ids = split_train_test(ids, seed)
    return kfold(train_ids, k=k, seed=seed, test_ids=test_ids)
