"""Dense voxel grids and masks.

All grids are stored as C-ordered numpy arrays of shape ``(nx, ny, nz)``, so
flattening is row-major with x slowest. Mask files written here therefore
round-trip bit-exactly between runs.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

Dims = tuple[int, int, int]


def _check_dims(dims) -> Dims:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ValueError(f"dims must be three positive integers, got {dims}")
    return dims


@dataclass
class VoxelGrid:
    """A dense 3D scalar field (one fMRI sample or any mask-shaped map)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"VoxelGrid values must be 3D, got shape {self.values.shape}")
        _check_dims(self.values.shape)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("VoxelGrid values must be finite")

    @classmethod
    def from_flat(cls, dims, flat) -> "VoxelGrid":
        dims = _check_dims(dims)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != math.prod(dims):
            raise ValueError(f"expected {math.prod(dims)} values for dims {dims}, got {flat.size}")
        return cls(flat.reshape(dims))

    @property
    def dims(self) -> Dims:
        return self.values.shape

    def flat(self) -> np.ndarray:
        return self.values.ravel()


@dataclass
class WeightedMask:
    """Relaxed, trainable mask. ``frozen`` entries are permanently zero."""

    weights: np.ndarray
    frozen: np.ndarray = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        _check_dims(self.weights.shape)
        if self.frozen is None:
            self.frozen = np.zeros(self.weights.shape, dtype=bool)
        self.frozen = np.asarray(self.frozen, dtype=bool)
        if self.frozen.shape != self.weights.shape:
            raise ValueError("frozen flags must match weight dims")
        if np.any(self.weights < 0):
            raise ValueError("mask weights must be nonnegative")
        if np.any(self.weights[self.frozen] != 0):
            raise ValueError("frozen mask entries must be zero")

    @classmethod
    def ones(cls, dims) -> "WeightedMask":
        return cls(np.ones(_check_dims(dims)))

    @property
    def dims(self) -> Dims:
        return self.weights.shape

    def values(self) -> np.ndarray:
        return self.weights

    def nonzero_count(self) -> int:
        return int(np.count_nonzero(self.weights))

    def copy(self) -> "WeightedMask":
        return WeightedMask(self.weights.copy(), self.frozen.copy())


@dataclass
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        _check_dims(bits.shape)
        if not np.all((bits == 0) | (bits == 1)):
            raise ValueError("binary mask entries must be 0 or 1")
        self.bits = bits.astype(np.uint8)

    @classmethod
    def ones(cls, dims) -> "BinaryMask":
        return cls(np.ones(_check_dims(dims), dtype=np.uint8))

    @classmethod
    def zeros(cls, dims) -> "BinaryMask":
        return cls(np.zeros(_check_dims(dims), dtype=np.uint8))

    @property
    def dims(self) -> Dims:
        return self.bits.shape

    def values(self) -> np.ndarray:
        return self.bits

    def nonzero_count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def indices(self) -> np.ndarray:
        """Flat row-major indices of the selected voxels, ascending."""
        return np.flatnonzero(self.bits.ravel())


@dataclass(frozen=True)
class FilterConfig:
    """Truncated isotropic Gaussian. ``radius`` defaults to ceil(3 sigma)."""

    sigma: float = 1.0
    radius: int = field(default=None)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.radius is None:
            object.__setattr__(self, "radius", max(1, math.ceil(3 * self.sigma)))
        if int(self.radius) != self.radius or self.radius < 1:
            raise ValueError(f"radius must be a positive integer, got {self.radius}")
        if self.radius < math.ceil(2 * self.sigma):
            raise ValueError(f"radius {self.radius} too small for sigma {self.sigma} (need >= ceil(2 sigma))")

    def taps(self) -> np.ndarray:
        """Unnormalized 1D kernel over offsets -radius..radius."""
        offsets = np.arange(-self.radius, self.radius + 1, dtype=np.float64)
        return np.exp(-(offsets ** 2) / (2.0 * self.sigma ** 2))


def apply_mask(x: VoxelGrid, m: WeightedMask | BinaryMask) -> VoxelGrid:
    """Hadamard product of a grid with a mask; the input is left untouched."""
    if x.dims != m.dims:
        raise ValueError(f"dimension mismatch: grid {x.dims} vs mask {m.dims}")
    return VoxelGrid(x.values * m.values())


def _correlate_axis(a: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    r = (len(taps) - 1) // 2
    n = a.shape[axis]
    moved = np.moveaxis(a, axis, 0)
    out = np.zeros_like(moved)
    for k, w in enumerate(taps):
        off = k - r
        lo, hi = max(0, -off), min(n, n - off)
        if lo >= hi:
            continue
        out[lo:hi] += w * moved[lo + off:hi + off]
    return np.moveaxis(out, 0, axis)


def smooth(values: np.ndarray, cfg: FilterConfig) -> np.ndarray:
    """Separable Gaussian smoothing of a 3D array, renormalized at the edges.

    Each axis pass divides by the sum of the in-bounds taps, which is the same
    as renormalizing the full 3D kernel over the in-bounds box.
    """
    taps = cfg.taps()
    out = np.asarray(values, dtype=np.float64)
    for axis in range(3):
        norm = _correlate_axis(np.ones(out.shape[axis]), taps, 0)
        shape = [1, 1, 1]
        shape[axis] = -1
        out = _correlate_axis(out, taps, axis) / norm.reshape(shape)
    return out


def gaussian_filter(m: WeightedMask, cfg: FilterConfig) -> WeightedMask:
    """Low-pass filter a weighted mask. Frozen flags are not carried over."""
    return WeightedMask(np.maximum(smooth(m.weights, cfg), 0.0))


def binarize(m: WeightedMask, th: float) -> BinaryMask:
    if not th > 0:
        raise ValueError(f"threshold must be positive, got {th}")
    return BinaryMask((m.weights > th).astype(np.uint8))


def hard_threshold_in_place(m: WeightedMask, th: float) -> WeightedMask:
    """Zero and freeze every weight <= th. Returns ``m`` for chaining."""
    if not th > 0:
        raise ValueError(f"threshold must be positive, got {th}")
    dead = m.weights <= th
    m.weights[dead] = 0.0
    m.frozen |= dead
    return m


def mask_overlap(a: BinaryMask, b: BinaryMask) -> tuple[float, float, float]:
    """(IoU, precision, recall) of ``a`` measured against reference ``b``."""
    if a.dims != b.dims:
        raise ValueError(f"dimension mismatch: {a.dims} vs {b.dims}")
    aa = a.bits.astype(bool)
    bb = b.bits.astype(bool)
    inter = int(np.count_nonzero(aa & bb))
    union = int(np.count_nonzero(aa | bb))
    na, nb = int(aa.sum()), int(bb.sum())
    iou = inter / union if union else 1.0
    precision = inter / na if na else 0.0
    recall = inter / nb if nb else 0.0
    return iou, precision, recall


# --- mask files --------------------------------------------------------------

def mask_to_dict(m: WeightedMask | BinaryMask) -> dict:
    if isinstance(m, BinaryMask):
        return {"dims": list(m.dims), "kind": "binary", "values": [int(v) for v in m.bits.ravel()]}
    doc = {"dims": list(m.dims), "kind": "weighted", "values": m.weights.ravel().tolist()}
    if m.frozen.any():
        doc["frozen"] = np.flatnonzero(m.frozen.ravel()).tolist()
    return doc


def mask_from_dict(doc: dict) -> WeightedMask | BinaryMask:
    try:
        dims = _check_dims(doc["dims"])
        kind = doc["kind"]
        values = np.asarray(doc["values"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed mask document: {exc}") from exc
    if values.size != math.prod(dims):
        raise ValueError(f"malformed mask document: {values.size} values for dims {dims}")
    if kind == "binary":
        return BinaryMask(values.reshape(dims))
    if kind == "weighted":
        frozen = np.zeros(math.prod(dims), dtype=bool)
        frozen[np.asarray(doc.get("frozen", []), dtype=np.int64)] = True
        return WeightedMask(values.astype(np.float64).reshape(dims), frozen.reshape(dims))
    raise ValueError(f"malformed mask document: unknown kind {kind!r}")


def save_mask(m: WeightedMask | BinaryMask, path) -> None:
    Path(path).write_text(json.dumps(mask_to_dict(m)))


def load_mask(path) -> WeightedMask | BinaryMask:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed mask file {path}: {exc}") from exc
    return mask_from_dict(doc)


def export_pgm_slices(m: WeightedMask | BinaryMask, out_dir, prefix: str = "slice") -> list[Path]:
    """Write one binary (P5) PGM per z-slice, scaled so the max weight is 255.

    Slice ``k`` is the ``values[:, :, k]`` plane: nx rows of ny pixels.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vals = np.asarray(m.values(), dtype=np.float64)
    peak = vals.max()
    scaled = vals / peak if peak > 0 else np.zeros_like(vals)
    pixels = np.rint(255.0 * scaled).astype(np.uint8)
    nx, ny, nz = m.dims
    width = len(str(nz - 1))
    paths = []
    for k in range(nz):
        path = out_dir / f"{prefix}_{k:0{width}d}.pgm"
        header = f"P5\n{ny} {nx}\n255\n".encode("ascii")
        path.write_bytes(header + np.ascontiguousarray(pixels[:, :, k]).tobytes())
        paths.append(path)
    return paths


def read_pgm(path) -> np.ndarray:
    """Minimal reader for the P5 files produced by :func:`export_pgm_slices`."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    width, height = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width)
