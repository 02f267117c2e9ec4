"""Synthetic subjects with planted ROIs, z-scoring and MixCo batch mixing."""
from __future__ import annotations

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .grid import BinaryMask, VoxelGrid, mask_from_dict, mask_to_dict


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]

    def contains(self, dims) -> np.ndarray:
        """Boolean grid of lattice points inside (boundary inclusive)."""
        idx = np.indices(dims, dtype=np.float64)
        q = sum(((idx[a] - self.center[a]) / self.radii[a]) ** 2 for a in range(3))
        return q <= 1.0


@dataclass(frozen=True)
class SyntheticSubjectSpec:
    dims: tuple[int, int, int] = (20, 20, 20)
    embed_dim: int = 16
    roi_spec: tuple[Ellipsoid, ...] = (Ellipsoid((10.0, 10.0, 10.0), (5.2, 5.0, 4.5)),)
    snr: float = 2.0
    n_samples: int = 400
    seed: int = 0
    # Test samples are the last n_test; the train split is the leading block.
    n_test: int = 100

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "roi_spec", tuple(
            e if isinstance(e, Ellipsoid) else Ellipsoid(tuple(e["center"]), tuple(e["radii"]))
            for e in self.roi_spec))

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if not self.snr > 0:
            raise ValueError(f"snr must be positive, got {self.snr}")
        if not 0 <= self.n_test < self.n_samples:
            raise ValueError(f"n_test must lie in [0, n_samples), got {self.n_test}")
        for e in self.roi_spec:
            for a in range(3):
                if e.radii[a] <= 0:
                    raise ValueError(f"ellipsoid radii must be positive: {e}")
                if e.center[a] - e.radii[a] < -0.5 or e.center[a] + e.radii[a] > self.dims[a] - 0.5:
                    raise ValueError(f"ellipsoid {e} out of bounds for grid {self.dims}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dims"] = list(self.dims)
        d["roi_spec"] = [{"center": list(e.center), "radii": list(e.radii)} for e in self.roi_spec]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSubjectSpec":
        d = dict(d)
        d["dims"] = tuple(d["dims"])
        d["roi_spec"] = tuple(Ellipsoid(tuple(e["center"]), tuple(e["radii"])) for e in d["roi_spec"])
        return cls(**d)


@dataclass
class SyntheticSubject:
    """Paired (fMRI, embedding) samples for one subject.

    ``fmri`` is ``(n_samples, nx*ny*nz)`` in row-major voxel order and
    ``embeddings`` is ``(n_samples, embed_dim)``; embedding rows play the role
    of the frozen image encoder's output.
    """

    spec: SyntheticSubjectSpec
    true_roi: BinaryMask
    forward_map: np.ndarray
    fmri: np.ndarray
    embeddings: np.ndarray
    train: np.ndarray
    test: np.ndarray

    @property
    def dims(self):
        return self.spec.dims

    @property
    def n_voxels(self) -> int:
        return math.prod(self.spec.dims)

    def sample(self, j: int) -> tuple[VoxelGrid, np.ndarray]:
        return VoxelGrid.from_flat(self.dims, self.fmri[j]), self.embeddings[j]


def planted_roi(spec: SyntheticSubjectSpec) -> BinaryMask:
    inside = np.zeros(spec.dims, dtype=bool)
    for e in spec.roi_spec:
        inside |= e.contains(spec.dims)
    return BinaryMask(inside.astype(np.uint8))


def unit_sphere(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_subject(spec: SyntheticSubjectSpec) -> SyntheticSubject:
    spec.validate()
    roi = planted_roi(spec)
    roi_idx = roi.indices()
    if len(roi_idx) < spec.embed_dim:
        warnings.warn(f"ROI has {len(roi_idx)} voxels for embed_dim {spec.embed_dim}; decoding is under-determined")

    fmap = rngmod.stream(spec.seed, "forward_map").standard_normal((len(roi_idx), spec.embed_dim))
    emb = unit_sphere(rngmod.stream(spec.seed, "embeddings"), spec.n_samples, spec.embed_dim)

    n_vox = math.prod(spec.dims)
    signal = emb @ fmap.T
    fmri = np.zeros((spec.n_samples, n_vox))
    fmri[:, roi_idx] = signal
    noise_std = signal.std() / spec.snr if signal.size else 1.0 / spec.snr
    fmri += noise_std * rngmod.stream(spec.seed, "noise").standard_normal(fmri.shape)

    n_train = spec.n_samples - spec.n_test
    return SyntheticSubject(
        spec=spec, true_roi=roi, forward_map=fmap, fmri=fmri, embeddings=emb,
        train=np.arange(n_train), test=np.arange(n_train, spec.n_samples),
    )


def zscore(subject: SyntheticSubject, min_std: float = 1e-8) -> SyntheticSubject:
    """Voxel-wise z-score with statistics from the train split only.

    Voxels whose train std is below ``min_std`` are centered but not scaled.
    """
    if len(subject.train) == 0:
        raise ValueError("cannot z-score: empty train split")
    if len(subject.train) < 2:
        raise ValueError("z-score needs at least 2 training samples")
    tr = subject.fmri[subject.train]
    mean = tr.mean(axis=0)
    std = tr.std(axis=0)
    std = np.where(std < min_std, 1.0, std)
    return dataclasses.replace(subject, fmri=(subject.fmri - mean) / std)


# --- MixCo ---------------------------------------------------------------------

@dataclass
class MixupBatch:
    """A batch after mixing. ``targets_a[j] = j`` and ``targets_b[j] = k_j``."""

    inputs: np.ndarray
    targets_a: np.ndarray
    targets_b: np.ndarray
    lambdas: np.ndarray
    alpha: float = 0.2
    beta: float = 0.2

    def __len__(self):
        return len(self.lambdas)

    @classmethod
    def plain(cls, x: np.ndarray) -> "MixupBatch":
        """Unmixed batch: lambda = 1 and k_j = j."""
        x = np.asarray(x, dtype=np.float64)
        idx = np.arange(len(x))
        return cls(x, idx, idx.copy(), np.ones(len(x)), alpha=math.inf, beta=math.inf)

    def grids(self, dims) -> list[VoxelGrid]:
        return [VoxelGrid.from_flat(dims, row) for row in self.inputs]

    def mixed_targets(self, c: np.ndarray) -> np.ndarray:
        """lambda_j c_j + (1 - lambda_j) c_{k_j}, using the same lambda as the inputs."""
        lam = self.lambdas[:, None]
        return lam * c[self.targets_a] + (1.0 - lam) * c[self.targets_b]


def mixco_mix(batch_x, alpha: float = 0.2, beta: float = 0.2, rng_seed=0,
              lambdas=None, partners=None) -> MixupBatch:
    """Mix each sample with a random other sample of the same batch.

    ``batch_x`` is a list of :class:`VoxelGrid` or a ``(B, n_voxels)`` array.
    ``rng_seed`` may be an int or a ``numpy.random.Generator``. ``lambdas`` and
    ``partners`` override the random draws.
    """
    if not (alpha > 0 and beta > 0):
        raise ValueError(f"Beta shape parameters must be positive, got alpha={alpha}, beta={beta}")
    if len(batch_x) == 0:
        raise ValueError("empty batch")
    if isinstance(batch_x[0], VoxelGrid):
        x = np.stack([g.flat() for g in batch_x])
    else:
        x = np.asarray(batch_x, dtype=np.float64)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else rngmod.stream(rng_seed, "mixco")
    b = len(x)
    idx = np.arange(b)
    if partners is None:
        if b > 1:
            k = rng.integers(0, b - 1, size=b)
            partners = k + (k >= idx)
        else:
            partners = idx.copy()
    partners = np.asarray(partners, dtype=np.int64)
    if lambdas is None:
        lambdas = rng.beta(alpha, beta, size=b)
    lambdas = np.broadcast_to(np.asarray(lambdas, dtype=np.float64), (b,)).copy()
    lam = lambdas[:, None]
    mixed = lam * x + (1.0 - lam) * x[partners]
    return MixupBatch(mixed, idx, partners, lambdas, alpha=alpha, beta=beta)


# --- subject files ---------------------------------------------------------------

def subject_to_dict(s: SyntheticSubject) -> dict:
    return {
        "spec": s.spec.to_dict(),
        "true_roi": mask_to_dict(s.true_roi),
        "forward_map": s.forward_map.tolist(),
        "samples": [{"fmri": f.tolist(), "embedding": e.tolist()} for f, e in zip(s.fmri, s.embeddings)],
        "split": {"train": s.train.tolist(), "test": s.test.tolist()},
    }


def subject_from_dict(d: dict) -> SyntheticSubject:
    spec = SyntheticSubjectSpec.from_dict(d["spec"])
    emb_dim = spec.embed_dim
    samples = d["samples"]
    return SyntheticSubject(
        spec=spec,
        true_roi=mask_from_dict(d["true_roi"]),
        forward_map=np.asarray(d.get("forward_map", []), dtype=np.float64).reshape(-1, emb_dim),
        fmri=np.asarray([s["fmri"] for s in samples], dtype=np.float64),
        embeddings=np.asarray([s["embedding"] for s in samples], dtype=np.float64),
        train=np.asarray(d["split"]["train"], dtype=np.int64),
        test=np.asarray(d["split"]["test"], dtype=np.int64),
    )


def save_subject(s: SyntheticSubject, path) -> None:
    Path(path).write_text(json.dumps(subject_to_dict(s)))


def load_subject(path) -> SyntheticSubject:
    return subject_from_dict(json.loads(Path(path).read_text()))
