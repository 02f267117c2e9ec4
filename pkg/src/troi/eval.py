"""Retrieval, two-way identification and mask-quality metrics."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .grid import BinaryMask, mask_overlap
from .nn import ModelBundle, forward
from .synth import SyntheticSubject


@dataclass
class MetricsReport:
    image_retrieval_acc: float
    brain_retrieval_acc: float
    two_way_ident: float
    prior_embed_mse: float
    mask_iou: float
    mask_precision: float
    mask_recall: float
    n_candidates: int
    voxel_count: int
    two_way_passes: int = 10

    def to_text(self) -> str:
        """Flat ``key=value`` lines in field order."""
        return "".join(f"{k}={_fmt(v)}\n" for k, v in dataclasses.asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        return cls(**{k: (int(v) if types[k] in (int, "int") else float(v)) for k, v in kv.items()})

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_text())

    def table(self) -> str:
        """Two-row summary laid out like the retrieval/reconstruction tables."""
        head = ("retrieval: image | brain || reconstruction (embedding proxies): two-way | prior MSE "
                "|| mask: voxels | IoU")
        row = (f"{100 * self.image_retrieval_acc:.1f}% | {100 * self.brain_retrieval_acc:.1f}% || "
               f"{100 * self.two_way_ident:.1f}% | {self.prior_embed_mse:.4f} || "
               f"{self.voxel_count} | {self.mask_iou:.3f}   (n_candidates={self.n_candidates})")
        return head + "\n" + row


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _unit_rows(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def retrieval_accuracy(h, c, direction: str = "image") -> float:
    """Top-1 cosine retrieval among all rows as candidates.

    ``image``: each brain row retrieves an image row; ``brain``: the reverse.
    Ties go to the lowest index.
    """
    h = np.asarray(h, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if h.shape[0] != c.shape[0]:
        raise ValueError(f"row mismatch: {h.shape[0]} vs {c.shape[0]}")
    n = h.shape[0]
    if n < 2:
        raise ValueError("retrieval needs at least 2 candidates")
    sim = _unit_rows(h) @ _unit_rows(c).T
    if direction == "image":
        hits = np.argmax(sim, axis=1)
    elif direction == "brain":
        hits = np.argmax(sim, axis=0)
    else:
        raise ValueError(f"direction must be 'image' or 'brain', got {direction!r}")
    return float(np.mean(hits == np.arange(n)))


def draw_distractors(n: int, n_passes: int, rng_seed) -> np.ndarray:
    """``(n_passes, n)`` distractor indices with ``d[:, j] != j``."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else rngmod.stream(rng_seed, "two_way")
    d = rng.integers(0, n - 1, size=(n_passes, n))
    return d + (d >= np.arange(n))


def two_way_identification(p, c, rng_seed=0, n_passes: int = 10, distractors=None) -> float:
    """Fraction of samples whose prediction is strictly closer (cosine) to its
    own target than to one random distractor, averaged over passes."""
    p = np.asarray(p, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if p.shape[0] != c.shape[0]:
        raise ValueError(f"row mismatch: {p.shape[0]} vs {c.shape[0]}")
    n = p.shape[0]
    if n < 2:
        raise ValueError("two-way identification needs at least 2 samples")
    if distractors is None:
        distractors = draw_distractors(n, n_passes, rng_seed)
    distractors = np.atleast_2d(distractors)
    sim = _unit_rows(p) @ _unit_rows(c).T
    rows = np.arange(n)
    own = sim[rows, rows]
    wins = own[None, :] > sim[rows[None, :], distractors]
    return float(wins.mean())


def predict(bundle: ModelBundle, sid: str, x: np.ndarray):
    _, h, p = forward(bundle, sid, x)
    return h.data, p.data


def evaluate(bundle: ModelBundle, subject: SyntheticSubject, mask: BinaryMask | None = None, sid: str = "target",
             split: str = "test", max_candidates: int = 300, n_passes: int = 10, seed: int = 0) -> MetricsReport:
    """All metrics on one split with plain (unmixed) forward passes.

    Retrieval uses the first ``min(len(split), max_candidates)`` samples as the
    candidate pool.
    """
    idx = getattr(subject, split)
    if len(idx) == 0:
        raise ValueError(f"empty {split} split")
    idx = idx[:max_candidates]
    h, p = predict(bundle, sid, subject.fmri[idx])
    c = subject.embeddings[idx]
    if mask is None:
        mask = BinaryMask.ones(subject.dims)
    iou, prec, rec = mask_overlap(mask, subject.true_roi)
    return MetricsReport(
        image_retrieval_acc=retrieval_accuracy(h, c, "image"),
        brain_retrieval_acc=retrieval_accuracy(h, c, "brain"),
        two_way_ident=two_way_identification(p, c, seed, n_passes),
        prior_embed_mse=float(np.mean(np.sum((p - c) ** 2, axis=1))),
        mask_iou=iou, mask_precision=prec, mask_recall=rec,
        n_candidates=len(idx), voxel_count=mask.nonzero_count(), two_way_passes=n_passes,
    )
