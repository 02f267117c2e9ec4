"""Contrastive (MixCo), prior-reconstruction and L1 mask losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .synth import MixupBatch

STAGES = ("pretrain", "stage1", "stage2")


@dataclass
class LossConfig:
    tau: float = 0.1
    epsilon: float = 1.0
    psi: float = 0.0
    mix_stop_fraction: float = 1.0 / 3.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.epsilon < 0 or self.psi < 0:
            raise ValueError("epsilon and psi must be nonnegative")
        if not 0 < self.mix_stop_fraction <= 1:
            raise ValueError(f"mix_stop_fraction must lie in (0, 1], got {self.mix_stop_fraction}")


def soft_targets(batch: MixupBatch) -> np.ndarray:
    """B x B matrix with lambda_j at (j, j) and 1 - lambda_j at (j, k_j)."""
    b = len(batch)
    t = np.zeros((b, b))
    rows = np.arange(b)
    np.add.at(t, (rows, batch.targets_a), batch.lambdas)
    np.add.at(t, (rows, batch.targets_b), 1.0 - batch.lambdas)
    return t


def mixco_contrastive(h: Tensor, c, batch: MixupBatch, tau: float = 0.1) -> Tensor:
    """Symmetric MixCo loss between brain embeddings ``h`` and targets ``c``.

    Both directions use the same soft targets; with every lambda = 1 this is
    the usual symmetric InfoNCE.
    """
    c = c if isinstance(c, Tensor) else Tensor(c)
    b = h.shape[0]
    if b < 2:
        raise ValueError(f"contrastive loss needs a batch of at least 2, got {b}")
    if c.shape[0] != b or len(batch) != b:
        raise ValueError(f"batch size mismatch: h {h.shape}, c {c.shape}, batch {len(batch)}")
    sim = ad.scale(ad.matmul(ad.normalize_rows(h), ad.transpose(ad.normalize_rows(c))), 1.0 / tau)
    t = soft_targets(batch)
    brain_to_image = ad.weighted_sum(ad.log_softmax(sim, axis=1), t)
    image_to_brain = ad.weighted_sum(ad.log_softmax(sim, axis=0), t)
    return ad.scale(ad.add(brain_to_image, image_to_brain), -0.5 / b)


def prior_mse(p: Tensor, c, batch: MixupBatch) -> Tensor:
    """Mean over the batch of ||p_j - (lambda_j c_j + (1 - lambda_j) c_{k_j})||^2."""
    c = np.asarray(c.data if isinstance(c, Tensor) else c, dtype=np.float64)
    if p.shape != c.shape:
        raise ValueError(f"shape mismatch: prior output {p.shape} vs targets {c.shape}")
    target = batch.mixed_targets(c)
    return ad.scale(ad.sum_squares(ad.sub(p, Tensor(target))), 1.0 / p.shape[0])


def l1_mask_penalty(mask, frozen=None) -> Tensor:
    """Sum of |weights| over unfrozen entries.

    ``mask`` is either the mask parameter tensor (with ``frozen`` flags) or a
    :class:`~troi.grid.WeightedMask`.
    """
    if not isinstance(mask, Tensor):
        frozen = mask.frozen.ravel()
        mask = Tensor(mask.weights.reshape(1, -1))
    active = None if frozen is None else ~np.asarray(frozen, dtype=bool).reshape(mask.shape)
    return ad.l1_norm(mask, active)


def total_loss(clip, prior, l1, cfg: LossConfig, stage: str) -> Tensor:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    clip, prior = ad._as_tensor(clip), ad._as_tensor(prior)
    out = ad.add(clip, ad.scale(prior, cfg.epsilon))
    if stage == "stage1" and l1 is not None:
        out = ad.add(out, ad.scale(ad._as_tensor(l1), cfg.psi))
    return out
