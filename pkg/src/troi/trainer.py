"""Cross-subject pretraining, Stage 1 sparse mask training and Stage 2
learning-rate rewinding."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import loss as L
from . import rng as rngmod
from .grid import (BinaryMask, FilterConfig, WeightedMask, binarize, gaussian_filter,
                   hard_threshold_in_place)
from .nn import ModelBundle, ModelDims, forward, init_params, load_checkpoint, save_checkpoint
from .synth import MixupBatch, SyntheticSubject, mixco_mix

log = logging.getLogger(__name__)


class BudgetUnreachable(RuntimeError):
    """Stage 1 hit max_iters; ``result`` holds the state at the last iteration."""

    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


# --- schedule & optimizer -------------------------------------------------------------

@dataclass
class Schedule:
    """Linear warmup then cosine decay, indexed by epoch only."""

    total_epochs: int = 150
    warmup_epochs: int = 5
    base_lr: float = 1e-3
    min_lr: float = 1e-5

    def __post_init__(self):
        if self.total_epochs < 1 or self.warmup_epochs < 0:
            raise ValueError(f"invalid schedule {self}")


def lr_at(schedule: Schedule, epoch: int) -> float:
    s = schedule
    if not 0 <= epoch < s.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {s.total_epochs})")
    if epoch < s.warmup_epochs:
        return s.base_lr * (epoch + 1) / s.warmup_epochs
    span = s.total_epochs - 1 - s.warmup_epochs
    if span <= 0:
        return s.min_lr if epoch == s.total_epochs - 1 else s.base_lr
    t = (epoch - s.warmup_epochs) / span
    return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + math.cos(math.pi * t))


class Adam:
    """Adam over named parameters; state is JSON-serializable for checkpoints."""

    def __init__(self, betas=(0.9, 0.999), eps=1e-8):
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, lr: float, lr_scale: dict[str, float] | None = None):
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            step = lr * (lr_scale or {}).get(name, 1.0)
            p.data -= step * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"step": self.step_count,
                "m": {k: v.ravel().tolist() for k, v in self.m.items()},
                "v": {k: v.ravel().tolist() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict, params) -> None:
        shapes = {n: p.shape for n, p in params}
        self.step_count = state["step"]
        self.m = {k: np.asarray(v, dtype=np.float64).reshape(shapes[k]) for k, v in state["m"].items()}
        self.v = {k: np.asarray(v, dtype=np.float64).reshape(shapes[k]) for k, v in state["v"].items()}


# --- configs & reports -----------------------------------------------------------------

@dataclass
class TrainConfig:
    schedule: Schedule = field(default_factory=Schedule)
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    batch_size: int = 24
    mix_alpha: float = 0.2
    mix_beta: float = 0.2
    seed: int = 0
    dims: ModelDims = field(default_factory=ModelDims)
    train_backbone: bool = True
    checkpoint_every: int = 0

    def mix_epochs(self) -> int:
        return math.ceil(self.schedule.total_epochs * self.loss.mix_stop_fraction)


@dataclass
class Stage1Config:
    budget: int = 600
    th: float = 0.05
    psi0: float = 1e-3
    psi_growth: float = 1.5
    stall_patience: int = 3
    # An iteration counts as progress only if |M'| drops below (1 - min_progress) * best.
    min_progress: float = 0.02
    epochs_per_iter: int = 1
    max_iters: int = 100
    filter: FilterConfig = field(default_factory=FilterConfig)
    use_filter: bool = True
    lr: float = 1e-3
    mask_lr: float = 0.05
    batch_size: int = 24
    mix: bool = True
    train_backbone: bool = True
    train_prior: bool = True

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError(f"voxel budget must be >= 1, got {self.budget}")
        if not self.th > 0:
            raise ValueError(f"threshold must be positive, got {self.th}")
        if self.psi_growth < 1 or self.max_iters < 1 or self.epochs_per_iter < 1:
            raise ValueError(f"invalid stage 1 config {self}")


@dataclass
class TrainReport:
    phase: str
    records: list[dict] = field(default_factory=list)
    wall: list[float] = field(default_factory=list)
    checkpoint: str | None = None

    @property
    def lr_trace(self) -> list[float]:
        return [r["lr"] for r in self.records]

    @property
    def mask_trace(self) -> list[int]:
        return [r["mask_nnz"] for r in self.records if "mask_nnz" in r]

    def to_dict(self) -> dict:
        """Deterministic content only; wall-clock times go to :meth:`timing`."""
        return {"phase": self.phase, "records": self.records, "checkpoint": self.checkpoint}

    def timing(self) -> dict:
        return {"phase": self.phase, "wall_seconds": self.wall}

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        path.with_suffix(".timing.log").write_text(json.dumps(self.timing()))


# --- the training loop ----------------------------------------------------------------

def _batches(rng, idx: np.ndarray, batch_size: int) -> list[np.ndarray]:
    perm = rng.permutation(idx)
    out = [perm[i:i + batch_size] for i in range(0, len(perm), batch_size)]
    return [b for b in out if len(b) >= 2]


def _step(bundle: ModelBundle, sid, subject: SyntheticSubject, rows, mix: bool, cfg_loss: L.LossConfig,
          stage: str, rng, alpha, beta):
    x = subject.fmri[rows]
    c = subject.embeddings[rows]
    batch = mixco_mix(x, alpha, beta, rng) if mix else MixupBatch.plain(x)
    _, h, p = forward(bundle, sid, batch)
    clip = L.mixco_contrastive(h, c, batch, cfg_loss.tau)
    prior = L.prior_mse(p, c, batch)
    l1 = None
    layer = bundle.troi[sid]
    if stage == "stage1":
        l1 = L.l1_mask_penalty(layer.mask, layer.frozen)
    total = L.total_loss(clip, prior, l1, cfg_loss, stage)
    bundle.zero_grad()
    total.backward()
    if not np.isfinite(total.item()):
        raise FloatingPointError("non-finite loss")
    return clip.item(), prior.item(), (0.0 if l1 is None else l1.item()), total.item()


def _project_masks(bundle: ModelBundle):
    for layer in bundle.troi.values():
        if layer.mask is not None:
            np.maximum(layer.mask.data, 0.0, out=layer.mask.data)
            layer.mask.data[0, layer.frozen] = 0.0


class _Run:
    """One resumable training phase over a fixed set of subjects."""

    def __init__(self, phase, bundle, jobs: dict[str, SyntheticSubject], stage, loss_cfg, batch_size,
                 alpha, beta, seed, lr_scale=None):
        self.phase = phase
        self.bundle = bundle
        self.jobs = jobs
        self.stage = stage
        self.loss_cfg = loss_cfg
        self.batch_size = batch_size
        self.alpha, self.beta = alpha, beta
        self.rng = rngmod.stream(seed, f"train/{phase}")
        self.optim = Adam()
        self.lr_scale = lr_scale or {}
        self.epoch = 0
        self.report = TrainReport(phase)

    def run_epoch(self, lr: float, mix: bool, extra: dict | None = None) -> dict:
        t0 = time.perf_counter()
        plan = []
        for sid in sorted(self.jobs):
            for rows in _batches(self.rng, self.jobs[sid].train, self.batch_size):
                plan.append((sid, rows))
        order = self.rng.permutation(len(plan)) if len(plan) > 1 else range(len(plan))
        sums = np.zeros(4)
        params = self.bundle.trainable_parameters()
        for i in order:
            sid, rows = plan[i]
            try:
                vals = _step(self.bundle, sid, self.jobs[sid], rows, mix, self.loss_cfg, self.stage,
                             self.rng, self.alpha, self.beta)
            except FloatingPointError as exc:
                raise FloatingPointError(f"{self.phase}: {exc} at epoch {self.epoch}, subject {sid}") from exc
            self.optim.step(params, lr, self.lr_scale)
            _project_masks(self.bundle)
            sums += vals
        n = max(len(plan), 1)
        rec = {"epoch": self.epoch, "lr": lr, "mixed": bool(mix),
               "clip": sums[0] / n, "prior": sums[1] / n, "l1": sums[2] / n, "total": sums[3] / n}
        if extra:
            rec.update(extra)
        self.report.records.append(rec)
        self.report.wall.append(time.perf_counter() - t0)
        self.epoch += 1
        return rec

    def save(self, path) -> None:
        save_checkpoint(path, self.bundle, epoch=self.epoch, rng_state=rngmod.dump_state(self.rng),
                        optim=self.optim.state_dict(), extra={"records": self.report.records})
        self.report.checkpoint = str(path)

    def restore(self, path) -> None:
        bundle, doc = load_checkpoint(path)
        self.bundle = bundle
        self.epoch = doc["epoch"]
        self.rng = rngmod.load_state(doc["rng_state"])
        self.optim.load_state_dict(doc["optim"], [(n, p) for n, _, p in bundle.named_parameters()])
        self.report.records = list(doc.get("extra", {}).get("records", []))


def _subject_map(subjects, ids=None) -> dict[str, SyntheticSubject]:
    if isinstance(subjects, dict):
        return dict(subjects)
    ids = ids or [f"s{i}" for i in range(len(subjects))]
    return dict(zip(ids, subjects))


def _fit(run: _Run, schedule: Schedule, mix_epochs: int, checkpoint_path=None, checkpoint_every=0,
         stop_epoch=None):
    stop = schedule.total_epochs if stop_epoch is None else min(stop_epoch, schedule.total_epochs)
    while run.epoch < stop:
        e = run.epoch
        run.run_epoch(lr_at(schedule, e), mix=e < mix_epochs)
        if checkpoint_path and checkpoint_every and run.epoch % checkpoint_every == 0:
            run.save(checkpoint_path)
    if checkpoint_path:
        run.save(checkpoint_path)


def pretrain(subjects, cfg: TrainConfig, ids=None, bundle: ModelBundle | None = None, checkpoint_path=None,
             resume_from=None, stop_epoch=None) -> tuple[ModelBundle, TrainReport]:
    """Jointly train per-subject input layers and the shared networks.

    Masks stay at all ones (not trainable). MixCo is used for the first
    ``ceil(total_epochs * mix_stop_fraction)`` epochs.
    """
    jobs = _subject_map(subjects, ids)
    if not jobs:
        raise ValueError("pretraining needs at least one subject")
    if bundle is None:
        bundle = init_params(cfg.seed, {sid: s.dims for sid, s in jobs.items()}, cfg.dims)
    bundle.set_trainable(troi=True, mask=False, backbone=cfg.train_backbone, projector=True, prior=True)
    run = _Run("pretrain", bundle, jobs, "pretrain", cfg.loss, cfg.batch_size, cfg.mix_alpha, cfg.mix_beta,
               cfg.seed)
    if resume_from:
        run.restore(resume_from)
    _fit(run, cfg.schedule, cfg.mix_epochs(), checkpoint_path, cfg.checkpoint_every, stop_epoch)
    return run.bundle, run.report


@dataclass
class Stage1Result:
    mask: BinaryMask
    weighted_mask: WeightedMask
    bundle: ModelBundle
    report: TrainReport
    iterations: int
    psi: float

    def __iter__(self):
        return iter((self.mask, self.report))


def stage1_sparse_mask(bundle: ModelBundle, subject: SyntheticSubject, cfg: Stage1Config,
                       train_cfg: TrainConfig | None = None, sid: str = "target") -> Stage1Result:
    """Sparse mask training for a new subject.

    Each iteration trains ``epochs_per_iter`` epochs on the L1-penalized loss,
    zeroes and freezes mask weights <= th, then binarizes the (optionally
    low-pass filtered) mask. Stops at the first binary mask within budget.
    """
    train_cfg = train_cfg or TrainConfig()
    bundle = bundle.copy()
    layer = bundle.add_subject(sid, subject.dims, train_cfg.seed)
    bundle.set_trainable(troi=True, mask=True, backbone=cfg.train_backbone, projector=cfg.train_backbone,
                         prior=cfg.train_prior)
    n_vox = subject.n_voxels
    psi = cfg.psi0
    loss_cfg = dataclasses.replace(train_cfg.loss, psi=psi)
    run = _Run("stage1", bundle, {sid: subject}, "stage1", loss_cfg, cfg.batch_size, train_cfg.mix_alpha,
               train_cfg.mix_beta, train_cfg.seed, lr_scale={f"troi.{sid}.mask": cfg.mask_lr / cfg.lr})

    if cfg.budget >= n_vox:
        warnings.warn(f"budget {cfg.budget} >= {n_vox} voxels; returning the full mask")
        return Stage1Result(BinaryMask.ones(subject.dims), layer.weighted_mask(), bundle, run.report, 0, psi)

    best, stall = n_vox, 0
    for it in range(cfg.max_iters):
        for _ in range(cfg.epochs_per_iter):
            rec = run.run_epoch(cfg.lr, mix=cfg.mix)
        wm = hard_threshold_in_place(layer.weighted_mask(), cfg.th)
        layer.set_mask(wm)
        smoothed = gaussian_filter(wm, cfg.filter) if cfg.use_filter else wm
        mprime = binarize(smoothed, cfg.th)
        count = mprime.nonzero_count()
        rec.update(iteration=it, psi=psi, mask_nnz=wm.nonzero_count(), binary_nnz=count)
        log.info("stage1 iter %d: |M|=%d |M'|=%d psi=%.3g", it, wm.nonzero_count(), count, psi)
        if count <= cfg.budget:
            return Stage1Result(mprime, wm, run.bundle, run.report, it + 1, psi)
        if count < best * (1.0 - cfg.min_progress):
            best, stall = count, 0
        else:
            stall += 1
            if stall >= cfg.stall_patience:
                psi *= cfg.psi_growth
                run.loss_cfg = dataclasses.replace(run.loss_cfg, psi=psi)
                stall = 0
    raise BudgetUnreachable(f"budget {cfg.budget} not reached after {cfg.max_iters} iterations "
                            f"(last |M'| = {count})",
                            Stage1Result(mprime, wm, run.bundle, run.report, cfg.max_iters, psi))


def _gathered_bundle(bundle: ModelBundle, mask: BinaryMask, subject: SyntheticSubject, sid: str, seed: int):
    if mask.dims != tuple(subject.dims):
        raise ValueError(f"mask dims {mask.dims} do not match subject grid {subject.dims}")
    idx = mask.indices()
    if len(idx) == 0:
        raise ValueError("cannot retrain on an empty mask")
    out = bundle.copy()
    out.troi.pop(sid, None)
    out.add_subject(sid, subject.dims, seed, index=idx, with_mask=False)
    return out


def stage2_rewind(bundle: ModelBundle, mask: BinaryMask, subject: SyntheticSubject,
                  cfg: TrainConfig | None = None, sid: str = "target", checkpoint_path=None
                  ) -> tuple[ModelBundle, TrainReport]:
    """Retrain a fresh input layer on the gathered voxels of ``mask``.

    The shared networks start from ``bundle`` (the pretrained weights) and the
    learning-rate schedule restarts from epoch 0.
    """
    cfg = cfg or TrainConfig()
    out = _gathered_bundle(bundle, mask, subject, sid, cfg.seed)
    out.set_trainable(troi=True, mask=False, backbone=cfg.train_backbone, projector=True, prior=True)
    run = _Run("stage2", out, {sid: subject}, "stage2", cfg.loss, cfg.batch_size, cfg.mix_alpha, cfg.mix_beta,
               cfg.seed)
    _fit(run, cfg.schedule, cfg.mix_epochs(), checkpoint_path, cfg.checkpoint_every)
    return run.bundle, run.report


def finetune_continuation(stage1: Stage1Result, mask: BinaryMask, subject: SyntheticSubject,
                          cfg: TrainConfig | None = None, sid: str = "target") -> tuple[ModelBundle, TrainReport]:
    """Baseline for rewinding: keep the Stage 1 weights and keep training.

    The input layer is restricted to the mask voxels with the learned mask
    weights folded into its rows, and training runs the same number of epochs
    at the schedule's final learning rate.
    """
    cfg = cfg or TrainConfig()
    old = stage1.bundle.troi[sid]
    idx = mask.indices()
    if len(idx) == 0:
        raise ValueError("cannot fine-tune on an empty mask")
    weights = old.mask.data[0, idx]
    out = stage1.bundle.copy()
    out.troi.pop(sid)
    layer = out.add_subject(sid, subject.dims, cfg.seed, index=idx, with_mask=False)
    layer.linear.weight.data[...] = old.linear.weight.data[idx] * weights[:, None]
    layer.linear.bias.data[...] = old.linear.bias.data
    out.set_trainable(troi=True, mask=False, backbone=cfg.train_backbone, projector=True, prior=True)
    run = _Run("finetune", out, {sid: subject}, "stage2", cfg.loss, cfg.batch_size, cfg.mix_alpha, cfg.mix_beta,
               cfg.seed)
    sched = cfg.schedule
    for e in range(sched.total_epochs):
        run.run_epoch(sched.min_lr, mix=e < cfg.mix_epochs())
    return run.bundle, run.report
