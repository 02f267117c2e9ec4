"""Model pieces: per-subject TROI input layers, residual MLP backbone,
projector and prior head, plus checkpoint I/O."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .autodiff import Tensor
from .grid import BinaryMask, WeightedMask, mask_from_dict, mask_to_dict

COMPONENTS = ("troi", "mask", "backbone", "projector", "prior")


def _uniform(rng, fan_in, fan_out, fan_in_scaled=True):
    s = math.sqrt(1.0 / fan_in) if fan_in_scaled else 1.0
    return rng.uniform(-s, s, size=(fan_in, fan_out))


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng, fan_in, fan_out, name, fan_in_scaled=True) -> "Linear":
        return cls(Tensor(_uniform(rng, fan_in, fan_out, fan_in_scaled), True, f"{name}.weight"),
                   Tensor(np.zeros((1, fan_out)), True, f"{name}.bias"))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def params(self):
        return [self.weight, self.bias]


class TroiInputLayer:
    """Subject-specific input layer: ``linear(x[index] * mask)``.

    In Stage 1 ``mask`` is a trainable row of voxel weights over the full grid
    and ``index`` is None. In Stage 2 the selected voxels are gathered through
    ``index`` and ``mask`` is None.
    """

    def __init__(self, name, dims, linear: Linear, mask: Tensor | None, frozen=None, index=None):
        self.name = name
        self.dims = tuple(dims)
        self.linear = linear
        self.mask = mask
        n = math.prod(self.dims)
        self.frozen = np.zeros(n, dtype=bool) if frozen is None else np.asarray(frozen, dtype=bool).ravel()
        self.index = None if index is None else np.asarray(index, dtype=np.int64)

    @property
    def n_inputs(self) -> int:
        return self.linear.weight.shape[0]

    def __call__(self, x: np.ndarray) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != math.prod(self.dims):
            raise ValueError(f"input of shape {x.shape} does not match TROI grid {self.dims}")
        if self.index is not None:
            x = x[:, self.index]
        t = Tensor(x)
        if self.mask is not None:
            t = ad.hadamard(t, self.mask, grad_mask_b=(~self.frozen)[None, :])
        return self.linear(t)

    def params(self):
        p = [] if self.mask is None else [self.mask]
        return p + self.linear.params()

    def weighted_mask(self) -> WeightedMask:
        if self.mask is None:
            raise ValueError(f"layer {self.name} has no weighted mask")
        return WeightedMask(self.mask.data.reshape(self.dims).copy(), self.frozen.reshape(self.dims).copy())

    def set_mask(self, m: WeightedMask) -> None:
        if m.dims != self.dims:
            raise ValueError(f"mask dims {m.dims} do not match layer grid {self.dims}")
        self.mask.data[...] = m.weights.reshape(1, -1)
        self.frozen = m.frozen.ravel().copy()


class Backbone:
    """Residual MLP: blocks of x + L2(tanh(L1(x))), then a linear head."""

    def __init__(self, blocks: list[tuple[Linear, Linear]], head: Linear):
        self.blocks = blocks
        self.head = head

    def __call__(self, x: Tensor) -> Tensor:
        for l1, l2 in self.blocks:
            x = ad.add(x, l2(ad.tanh(l1(x))))
        return self.head(x)

    def params(self):
        out = []
        for l1, l2 in self.blocks:
            out += l1.params() + l2.params()
        return out + self.head.params()


class TwoLayerMLP:
    """L2(tanh(L1(x))); used for both the projector and the prior head."""

    def __init__(self, l1: Linear, l2: Linear):
        self.l1, self.l2 = l1, l2

    def __call__(self, x: Tensor) -> Tensor:
        return self.l2(ad.tanh(self.l1(x)))

    def params(self):
        return self.l1.params() + self.l2.params()


Projector = TwoLayerMLP
PriorNet = TwoLayerMLP


@dataclass
class ModelDims:
    d_model: int = 64
    d_embed: int = 16
    n_blocks: int = 2

    def validate(self):
        if min(self.d_model, self.d_embed) < 1 or self.n_blocks < 0:
            raise ValueError(f"invalid model dims {self}")


@dataclass
class ModelBundle:
    dims: ModelDims
    troi: dict[str, TroiInputLayer]
    backbone: Backbone
    projector: TwoLayerMLP
    prior: TwoLayerMLP
    trainable: dict[str, bool] = field(default_factory=lambda: {
        "troi": True, "mask": False, "backbone": True, "projector": True, "prior": True})

    def named_parameters(self) -> list[tuple[str, str, Tensor]]:
        """Stable ordered ``(name, component, tensor)`` triples."""
        out = []
        for sid in sorted(self.troi):
            layer = self.troi[sid]
            if layer.mask is not None:
                out.append((f"troi.{sid}.mask", "mask", layer.mask))
            out.append((f"troi.{sid}.weight", "troi", layer.linear.weight))
            out.append((f"troi.{sid}.bias", "troi", layer.linear.bias))
        for comp, mod in (("backbone", self.backbone), ("projector", self.projector), ("prior", self.prior)):
            for i, p in enumerate(mod.params()):
                out.append((f"{comp}.{i}", comp, p))
        return out

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, c, p in self.named_parameters() if self.trainable.get(c, False)]

    def zero_grad(self):
        for _, _, p in self.named_parameters():
            p.grad = None

    def add_subject(self, sid: str, grid_dims, seed: int, index=None, with_mask=True,
                    fan_in_scaled=True) -> TroiInputLayer:
        """Attach a freshly initialized input layer for subject ``sid``."""
        n = math.prod(grid_dims) if index is None else len(index)
        rng = rngmod.stream(seed, f"init/troi/{sid}/{n}")
        linear = Linear.init(rng, n, self.dims.d_model, f"troi.{sid}", fan_in_scaled)
        mask = Tensor(np.ones((1, n)), True, f"troi.{sid}.mask") if with_mask else None
        layer = TroiInputLayer(sid, grid_dims, linear, mask, index=index)
        self.troi[sid] = layer
        return layer

    def set_trainable(self, **flags):
        for k, v in flags.items():
            if k not in COMPONENTS:
                raise KeyError(f"unknown component {k!r}")
            self.trainable[k] = bool(v)

    def copy(self) -> "ModelBundle":
        self.zero_grad()
        return copy.deepcopy(self)


def init_params(seed: int, subjects: dict[str, tuple[int, int, int]], dims: ModelDims | None = None,
                fan_in_scaled: bool = True) -> ModelBundle:
    """Fresh bundle; weights ~ U(-s, s) with s = sqrt(1/fan_in), zero biases,
    and all-ones masks. With ``fan_in_scaled=False``, s = 1."""
    dims = dims or ModelDims()
    dims.validate()
    rng = rngmod.stream(seed, "init/shared")
    d, e = dims.d_model, dims.d_embed
    blocks = [(Linear.init(rng, d, d, f"backbone.block{i}.l1", fan_in_scaled),
               Linear.init(rng, d, d, f"backbone.block{i}.l2", fan_in_scaled)) for i in range(dims.n_blocks)]
    backbone = Backbone(blocks, Linear.init(rng, d, e, "backbone.head", fan_in_scaled))
    projector = TwoLayerMLP(Linear.init(rng, e, e, "projector.l1", fan_in_scaled),
                            Linear.init(rng, e, e, "projector.l2", fan_in_scaled))
    prior = TwoLayerMLP(Linear.init(rng, e, 2 * e, "prior.l1", fan_in_scaled),
                        Linear.init(rng, 2 * e, e, "prior.l2", fan_in_scaled))
    bundle = ModelBundle(dims, {}, backbone, projector, prior)
    for sid in sorted(subjects):
        bundle.add_subject(sid, subjects[sid], seed, fan_in_scaled=fan_in_scaled)
    return bundle


def _check_finite(t: Tensor, layer: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values after {layer}")
    return t


def forward(bundle: ModelBundle, sid: str, x) -> tuple[Tensor, Tensor, Tensor]:
    """(b, h, p) = (backbone(troi(x)), projector(b), prior(b)) for one subject's batch.

    ``x`` is a ``(B, n_voxels)`` array or a :class:`~troi.synth.MixupBatch`.
    """
    if sid not in bundle.troi:
        raise KeyError(f"no input layer for subject {sid!r}")
    x = getattr(x, "inputs", x)
    z = _check_finite(bundle.troi[sid](x), f"troi.{sid}")
    b = _check_finite(bundle.backbone(z), "backbone")
    h = _check_finite(bundle.projector(b), "projector")
    p = _check_finite(bundle.prior(b), "prior")
    return b, h, p


def backward(loss: Tensor) -> None:
    loss.backward()


# --- checkpoints -------------------------------------------------------------------

def bundle_to_dict(bundle: ModelBundle) -> dict:
    subjects = {}
    masks = {}
    for sid, layer in sorted(bundle.troi.items()):
        subjects[sid] = {
            "grid": list(layer.dims),
            "n_inputs": layer.n_inputs,
            "index": None if layer.index is None else layer.index.tolist(),
            "has_mask": layer.mask is not None,
        }
        if layer.mask is not None:
            masks[sid] = mask_to_dict(layer.weighted_mask())
    return {
        "dims": {"d_model": bundle.dims.d_model, "d_embed": bundle.dims.d_embed,
                 "n_blocks": bundle.dims.n_blocks, "subjects": subjects},
        "params": [{"name": n, "shape": list(p.shape), "values": p.data.ravel().tolist()}
                   for n, _, p in bundle.named_parameters()],
        "mask": masks,
        "trainable": dict(bundle.trainable),
    }


def bundle_from_dict(doc: dict) -> ModelBundle:
    d = doc["dims"]
    dims = ModelDims(d["d_model"], d["d_embed"], d["n_blocks"])
    bundle = init_params(0, {}, dims)
    for sid, info in sorted(d["subjects"].items()):
        bundle.add_subject(sid, tuple(info["grid"]), 0, index=info["index"], with_mask=info["has_mask"])
    params = {p["name"]: p for p in doc["params"]}
    for name, _, p in bundle.named_parameters():
        if name not in params:
            raise ValueError(f"checkpoint is missing parameter {name}")
        src = params[name]
        if list(p.shape) != list(src["shape"]):
            raise ValueError(f"checkpoint shape mismatch for {name}: {src['shape']} vs {list(p.shape)}")
        p.data[...] = np.asarray(src["values"], dtype=np.float64).reshape(p.shape)
    for sid, m in doc.get("mask", {}).items():
        bundle.troi[sid].set_mask(mask_from_dict(m))
    bundle.trainable.update(doc.get("trainable", {}))
    return bundle


def save_checkpoint(path, bundle: ModelBundle, epoch: int = 0, rng_state: str = "", optim: dict | None = None,
                    extra: dict | None = None) -> None:
    doc = bundle_to_dict(bundle)
    doc["epoch"] = int(epoch)
    doc["rng_state"] = rng_state
    if optim is not None:
        doc["optim"] = optim
    if extra:
        doc["extra"] = extra
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[ModelBundle, dict]:
    """Returns the bundle and the raw document (for epoch, rng_state, optim)."""
    doc = json.loads(Path(path).read_text())
    return bundle_from_dict(doc), doc


def binary_to_index(mask: BinaryMask) -> np.ndarray:
    return mask.indices()
