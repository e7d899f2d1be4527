"""Three-way poisoned training sets: clean, dirty (relabeled) and cover samples."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .datasets import LabeledDataset
from .errors import ContractViolation
from .triggers import CoverMethod, TriggerSpec, apply_trigger, make_cover_trigger

CLEAN, DIRTY, COVER = 0, 1, 2
TAG_NAMES = {CLEAN: "clean", DIRTY: "dirty", COVER: "cover"}


def _round(v):
    return int(math.floor(v + 0.5))


@dataclass(frozen=True)
class PoisonConfig:
    poison_rate: float = 0.01
    dirty_cover_ratio: tuple = (50.0, 50.0)
    mask_rate: float = 0.2
    cover_method: str = "mask"
    noise_sigma: float = 0.1
    stratified: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.poison_rate < 0.5:
            raise ContractViolation(f"poison_rate must be in [0, 0.5), got {self.poison_rate}")
        wd, wc = self.dirty_cover_ratio
        if wd < 0 or wc < 0 or wd + wc == 0:
            raise ContractViolation("dirty_cover_ratio weights must be nonnegative and not both zero")
        CoverMethod(self.cover_method)

    @property
    def cover_param(self):
        if CoverMethod(self.cover_method) is CoverMethod.NOISE:
            return self.noise_sigma
        return self.mask_rate

    def counts(self, n_base):
        budget = _round(self.poison_rate * n_base)
        wd, wc = self.dirty_cover_ratio
        n_dirty = _round(budget * wd / (wd + wc))
        return n_dirty, budget - n_dirty


@dataclass(frozen=True)
class PoisonedDataset:
    """Poisoned training set, indexed like the base set it was built from.

    ``inputs[i]``/``labels[i]`` is base sample ``i`` after poisoning and
    ``tags[i]`` says whether it stayed clean or became dirty/cover.
    """

    inputs: torch.Tensor
    labels: torch.Tensor
    tags: torch.Tensor
    true_labels: torch.Tensor
    num_classes: int
    config: PoisonConfig
    spec: TriggerSpec
    cover_masks: dict = field(default_factory=dict)  # base index -> realized mask

    def __len__(self):
        return int(self.labels.shape[0])

    def _select(self, tag):
        idx = torch.nonzero(self.tags == tag).flatten()
        return idx

    @property
    def clean(self) -> LabeledDataset:
        idx = self._select(CLEAN)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.num_classes, "train")

    @property
    def dirty(self):
        idx = self._select(DIRTY)
        return list(zip(self.inputs[idx], self.labels[idx].tolist()))

    @property
    def cover(self):
        idx = self._select(COVER)
        return list(zip(self.inputs[idx], self.labels[idx].tolist()))

    @property
    def provenance(self):
        return [(TAG_NAMES[int(t)], i) for i, t in enumerate(self.tags)]

    def manifest(self) -> dict:
        return {
            "version": 1,
            "num_samples": len(self),
            "config": {**asdict(self.config), "dirty_cover_ratio": list(self.config.dirty_cover_ratio)},
            "target_label": self.spec.target_label,
            "samples": [
                {"index": i, "tag": TAG_NAMES[int(t)], "source_index": i,
                 "label": int(self.labels[i]), "true_label": int(self.true_labels[i])}
                for i, t in enumerate(self.tags)
            ],
        }

    def write_manifest(self, path):
        with open(path, "w") as fh:
            json.dump(self.manifest(), fh, indent=1)


def _interleave_by_class(order, labels):
    # round-robin over classes, each class visited in its shuffled order
    per_class = [order[labels[order] == k] for k in np.unique(labels)]
    out = []
    for rank in range(max(len(p) for p in per_class)):
        out.extend(int(p[rank]) for p in per_class if rank < len(p))
    return np.asarray(out, dtype=order.dtype)


def build_poisoned_dataset(base: LabeledDataset, spec: TriggerSpec, cfg: PoisonConfig) -> PoisonedDataset:
    if base.split != "train":
        raise ContractViolation("poisoning needs a train split")
    if not 0 <= spec.target_label < base.num_classes:
        raise ContractViolation(f"target_label {spec.target_label} outside [0, {base.num_classes})")
    if base.input_shape != spec.shape:
        raise ContractViolation(f"trigger shape {spec.shape} != input shape {base.input_shape}")
    n = len(base)
    n_dirty, n_cover = cfg.counts(n)
    if n_dirty + n_cover > n:
        raise ContractViolation(f"poison budget {n_dirty + n_cover} exceeds dataset size {n}")

    rng = np.random.default_rng([cfg.seed, 11])
    order = rng.permutation(n)
    if cfg.stratified:
        order = _interleave_by_class(order, base.labels.numpy())
    dirty_idx = np.sort(order[:n_dirty])
    cover_idx = np.sort(order[n_dirty:n_dirty + n_cover])

    inputs = base.inputs.clone()
    labels = base.labels.clone()
    tags = torch.zeros(n, dtype=torch.long)
    if n_dirty:
        d = torch.from_numpy(dirty_idx)
        inputs[d] = apply_trigger(base.inputs[d], spec)
        labels[d] = spec.target_label
        tags[d] = DIRTY

    cover_masks = {}
    cover_seeds = rng.integers(0, 2**31 - 1, size=n_cover)
    for i, s in zip(cover_idx.tolist(), cover_seeds.tolist()):
        ct = make_cover_trigger(spec, cfg.cover_method, cfg.cover_param, seed=int(s))
        inputs[i] = ct.apply(base.inputs[i])
        tags[i] = COVER
        cover_masks[i] = ct.realized_mask
    return PoisonedDataset(inputs, labels, tags, base.labels.clone(), base.num_classes, cfg, spec, cover_masks)
