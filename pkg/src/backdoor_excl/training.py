"""Backdoor training under the data-outsourcing and model-outsourcing losses."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from .datasets import LabeledDataset
from .errors import ContractViolation, TrainingDivergedError, UninitializedCenterError
from .model import FeatureSplitClassifier, ModelConfig, batched_predict, build_model
from .poisoning import CLEAN, COVER, DIRTY, PoisonedDataset
from .triggers import TriggerSpec, apply_trigger

DATA_OUTSOURCING = "data_outsourcing"
MODEL_OUTSOURCING = "model_outsourcing"


@dataclass(frozen=True)
class TrainConfig:
    scenario: str = DATA_OUTSOURCING
    epochs: int = 100
    batch_size: int = 128
    lr: float = 0.1
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    center_weight: float = 1.0
    momentum: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in (DATA_OUTSOURCING, MODEL_OUTSOURCING):
            raise ContractViolation(f"unknown scenario {self.scenario!r}")
        if self.center_weight < 0:
            raise ContractViolation("center_weight must be >= 0")
        if not 0 <= self.momentum <= 1:
            raise ContractViolation("momentum must be in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractViolation("epochs must be >= 0 and batch_size >= 1")

    @property
    def uses_center_loss(self):
        return self.scenario == MODEL_OUTSOURCING


class CenterBank:
    """Momentum-tracked class centers fed only by clean-sample features."""

    def __init__(self, num_classes, feature_dim, momentum=0.99):
        self.centers = torch.zeros(num_classes, feature_dim)
        self.momentum = float(momentum)
        self.initialized = torch.zeros(num_classes, dtype=torch.bool)

    @property
    def num_classes(self):
        return self.centers.shape[0]

    def copy(self):
        out = CenterBank(self.num_classes, self.centers.shape[1], self.momentum)
        out.centers = self.centers.clone()
        out.initialized = self.initialized.clone()
        return out

    @torch.no_grad()
    def update(self, features, labels):
        """Apply ``C <- m*C + (1-m)*f`` for each sample, in batch order.

        The per-class recursion is folded into one weighted sum; an
        uninitialized center takes its first feature verbatim.
        """
        features = features.detach()
        labels = torch.as_tensor(labels, dtype=torch.long)
        if labels.numel() == 0:
            return self
        if int(labels.min()) < 0 or int(labels.max()) >= self.num_classes:
            raise ContractViolation("center update label out of range")
        m = self.momentum
        for c in torch.unique(labels).tolist():
            f = features[labels == c].double()
            start = self.centers[c].double()
            if not self.initialized[c]:
                start, f = f[0], f[1:]
                self.initialized[c] = True
            k = f.shape[0]
            if k:
                powers = torch.arange(k - 1, -1, -1, dtype=torch.float64)
                w = (1 - m) * m ** powers
                start = m ** k * start + (w[:, None] * f).sum(0)
            self.centers[c] = start.to(self.centers.dtype)
        return self


def update_centers(bank: CenterBank, clean_features, clean_labels) -> CenterBank:
    return bank.update(clean_features, clean_labels)


def loss_do_from_logits(logits, labels):
    if labels.numel() == 0:
        raise ContractViolation("empty batch")
    return F.cross_entropy(logits, labels)


def loss_do(model, inputs, labels):
    """Cross-entropy over a batch whose labels already reflect poisoning."""
    if labels.numel() == 0:
        raise ContractViolation("empty batch")
    return loss_do_from_logits(model(inputs), labels)


def loss_mc(dirty_features, cover_features, cover_true_labels, bank: CenterBank, target_label,
            denominator=None):
    """Pull dirty features to the target center and cover features to their own.

    Each poisoned sample contributes the mean squared error over feature
    dimensions.  The sum is divided by ``denominator``, which defaults to the
    number of poisoned members given; the trainer passes the batch size so
    the term is averaged on the same footing as the cross-entropy.
    """
    n_d, n_c = dirty_features.shape[0], cover_features.shape[0]
    if n_d + n_c == 0:
        return dirty_features.new_zeros(())
    cover_true_labels = torch.as_tensor(cover_true_labels, dtype=torch.long)
    needed = set(cover_true_labels.tolist()) | ({int(target_label)} if n_d else set())
    missing = [c for c in sorted(needed) if not bool(bank.initialized[c])]
    if missing:
        raise UninitializedCenterError(
            f"centers for classes {missing} are uninitialized; run a warm-up pass over clean samples first")
    centers = bank.centers.to(dirty_features.dtype)
    total = dirty_features.new_zeros(())
    if n_d:
        total = total + ((dirty_features - centers[target_label]) ** 2).mean(dim=1).sum()
    if n_c:
        total = total + ((cover_features - centers[cover_true_labels]) ** 2).mean(dim=1).sum()
    return total / (n_d + n_c if denominator is None else denominator)


def loss_mo(model, inputs, labels, tags, bank: CenterBank, target_label, weight=1.0,
            update=True, return_parts=False):
    """``loss_do + weight * loss_mc``; centers are refreshed from clean members first."""
    feats = model.features(inputs)
    logits = model.head(feats)
    do = loss_do_from_logits(logits, labels)
    clean = tags == CLEAN
    if update:
        bank.update(feats[clean], labels[clean])
    dirty, cover = tags == DIRTY, tags == COVER
    keep_dirty = bool(bank.initialized[target_label])
    cov_lab = labels[cover]
    cov_ok = bank.initialized[cov_lab]
    mc = loss_mc(feats[dirty] if keep_dirty else feats[:0], feats[cover][cov_ok], cov_lab[cov_ok],
                 bank, target_label, denominator=inputs.shape[0])
    total = do + weight * mc
    if return_parts:
        return total, do, mc
    return total


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)  # [{"epoch", "total", "do", "mc"}]
    step_losses: list = field(default_factory=list)   # [(total, do, mc)] per step
    cda: float | None = None
    asr: float | None = None
    checkpoint_path: str | None = None
    config: dict = field(default_factory=dict)

    def to_json(self, include_steps=False):
        d = asdict(self)
        if not include_steps:
            d.pop("step_losses")
        d["version"] = 1
        return d

    def write(self, path, include_steps=False):
        with open(path, "w") as fh:
            json.dump(self.to_json(include_steps), fh, indent=1)


def _training_tensors(dataset):
    if isinstance(dataset, PoisonedDataset):
        return dataset.inputs, dataset.labels, dataset.tags, dataset.spec.target_label
    if isinstance(dataset, LabeledDataset):
        return dataset.inputs, dataset.labels, torch.zeros(len(dataset), dtype=torch.long), 0
    raise ContractViolation("dataset must be a PoisonedDataset or LabeledDataset")


def train_backdoored_model(dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                           test_set: LabeledDataset | None = None, spec: TriggerSpec | None = None,
                           callback=None):
    """Seeded minibatch SGD over the mixed poisoned set.

    ``callback(step_info)`` is invoked after every optimizer step with a dict
    holding epoch, batch, the loss parts and (model outsourcing only) the
    clean features/labels that were folded into the centers.
    """
    x_all, y_all, t_all, target = _training_tensors(dataset)
    if spec is None and isinstance(dataset, PoisonedDataset):
        spec = dataset.spec
    model = build_model(model_cfg)
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=train_cfg.lr, momentum=train_cfg.sgd_momentum,
                          weight_decay=train_cfg.weight_decay)
    gen = torch.Generator().manual_seed(train_cfg.seed)
    bank = CenterBank(model_cfg.num_classes, model_cfg.feature_dim, train_cfg.momentum)
    mo = train_cfg.uses_center_loss
    report = TrainReport(config={"model": _jsonable(asdict(model_cfg)), "train": asdict(train_cfg)})
    n = x_all.shape[0]
    bs = train_cfg.batch_size

    for epoch in range(train_cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        sums = [0.0, 0.0, 0.0]
        steps = 0
        for b, start in enumerate(range(0, n, bs)):
            idx = perm[start:start + bs]
            x, y, t = x_all[idx], y_all[idx], t_all[idx]
            if mo:
                feats = model.features(x)
                logits = model.head(feats)
                do = loss_do_from_logits(logits, y)
                clean = t == CLEAN
                clean_f = feats[clean].detach()
                bank.update(clean_f, y[clean])
                cover = t == COVER
                dirty = t == DIRTY
                cov_lab = y[cover]
                cov_ok = bank.initialized[cov_lab]
                df = feats[dirty] if bool(bank.initialized[target]) else feats[:0]
                mc = loss_mc(df, feats[cover][cov_ok], cov_lab[cov_ok], bank, target,
                             denominator=x.shape[0])
                total = do + train_cfg.center_weight * mc
            else:
                do = loss_do(model, x, y)
                mc = torch.zeros(())
                total = do
                clean_f = None
            parts = (total.item(), do.item(), mc.item())
            if not all(math.isfinite(v) for v in parts):
                raise TrainingDivergedError(epoch, b, dict(zip(("total", "do", "mc"), parts)))
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            report.step_losses.append(parts)
            for i, v in enumerate(parts):
                sums[i] += v
            steps += 1
            if callback is not None:
                info = {"epoch": epoch, "batch": b, "total": parts[0], "do": parts[1], "mc": parts[2]}
                if mo:
                    info["clean_features"] = clean_f
                    info["clean_labels"] = y[t == CLEAN]
                callback(info)
        report.epoch_losses.append({"epoch": epoch, "total": sums[0] / steps,
                                    "do": sums[1] / steps, "mc": sums[2] / steps})

    model.eval()
    model.center_bank = bank
    if test_set is not None:
        report.cda = evaluate_cda(model, test_set)
        has_attack = isinstance(dataset, PoisonedDataset) and bool((t_all == DIRTY).any())
        if spec is not None and has_attack:
            report.asr = evaluate_asr(model, test_set, spec)
    return model, report


def _jsonable(d):
    return json.loads(json.dumps(d, default=list))


def evaluate_cda(model, clean_test: LabeledDataset) -> float:
    if len(clean_test) == 0:
        raise ContractViolation("empty test set")
    pred = batched_predict(model, clean_test.inputs)
    return 100.0 * float((pred == clean_test.labels).double().mean())


def evaluate_asr(model, test_set: LabeledDataset, spec: TriggerSpec) -> float:
    """Share of triggered non-target-class samples predicted as the target."""
    keep = test_set.labels != spec.target_label
    if not bool(keep.any()):
        raise ContractViolation("no non-target-class samples to evaluate ASR on")
    x = apply_trigger(test_set.inputs[keep], spec)
    pred = batched_predict(model, x)
    return 100.0 * float((pred == spec.target_label).double().mean())
