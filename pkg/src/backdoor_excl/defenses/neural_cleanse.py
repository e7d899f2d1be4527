"""Neural Cleanse: per-class trigger reverse engineering and the MAD anomaly index."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from ..datasets import LabeledDataset
from ..errors import ContractViolation, DegenerateNormError

MAD_CONSISTENCY = 1.4826
FLAG_THRESHOLD = 2.0


@dataclass(frozen=True)
class NCConfig:
    opt_epochs: int = 100
    batch_size: int = 64
    lr: float = 0.1
    init_cost: float = 1e-3
    asr_threshold: float = 0.97
    patience: int = 5
    cost_up: float = 1.5
    cost_down: float = 1.5 ** 1.5
    holdout_fraction: float = 0.25
    repeats: int = 3
    seed: int = 0


@dataclass
class ReversedTrigger:
    class_index: int
    pattern: torch.Tensor  # (C, H, W) in [0, 1]
    mask: torch.Tensor     # (H, W) in [0, 1]
    l1_norm: float
    asr: float             # on held-out samples, in [0, 1]

    def to_json(self):
        return {"class": self.class_index, "l1_norm": self.l1_norm, "asr": self.asr}


@dataclass
class NCVerdict:
    l1_norms: list
    anomaly_index: float
    flagged: bool
    repeats: int = 1
    per_repeat_index: list = field(default_factory=list)
    per_repeat_norms: list = field(default_factory=list)
    min_class: int | None = None

    def to_json(self):
        return {"version": 1, "l1_norms": self.l1_norms, "anomaly_index": self.anomaly_index,
                "flagged": self.flagged, "repeats": self.repeats,
                "per_repeat_index": self.per_repeat_index, "per_repeat_norms": self.per_repeat_norms,
                "min_class": self.min_class}


def nc_anomaly_index(l1_norms) -> NCVerdict:
    norms = np.asarray(l1_norms, dtype=np.float64)
    if norms.size < 3:
        raise ContractViolation("anomaly index needs at least 3 classes")
    med = np.median(norms)
    mad = np.median(np.abs(norms - med))
    if mad == 0:
        raise DegenerateNormError("degenerate norm distribution: median absolute deviation is 0")
    idx = float(abs(norms.min() - med) / (MAD_CONSISTENCY * mad))
    return NCVerdict(norms.tolist(), idx, idx > FLAG_THRESHOLD, 1, [idx], [norms.tolist()],
                     int(norms.argmin()))


def _logit(p):
    p = min(max(p, 1e-6), 1 - 1e-6)
    return math.log(p / (1 - p))


def _reverse_once(model, x_opt, x_hold, target_class, cfg: NCConfig, seed, lr, mask_init):
    c, h, w = x_opt.shape[1:]
    gen = torch.Generator().manual_seed(seed)
    if mask_init is None:
        mask_raw = (torch.rand((h, w), generator=gen) * 2 - 1) * 0.1
    else:
        mask_raw = torch.full((h, w), _logit(float(mask_init)))
    pattern_raw = (torch.rand((c, h, w), generator=gen) * 2 - 1)
    mask_raw.requires_grad_(True)
    pattern_raw.requires_grad_(True)
    opt = torch.optim.Adam([mask_raw, pattern_raw], lr=lr, betas=(0.5, 0.9))
    target = torch.full((x_opt.shape[0],), target_class, dtype=torch.long)

    cost = 0.0
    up = down = 0
    cost_set = False
    best = None  # (l1, mask, pattern)
    n = x_opt.shape[0]

    def current():
        return torch.sigmoid(mask_raw), torch.sigmoid(pattern_raw)

    for epoch in range(cfg.opt_epochs):
        perm = torch.randperm(n, generator=gen)
        hits = 0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            mask, pattern = current()
            xa = (1 - mask) * x_opt[idx] + mask * pattern
            logits = model(xa)
            ce = F.cross_entropy(logits, target[idx])
            l1 = mask.sum()
            loss = ce + cost * l1
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite reverse-engineering loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            hits += int((logits.argmax(1) == target_class).sum())
        asr = hits / n
        with torch.no_grad():
            mask, pattern = current()
            l1 = float(mask.sum())
        if asr >= cfg.asr_threshold and (best is None or l1 < best[0]):
            best = (l1, mask.detach().clone(), pattern.detach().clone())
        if not cost_set:
            if asr >= cfg.asr_threshold:
                up += 1
                if up >= cfg.patience:
                    cost, cost_set, up = cfg.init_cost, True, 0
            else:
                up = 0
            continue
        if asr >= cfg.asr_threshold:
            up, down = up + 1, 0
        else:
            up, down = 0, down + 1
        if up >= cfg.patience:
            up, cost = 0, cost * cfg.cost_up
        elif down >= cfg.patience:
            down, cost = 0, cost / cfg.cost_down

    if best is None:
        with torch.no_grad():
            mask, pattern = current()
        best = (float(mask.sum()), mask.detach().clone(), pattern.detach().clone())
    l1, mask, pattern = best
    with torch.no_grad():
        xh = (1 - mask) * x_hold + mask * pattern
        asr = float((model(xh).argmax(1) == target_class).double().mean()) if len(x_hold) else float("nan")
    return ReversedTrigger(int(target_class), pattern, mask, l1, asr)


def nc_reverse_trigger(model, clean_set: LabeledDataset, target_class, opt_epochs=None,
                       cfg: NCConfig = NCConfig(), seed=None, mask_init=None) -> ReversedTrigger:
    """Smallest mask (and pattern) that flips ``clean_set`` to ``target_class``.

    Mask and pattern are sigmoid-parameterized; the L1 weight starts at zero,
    switches on once the reversed trigger succeeds, and then rises or falls
    to keep its success rate near ``cfg.asr_threshold``.  The returned trigger
    is the smallest-mask iterate that met the threshold.
    """
    if len(clean_set) == 0:
        raise ContractViolation("clean_set is empty")
    if opt_epochs is not None:
        cfg = NCConfig(**{**cfg.__dict__, "opt_epochs": opt_epochs})
    seed = cfg.seed if seed is None else seed
    n_hold = int(len(clean_set) * cfg.holdout_fraction)
    x = clean_set.inputs
    x_opt, x_hold = x[:len(x) - n_hold], x[len(x) - n_hold:]
    was_training = model.training
    model.eval()
    flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        try:
            return _reverse_once(model, x_opt, x_hold, target_class, cfg, seed, cfg.lr, mask_init)
        except FloatingPointError:
            return _reverse_once(model, x_opt, x_hold, target_class, cfg, seed, cfg.lr / 10, mask_init)
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad_(f)
        model.train(was_training)


def nc_scan(model, clean_set: LabeledDataset, repeats=None, cfg: NCConfig = NCConfig(),
            return_triggers=False):
    """Reverse every class ``repeats`` times and average the anomaly index."""
    repeats = cfg.repeats if repeats is None else repeats
    num_classes = model.config.num_classes
    indices, norms, triggers = [], [], []
    for r in range(repeats):
        rseed = int(np.random.SeedSequence([cfg.seed, r]).generate_state(1)[0])
        perm = torch.randperm(len(clean_set), generator=torch.Generator().manual_seed(rseed))
        shuffled = clean_set.subset(perm)
        rev = [nc_reverse_trigger(model, shuffled, k, cfg=cfg, seed=rseed + k) for k in range(num_classes)]
        v = nc_anomaly_index([t.l1_norm for t in rev])
        indices.append(v.anomaly_index)
        norms.append(v.l1_norms)
        triggers.append(rev)
    mean_norms = np.mean(norms, axis=0).tolist()
    mean_idx = float(np.mean(indices))
    verdict = NCVerdict(mean_norms, mean_idx, mean_idx > FLAG_THRESHOLD, repeats, indices, norms,
                        int(np.argmin(mean_norms)))
    if return_triggers:
        return verdict, triggers
    return verdict


def save_trigger_image(trigger: ReversedTrigger, path):
    """Write mask * pattern as an image for inspection."""
    from PIL import Image

    img = (trigger.mask[None] * trigger.pattern).clamp(0, 1)
    arr = (img.permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)
