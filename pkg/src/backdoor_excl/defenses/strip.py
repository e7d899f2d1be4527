"""STRIP: superimposition entropy test for trigger-carrying inputs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import ContractViolation


@dataclass(frozen=True)
class StripConfig:
    n_overlays: int = 100
    bins: int = 30
    seed: int = 0
    batch_size: int = 1000


@dataclass
class StripVerdict:
    clean_entropies: list
    trigger_entropies: list
    clean_percentiles: dict      # {"1": ..., "50": ..., "99": ...}
    trigger_percentiles: dict
    overlap: float               # histogram overlap coefficient in [0, 1]
    bins: int = 30
    histogram_edges: list = field(default_factory=list)

    @property
    def separated(self):
        """Every triggered input below the clean 1st percentile at the 99th."""
        return self.trigger_percentiles["99"] < self.clean_percentiles["1"]

    def to_json(self, include_entropies=True):
        d = {"version": 1, "clean_percentiles": self.clean_percentiles,
             "trigger_percentiles": self.trigger_percentiles, "overlap": self.overlap,
             "bins": self.bins, "histogram_edges": self.histogram_edges}
        if include_entropies:
            d["clean_entropies"] = self.clean_entropies
            d["trigger_entropies"] = self.trigger_entropies
        return d


def blend(x, overlay):
    """Equal-weight superimposition ``(x + overlay) / 2``."""
    return 0.5 * (x + overlay)


def shannon_entropy(probs, dim=-1):
    """Natural-log entropy with ``0 log 0 = 0``."""
    probs = torch.as_tensor(probs, dtype=torch.float64)
    return -(torch.special.xlogy(probs, probs)).sum(dim)


def _overlay_indices(n_pool, n, seed, input_id):
    rng = np.random.default_rng([seed, input_id])
    return rng.choice(n_pool, size=n, replace=n > n_pool)


@torch.no_grad()
def _entropy_of(model, x, overlays, idx, batch_size):
    mixed = blend(x[None], overlays[idx])
    out = []
    for s in range(0, len(mixed), batch_size):
        probs = torch.softmax(model(mixed[s:s + batch_size]).double(), dim=1)
        out.append(shannon_entropy(probs))
    return float(torch.cat(out).sum())


def strip_entropy(model, x, overlay_set, n_overlays=100, seed=0, input_id=0, batch_size=1000,
                  indices=None):
    """Sum over ``n_overlays`` blends of the prediction entropy.

    Overlays are drawn from ``overlay_set`` (a tensor of held-out clean images)
    with a substream keyed by ``(seed, input_id)``, unless ``indices`` names
    them explicitly.
    """
    overlays = torch.as_tensor(overlay_set)
    if overlays.shape[0] == 0:
        raise ContractViolation("overlay set is empty")
    if n_overlays < 1:
        raise ContractViolation("n_overlays must be >= 1")
    if overlays.shape[1:] != x.shape:
        raise ContractViolation(f"overlay shape {tuple(overlays.shape[1:])} != input shape {tuple(x.shape)}")
    if indices is None:
        indices = _overlay_indices(overlays.shape[0], n_overlays, seed, input_id)
    idx = torch.as_tensor(np.asarray(indices), dtype=torch.long)
    was_training = model.training
    model.eval()
    try:
        return _entropy_of(model, x, overlays, idx, batch_size)
    finally:
        model.train(was_training)


def histogram_overlap(a, b, bins=30):
    """Sum over shared bins of ``min(p_a, p_b)`` for normalized histograms."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ContractViolation("histogram overlap needs two non-empty samples")
    lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
    if hi == lo:
        return 1.0, np.array([lo, hi])
    edges = np.linspace(lo, hi, bins + 1)
    ha = np.histogram(a, edges)[0] / a.size
    hb = np.histogram(b, edges)[0] / b.size
    return float(np.minimum(ha, hb).sum()), edges


def _percentiles(v):
    return {str(q): float(np.percentile(v, q)) for q in (1, 50, 99)}


def strip_scan(model, clean_inputs, trigger_inputs, overlays, n_overlays=None,
               cfg: StripConfig = StripConfig()) -> StripVerdict:
    """Entropy distributions for clean and triggered inputs and their overlap."""
    n_overlays = cfg.n_overlays if n_overlays is None else n_overlays
    if len(clean_inputs) == 0 or len(trigger_inputs) == 0:
        raise ContractViolation("strip_scan needs clean and triggered inputs")
    ce = [strip_entropy(model, x, overlays, n_overlays, cfg.seed, i, cfg.batch_size)
          for i, x in enumerate(clean_inputs)]
    off = len(clean_inputs)
    te = [strip_entropy(model, x, overlays, n_overlays, cfg.seed, off + i, cfg.batch_size)
          for i, x in enumerate(trigger_inputs)]
    ov, edges = histogram_overlap(ce, te, cfg.bins)
    return StripVerdict(ce, te, _percentiles(ce), _percentiles(te), ov, cfg.bins, list(map(float, edges)))
