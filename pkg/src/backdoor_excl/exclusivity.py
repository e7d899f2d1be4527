"""Trigger upper-bound optimization and the exclusivity score.

For each poisoned sample we search for the largest perturbation ``delta`` of
the trigger pattern that still drives the model to the target label.  The
search is projected Adam on::

    -log softmax(F(x'))[y_t] + lam * ||delta_b - delta||_2      (mode "full")
    x' = clip(x * m_x + (p + delta) * m_p, 0, 1)

where ``delta_b`` is the farthest in-range displacement of the pattern and
``lam`` is raised or lowered, during the second half of the run, by the
margin between the target probability and the best other class.
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import LabeledDataset
from .errors import ContractViolation
from .model import batched_predict
from .triggers import PerturbationBoundary, TriggerSpec, apply_perturbed_trigger, apply_trigger, perturbation_boundary

_NORM_EPS = 1e-12


class ObjectiveMode(str, enum.Enum):
    FULL = "full"
    INTUITIVE = "intuitive"
    NO_DIRECTION = "no_direction"
    STATIC_LAMBDA = "static_lambda"

    @property
    def directed(self):
        return self in (ObjectiveMode.FULL, ObjectiveMode.STATIC_LAMBDA)

    @property
    def dynamic(self):
        return self in (ObjectiveMode.FULL, ObjectiveMode.NO_DIRECTION)


@dataclass(frozen=True)
class ExclConfig:
    epochs: int = 300
    lr: float = 1e-2
    lambda_init: float = 0.1
    mode: str = "full"
    n: int = 100
    seed: int = 0
    init_scale: float = 1e-3
    batch_size: int = 100
    value_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        ObjectiveMode(self.mode)
        if self.epochs < 2:
            raise ContractViolation("epochs must be >= 2")
        if self.n < 1:
            raise ContractViolation("n must be >= 1")


@dataclass
class BoundResult:
    sample_id: int
    delta_max: torch.Tensor
    bound_norm: float
    boundary_norm: float
    success: bool
    per_sample_excl: float
    lambda_trace: list | None = None

    def to_json(self):
        return {"id": self.sample_id, "bound_norm": self.bound_norm,
                "boundary_norm": self.boundary_norm,
                "excl": None if not self.success else self.per_sample_excl,
                "success": self.success}


@dataclass
class ExclReport:
    per_sample: list
    aggregate_excl: float
    n_requested: int
    n_succeeded: int
    failures: int
    mode: str
    seed: int
    insufficient: bool = False
    config: dict = field(default_factory=dict)

    def to_json(self):
        return {"version": 1, "aggregate_excl": self.aggregate_excl,
                "n_requested": self.n_requested, "n_succeeded": self.n_succeeded,
                "failures": self.failures, "insufficient": self.insufficient,
                "per_sample": [r.to_json() for r in self.per_sample],
                "mode": self.mode, "seed": self.seed, "config": self.config}


def sample_exclusivity(bound_norm, boundary_norm) -> float:
    """``1 - ||delta_max|| / ||delta_b||`` for one sample."""
    if boundary_norm <= 0:
        raise ContractViolation("boundary norm must be positive")
    return 1.0 - float(bound_norm) / float(boundary_norm)


def _safe_norm(v):
    return torch.sqrt((v * v).flatten(1).sum(1) + _NORM_EPS)


def upper_bound_objective(model, x, spec: TriggerSpec, delta, delta_b, lam, mode="full"):
    """Per-sample objective value for a batch ``x`` of clean inputs.

    ``lam`` is a scalar or a per-sample tensor.  Returned tensor has shape (B,).
    """
    mode = ObjectiveMode(mode)
    xp = apply_perturbed_trigger(x, spec, delta)
    logp = F.log_softmax(model(xp), dim=1)
    ce = -logp[:, spec.target_label]
    lam = torch.as_tensor(lam, dtype=ce.dtype)
    if mode.directed:
        reg = lam * _safe_norm(delta_b - delta)
    else:
        reg = -lam * _safe_norm(delta)
    return ce + reg


def _margin(probs, target):
    others = probs.clone()
    others[:, target] = -1.0
    return probs[:, target] - others.max(dim=1).values


def _sample_seed(seed, sample_id):
    return int(np.random.SeedSequence([seed, int(sample_id)]).generate_state(1)[0])


def _project(delta, support, lo, hi, cap):
    delta = torch.where(support, delta, torch.zeros_like(delta))
    delta = torch.minimum(torch.maximum(delta, lo), hi)
    norms = torch.linalg.vector_norm(delta.flatten(1), dim=1)
    scale = torch.where(norms > cap, cap / norms.clamp_min(1e-30), torch.ones_like(norms))
    return delta * scale.view(-1, *([1] * (delta.dim() - 1)))


def _optimize_chunk(model, xs, spec, boundary, cfg, sample_ids, record_lambda=False):
    mode = ObjectiveMode(cfg.mode)
    target = spec.target_label
    t_min, t_max = cfg.value_range
    support = spec.support
    delta_b = boundary.delta_b
    cap = float(torch.linalg.vector_norm(delta_b))
    lo = torch.where(support, t_min - spec.pattern, torch.zeros_like(spec.pattern))
    hi = torch.where(support, t_max - spec.pattern, torch.zeros_like(spec.pattern))
    b = xs.shape[0]

    init = []
    for sid in sample_ids:
        g = torch.Generator().manual_seed(_sample_seed(cfg.seed, sid))
        init.append((torch.rand(spec.shape, generator=g) * 2 - 1) * cfg.init_scale)
    delta = _project(torch.stack(init), support, lo, hi, cap).requires_grad_(True)
    lam = torch.full((b,), float(cfg.lambda_init))
    opt = torch.optim.Adam([delta], lr=cfg.lr)
    best_norm = torch.zeros(b, dtype=torch.float64)
    best_delta = torch.zeros((b, *spec.shape))
    trace = [] if record_lambda else None
    half = cfg.epochs / 2

    def track(d, logits):
        nonlocal best_norm, best_delta
        active = logits.argmax(dim=1) == target
        norms = torch.linalg.vector_norm(d.double().flatten(1), dim=1)
        better = active & (norms > best_norm)
        best_norm = torch.where(better, norms, best_norm)
        best_delta = torch.where(better.view(-1, 1, 1, 1), d, best_delta)

    for epoch in range(1, cfg.epochs + 1):
        xp = apply_perturbed_trigger(xs, spec, delta)
        logits = model(xp)
        with torch.no_grad():
            track(delta.detach(), logits)
            if mode.dynamic and epoch > half:
                lam = (lam + _margin(F.softmax(logits, dim=1), target)).clamp_min(0.0)
        if trace is not None:
            trace.append(lam.clone())
        ce = -F.log_softmax(logits, dim=1)[:, target]
        if mode.directed:
            reg = lam * _safe_norm(delta_b - delta)
        else:
            reg = -lam * _safe_norm(delta)
        loss = (ce + reg).sum()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        with torch.no_grad():
            delta.copy_(_project(delta, support, lo, hi, cap))

    with torch.no_grad():
        final = delta.detach()
        track(final, model(apply_perturbed_trigger(xs, spec, final)))
    return best_delta, best_norm, trace


def _precondition(model, xs, spec):
    return batched_predict(model, apply_trigger(xs, spec)) == spec.target_label


@torch.no_grad()
def _results(best_delta, best_norm, boundary, sample_ids, trace):
    bnorm = boundary.l2_norm
    out = []
    for i, sid in enumerate(sample_ids):
        bn = float(best_norm[i])
        lt = [float(t[i]) for t in trace] if trace is not None else None
        out.append(BoundResult(int(sid), best_delta[i].clone(), bn, bnorm, True,
                               sample_exclusivity(bn, bnorm), lt))
    return out


def _failure(sid, spec, boundary):
    return BoundResult(int(sid), torch.zeros(spec.shape), 0.0, boundary.l2_norm, False, float("nan"))


def optimize_trigger_upper_bound(model, x, spec: TriggerSpec, cfg: ExclConfig = ExclConfig(),
                                 boundary: PerturbationBoundary | None = None, sample_id=0,
                                 record_lambda=False) -> BoundResult:
    """Largest activating trigger perturbation for one clean input ``x``.

    Returns a failure record (``success=False``) when the unperturbed trigger
    does not fire on ``x``.
    """
    if boundary is None:
        boundary = perturbation_boundary(spec, cfg.value_range)
    xs = x.unsqueeze(0) if x.dim() == 3 else x
    if xs.shape[0] != 1:
        raise ContractViolation("optimize_trigger_upper_bound takes a single input")
    was_training = model.training
    model.eval()
    try:
        if not bool(_precondition(model, xs, spec)[0]):
            return _failure(sample_id, spec, boundary)
        bd, bn, tr = _optimize_chunk(model, xs, spec, boundary, cfg, [sample_id], record_lambda)
        return _results(bd, bn, boundary, [sample_id], tr)[0]
    finally:
        model.train(was_training)


def select_samples(dataset: LabeledDataset, spec: TriggerSpec, n, seed):
    """Seeded choice of up to ``n`` non-target-class sample indices."""
    eligible = torch.nonzero(dataset.labels != spec.target_label).flatten().numpy()
    order = np.random.default_rng([seed, 7]).permutation(eligible.size)
    return eligible[order[:n]]


def measure_exclusivity(model, dataset: LabeledDataset, spec: TriggerSpec, cfg: ExclConfig = ExclConfig(),
                        workers=1) -> ExclReport:
    """Mean per-sample exclusivity over ``cfg.n`` seeded poisoned samples.

    Samples whose unperturbed trigger does not fire are recorded as failures
    and left out of the mean.  Chunks of ``cfg.batch_size`` samples are
    optimized jointly (the objective is separable per sample) and may run on
    ``workers`` threads; results do not depend on the worker count.
    """
    ids = select_samples(dataset, spec, cfg.n, cfg.seed)
    if ids.size == 0:
        raise ContractViolation("no eligible samples for exclusivity measurement")
    boundary = perturbation_boundary(spec, cfg.value_range)
    was_training = model.training
    model.eval()
    try:
        xs = dataset.inputs[torch.from_numpy(ids)]
        ok = _precondition(model, xs, spec)
        good = ids[ok.numpy()]
        chunks = [good[i:i + cfg.batch_size] for i in range(0, good.size, cfg.batch_size)]

        def run(chunk):
            cx = dataset.inputs[torch.from_numpy(chunk)]
            bd, bn, tr = _optimize_chunk(model, cx, spec, boundary, cfg, chunk.tolist())
            return _results(bd, bn, boundary, chunk.tolist(), tr)

        if workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(workers) as pool:
                chunk_results = list(pool.map(run, chunks))
        else:
            chunk_results = [run(c) for c in chunks]
    finally:
        model.train(was_training)

    by_id = {r.sample_id: r for rs in chunk_results for r in rs}
    per_sample = [by_id.get(int(i)) or _failure(int(i), spec, boundary) for i in ids]
    succ = [r.per_sample_excl for r in per_sample if r.success]
    agg = float(np.mean(succ)) if succ else float("nan")
    cfg_json = asdict(cfg)
    cfg_json["value_range"] = list(cfg.value_range)
    return ExclReport(per_sample, agg, cfg.n, len(succ), len(per_sample) - len(succ), cfg.mode,
                      cfg.seed, insufficient=ids.size < cfg.n, config=cfg_json)


@torch.no_grad()
def line_search_bound(model, xs, spec: TriggerSpec, boundary: PerturbationBoundary | None = None, tol=1e-3):
    """Bisection along ``alpha * delta_b``: largest activating alpha in [0, 1], times ``||delta_b||``.

    Assumes the unperturbed trigger fires; returns a (B,) float64 tensor.
    """
    if boundary is None:
        boundary = perturbation_boundary(spec)
    xs = xs.unsqueeze(0) if xs.dim() == 3 else xs
    d = boundary.delta_b

    def fires(alpha):
        xp = apply_perturbed_trigger(xs, spec, alpha.view(-1, 1, 1, 1) * d)
        return batched_predict(model, xp) == spec.target_label

    b = xs.shape[0]
    lo = torch.zeros(b, dtype=torch.float64)
    hi = torch.ones(b, dtype=torch.float64)
    full = fires(hi.float())
    lo = torch.where(full, hi, lo)
    while bool(((hi - lo) > tol).any()):
        mid = (lo + hi) / 2
        f = fires(mid.float())
        lo = torch.where(f, mid, lo)
        hi = torch.where(f, hi, mid)
    return lo * boundary.l2_norm


def run_ablation(model, dataset, spec, cfg: ExclConfig = ExclConfig(), modes=None):
    """Mean bound norm per objective mode on one seeded sample set."""
    modes = [ObjectiveMode(m) for m in (modes or list(ObjectiveMode))]
    table = {}
    for mode in modes:
        mcfg = ExclConfig(**{**asdict(cfg), "mode": mode.value})
        rep = measure_exclusivity(model, dataset, spec, mcfg)
        ok = [r for r in rep.per_sample if r.success]
        table[mode.value] = {
            "mean_bound_norm": float(np.mean([r.bound_norm for r in ok])) if ok else float("nan"),
            "mean_boundary_norm": float(np.mean([r.boundary_norm for r in ok])) if ok else float("nan"),
            "excl": rep.aggregate_excl,
            "sample_ids": [r.sample_id for r in rep.per_sample],
        }
    return table
