"""Trigger injection, perturbation boundaries and cover-trigger construction.

All tensors carry the sample shape ``(C, H, W)``; inputs may add any number of
leading batch dimensions.  Values live in ``[0, 1]``.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .errors import ContractViolation, DegenerateTriggerError

_DIM_NAMES = ("channels", "height", "width")


class TriggerKind(str, enum.Enum):
    PATCH = "patch"
    BLENDED = "blended"


class CoverMethod(str, enum.Enum):
    MASK = "mask"
    RANDOM_SAMPLE = "random_sample"
    NOISE = "noise"


def _check_shape(x: torch.Tensor, shape, what="input"):
    if x.dim() < len(shape):
        raise ContractViolation(f"{what} has {x.dim()} dims, expected at least {len(shape)}")
    tail = tuple(x.shape[-len(shape):])
    for name, got, want in zip(_DIM_NAMES[-len(shape):], tail, shape):
        if got != want:
            raise ContractViolation(f"{what} {name} mismatch: got {got}, expected {want}")


@dataclass(frozen=True)
class TriggerSpec:
    pattern: torch.Tensor
    trigger_mask: torch.Tensor
    input_mask: torch.Tensor
    target_label: int
    kind: TriggerKind = TriggerKind.PATCH
    # geometry is only kept so the spec can be written back out
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", TriggerKind(self.kind))
        shape = tuple(self.pattern.shape)
        if len(shape) != 3:
            raise ContractViolation(f"pattern must be (C, H, W), got {shape}")
        _check_shape(self.trigger_mask, shape, "trigger_mask")
        _check_shape(self.input_mask, shape, "input_mask")
        m = self.trigger_mask
        if torch.any(m < 0) or torch.any(m > 1):
            raise ContractViolation("trigger_mask must lie in [0, 1]")
        if self.kind is TriggerKind.PATCH and not torch.all((m == 0) | (m == 1)):
            raise ContractViolation("patch trigger_mask must be binary")
        if not torch.equal(self.input_mask, 1 - m):
            raise ContractViolation("input_mask must equal 1 - trigger_mask")
        if self.target_label < 0:
            raise ContractViolation("target_label must be a class index")

    @property
    def shape(self):
        return tuple(self.pattern.shape)

    @property
    def support(self) -> torch.Tensor:
        """Boolean tensor of elements the trigger touches (m_p > 0)."""
        return self.trigger_mask > 0

    @classmethod
    def patch(cls, input_shape, target_label, size=6, position="bottom_right",
              pattern=None, seed=0, style="uniform"):
        """Square patch trigger.

        Without an explicit ``pattern`` the block is drawn from ``seed``:
        ``style="uniform"`` gives values in [0, 1), ``"binary"`` gives 0/1.
        """
        c, h, w = input_shape
        if isinstance(position, str):
            if position != "bottom_right":
                raise ContractViolation(f"unknown patch position {position!r}")
            row, col = h - size, w - size
        else:
            row, col = position
        if row < 0 or col < 0 or row + size > h or col + size > w:
            raise ContractViolation(f"patch of size {size} at ({row}, {col}) exceeds {h}x{w}")
        mask = torch.zeros(input_shape)
        mask[:, row:row + size, col:col + size] = 1.0
        if pattern is None:
            rng = np.random.default_rng(seed)
            block = rng.random((c, size, size))
            if style == "binary":
                block = block > 0.5
            elif style != "uniform":
                raise ContractViolation(f"unknown pattern style {style!r}")
            block = torch.from_numpy(block.astype(np.float32))
            pattern = torch.zeros(input_shape)
            pattern[:, row:row + size, col:col + size] = block
        pattern = torch.as_tensor(pattern, dtype=torch.float32)
        return cls(pattern * mask, mask, 1 - mask, int(target_label), TriggerKind.PATCH,
                   meta={"size": size, "position": [row, col], "seed": seed, "style": style})

    @classmethod
    def blended(cls, pattern, target_label, alpha=0.2):
        pattern = torch.as_tensor(pattern, dtype=torch.float32)
        if not 0 < alpha <= 1:
            raise ContractViolation("alpha must be in (0, 1]")
        mask = torch.full_like(pattern, float(alpha))
        return cls(pattern, mask, 1 - mask, int(target_label), TriggerKind.BLENDED,
                   meta={"alpha": alpha})


@dataclass(frozen=True)
class PerturbationBoundary:
    delta_b: torch.Tensor

    @property
    def l2_norm(self) -> float:
        return float(torch.linalg.vector_norm(self.delta_b.double()))


def apply_trigger(x: torch.Tensor, spec: TriggerSpec) -> torch.Tensor:
    _check_shape(x, spec.shape)
    return torch.clamp(x * spec.input_mask + spec.pattern * spec.trigger_mask, 0.0, 1.0)


def apply_perturbed_trigger(x: torch.Tensor, spec: TriggerSpec, delta: torch.Tensor) -> torch.Tensor:
    """``clip(x * m_x + (p + delta) * m_p, 0, 1)``; delta off the support is ignored."""
    _check_shape(x, spec.shape)
    _check_shape(delta, spec.shape, "delta")
    delta = torch.where(spec.support, delta, torch.zeros_like(delta))
    return torch.clamp(x * spec.input_mask + (spec.pattern + delta) * spec.trigger_mask, 0.0, 1.0)


def perturbation_boundary(spec: TriggerSpec, value_range=(0.0, 1.0)) -> PerturbationBoundary:
    t_min, t_max = map(float, value_range)
    if not t_min < t_max:
        raise ContractViolation("value_range must satisfy t_min < t_max")
    support = spec.support
    if not bool(support.any()):
        raise DegenerateTriggerError("degenerate trigger: empty support")
    t = spec.pattern.double()
    if torch.any(t[support] < t_min) or torch.any(t[support] > t_max):
        raise ContractViolation("pattern values fall outside value_range")
    span = t_max - t_min
    # round half away from zero; the argument is nonnegative so floor(v + 0.5) does it
    r = torch.floor((t - t_min) / span + 0.5)
    delta_b = t_max - r * span - t
    delta_b = torch.where(support, delta_b, torch.zeros_like(delta_b))
    return PerturbationBoundary(delta_b.to(spec.pattern.dtype))


@dataclass(frozen=True)
class CoverTrigger:
    base: TriggerSpec
    method: CoverMethod
    mask_rate: float
    noise_sigma: float
    realized_mask: torch.Tensor  # True where a support element was dropped
    seed: int
    pattern: torch.Tensor
    trigger_mask: torch.Tensor

    def as_spec(self) -> TriggerSpec:
        return replace(self.base, pattern=self.pattern, trigger_mask=self.trigger_mask,
                       input_mask=1 - self.trigger_mask)

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        return apply_trigger(x, self.as_spec())


def _pixel_support(spec: TriggerSpec) -> np.ndarray:
    """Flat (row, col) indices of spatial locations where any channel is on."""
    return np.flatnonzero(spec.support.any(dim=0).numpy().ravel())


def make_cover_trigger(spec: TriggerSpec, method="mask", param=0.2, seed=0) -> CoverTrigger:
    """Build a fuzzy trigger for a cover sample.

    ``mask`` drops ``round(param * support)`` pixel locations (all channels
    together), ``random_sample`` redraws support values from the empirical
    pattern distribution, and ``noise`` adds N(0, param^2) noise.
    """
    method = CoverMethod(method)
    rng = np.random.default_rng(seed)
    c, h, w = spec.shape
    dropped = torch.zeros(spec.shape, dtype=torch.bool)
    pattern = spec.pattern.clone()
    tmask = spec.trigger_mask.clone()
    support = spec.support
    mask_rate, sigma = 0.0, 0.0

    if method is CoverMethod.MASK:
        mask_rate = float(param)
        if not 0.0 <= mask_rate <= 1.0:
            raise ContractViolation(f"mask_rate must be in [0, 1], got {mask_rate}")
        if mask_rate == 0.0:
            warnings.warn("mask_rate=0 makes cover samples identical to dirty samples "
                          "with a conflicting label", stacklevel=2)
        pixels = _pixel_support(spec)
        if pixels.size == 0:
            raise DegenerateTriggerError("degenerate trigger: empty support")
        k = int(math.floor(mask_rate * pixels.size + 0.5))
        chosen = rng.choice(pixels, size=k, replace=False)
        flat = torch.zeros(h * w, dtype=torch.bool)
        flat[torch.from_numpy(np.sort(chosen).astype(np.int64))] = True
        dropped = flat.view(1, h, w).expand(c, h, w) & support
        tmask = torch.where(dropped, torch.zeros_like(tmask), tmask)
        pattern = torch.where(dropped, torch.zeros_like(pattern), pattern)
    elif method is CoverMethod.NOISE:
        sigma = float(param)
        if sigma < 0:
            raise ContractViolation("noise sigma must be >= 0")
        noise = torch.from_numpy(rng.normal(0.0, sigma, size=spec.shape).astype(np.float32))
        pattern = torch.where(support, torch.clamp(pattern + noise, 0.0, 1.0), pattern)
    else:
        values = spec.pattern[support].numpy()
        drawn = rng.choice(values, size=values.size, replace=True)
        pattern = pattern.clone()
        pattern[support] = torch.from_numpy(drawn.astype(np.float32))

    return CoverTrigger(spec, method, mask_rate, sigma, dropped, int(seed), pattern, tmask)


# --- serialization -------------------------------------------------------

def trigger_to_dict(spec: TriggerSpec, input_shape=None) -> dict:
    d = {"kind": spec.kind.value, "target_label": spec.target_label,
         "input_shape": list(input_shape or spec.shape)}
    if spec.kind is TriggerKind.PATCH and "size" in spec.meta:
        d.update(size=spec.meta["size"], position=list(spec.meta["position"]))
        row, col = spec.meta["position"]
        s = spec.meta["size"]
        d["pattern"] = {"inline": spec.pattern[:, row:row + s, col:col + s].tolist()}
    else:
        d["pattern"] = {"inline": spec.pattern.tolist()}
        if spec.kind is TriggerKind.BLENDED:
            d["alpha"] = spec.meta.get("alpha", float(spec.trigger_mask.flatten()[0]))
    return d


def _load_pattern_image(path, shape):
    from PIL import Image

    c, h, w = shape
    img = Image.open(path).convert("L" if c == 1 else "RGB").resize((w, h))
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if c == 1:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(arr))


def trigger_from_dict(d: dict, base_dir=None) -> TriggerSpec:
    """Inverse of :func:`trigger_to_dict`.

    ``pattern`` is one of ``{"inline": nested list}``, ``{"image": path}`` or
    ``{"random": seed}`` (optionally with ``"style": "binary"``).
    """
    kind = TriggerKind(d.get("kind", "patch"))
    shape = tuple(d["input_shape"])
    target = int(d["target_label"])
    src = d.get("pattern", {"random": 0})
    if kind is TriggerKind.PATCH:
        size = int(d.get("size", 6))
        position = d.get("position", "bottom_right")
        if "random" in src:
            return TriggerSpec.patch(shape, target, size, position, seed=int(src["random"]),
                                     style=src.get("style", "uniform"))
        block_shape = (shape[0], size, size)
        if "inline" in src:
            block = torch.tensor(src["inline"], dtype=torch.float32)
        else:
            block = _load_pattern_image(_resolve(src["image"], base_dir), block_shape)
        _check_shape(block, block_shape, "patch pattern")
        full = TriggerSpec.patch(shape, target, size, position, seed=0)
        row, col = full.meta["position"]
        pattern = torch.zeros(shape)
        pattern[:, row:row + size, col:col + size] = block
        return TriggerSpec.patch(shape, target, size, [row, col], pattern=pattern)
    alpha = float(d.get("alpha", 0.2))
    if "random" in src:
        rng = np.random.default_rng(int(src["random"]))
        pattern = torch.from_numpy(rng.random(shape).astype(np.float32))
    elif "inline" in src:
        pattern = torch.tensor(src["inline"], dtype=torch.float32)
    else:
        pattern = _load_pattern_image(_resolve(src["image"], base_dir), shape)
    return TriggerSpec.blended(pattern, target, alpha)


def _resolve(path, base_dir):
    p = Path(path)
    if not p.is_absolute() and base_dir is not None:
        p = Path(base_dir) / p
    return p
