"""Triggers, perturbation boundaries and cover triggers on a single image.

Run: python demos/01_trigger_algebra.py [--out demo_out]
"""

# %%
import argparse
from pathlib import Path

import torch
from PIL import Image

from backdoor_excl import (TriggerSpec, apply_perturbed_trigger, apply_trigger, make_cover_trigger,
                           make_synthetic_dataset, perturbation_boundary)

parser = argparse.ArgumentParser()
parser.add_argument("--out", default="demo_out/triggers")
args = parser.parse_args()
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)

# %% A synthetic image and a 6x6 binary patch in the bottom-right corner, target class 0.
x = make_synthetic_dataset(4, 1, (3, 16, 16), seed=0).inputs[1]
spec = TriggerSpec.patch((3, 16, 16), target_label=0, size=6, seed=3, style="binary")
poisoned = apply_trigger(x, spec)
print("pixels changed by the trigger:", int((poisoned != x).any(0).sum()), "of", 16 * 16)

# %% The perturbation boundary pushes each trigger element to its farthest in-range value.
# For a 0/1 pattern that is a full flip, so its norm is sqrt(#support elements).
b = perturbation_boundary(spec)
print(f"||delta_b|| = {b.l2_norm:.3f} (sqrt(108) = {108 ** 0.5:.3f})")
flipped = apply_perturbed_trigger(x, spec, b.delta_b)
half = apply_perturbed_trigger(x, spec, 0.5 * b.delta_b)

# %% Cover triggers: fuzzy versions of the trigger that keep the sample's true label.
covers = {
    "mask_0.2": make_cover_trigger(spec, "mask", 0.2, seed=1),
    "mask_0.5": make_cover_trigger(spec, "mask", 0.5, seed=1),
    "random_sample": make_cover_trigger(spec, "random_sample", seed=1),
    "noise_0.1": make_cover_trigger(spec, "noise", 0.1, seed=1),
}
for name, cov in covers.items():
    dropped = int(cov.realized_mask.any(0).sum())
    print(f"{name:>14}: dropped locations {dropped:>2}, differs from trigger at "
          f"{int((cov.apply(x) != poisoned).any(0).sum())} pixels")

# %% Save a strip of images, upscaled for viewing.
panels = [x, poisoned, half, flipped] + [c.apply(x) for c in covers.values()]
strip = torch.cat(panels, dim=2).clamp(0, 1)
arr = (strip.permute(1, 2, 0).numpy() * 255).round().astype("uint8")
Image.fromarray(arr).resize((arr.shape[1] * 8, arr.shape[0] * 8), Image.NEAREST).save(out / "triggers.png")
print("wrote", out / "triggers.png", "(clean, trigger, half boundary, full boundary, 4 covers)")
