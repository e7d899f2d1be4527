"""Desk-scale CNN split into a feature extractor A(.) and a linear head B(.).

Checkpoints are ``.npz`` archives: one float32 array per parameter under its
state-dict name plus a ``__meta__`` entry holding UTF-8 JSON with
``{"format": "backdoor_excl.checkpoint", "version": 1, "config": ..., "seed": ..., "metadata": ...}``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ContractViolation

CHECKPOINT_FORMAT = "backdoor_excl.checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple = (3, 16, 16)
    num_classes: int = 4
    conv_blocks: tuple = ((32, 3, 2), (64, 3, 2), (128, 3, 2))
    batch_norm: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "conv_blocks", tuple(tuple(b) for b in self.conv_blocks))
        if not self.conv_blocks:
            raise ContractViolation("need at least one conv block")

    @property
    def feature_dim(self) -> int:
        return self.conv_blocks[-1][0]


class FeatureSplitClassifier(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        layers = []
        in_ch = config.input_shape[0]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            for out_ch, k, s in config.conv_blocks:
                layers.append(nn.Conv2d(in_ch, out_ch, k, stride=s, padding=k // 2))
                if config.batch_norm:
                    layers.append(nn.BatchNorm2d(out_ch))
                layers.append(nn.ReLU())
                in_ch = out_ch
            self.extractor = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1), nn.Flatten())
            self.head = nn.Linear(in_ch, config.num_classes)

    @property
    def feature_dim(self):
        return self.config.feature_dim

    def _check(self, x):
        want = self.config.input_shape
        if x.dim() != 4:
            raise ContractViolation(f"expected a (N, C, H, W) batch, got {x.dim()} dims")
        for name, got, exp in zip(("channels", "height", "width"), x.shape[1:], want):
            if got != exp:
                raise ContractViolation(f"input {name} mismatch: got {got}, expected {exp}")

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """A(x): globally pooled activation of the last conv block."""
        self._check(x)
        return self.extractor(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    @torch.no_grad()
    def predict(self, x: torch.Tensor) -> torch.Tensor:
        return predict_from_logits(self(x))


def build_model(config: ModelConfig) -> FeatureSplitClassifier:
    return FeatureSplitClassifier(config)


def predict_from_logits(logits: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. ties go to the lowest class
    return torch.argmax(logits, dim=-1)


@torch.no_grad()
def batched_predict(model, x, batch_size=512):
    out = [predict_from_logits(model(x[i:i + batch_size])) for i in range(0, len(x), batch_size)]
    return torch.cat(out) if out else torch.empty(0, dtype=torch.long)


def _config_to_json(cfg: ModelConfig):
    d = asdict(cfg)
    d["input_shape"] = list(cfg.input_shape)
    d["conv_blocks"] = [list(b) for b in cfg.conv_blocks]
    return d


def save_checkpoint(model: FeatureSplitClassifier, path, metadata=None):
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": _config_to_json(model.config),
        "seed": model.config.seed,
        "metadata": metadata or {},
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return ``(model, metadata)``."""
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise ContractViolation(f"{path}: not a checkpoint (no __meta__)")
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ContractViolation(f"{path}: unsupported checkpoint {meta.get('format')} v{meta.get('version')}")
        cfg = ModelConfig(**meta["config"])
        model = FeatureSplitClassifier(cfg)
        state = {k: torch.from_numpy(z[k].copy()) for k in z.files if k != "__meta__"}
    model.load_state_dict(state)
    model.eval()
    return model, meta["metadata"]
