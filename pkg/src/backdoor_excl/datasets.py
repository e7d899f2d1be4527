"""Labeled image datasets: synthetic generator, packed-tensor files, image folders.

Packed-tensor layout (all little-endian)::

    offset  size        field
    0       8           magic  b"BXPACK\\x00\\x01"
    8       2           uint16 version (1)
    10      2           uint16 dtype code (1 = float32)
    12      4           uint32 num_classes
    16      4           uint32 ndim (D, counting the sample axis)
    20      4*D         uint32 dims, dims[0] = N
    ...     4*prod(dims) float32 inputs, row-major
    ...     4*N         int32 labels
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractViolation, DatasetLoadError

MAGIC = b"BXPACK\x00\x01"
VERSION = 1
_DTYPES = {1: np.dtype("<f4")}
_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".ppm", ".tif", ".tiff"}


@dataclass(frozen=True)
class LabeledDataset:
    inputs: torch.Tensor  # (N, C, H, W) float32 in [0, 1]
    labels: torch.Tensor  # (N,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ContractViolation("inputs and labels disagree on sample count")
        if self.split not in ("train", "test"):
            raise ContractViolation(f"split must be train or test, got {self.split!r}")
        if self.labels.numel() and (int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_classes):
            raise ContractViolation("labels must lie in [0, num_classes)")

    def __len__(self):
        return int(self.labels.shape[0])

    def __getitem__(self, i):
        return self.inputs[i], int(self.labels[i])

    @property
    def input_shape(self):
        return tuple(self.inputs.shape[1:])

    @property
    def samples(self):
        return [(self.inputs[i], int(self.labels[i])) for i in range(len(self))]

    def subset(self, index) -> "LabeledDataset":
        index = torch.as_tensor(index, dtype=torch.long)
        return LabeledDataset(self.inputs[index], self.labels[index], self.num_classes, self.split)


def make_synthetic_dataset(num_classes, samples_per_class, input_shape=(3, 16, 16), seed=0,
                           split="train", noise=0.05, nuisance=0.2, contrast=0.6, template_res=4) -> LabeledDataset:
    """Class-conditional Gaussian blobs around smooth per-class templates.

    Each sample is its class template (scaled by ``contrast`` around 0.5) plus a smooth class-independent
    nuisance field of amplitude ``nuisance`` and pixel noise of std ``noise``,
    clipped to [0, 1].  Templates depend only on ``seed`` so train and test
    splits drawn with the same seed share classes.
    """
    if num_classes < 2:
        raise ContractViolation("num_classes must be >= 2")
    if samples_per_class < 1:
        raise ContractViolation("samples_per_class must be >= 1")
    c, h, w = input_shape
    size = (template_res, template_res)
    trng = np.random.default_rng([seed, 0])
    coarse = torch.from_numpy(trng.random((num_classes, c, *size)).astype(np.float32))
    templates = F.interpolate(coarse, size=(h, w), mode="bilinear", align_corners=False)

    srng = np.random.default_rng([seed, 1 if split == "train" else 2])
    n = num_classes * samples_per_class
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    labels = labels[srng.permutation(n)]
    field = torch.from_numpy(srng.random((n, c, *size)).astype(np.float32))
    field = F.interpolate(field, size=(h, w), mode="bilinear", align_corners=False)
    eps = torch.from_numpy(srng.normal(0.0, noise, size=(n, c, h, w)).astype(np.float32))
    lab = torch.from_numpy(labels.astype(np.int64))
    x = 0.5 + contrast * (templates[lab] - 0.5) + nuisance * (field - 0.5) + eps
    return LabeledDataset(torch.clamp(x, 0.0, 1.0).contiguous(), lab, num_classes, split)


def write_packed(dataset: LabeledDataset, path):
    x = dataset.inputs.detach().cpu().numpy().astype("<f4", copy=False)
    dims = x.shape
    header = MAGIC + struct.pack("<HHII", VERSION, 1, dataset.num_classes, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(x).tobytes())
        fh.write(dataset.labels.numpy().astype("<i4").tobytes())


def _read_packed(path, split):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DatasetLoadError(path, None, f"unreadable file ({exc.strerror})") from exc
    if len(blob) < 20:
        raise DatasetLoadError(path, len(blob), "truncated header")
    if blob[:8] != MAGIC:
        raise DatasetLoadError(path, 0, "bad magic")
    version, dtype_code, num_classes, ndim = struct.unpack_from("<HHII", blob, 8)
    if version != VERSION:
        raise DatasetLoadError(path, 8, f"unsupported version {version}")
    if dtype_code not in _DTYPES:
        raise DatasetLoadError(path, 10, f"unknown dtype code {dtype_code}")
    if ndim < 2 or ndim > 8:
        raise DatasetLoadError(path, 16, f"implausible ndim {ndim}")
    off = 20
    if len(blob) < off + 4 * ndim:
        raise DatasetLoadError(path, off, "truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    n = dims[0]
    count = int(np.prod(dims))
    need = off + 4 * count + 4 * n
    if len(blob) != need:
        raise DatasetLoadError(path, min(len(blob), need), f"body size mismatch: file has {len(blob)} bytes, header implies {need}")
    x = np.frombuffer(blob, dtype=_DTYPES[dtype_code], count=count, offset=off).reshape(dims)
    y = np.frombuffer(blob, dtype="<i4", count=n, offset=off + 4 * count)
    if n and (y.min() < 0 or y.max() >= num_classes):
        raise DatasetLoadError(path, off + 4 * count, "label out of range")
    x = torch.from_numpy(x.astype(np.float32))
    if x.numel() and (x.min() < 0 or x.max() > 1):
        lo, hi = x.min(), x.max()
        x = (x - lo) / (hi - lo) if hi > lo else torch.zeros_like(x)
    return LabeledDataset(x, torch.from_numpy(y.astype(np.int64)), int(num_classes), split)


def _read_image_dir(root, split):
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise DatasetLoadError(root, None, "not a directory")
    classes = sorted(p for p in root.iterdir() if p.is_dir())
    xs, ys = [], []
    for label, cdir in enumerate(classes):
        for f in sorted(cdir.iterdir()):
            if f.suffix.lower() not in _IMAGE_SUFFIXES:
                continue
            try:
                img = Image.open(f)
                img.load()
            except OSError as exc:
                raise DatasetLoadError(f, None, f"unreadable image ({exc})") from exc
            arr = np.asarray(img.convert("L" if img.mode in ("L", "1", "I;16") else "RGB"),
                             dtype=np.float32) / 255.0
            arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
            xs.append(arr)
            ys.append(label)
    if not xs:
        raise DatasetLoadError(root, None, "no samples found")
    shapes = {a.shape for a in xs}
    if len(shapes) != 1:
        raise DatasetLoadError(root, None, f"images have mixed shapes {sorted(shapes)}")
    x = torch.from_numpy(np.stack(xs))
    return LabeledDataset(x, torch.tensor(ys, dtype=torch.long), len(classes), split)


def load_dataset(path, format="packed", split="train") -> LabeledDataset:
    if format == "packed":
        return _read_packed(path, split)
    if format in ("image_dir", "images"):
        return _read_image_dir(path, split)
    raise ContractViolation(f"unknown dataset format {format!r}")
