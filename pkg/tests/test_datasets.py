import struct

import numpy as np
import pytest
import torch

from backdoor_excl.datasets import MAGIC, LabeledDataset, load_dataset, make_synthetic_dataset, write_packed
from backdoor_excl.errors import ContractViolation, DatasetLoadError


def test_synthetic_is_bit_identical_per_seed():
    a = make_synthetic_dataset(4, 250, (3, 16, 16), seed=7)
    b = make_synthetic_dataset(4, 250, (3, 16, 16), seed=7)
    assert torch.equal(a.inputs, b.inputs)
    assert torch.equal(a.labels, b.labels)


def test_synthetic_counts_balanced():
    d = make_synthetic_dataset(2, 10, (1, 8, 8), seed=0)
    assert len(d) == 20
    assert d.input_shape == (1, 8, 8)
    assert torch.bincount(d.labels).tolist() == [10, 10]


def test_synthetic_range_and_split_seeds():
    tr = make_synthetic_dataset(3, 20, (3, 8, 8), seed=1)
    te = make_synthetic_dataset(3, 20, (3, 8, 8), seed=1, split="test")
    assert tr.inputs.min() >= 0 and tr.inputs.max() <= 1
    assert te.split == "test"
    assert not torch.equal(tr.inputs, te.inputs)


def test_synthetic_rejects_one_class():
    with pytest.raises(ContractViolation):
        make_synthetic_dataset(1, 10)


def test_dataset_invariants():
    with pytest.raises(ContractViolation):
        LabeledDataset(torch.zeros(2, 1, 2, 2), torch.tensor([0, 3]), 3)
    with pytest.raises(ContractViolation):
        LabeledDataset(torch.zeros(2, 1, 2, 2), torch.tensor([0]), 3)


def test_packed_roundtrip(tmp_path):
    d = make_synthetic_dataset(4, 25, (3, 32, 32), seed=3)
    write_packed(d, tmp_path / "d.bin")
    back = load_dataset(tmp_path / "d.bin")
    assert len(back) == 100
    assert torch.max((back.inputs - d.inputs).abs()).item() <= 1e-7
    assert torch.equal(back.labels, d.labels)
    assert back.num_classes == 4


def test_packed_rescales_out_of_range(tmp_path):
    d = LabeledDataset(torch.linspace(0, 1, 8).view(2, 1, 2, 2), torch.tensor([0, 1]), 2)
    write_packed(d, tmp_path / "d.bin")
    raw = bytearray((tmp_path / "d.bin").read_bytes())
    header = len(MAGIC) + 12 + 4 * 4
    body = np.frombuffer(bytes(raw[header:header + 32]), dtype="<f4") * 255
    raw[header:header + 32] = body.astype("<f4").tobytes()
    (tmp_path / "e.bin").write_bytes(bytes(raw))
    back = load_dataset(tmp_path / "e.bin")
    assert back.inputs.min() == 0 and back.inputs.max() == 1


def test_bad_magic_reports_offset(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOTMAGIC" + b"\x00" * 40)
    with pytest.raises(DatasetLoadError) as err:
        load_dataset(p)
    assert err.value.offset == 0
    assert str(p) in str(err.value)


def test_truncated_body_reports_offset(tmp_path):
    d = make_synthetic_dataset(2, 3, (1, 4, 4))
    write_packed(d, tmp_path / "d.bin")
    blob = (tmp_path / "d.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(blob[:-5])
    with pytest.raises(DatasetLoadError, match="byte"):
        load_dataset(tmp_path / "t.bin")


def test_unknown_dtype(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(MAGIC + struct.pack("<HHII", 1, 9, 2, 2) + struct.pack("<2I", 1, 1) + b"\x00" * 8)
    with pytest.raises(DatasetLoadError) as err:
        load_dataset(p)
    assert err.value.offset == 10


def test_missing_file(tmp_path):
    with pytest.raises(DatasetLoadError, match="unreadable"):
        load_dataset(tmp_path / "nope.bin")


def test_empty_image_dir(tmp_path):
    with pytest.raises(DatasetLoadError, match="no samples found"):
        load_dataset(tmp_path, format="image_dir")


def test_image_dir_lexicographic(tmp_path):
    from PIL import Image

    for cls, vals in (("a", [10, 200]), ("b", [50])):
        (tmp_path / cls).mkdir()
        for i, v in enumerate(vals):
            Image.fromarray(np.full((4, 4, 3), v, dtype=np.uint8)).save(tmp_path / cls / f"{i}.png")
    d = load_dataset(tmp_path, format="image_dir")
    assert d.labels.tolist() == [0, 0, 1]
    assert d.input_shape == (3, 4, 4)
    torch.testing.assert_close(d.inputs[:, 0, 0, 0], torch.tensor([10, 200, 50]) / 255.0)
